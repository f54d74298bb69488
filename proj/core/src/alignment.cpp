#include "mlma/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <spdlog/spdlog.h>

#include "mlma/ops.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

double layer_weight(const std::vector<double>& per_layer, double fallback, std::size_t layer) {
  return layer < per_layer.size() ? per_layer[layer] : fallback;
}

std::vector<double> parse_doubles(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw ConfigError("alignment config: malformed number '" + item + "' in " + key);
    }
  }
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

void require_rows(const Tensor& t, std::size_t min_rows, const char* what, std::size_t layer) {
  if (!t.defined() || t.rows() < min_rows) {
    throw ContractError(std::string(what) + ": layer " + std::to_string(layer) + " needs at least " +
                        std::to_string(min_rows) + " row(s) per language");
  }
}

void require_layers(const BatchStateSample& sample, const char* what) {
  if (sample.source.size() != sample.target.size() || sample.source.empty()) {
    throw ContractError(std::string(what) + ": layer counts differ (" + std::to_string(sample.source.size()) +
                        " vs " + std::to_string(sample.target.size()) + ")");
  }
}

// ||a - b||_2 / (|a|_1 + |b|_1); zero when both statistics vanish.
Tensor normalized_gap(const Tensor& a, const Tensor& b) {
  const Tensor denom = add(l1_norm(a), l1_norm(b));
  if (denom.item() == Real(0)) return Tensor::scalar(Real(0));
  return div(l2_norm(sub(a, b)), denom);
}

}  // namespace

AlignmentMode parse_alignment_mode(const std::string& s) {
  if (s == "none") return AlignmentMode::None;
  if (s == "iden") return AlignmentMode::Iden;
  if (s == "mv") return AlignmentMode::Mv;
  if (s == "avl") return AlignmentMode::Avl;
  throw ConfigError("unknown alignment mode '" + s + "' (expected none, iden, mv or avl)");
}

std::string to_string(AlignmentMode mode) {
  switch (mode) {
    case AlignmentMode::None: return "none";
    case AlignmentMode::Iden: return "iden";
    case AlignmentMode::Mv: return "mv";
    case AlignmentMode::Avl: return "avl";
  }
  return "?";
}

double AlignmentConfig::mean_weight(std::size_t layer) const {
  return layer_weight(lambda_mean_layers, lambda_mean, layer);
}
double AlignmentConfig::var_weight(std::size_t layer) const {
  return layer_weight(lambda_var_layers, lambda_var, layer);
}
double AlignmentConfig::avl_weight(std::size_t layer) const {
  return layer_weight(lambda_avl_layers, lambda_avl, layer);
}
double AlignmentConfig::lm_weight(std::size_t lang) const { return layer_weight(lambda_lm, 1.0, lang); }

void AlignmentConfig::validate() const {
  auto check = [](double x, const char* name) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError(std::string("alignment config: ") + name + " must be >= 0");
  };
  check(lambda_iden, "lambda_iden");
  check(lambda_mean, "lambda_mean");
  check(lambda_var, "lambda_var");
  check(lambda_avl, "lambda_avl");
  for (double x : lambda_mean_layers) check(x, "lambda_mean");
  for (double x : lambda_var_layers) check(x, "lambda_var");
  for (double x : lambda_avl_layers) check(x, "lambda_avl");
  for (double x : lambda_lm) check(x, "lambda_lm");
  if (max_rows == 0) throw ConfigError("alignment config: max_rows must be positive");
}

void AlignmentConfig::write(KeyValues& kv, const std::string& prefix, const std::vector<std::string>& languages) const {
  kv[prefix + "mode"] = to_string(mode);
  kv[prefix + "lambda_iden"] = format_double(lambda_iden);
  kv[prefix + "lambda_mean"] = format_double(lambda_mean);
  kv[prefix + "lambda_var"] = format_double(lambda_var);
  kv[prefix + "lambda_avl"] = format_double(lambda_avl);
  if (!lambda_mean_layers.empty()) kv[prefix + "lambda_mean_layers"] = join_doubles(lambda_mean_layers);
  if (!lambda_var_layers.empty()) kv[prefix + "lambda_var_layers"] = join_doubles(lambda_var_layers);
  if (!lambda_avl_layers.empty()) kv[prefix + "lambda_avl_layers"] = join_doubles(lambda_avl_layers);
  for (std::size_t i = 0; i < languages.size(); ++i) {
    kv[prefix + "lambda_lm." + languages[i]] = format_double(lm_weight(i));
  }
  kv[prefix + "max_rows"] = std::to_string(max_rows);
  kv[prefix + "nll"] = per_token_nll ? "per_token" : "sum";
  if (!pairs.empty()) {
    std::string s;
    for (std::size_t i = 0; i < pairs.size(); ++i) s += (i ? "," : "") + pairs[i].first + ":" + pairs[i].second;
    kv[prefix + "pairs"] = s;
  }
}

AlignmentConfig AlignmentConfig::read(const KeyValues& kv, const std::string& prefix,
                                      const std::vector<std::string>& languages, AlignmentConfig c) {
  auto get = [&](const std::string& key) -> const std::string* {
    auto it = kv.find(prefix + key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto number = [&](const std::string& key, double& out) {
    if (auto v = get(key)) {
      const auto xs = parse_doubles(*v, prefix + key);
      if (xs.size() != 1) throw ConfigError("alignment config: " + prefix + key + " expects one number");
      out = xs[0];
    }
  };
  if (auto v = get("mode")) c.mode = parse_alignment_mode(*v);
  number("lambda_iden", c.lambda_iden);
  number("lambda_mean", c.lambda_mean);
  number("lambda_var", c.lambda_var);
  number("lambda_avl", c.lambda_avl);
  if (auto v = get("lambda_mean_layers")) c.lambda_mean_layers = parse_doubles(*v, prefix + "lambda_mean_layers");
  if (auto v = get("lambda_var_layers")) c.lambda_var_layers = parse_doubles(*v, prefix + "lambda_var_layers");
  if (auto v = get("lambda_avl_layers")) c.lambda_avl_layers = parse_doubles(*v, prefix + "lambda_avl_layers");
  for (std::size_t i = 0; i < languages.size(); ++i) {
    double w = c.lm_weight(i);
    number("lambda_lm." + languages[i], w);
    if (c.lambda_lm.size() <= i) c.lambda_lm.resize(i + 1, 1.0);
    c.lambda_lm[i] = w;
  }
  if (auto v = get("max_rows")) {
    try {
      c.max_rows = std::stoul(*v);
    } catch (const std::logic_error&) {
      throw ConfigError("alignment config: malformed max_rows '" + *v + "'");
    }
  }
  if (auto v = get("nll")) {
    if (*v != "per_token" && *v != "sum") throw ConfigError("alignment config: " + prefix + "nll must be per_token or sum");
    c.per_token_nll = *v == "per_token";
  }
  if (auto v = get("pairs")) {
    c.pairs.clear();
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("alignment config: pair '" + item + "' is not 'a:b'");
      c.pairs.emplace_back(item.substr(0, colon), item.substr(colon + 1));
    }
  }
  c.validate();
  return c;
}

IdenticalSet identical_set(const Vocabulary& source, const Vocabulary& target) {
  std::vector<std::string> shared;
  for (const auto& w : source.regular_tokens()) {
    auto id = target.find(w);
    if (id && !Vocabulary::is_special(*id)) shared.push_back(w);
  }
  std::sort(shared.begin(), shared.end());
  shared.erase(std::unique(shared.begin(), shared.end()), shared.end());
  IdenticalSet set;
  for (auto& w : shared) {
    set.source_ids.push_back(*source.find(w));
    set.target_ids.push_back(*target.find(w));
    set.words.push_back(std::move(w));
  }
  return set;
}

Tensor loss_iden(const Tensor& source_table, const Tensor& target_table, const IdenticalSet& iden, double lambda) {
  if (iden.empty()) {
    spdlog::warn("identical-string set is empty; the identical-string loss is zero");
    return Tensor::scalar(Real(0));
  }
  const Tensor diff = sub(gather_rows(source_table, iden.source_ids), gather_rows(target_table, iden.target_ids));
  return scale(sum(row_norms(diff)), static_cast<Real>(lambda / static_cast<double>(iden.size())));
}

double mean_identical_distance(const Tensor& source_table, const Tensor& target_table, const IdenticalSet& iden) {
  if (iden.empty()) return 0.0;
  const std::size_t d = source_table.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < iden.size(); ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double x = static_cast<double>(source_table.at(iden.source_ids[i], c)) -
                       static_cast<double>(target_table.at(iden.target_ids[i], c));
      sq += x * x;
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(iden.size());
}

Tensor loss_mv(const BatchStateSample& sample, const AlignmentConfig& cfg) {
  require_layers(sample, "loss_mv");
  Tensor total = Tensor::scalar(Real(0));
  for (std::size_t l = 0; l < sample.num_layers(); ++l) {
    const Tensor& s = sample.source[l];
    const Tensor& t = sample.target[l];
    require_rows(s, 2, "loss_mv", l);
    require_rows(t, 2, "loss_mv", l);
    if (s.cols() != t.cols()) throw DimensionError("loss_mv: row widths differ at layer " + std::to_string(l));
    const Tensor ms = mean_rows(s);
    const Tensor mt = mean_rows(t);
    const Tensor vs = mean_rows(square(sub(s, ms)));
    const Tensor vt = mean_rows(square(sub(t, mt)));
    total = add(total, scale(normalized_gap(ms, mt), static_cast<Real>(cfg.mean_weight(l))));
    total = add(total, scale(normalized_gap(vs, vt), static_cast<Real>(cfg.var_weight(l))));
  }
  return total;
}

Tensor loss_avl(const BatchStateSample& sample, const AlignmentConfig& cfg) {
  require_layers(sample, "loss_avl");
  Tensor total = Tensor::scalar(Real(0));
  for (std::size_t l = 0; l < sample.num_layers(); ++l) {
    const Tensor& s = sample.source[l];
    const Tensor& t = sample.target[l];
    require_rows(s, 1, "loss_avl", l);
    require_rows(t, 1, "loss_avl", l);
    const Tensor energy = sub(scale(mean_pairwise_distance(s, t), Real(2)),
                              add(mean_pairwise_distance(s, s), mean_pairwise_distance(t, t)));
    total = add(total, scale(energy, static_cast<Real>(cfg.avl_weight(l))));
  }
  return total;
}

Tensor cap_rows(const Tensor& rows, std::size_t max_rows, Rng& rng) {
  if (rows.rows() <= max_rows) return rows;
  std::vector<std::size_t> idx(rows.rows());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  idx.resize(max_rows);
  std::sort(idx.begin(), idx.end());
  return gather_rows(rows, idx);
}

AlignmentObjective::AlignmentObjective(const MlmaModel& model, AlignmentConfig cfg)
    : model_(&model), cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& langs = model.languages();
  if (cfg_.pairs.empty()) {
    for (std::size_t i = 0; i < langs.size(); ++i) {
      for (std::size_t j = i + 1; j < langs.size(); ++j) pairs_.emplace_back(i, j);
    }
  } else {
    for (const auto& [a, b] : cfg_.pairs) {
      if (!model.has_language(a) || !model.has_language(b)) {
        throw ConfigError("alignment pair " + a + ":" + b + " names a language the model does not have");
      }
      const std::size_t i = model.language_index(a);
      const std::size_t j = model.language_index(b);
      if (i == j) throw ConfigError("alignment pair " + a + ":" + b + " aligns a language with itself");
      pairs_.emplace_back(i, j);
    }
  }
  if (cfg_.mode == AlignmentMode::Iden) {
    for (const auto& [i, j] : pairs_) {
      identical_.push_back(identical_set(model.vocab(i), model.vocab(j)));
      if (identical_.back().empty()) {
        spdlog::warn("no identical strings between {} and {}; that pair contributes no alignment loss", langs[i],
                     langs[j]);
      }
    }
  }
}

LossTerms AlignmentObjective::operator()(std::span<const EncodedBatch> batches, Rng& rng) const {
  const auto& model = *model_;
  const std::size_t num_langs = model.languages().size();
  if (batches.size() != num_langs) {
    throw ContractError("total_loss: expected batches for " + std::to_string(num_langs) + " languages, got " +
                        std::to_string(batches.size()));
  }
  LossTerms out;
  Tensor total = Tensor::scalar(Real(0));
  for (std::size_t i = 0; i < num_langs; ++i) {
    if (batches[i].segments.empty()) {
      throw ContractError("total_loss: batch has no sentences of language '" + model.languages()[i] + "'");
    }
    out.nll.push_back(model.nll(batches[i], i));
    out.tokens.push_back(batches[i].real_rows().size());
    double w = cfg_.lm_weight(i);
    if (cfg_.per_token_nll) w /= static_cast<double>(out.tokens.back());
    if (w != 0.0) total = add(total, scale(out.nll.back(), static_cast<Real>(w)));
  }

  Tensor reg = Tensor::scalar(Real(0));
  if (cfg_.mode == AlignmentMode::Iden) {
    for (std::size_t p = 0; p < pairs_.size(); ++p) {
      const auto [i, j] = pairs_[p];
      Tensor term = identical_[p].empty()
                        ? Tensor::scalar(Real(0))
                        : loss_iden(model.embedding(i), model.embedding(j), identical_[p], cfg_.lambda_iden);
      out.pair_reg.push_back(term);
      reg = add(reg, term);
    }
  } else if (cfg_.mode == AlignmentMode::Mv || cfg_.mode == AlignmentMode::Avl) {
    std::vector<std::vector<Tensor>> rows(num_langs);
    for (std::size_t i = 0; i < num_langs; ++i) {
      rows[i] = model.hidden_rows(batches[i]);
      for (auto& r : rows[i]) r = cap_rows(r, cfg_.max_rows, rng);
    }
    for (const auto& [i, j] : pairs_) {
      const BatchStateSample sample{rows[i], rows[j]};
      Tensor term = cfg_.mode == AlignmentMode::Mv ? loss_mv(sample, cfg_) : loss_avl(sample, cfg_);
      out.pair_reg.push_back(term);
      reg = add(reg, term);
    }
  }
  out.reg = reg;
  out.total = cfg_.mode == AlignmentMode::None ? total : add(total, reg);
  return out;
}

LossTerms total_loss(std::span<const EncodedBatch> batches, const MlmaModel& model, const AlignmentConfig& cfg,
                     Rng& rng) {
  return AlignmentObjective(model, cfg)(batches, rng);
}

MLMA_NAMESPACE_END
