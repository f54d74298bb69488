#include "mlma/tagger.hpp"

#include <map>
#include <set>
#include <sstream>

#include "mlma/crf.hpp"
#include "mlma/init.hpp"
#include "mlma/ops.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

std::size_t parse_size(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ParseError("tagger metadata: missing '" + key + "'");
  try {
    return std::stoul(it->second);
  } catch (const std::logic_error&) {
    throw ParseError("tagger metadata: malformed '" + key + "'");
  }
}

const std::string& require_key(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ParseError("tagger metadata: missing '" + key + "'");
  return it->second;
}

}  // namespace

TaskKind parse_task(const std::string& s) {
  if (s == "ner") return TaskKind::Ner;
  if (s == "pos") return TaskKind::Pos;
  throw ConfigError("unknown task '" + s + "' (expected ner or pos)");
}

std::string to_string(TaskKind task) { return task == TaskKind::Ner ? "ner" : "pos"; }

TagScheme::TagScheme(TaskKind task, std::vector<std::string> tags) : task_(task), tags_(std::move(tags)) {
  if (tags_.empty()) throw ContractError("tag scheme: no tags");
  for (std::size_t i = 0; i < tags_.size(); ++i) {
    if (!index_.emplace(tags_[i], i).second) throw ContractError("tag scheme: duplicate tag '" + tags_[i] + "'");
  }
}

TagScheme TagScheme::from_corpus(TaskKind task, const std::vector<LabeledSentence>& corpus) {
  std::set<std::string> seen;
  for (const auto& s : corpus) seen.insert(s.tags.begin(), s.tags.end());
  return TagScheme(task, std::vector<std::string>(seen.begin(), seen.end()));
}

std::size_t TagScheme::index(const std::string& tag) const {
  auto it = index_.find(tag);
  if (it == index_.end()) throw ContractError("tag '" + tag + "' is not in the tagger's tag set");
  return it->second;
}

std::vector<std::size_t> TagScheme::encode(const std::vector<std::string>& tags) const {
  std::vector<std::size_t> out;
  out.reserve(tags.size());
  for (const auto& t : tags) out.push_back(index(t));
  return out;
}

std::vector<std::string> TagScheme::decode(const std::vector<std::size_t>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::size_t i : ids) out.push_back(tag(i));
  return out;
}

TaggerConfig TaggerConfig::full() {
  TaggerConfig c;
  c.word_hidden = 300;
  c.char_hidden = 100;
  c.char_embedding = 100;
  c.dropout = 0.5;
  return c;
}

TaggerConfig TaggerConfig::desk() { return TaggerConfig{}; }

void TaggerConfig::validate() const {
  if (word_hidden == 0) throw ConfigError("tagger config: word_hidden must be positive");
  if (use_char && (char_hidden == 0 || char_embedding == 0)) {
    throw ConfigError("tagger config: character encoder extents must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("tagger config: dropout must lie in [0, 1)");
}

void TaggerConfig::write(KeyValues& kv, const std::string& prefix) const {
  kv[prefix + "word_hidden"] = std::to_string(word_hidden);
  kv[prefix + "char_hidden"] = std::to_string(char_hidden);
  kv[prefix + "char_embedding"] = std::to_string(char_embedding);
  std::ostringstream os;
  os.precision(17);
  os << dropout;
  kv[prefix + "dropout"] = os.str();
  kv[prefix + "char"] = use_char ? "on" : "off";
}

TaggerConfig TaggerConfig::read(const KeyValues& kv, const std::string& prefix, TaggerConfig c) {
  auto get = [&](const std::string& key) -> const std::string* {
    auto it = kv.find(prefix + key);
    return it == kv.end() ? nullptr : &it->second;
  };
  try {
    if (auto v = get("profile")) {
      if (*v == "full") {
        c = full();
      } else if (*v == "desk") {
        c = desk();
      } else {
        throw ConfigError("tagger config: unknown profile '" + *v + "'");
      }
    }
    if (auto v = get("word_hidden")) c.word_hidden = std::stoul(*v);
    if (auto v = get("char_hidden")) c.char_hidden = std::stoul(*v);
    if (auto v = get("char_embedding")) c.char_embedding = std::stoul(*v);
    if (auto v = get("dropout")) c.dropout = std::stod(*v);
  } catch (const std::logic_error& e) {
    throw ConfigError("tagger config: malformed number under '" + prefix + "' (" + e.what() + ")");
  }
  if (auto v = get("char")) {
    if (*v == "on" || *v == "true" || *v == "1") {
      c.use_char = true;
    } else if (*v == "off" || *v == "false" || *v == "0") {
      c.use_char = false;
    } else {
      throw ConfigError("tagger config: " + prefix + "char must be on or off");
    }
  }
  c.validate();
  return c;
}

CharVocabulary::CharVocabulary() : chars_{"<pad>", "<unk>"} {
  index_.emplace(chars_[0], kPad);
  index_.emplace(chars_[1], kUnk);
}

CharVocabulary CharVocabulary::build(const std::vector<LabeledSentence>& corpus) {
  std::set<std::string> seen;
  for (const auto& s : corpus) {
    for (const auto& w : s.tokens) {
      for (auto& c : utf8_chars(w)) seen.insert(std::move(c));
    }
  }
  return from_chars(std::vector<std::string>(seen.begin(), seen.end()));
}

CharVocabulary CharVocabulary::from_chars(const std::vector<std::string>& chars) {
  CharVocabulary v;
  for (const auto& c : chars) {
    if (v.index_.emplace(c, v.chars_.size()).second) v.chars_.push_back(c);
  }
  return v;
}

std::size_t CharVocabulary::id(const std::string& ch) const {
  auto it = index_.find(ch);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> CharVocabulary::encode(const std::string& word) const {
  std::vector<std::size_t> out;
  for (const auto& c : utf8_chars(word)) out.push_back(id(c));
  return out;
}

std::vector<std::string> CharVocabulary::regular_chars() const { return {chars_.begin() + 2, chars_.end()}; }

LstmParams LstmParams::create(std::size_t input, std::size_t hidden, Rng& rng) {
  LstmParams p;
  p.w_x = glorot_uniform(input, 4 * hidden, rng);
  p.w_h = glorot_uniform(hidden, 4 * hidden, rng);
  p.b = Tensor::zeros({1, 4 * hidden}, true);
  return p;
}

void LstmParams::append_named(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + "w_x", w_x);
  out.emplace_back(prefix + "w_h", w_h);
  out.emplace_back(prefix + "b", b);
}

LstmRun run_lstm(const LstmParams& p, const Tensor& x, std::size_t steps, std::size_t group, bool reverse) {
  if (steps == 0 || group == 0 || x.rank() != 2 || x.rows() != steps * group) {
    throw DimensionError("run_lstm: input " + shape_str(x.shape()) + " does not hold " + std::to_string(steps) +
                         " steps of " + std::to_string(group) + " sequences");
  }
  const std::size_t h = p.hidden();
  const Tensor xw = add(matmul(x, p.w_x), p.b);
  Tensor hs = Tensor::zeros({group, h});
  Tensor cs = Tensor::zeros({group, h});
  std::vector<Tensor> outs(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    const Tensor gates = add(slice_rows(xw, t * group, (t + 1) * group), matmul(hs, p.w_h));
    const Tensor hc = lstm_cell(gates, cs);
    hs = slice_cols(hc, 0, h);
    cs = slice_cols(hc, h, 2 * h);
    outs[t] = hs;
  }
  return {steps == 1 ? outs[0] : concat_rows(outs), hs};
}

CrfTagger::CrfTagger(TaggerConfig config, TagScheme scheme, CharVocabulary chars, CombinerMode combiner,
                     std::size_t clcr_layers, std::size_t clcr_width, std::uint64_t seed)
    : config_(config),
      scheme_(std::move(scheme)),
      chars_(std::move(chars)),
      seed_(seed),
      clcr_layers_(clcr_layers),
      clcr_width_(clcr_width) {
  config_.validate();
  if (scheme_.size() == 0) throw ContractError("tagger: empty tag scheme");
  if (clcr_layers == 0 || clcr_width == 0) throw ContractError("tagger: empty representation stack");
  Rng rng(seed);
  combiner_ = make_combiner(combiner, clcr_layers, clcr_width, rng);
  if (config_.use_char) {
    char_table_ = uniform_init({chars_.size(), config_.char_embedding}, 0.05, rng);
    char_fwd_ = LstmParams::create(config_.char_embedding, config_.char_hidden, rng);
    char_bwd_ = LstmParams::create(config_.char_embedding, config_.char_hidden, rng);
  }
  const std::size_t in = clcr_width + config_.char_features();
  word_fwd_ = LstmParams::create(in, config_.word_hidden, rng);
  word_bwd_ = LstmParams::create(in, config_.word_hidden, rng);
  proj_w_ = glorot_uniform(2 * config_.word_hidden, scheme_.size(), rng);
  proj_b_ = Tensor::zeros({1, scheme_.size()}, true);
  transitions_ = Tensor::zeros({scheme_.size() + 2, scheme_.size() + 2}, true);
}

Tensor CrfTagger::char_encode(const std::vector<std::string>& words, bool training, Rng* rng) const {
  (void)training;
  (void)rng;
  const std::size_t width = 2 * config_.char_hidden;
  if (!config_.use_char) return Tensor::zeros({words.size(), width});
  // Words of equal character length run as one group.
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  std::vector<std::vector<std::size_t>> ids(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    ids[i] = chars_.encode(words[i]);
    by_length[ids[i].size()].push_back(i);
  }
  std::vector<Tensor> blocks;
  std::vector<std::size_t> row_of(words.size());
  std::size_t next_row = 0;
  for (const auto& [len, members] : by_length) {
    const std::size_t g = members.size();
    if (len == 0) {
      blocks.push_back(Tensor::zeros({g, width}));
    } else {
      std::vector<std::size_t> lookup(len * g);
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t j = 0; j < g; ++j) lookup[t * g + j] = ids[members[j]][t];
      }
      const Tensor x = gather_rows(char_table_, lookup);
      const Tensor parts[] = {run_lstm(char_fwd_, x, len, g, false).final_h, run_lstm(char_bwd_, x, len, g, true).final_h};
      blocks.push_back(concat_cols(parts));
    }
    for (std::size_t j = 0; j < g; ++j) row_of[members[j]] = next_row + j;
    next_row += g;
  }
  const Tensor all = blocks.size() == 1 ? blocks[0] : concat_rows(blocks);
  return gather_rows(all, row_of);
}

std::vector<Tensor> CrfTagger::emissions(std::span<const TaggedInput* const> inputs, bool training, Rng* rng) const {
  if (training && config_.dropout > 0.0 && rng == nullptr) throw ContractError("tagger: training needs an rng");
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const TaggedInput& in = *inputs[i];
    if (in.tokens.empty()) throw ContractError("tagger: empty sentence");
    if (in.clcr.tokens() != in.tokens.size()) {
      throw ContractError("tagger: representation covers " + std::to_string(in.clcr.tokens()) + " tokens but the " +
                          "sentence has " + std::to_string(in.tokens.size()));
    }
    by_length[in.tokens.size()].push_back(i);
  }
  std::vector<Tensor> out(inputs.size());
  for (const auto& [n, members] : by_length) {
    const std::size_t g = members.size();
    std::vector<Tensor> packs;
    std::vector<std::string> words;
    for (std::size_t i : members) {
      packs.push_back(inputs[i]->clcr.packed);
      words.insert(words.end(), inputs[i]->tokens.begin(), inputs[i]->tokens.end());
    }
    const ClcrStack stacked{g == 1 ? packs[0] : concat_rows(packs), inputs[members[0]]->clcr.layers,
                            inputs[members[0]]->clcr.width};
    Tensor feats = combiner_->combine(stacked);
    if (config_.use_char) {
      const Tensor parts[] = {feats, char_encode(words, training, rng)};
      feats = concat_cols(parts);
    }
    // Sentence-major rows (j * n + t) to time-major (t * g + j).
    std::vector<std::size_t> to_time(n * g);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t j = 0; j < g; ++j) to_time[t * g + j] = j * n + t;
    }
    Tensor x = gather_rows(feats, to_time);
    if (training) x = dropout(x, config_.dropout, *rng, true);
    const Tensor parts[] = {run_lstm(word_fwd_, x, n, g, false).outputs, run_lstm(word_bwd_, x, n, g, true).outputs};
    Tensor h = concat_cols(parts);
    if (training) h = dropout(h, config_.dropout, *rng, true);
    const Tensor scores = add(matmul(h, proj_w_), proj_b_);
    for (std::size_t j = 0; j < g; ++j) {
      std::vector<std::size_t> rows(n);
      for (std::size_t t = 0; t < n; ++t) rows[t] = t * g + j;
      out[members[j]] = gather_rows(scores, rows);
    }
  }
  return out;
}

Tensor CrfTagger::loss(std::span<const TaggedInput* const> inputs, bool training, Rng* rng) const {
  if (inputs.empty()) throw ContractError("tagger loss: empty batch");
  for (const auto* in : inputs) {
    if (in->gold.size() != in->tokens.size()) throw ContractError("tagger loss: input without gold tags");
  }
  const auto em = emissions(inputs, training, rng);
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < inputs.size(); ++i) terms.push_back(crf_nll(em[i], transitions_, inputs[i]->gold));
  return terms.size() == 1 ? terms[0] : sum(concat_rows(terms));
}

std::vector<std::vector<std::size_t>> CrfTagger::predict(std::span<const TaggedInput* const> inputs) const {
  NoGradGuard guard;
  const auto em = emissions(inputs, false, nullptr);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(em.size());
  for (const auto& e : em) out.push_back(viterbi(e, transitions_).path);
  return out;
}

NamedTensors CrfTagger::parameters() const {
  NamedTensors out;
  combiner_->append_named(out, "combiner.");
  if (config_.use_char) {
    out.emplace_back("char.embedding", char_table_);
    char_fwd_.append_named(out, "char.fwd.");
    char_bwd_.append_named(out, "char.bwd.");
  }
  word_fwd_.append_named(out, "word.fwd.");
  word_bwd_.append_named(out, "word.bwd.");
  out.emplace_back("proj.w", proj_w_);
  out.emplace_back("proj.b", proj_b_);
  out.emplace_back("crf.transitions", transitions_);
  return out;
}

std::vector<Tensor> CrfTagger::parameter_list() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : parameters()) out.push_back(t);
  return out;
}

void CrfTagger::save(const std::filesystem::path& checkpoint, const KeyValues& extra) const {
  save_checkpoint(checkpoint, parameters());
  KeyValues meta = extra;
  meta["format"] = "mlma-tagger";
  config_.write(meta, "tagger.");
  meta["task"] = to_string(scheme_.task());
  meta["combiner"] = to_string(combiner_->mode());
  meta["clcr.layers"] = std::to_string(clcr_layers_);
  meta["clcr.width"] = std::to_string(clcr_width_);
  meta["seed"] = std::to_string(seed_);
  meta["tags.count"] = std::to_string(scheme_.size());
  for (std::size_t i = 0; i < scheme_.size(); ++i) meta["tag." + std::to_string(i)] = scheme_.tag(i);
  const auto chars = chars_.regular_chars();
  meta["chars.count"] = std::to_string(chars.size());
  for (std::size_t i = 0; i < chars.size(); ++i) meta["char." + std::to_string(i)] = chars[i];
  write_key_values(checkpoint.string() + ".meta", meta);
}

CrfTagger CrfTagger::load(const std::filesystem::path& checkpoint, KeyValues* meta_out) {
  const KeyValues meta = read_key_values(checkpoint.string() + ".meta");
  if (require_key(meta, "format") != "mlma-tagger") throw ParseError(checkpoint.string() + ": not a tagger");
  const TaggerConfig config = TaggerConfig::read(meta, "tagger.", TaggerConfig{});
  std::vector<std::string> tags(parse_size(meta, "tags.count"));
  for (std::size_t i = 0; i < tags.size(); ++i) tags[i] = require_key(meta, "tag." + std::to_string(i));
  std::vector<std::string> chars(parse_size(meta, "chars.count"));
  for (std::size_t i = 0; i < chars.size(); ++i) chars[i] = require_key(meta, "char." + std::to_string(i));
  CrfTagger tagger(config, TagScheme(parse_task(require_key(meta, "task")), tags), CharVocabulary::from_chars(chars),
                   parse_combiner_mode(require_key(meta, "combiner")), parse_size(meta, "clcr.layers"),
                   parse_size(meta, "clcr.width"), std::stoull(require_key(meta, "seed")));
  assign_by_name(tagger.parameters(), load_checkpoint(checkpoint));
  if (meta_out) *meta_out = meta;
  return tagger;
}

MLMA_NAMESPACE_END
