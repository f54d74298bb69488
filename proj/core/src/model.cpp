#include "mlma/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mlma/init.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

TransformerBlock make_block(std::size_t d, std::size_t d_ff, Rng& rng) {
  TransformerBlock b;
  b.wq = glorot_uniform(d, d, rng);
  b.bq = Tensor::zeros({1, d}, true);
  b.wk = glorot_uniform(d, d, rng);
  b.bk = Tensor::zeros({1, d}, true);
  b.wv = glorot_uniform(d, d, rng);
  b.bv = Tensor::zeros({1, d}, true);
  b.wo = glorot_uniform(d, d, rng);
  b.bo = Tensor::zeros({1, d}, true);
  b.ln1_gain = Tensor::full({1, d}, Real(1), true);
  b.ln1_bias = Tensor::zeros({1, d}, true);
  b.w1 = glorot_uniform(d, d_ff, rng);
  b.b1 = Tensor::zeros({1, d_ff}, true);
  b.w2 = glorot_uniform(d_ff, d, rng);
  b.b2 = Tensor::zeros({1, d}, true);
  b.ln2_gain = Tensor::full({1, d}, Real(1), true);
  b.ln2_bias = Tensor::zeros({1, d}, true);
  return b;
}

}  // namespace

MlmaConfig MlmaConfig::full() {
  MlmaConfig c;
  c.n_layers = 6;
  c.n_heads = 8;
  c.d_model = 512;
  c.d_ff = 2048;
  c.dropout = 0.1;
  c.max_sentence_len = 200;
  c.vocab_cap = 200000;
  return c;
}

MlmaConfig MlmaConfig::desk() { return MlmaConfig{}; }

void MlmaConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || max_sentence_len == 0) {
    throw ConfigError("model config: all extents must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must lie in [0, 1)");
  if (vocab_cap < Vocabulary::kNumSpecials) throw ConfigError("model config: vocabulary cap below 4");
}

void MlmaConfig::write(KeyValues& kv, const std::string& prefix) const {
  kv[prefix + "layers"] = std::to_string(n_layers);
  kv[prefix + "heads"] = std::to_string(n_heads);
  kv[prefix + "d_model"] = std::to_string(d_model);
  kv[prefix + "d_ff"] = std::to_string(d_ff);
  std::ostringstream os;
  os.precision(17);
  os << dropout;
  kv[prefix + "dropout"] = os.str();
  kv[prefix + "max_len"] = std::to_string(max_sentence_len);
  kv[prefix + "vocab_cap"] = std::to_string(vocab_cap);
}

MlmaConfig MlmaConfig::read(const KeyValues& kv, const std::string& prefix, MlmaConfig c) {
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
        throw ConfigError("model config: unknown profile '" + *v + "'");
      }
    }
    if (auto v = get("layers")) c.n_layers = std::stoul(*v);
    if (auto v = get("heads")) c.n_heads = std::stoul(*v);
    if (auto v = get("d_model")) c.d_model = std::stoul(*v);
    if (auto v = get("d_ff")) c.d_ff = std::stoul(*v);
    if (auto v = get("dropout")) c.dropout = std::stod(*v);
    if (auto v = get("max_len")) c.max_sentence_len = std::stoul(*v);
    if (auto v = get("vocab_cap")) c.vocab_cap = std::stoul(*v);
  } catch (const std::logic_error& e) {
    throw ConfigError("model config: malformed number under '" + prefix + "' (" + e.what() + ")");
  }
  c.validate();
  return c;
}

void TransformerBlock::append_named(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + "attn.wq", wq);
  out.emplace_back(prefix + "attn.bq", bq);
  out.emplace_back(prefix + "attn.wk", wk);
  out.emplace_back(prefix + "attn.bk", bk);
  out.emplace_back(prefix + "attn.wv", wv);
  out.emplace_back(prefix + "attn.bv", bv);
  out.emplace_back(prefix + "attn.wo", wo);
  out.emplace_back(prefix + "attn.bo", bo);
  out.emplace_back(prefix + "ln1.gain", ln1_gain);
  out.emplace_back(prefix + "ln1.bias", ln1_bias);
  out.emplace_back(prefix + "ff.w1", w1);
  out.emplace_back(prefix + "ff.b1", b1);
  out.emplace_back(prefix + "ff.w2", w2);
  out.emplace_back(prefix + "ff.b2", b2);
  out.emplace_back(prefix + "ln2.gain", ln2_gain);
  out.emplace_back(prefix + "ln2.bias", ln2_bias);
}

std::vector<std::size_t> EncodedBatch::real_rows() const {
  std::vector<std::size_t> rows;
  for (const auto& s : segments) {
    for (std::size_t k = 1; k + 1 < s.length; ++k) rows.push_back(s.offset + k);
  }
  return rows;
}

std::vector<TokenId> wrap_sentence(std::span<const TokenId> ids) {
  std::vector<TokenId> out;
  out.reserve(ids.size() + 2);
  out.push_back(Vocabulary::kBos);
  out.insert(out.end(), ids.begin(), ids.end());
  out.push_back(Vocabulary::kEos);
  return out;
}

Tensor sinusoidal_positions(std::size_t rows, std::size_t d) {
  std::vector<Real> v(rows * d);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      v[pos * d + i] = static_cast<Real>(std::sin(angle));
      if (i + 1 < d) v[pos * d + i + 1] = static_cast<Real>(std::cos(angle));
    }
  }
  return Tensor::from({rows, d}, std::move(v));
}

MlmaModel::MlmaModel(MlmaConfig config, std::vector<std::string> languages, std::vector<Vocabulary> vocabs,
                     std::uint64_t seed)
    : config_(config), languages_(std::move(languages)), vocabs_(std::move(vocabs)), seed_(seed) {
  config_.validate();
  if (languages_.empty()) throw ConfigError("model: at least one language is required");
  if (languages_.size() != vocabs_.size()) throw ConfigError("model: one vocabulary per language is required");
  for (std::size_t i = 0; i < languages_.size(); ++i) {
    for (std::size_t j = i + 1; j < languages_.size(); ++j) {
      if (languages_[i] == languages_[j]) throw ConfigError("model: duplicate language '" + languages_[i] + "'");
    }
  }
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  for (const auto& v : vocabs_) embeddings_.push_back(uniform_init({v.size(), d}, 0.05, rng));
  positional_ = sinusoidal_positions(config_.max_sentence_len + 2, d);
  for (std::size_t l = 0; l < config_.n_layers; ++l) forward_blocks_.push_back(make_block(d, config_.d_ff, rng));
  for (std::size_t l = 0; l < config_.n_layers; ++l) backward_blocks_.push_back(make_block(d, config_.d_ff, rng));
}

std::size_t MlmaModel::language_index(std::string_view language) const {
  for (std::size_t i = 0; i < languages_.size(); ++i) {
    if (languages_[i] == language) return i;
  }
  throw ContractError("model: unknown language '" + std::string(language) + "'");
}

bool MlmaModel::has_language(std::string_view language) const {
  for (const auto& l : languages_) {
    if (l == language) return true;
  }
  return false;
}

Tensor MlmaModel::embed(std::span<const TokenId> ids, std::size_t lang) const {
  if (ids.empty()) throw ContractError("embed: empty token sequence");
  if (ids.size() > positional_.rows()) {
    throw ContractError("embed: sequence of " + std::to_string(ids.size()) + " exceeds the positional table (" +
                        std::to_string(positional_.rows()) + ")");
  }
  const Tensor& table = embeddings_.at(lang);
  for (TokenId id : ids) {
    if (id >= table.rows()) {
      throw ContractError("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(table.rows()));
    }
  }
  std::vector<std::size_t> positions(ids.size());
  for (std::size_t k = 0; k < positions.size(); ++k) positions[k] = k;
  return add(gather_rows(table, ids), gather_rows(positional_, positions));
}

Tensor MlmaModel::run_block(const TransformerBlock& b, const Tensor& x, std::span<const Segment> segments,
                            AttentionMask mask, bool training, Rng* rng) const {
  const Tensor q = add(matmul(x, b.wq), b.bq);
  const Tensor k = add(matmul(x, b.wk), b.bk);
  const Tensor v = add(matmul(x, b.wv), b.bv);
  Tensor attn = add(matmul(masked_attention(q, k, v, segments, config_.n_heads, mask), b.wo), b.bo);
  if (training) attn = dropout(attn, config_.dropout, *rng, true);
  const Tensor x1 = layer_norm(add(x, attn), b.ln1_gain, b.ln1_bias);
  Tensor ff = add(matmul(gelu(add(matmul(x1, b.w1), b.b1)), b.w2), b.b2);
  if (training) ff = dropout(ff, config_.dropout, *rng, true);
  return layer_norm(add(x1, ff), b.ln2_gain, b.ln2_bias);
}

std::vector<Tensor> MlmaModel::run_stack(Direction dir, const Tensor& h0, std::span<const Segment> segments,
                                         bool training, Rng* rng) const {
  const AttentionMask mask = dir == Direction::Forward ? AttentionMask::Causal : AttentionMask::ReverseCausal;
  std::vector<Tensor> layers{h0};
  for (const auto& b : blocks(dir)) layers.push_back(run_block(b, layers.back(), segments, mask, training, rng));
  return layers;
}

MlmaModel::ForwardResult MlmaModel::forward_pass(std::span<const TokenId> ids, std::size_t lang,
                                                 Direction dir) const {
  if (ids.size() > config_.max_sentence_len + 2) {
    throw ContractError("forward_pass: sequence of " + std::to_string(ids.size()) + " exceeds max length");
  }
  const Tensor h0 = embed(ids, lang);
  const Segment seg{0, ids.size()};
  ForwardResult r;
  r.layers = run_stack(dir, h0, std::span<const Segment>(&seg, 1), false, nullptr);
  r.probs = softmax(matmul(r.layers.back(), embeddings_.at(lang), Transpose::Yes), 1);
  return r;
}

EncodedBatch MlmaModel::encode(const std::vector<std::vector<TokenId>>& sentences, std::size_t lang, bool training,
                               Rng* rng) const {
  if (sentences.empty()) throw ContractError("encode: empty batch");
  if (training && config_.dropout > 0.0 && rng == nullptr) throw ContractError("encode: training needs an rng");
  const Tensor& table = embeddings_.at(lang);
  EncodedBatch batch;
  std::vector<std::size_t> positions;
  for (const auto& s : sentences) {
    if (s.empty()) throw ContractError("encode: empty sentence");
    if (s.size() > config_.max_sentence_len) {
      throw ContractError("encode: sentence of " + std::to_string(s.size()) + " tokens exceeds max length " +
                          std::to_string(config_.max_sentence_len));
    }
    batch.segments.push_back({batch.ids.size(), s.size() + 2});
    const auto wrapped = wrap_sentence(s);
    for (std::size_t k = 0; k < wrapped.size(); ++k) {
      if (wrapped[k] >= table.rows()) {
        throw ContractError("encode: token id " + std::to_string(wrapped[k]) + " outside vocabulary");
      }
      batch.ids.push_back(wrapped[k]);
      positions.push_back(k);
    }
  }
  Tensor h0 = add(gather_rows(table, batch.ids), gather_rows(positional_, positions));
  if (training) h0 = dropout(h0, config_.dropout, *rng, true);
  batch.forward = run_stack(Direction::Forward, h0, batch.segments, training, rng);
  batch.backward = run_stack(Direction::Backward, h0, batch.segments, training, rng);
  return batch;
}

Tensor MlmaModel::nll(const EncodedBatch& batch, std::size_t lang) const {
  // Forward state at k predicts token k+1; backward state at k predicts k-1.
  // Only real tokens are scored.
  std::vector<std::size_t> fwd_rows, bwd_rows;
  std::vector<std::int64_t> fwd_targets, bwd_targets;
  for (const auto& s : batch.segments) {
    const std::size_t n = s.length - 2;
    for (std::size_t k = 0; k < n; ++k) {
      fwd_rows.push_back(s.offset + k);
      fwd_targets.push_back(static_cast<std::int64_t>(batch.ids[s.offset + k + 1]));
      bwd_rows.push_back(s.offset + k + 2);
      bwd_targets.push_back(static_cast<std::int64_t>(batch.ids[s.offset + k + 1]));
    }
  }
  const Tensor& table = embeddings_.at(lang);
  const Tensor fwd_logits = matmul(gather_rows(batch.forward.back(), fwd_rows), table, Transpose::Yes);
  const Tensor bwd_logits = matmul(gather_rows(batch.backward.back(), bwd_rows), table, Transpose::Yes);
  return add(cross_entropy(fwd_logits, fwd_targets), cross_entropy(bwd_logits, bwd_targets));
}

Tensor MlmaModel::bilm_nll(std::span<const TokenId> sentence, std::size_t lang) const {
  if (sentence.empty()) throw ContractError("bilm_nll: empty sentence");
  std::vector<std::vector<TokenId>> one{std::vector<TokenId>(sentence.begin(), sentence.end())};
  return nll(encode(one, lang, false, nullptr), lang);
}

std::vector<Tensor> MlmaModel::hidden_rows(const EncodedBatch& batch) const {
  const auto rows = batch.real_rows();
  std::vector<Tensor> out;
  out.reserve(batch.forward.size());
  for (std::size_t l = 0; l < batch.forward.size(); ++l) {
    const Tensor parts[] = {gather_rows(batch.forward[l], rows), gather_rows(batch.backward[l], rows)};
    out.push_back(concat_cols(parts));
  }
  return out;
}

HiddenStack MlmaModel::hidden_stack(std::span<const TokenId> sentence, std::size_t lang) const {
  std::vector<std::vector<TokenId>> one{std::vector<TokenId>(sentence.begin(), sentence.end())};
  const EncodedBatch b = encode(one, lang, false, nullptr);
  const auto rows = b.real_rows();
  std::vector<Tensor> fwd, bwd;
  for (std::size_t l = 0; l < b.forward.size(); ++l) {
    fwd.push_back(gather_rows(b.forward[l], rows));
    bwd.push_back(gather_rows(b.backward[l], rows));
  }
  return concat_hidden(fwd, bwd);
}

HiddenStack concat_hidden(const std::vector<Tensor>& fwd, const std::vector<Tensor>& bwd) {
  if (fwd.size() != bwd.size() || fwd.empty()) {
    throw ContractError("concat_hidden: layer counts differ (" + std::to_string(fwd.size()) + " vs " +
                        std::to_string(bwd.size()) + ")");
  }
  HiddenStack stack;
  for (std::size_t l = 0; l < fwd.size(); ++l) {
    if (fwd[l].rows() != bwd[l].rows()) {
      throw ContractError("concat_hidden: token counts differ at layer " + std::to_string(l) + " (" +
                          std::to_string(fwd[l].rows()) + " vs " + std::to_string(bwd[l].rows()) + ")");
    }
    const Tensor parts[] = {fwd[l], bwd[l]};
    stack.layers.push_back(concat_cols(parts));
  }
  return stack;
}

NamedTensors MlmaModel::parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < languages_.size(); ++i) out.emplace_back("embedding." + languages_[i], embeddings_[i]);
  for (std::size_t l = 0; l < forward_blocks_.size(); ++l) {
    forward_blocks_[l].append_named(out, "forward." + std::to_string(l) + ".");
  }
  for (std::size_t l = 0; l < backward_blocks_.size(); ++l) {
    backward_blocks_[l].append_named(out, "backward." + std::to_string(l) + ".");
  }
  return out;
}

std::vector<Tensor> MlmaModel::parameter_list() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : parameters()) out.push_back(t);
  return out;
}

void MlmaModel::save(const std::filesystem::path& checkpoint) const {
  save_checkpoint(checkpoint, parameters());
  KeyValues meta;
  meta["format"] = "mlma-lm";
  config_.write(meta, "model.");
  std::string langs;
  for (std::size_t i = 0; i < languages_.size(); ++i) {
    if (i) langs += ",";
    langs += languages_[i];
    meta["vocab." + languages_[i] + ".size"] = std::to_string(vocabs_[i].size());
    meta["vocab." + languages_[i] + ".hash"] = std::to_string(vocabs_[i].hash());
    vocabs_[i].save(checkpoint.string() + ".vocab." + languages_[i]);
  }
  meta["languages"] = langs;
  meta["seed"] = std::to_string(seed_);
  write_key_values(checkpoint.string() + ".meta", meta);
}

MlmaModel MlmaModel::load(const std::filesystem::path& checkpoint) {
  const KeyValues meta = read_key_values(checkpoint.string() + ".meta");
  auto it = meta.find("format");
  if (it == meta.end() || it->second != "mlma-lm") throw ParseError(checkpoint.string() + ": not a language model");
  const MlmaConfig config = MlmaConfig::read(meta, "model.", MlmaConfig{});
  const auto languages = split_list(meta.at("languages"));
  std::vector<Vocabulary> vocabs;
  for (const auto& lang : languages) {
    vocabs.push_back(Vocabulary::load(checkpoint.string() + ".vocab." + lang));
    auto h = meta.find("vocab." + lang + ".hash");
    if (h != meta.end() && h->second != std::to_string(vocabs.back().hash())) {
      throw ParseError(checkpoint.string() + ": vocabulary hash mismatch for " + lang);
    }
  }
  const std::uint64_t seed = std::stoull(meta.at("seed"));
  MlmaModel model(config, languages, std::move(vocabs), seed);
  assign_by_name(model.parameters(), load_checkpoint(checkpoint));
  return model;
}

std::size_t load_text_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, Tensor& table) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings " + path.string());
  const std::size_t d = table.cols();
  auto data = table.mutable_data();
  std::string line;
  std::size_t replaced = 0;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    std::vector<double> values;
    double x;
    while (ls >> x) values.push_back(x);
    // A "count dim" header line (word2vec/fastText text format) is skipped.
    if (lineno == 1 && values.size() == 1) continue;
    if (values.size() != d) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(d) +
                       " values, got " + std::to_string(values.size()));
    }
    auto id = vocab.find(word);
    if (!id || Vocabulary::is_special(*id)) continue;
    for (std::size_t c = 0; c < d; ++c) data[*id * d + c] = static_cast<Real>(values[c]);
    ++replaced;
  }
  return replaced;
}

double bidirectional_perplexity(const MlmaModel& model, const std::vector<std::vector<TokenId>>& corpus,
                                std::size_t lang) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t tokens = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < corpus.size(); i += kChunk) {
    std::vector<std::vector<TokenId>> chunk;
    for (std::size_t j = i; j < std::min(corpus.size(), i + kChunk); ++j) {
      if (corpus[j].empty()) continue;
      chunk.push_back(corpus[j]);
      tokens += corpus[j].size();
    }
    if (chunk.empty()) continue;
    total += static_cast<double>(model.nll(model.encode(chunk, lang, false, nullptr), lang).item());
  }
  if (tokens == 0) throw ContractError("perplexity: empty corpus");
  return std::exp(total / (2.0 * static_cast<double>(tokens)));
}

MLMA_NAMESPACE_END
