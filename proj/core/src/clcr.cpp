#include "mlma/clcr.hpp"

#include "mlma/init.hpp"
#include "mlma/ops.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

constexpr std::size_t kExtractChunk = 32;

std::vector<ClcrStack> unpack_batch(const MlmaModel& model, const EncodedBatch& batch) {
  std::vector<ClcrStack> out;
  const std::size_t layers = batch.forward.size();
  const std::size_t width = 2 * model.config().d_model;
  std::vector<Tensor> parts;
  for (std::size_t l = 0; l < layers; ++l) {
    parts.push_back(batch.forward[l]);
    parts.push_back(batch.backward[l]);
  }
  const Tensor all = concat_cols(parts);
  for (const auto& seg : batch.segments) {
    ClcrStack s;
    s.layers = layers;
    s.width = width;
    s.packed = slice_rows(all, seg.offset + 1, seg.offset + seg.length - 1).detach();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

Tensor ClcrStack::layer(std::size_t l) const {
  if (l >= layers) throw ContractError("clcr: layer " + std::to_string(l) + " out of range");
  return slice_cols(packed, l * width, (l + 1) * width);
}

ClcrStack pack_stack(const HiddenStack& stack) {
  NoGradGuard guard;
  ClcrStack s;
  s.layers = stack.num_layers();
  s.width = stack.width();
  s.packed = concat_cols(stack.layers).detach();
  return s;
}

ClcrStack extract_clcr(const Sentence& sentence, const std::string& language, const MlmaModel& model) {
  auto stacks = extract_corpus({sentence}, language, model);
  return std::move(stacks.front());
}

std::vector<ClcrStack> extract_corpus(const std::vector<Sentence>& sentences, const std::string& language,
                                      const MlmaModel& model) {
  NoGradGuard guard;
  const std::size_t lang = model.language_index(language);
  std::vector<ClcrStack> out;
  out.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); i += kExtractChunk) {
    std::vector<std::vector<TokenId>> ids;
    for (std::size_t j = i; j < std::min(sentences.size(), i + kExtractChunk); ++j) {
      if (sentences[j].empty()) throw ContractError("extract_clcr: empty sentence at offset " + std::to_string(j));
      ids.push_back(model.vocab(lang).encode(sentences[j]));
    }
    for (auto& s : unpack_batch(model, model.encode(ids, lang, false, nullptr))) out.push_back(std::move(s));
  }
  return out;
}

void save_clcr_cache(const std::filesystem::path& path, const std::vector<ClcrStack>& stacks) {
  NamedTensors named;
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    named.emplace_back("clcr." + std::to_string(i) + "." + std::to_string(stacks[i].layers), stacks[i].packed);
  }
  save_checkpoint(path, named);
}

std::vector<ClcrStack> load_clcr_cache(const std::filesystem::path& path) {
  std::vector<ClcrStack> out;
  for (auto& [name, t] : load_checkpoint(path)) {
    const auto first = name.find('.');
    const auto second = name.find('.', first + 1);
    if (name.rfind("clcr.", 0) != 0 || second == std::string::npos) {
      throw ParseError(path.string() + ": unexpected tensor '" + name + "' in representation cache");
    }
    const std::size_t offset = std::stoul(name.substr(first + 1, second - first - 1));
    const std::size_t layers = std::stoul(name.substr(second + 1));
    if (offset != out.size() || layers == 0 || t.rank() != 2 || t.cols() % layers != 0) {
      throw ParseError(path.string() + ": malformed cache entry '" + name + "'");
    }
    out.push_back(ClcrStack{t, layers, t.cols() / layers});
  }
  return out;
}

CombinerMode parse_combiner_mode(const std::string& s) {
  if (s == "sws") return CombinerMode::Sws;
  if (s == "fws") return CombinerMode::Fws;
  throw ConfigError("unknown combiner '" + s + "' (expected sws or fws)");
}

std::string to_string(CombinerMode mode) { return mode == CombinerMode::Sws ? "sws" : "fws"; }

void LayerCombiner::check(const ClcrStack& stack) const {
  if (stack.layers != layers_ || stack.width != width_) {
    throw ContractError("combiner expects " + std::to_string(layers_) + " layers of width " + std::to_string(width_) +
                        ", got " + std::to_string(stack.layers) + " x " + std::to_string(stack.width));
  }
}

SwsCombiner::SwsCombiner(std::size_t layers, std::size_t width, Rng& rng) : LayerCombiner(layers, width) {
  w1 = glorot_uniform(layers * width, width, rng);
  b1 = Tensor::zeros({1, width}, true);
  w2 = glorot_uniform(width, layers, rng);
  b2 = Tensor::zeros({1, layers}, true);
}

Tensor SwsCombiner::logits(const ClcrStack& stack) const {
  check(stack);
  return add(matmul(tanh(add(matmul(stack.packed, w1), b1)), w2), b2);
}

Tensor SwsCombiner::weights(const ClcrStack& stack) const { return softmax(logits(stack), 1); }

Tensor SwsCombiner::combine(const ClcrStack& stack) const { return weighted_layer_sum(weights(stack), stack.packed); }

void SwsCombiner::append_named(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + "w1", w1);
  out.emplace_back(prefix + "b1", b1);
  out.emplace_back(prefix + "w2", w2);
  out.emplace_back(prefix + "b2", b2);
}

FwsCombiner::FwsCombiner(std::size_t layers, std::size_t width)
    : LayerCombiner(layers, width), f(Tensor::zeros({layers, width}, true)) {}

Tensor FwsCombiner::column_weights() const { return softmax(f, 0); }

Tensor FwsCombiner::combine(const ClcrStack& stack) const {
  check(stack);
  return dimwise_layer_sum(column_weights(), stack.packed);
}

void FwsCombiner::append_named(NamedTensors& out, const std::string& prefix) const { out.emplace_back(prefix + "f", f); }

std::unique_ptr<LayerCombiner> make_combiner(CombinerMode mode, std::size_t layers, std::size_t width, Rng& rng) {
  if (mode == CombinerMode::Sws) return std::make_unique<SwsCombiner>(layers, width, rng);
  return std::make_unique<FwsCombiner>(layers, width);
}

MLMA_NAMESPACE_END
