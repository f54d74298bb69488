#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "mlma/checkpoint.hpp"
#include "mlma/corpus.hpp"
#include "mlma/model.hpp"
#include "mlma/rng.hpp"
#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

/// Frozen per-token layer stack of one sentence: N x (L * W) with the L layer
/// vectors of width W = 2d side by side.
struct ClcrStack {
  Tensor packed;
  std::size_t layers = 0;
  std::size_t width = 0;

  std::size_t tokens() const { return packed.defined() ? packed.rows() : 0; }
  /// Layer l of every token, N x W.
  Tensor layer(std::size_t l) const;
};

/// Packs a hidden stack into the side-by-side layout, without history.
ClcrStack pack_stack(const HiddenStack& stack);

/// Evaluation-mode stack of one sentence. Never records a graph into the
/// model's parameters.
ClcrStack extract_clcr(const Sentence& sentence, const std::string& language, const MlmaModel& model);

/// Same as extract_clcr for every sentence, run in fixed-size chunks.
std::vector<ClcrStack> extract_corpus(const std::vector<Sentence>& sentences, const std::string& language,
                                      const MlmaModel& model);

/// Stacks keyed by corpus offset, stored in the checkpoint tensor format.
void save_clcr_cache(const std::filesystem::path& path, const std::vector<ClcrStack>& stacks);
std::vector<ClcrStack> load_clcr_cache(const std::filesystem::path& path);

enum class CombinerMode { Sws, Fws };

CombinerMode parse_combiner_mode(const std::string& s);
std::string to_string(CombinerMode mode);

/// Mixes the L layers of each token into one W-vector.
class LayerCombiner {
 public:
  virtual ~LayerCombiner() = default;
  virtual CombinerMode mode() const = 0;
  /// N x W output for an N-token stack.
  virtual Tensor combine(const ClcrStack& stack) const = 0;
  virtual void append_named(NamedTensors& out, const std::string& prefix) const = 0;
  std::size_t layers() const { return layers_; }
  std::size_t width() const { return width_; }

 protected:
  LayerCombiner(std::size_t layers, std::size_t width) : layers_(layers), width_(width) {}
  void check(const ClcrStack& stack) const;

  std::size_t layers_;
  std::size_t width_;
};

/// Per-token weights s = softmax(MLP(h_0 | ... | h_n)) with one tanh hidden
/// layer of width W.
class SwsCombiner final : public LayerCombiner {
 public:
  SwsCombiner(std::size_t layers, std::size_t width, Rng& rng);

  CombinerMode mode() const override { return CombinerMode::Sws; }
  /// N x L per-token layer weights.
  Tensor weights(const ClcrStack& stack) const;
  Tensor logits(const ClcrStack& stack) const;
  Tensor combine(const ClcrStack& stack) const override;
  void append_named(NamedTensors& out, const std::string& prefix) const override;

  Tensor w1, b1, w2, b2;
};

/// One weight per (layer, dimension), softmaxed down each column.
class FwsCombiner final : public LayerCombiner {
 public:
  FwsCombiner(std::size_t layers, std::size_t width);

  CombinerMode mode() const override { return CombinerMode::Fws; }
  /// L x W column-softmaxed weights.
  Tensor column_weights() const;
  Tensor combine(const ClcrStack& stack) const override;
  void append_named(NamedTensors& out, const std::string& prefix) const override;

  Tensor f;
};

std::unique_ptr<LayerCombiner> make_combiner(CombinerMode mode, std::size_t layers, std::size_t width, Rng& rng);

MLMA_NAMESPACE_END
