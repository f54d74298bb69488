#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlma/checkpoint.hpp"
#include "mlma/corpus.hpp"
#include "mlma/ops.hpp"
#include "mlma/rng.hpp"
#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

struct MlmaConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  double dropout = 0.1;
  /// Longest sentence (real tokens) the model accepts.
  std::size_t max_sentence_len = 200;
  std::size_t vocab_cap = 2000;

  /// 6 layers, 8 heads, d = 512, d_ff = 2048, 200k vocabulary.
  static MlmaConfig full();
  /// 2 layers, 2 heads, d = 32, d_ff = 64, 2000-word vocabulary.
  static MlmaConfig desk();

  void validate() const;
  void write(KeyValues& kv, const std::string& prefix) const;
  static MlmaConfig read(const KeyValues& kv, const std::string& prefix, MlmaConfig defaults);
};

enum class Direction { Forward, Backward };

struct TransformerBlock {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;

  void append_named(NamedTensors& out, const std::string& prefix) const;
};

/// Per-token, per-layer concatenated forward and backward states:
/// layers[l] is N x 2d holding h_{l,k} for real tokens k.
struct HiddenStack {
  std::vector<Tensor> layers;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t tokens() const { return layers.empty() ? 0 : layers[0].rows(); }
  std::size_t width() const { return layers.empty() ? 0 : layers[0].cols(); }
  Shape shape() const { return {num_layers(), tokens(), width()}; }
};

/// A batch of sentences of one language run through both directions.
/// Rows are packed: each sentence occupies length + 2 rows (sentinels).
struct EncodedBatch {
  std::vector<Segment> segments;
  std::vector<TokenId> ids;
  /// H_0..H_n of each direction, each (total rows) x d. Index 0 is the shared
  /// embedding layer.
  std::vector<Tensor> forward;
  std::vector<Tensor> backward;

  /// Packed row indices of real (non-sentinel) tokens, in sentence order.
  std::vector<std::size_t> real_rows() const;
};

/// Bidirectional Transformer language model with one embedding table per
/// language and language-shared blocks. The output softmax reuses the
/// embedding table of the sentence's language.
class MlmaModel {
 public:
  MlmaModel(MlmaConfig config, std::vector<std::string> languages, std::vector<Vocabulary> vocabs,
            std::uint64_t seed);

  const MlmaConfig& config() const { return config_; }
  const std::vector<std::string>& languages() const { return languages_; }
  std::size_t language_index(std::string_view language) const;
  bool has_language(std::string_view language) const;
  const Vocabulary& vocab(std::size_t lang) const { return vocabs_.at(lang); }
  const Tensor& embedding(std::size_t lang) const { return embeddings_.at(lang); }
  const Tensor& positional() const { return positional_; }
  const std::vector<TransformerBlock>& blocks(Direction dir) const {
    return dir == Direction::Forward ? forward_blocks_ : backward_blocks_;
  }

  /// H_0 = E_e[ids] + E_p[0..N). `ids` is the full sequence the model sees
  /// (sentinels included when wrapped).
  Tensor embed(std::span<const TokenId> ids, std::size_t lang) const;

  struct ForwardResult {
    std::vector<Tensor> layers;  // H_0..H_n, each N x d
    Tensor probs;                // N x |V|, softmax(H_n E_e^T)
  };
  /// Evaluation-mode pass of one direction over `ids` as given.
  ForwardResult forward_pass(std::span<const TokenId> ids, std::size_t lang, Direction dir) const;

  /// Runs sentences (without sentinels) through both directions. With
  /// `training` set, dropout draws from `rng`.
  EncodedBatch encode(const std::vector<std::vector<TokenId>>& sentences, std::size_t lang, bool training,
                      Rng* rng) const;

  /// Bidirectional NLL summed over the real tokens of every sentence.
  Tensor nll(const EncodedBatch& batch, std::size_t lang) const;
  Tensor bilm_nll(std::span<const TokenId> sentence, std::size_t lang) const;

  /// Per layer l = 0..n, the rows h_{l,k} (real tokens only), each R x 2d.
  std::vector<Tensor> hidden_rows(const EncodedBatch& batch) const;
  /// Evaluation-mode hidden stack of one sentence (no sentinels).
  HiddenStack hidden_stack(std::span<const TokenId> sentence, std::size_t lang) const;

  NamedTensors parameters() const;
  std::vector<Tensor> parameter_list() const;

  void save(const std::filesystem::path& checkpoint) const;
  static MlmaModel load(const std::filesystem::path& checkpoint);

  std::uint64_t seed() const { return seed_; }

 private:
  Tensor run_block(const TransformerBlock& b, const Tensor& x, std::span<const Segment> segments, AttentionMask mask,
                   bool training, Rng* rng) const;
  std::vector<Tensor> run_stack(Direction dir, const Tensor& h0, std::span<const Segment> segments, bool training,
                                Rng* rng) const;

  MlmaConfig config_;
  std::vector<std::string> languages_;
  std::vector<Vocabulary> vocabs_;
  std::vector<Tensor> embeddings_;
  Tensor positional_;
  std::vector<TransformerBlock> forward_blocks_;
  std::vector<TransformerBlock> backward_blocks_;
  std::uint64_t seed_;
};

/// <s> ids </s>
std::vector<TokenId> wrap_sentence(std::span<const TokenId> ids);

/// Concatenates per-layer forward and backward states: layer l becomes
/// fwd[l] | bwd[l]. Both stacks must have the same layer count and rows.
HiddenStack concat_hidden(const std::vector<Tensor>& fwd, const std::vector<Tensor>& bwd);

/// Fixed sinusoidal position table, rows x d.
Tensor sinusoidal_positions(std::size_t rows, std::size_t d);

/// Overwrites embedding rows for tokens listed in a plain-text file of
/// "word v1 ... vd" lines. Returns the number of rows replaced.
std::size_t load_text_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, Tensor& table);

/// Per-token perplexity exp(total NLL / (2 * tokens)) over a corpus.
double bidirectional_perplexity(const MlmaModel& model, const std::vector<std::vector<TokenId>>& corpus,
                                std::size_t lang);

MLMA_NAMESPACE_END
