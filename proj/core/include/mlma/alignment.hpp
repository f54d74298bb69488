#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mlma/checkpoint.hpp"
#include "mlma/corpus.hpp"
#include "mlma/model.hpp"
#include "mlma/rng.hpp"
#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

enum class AlignmentMode {
  /// Plain multilingual LM, no regularizer.
  None,
  Iden,
  Mv,
  Avl,
};

AlignmentMode parse_alignment_mode(const std::string& s);
std::string to_string(AlignmentMode mode);

struct AlignmentConfig {
  AlignmentMode mode = AlignmentMode::Avl;
  double lambda_iden = 100.0;
  /// Per-layer weights; a layer without an explicit entry uses the scalar.
  double lambda_mean = 0.1;
  double lambda_var = 0.01;
  double lambda_avl = 1.0;
  std::vector<double> lambda_mean_layers;
  std::vector<double> lambda_var_layers;
  std::vector<double> lambda_avl_layers;
  /// LM weight per language (by model language order); missing entries are 1.
  std::vector<double> lambda_lm;
  /// Row cap per language per layer for the sampled populations.
  std::size_t max_rows = 512;
  /// Aligned language pairs by name; empty means every unordered pair.
  std::vector<std::pair<std::string, std::string>> pairs;
  /// Divide each language's NLL by its token count before weighting.
  bool per_token_nll = true;

  double mean_weight(std::size_t layer) const;
  double var_weight(std::size_t layer) const;
  double avl_weight(std::size_t layer) const;
  double lm_weight(std::size_t lang) const;

  void validate() const;
  void write(KeyValues& kv, const std::string& prefix, const std::vector<std::string>& languages) const;
  static AlignmentConfig read(const KeyValues& kv, const std::string& prefix,
                              const std::vector<std::string>& languages, AlignmentConfig defaults);
};

/// Surface strings shared by two vocabularies, in lexicographic order.
struct IdenticalSet {
  std::vector<std::string> words;
  std::vector<TokenId> source_ids;
  std::vector<TokenId> target_ids;

  std::size_t size() const { return words.size(); }
  bool empty() const { return words.empty(); }
};

/// Exact-match intersection of the regular (non-special) tokens.
IdenticalSet identical_set(const Vocabulary& source, const Vocabulary& target);

/// (lambda / |W|) * sum_w ||E_s[w] - E_t[w]||_2. Zero, with a warning, when
/// the set is empty.
Tensor loss_iden(const Tensor& source_table, const Tensor& target_table, const IdenticalSet& iden, double lambda);

/// Mean of ||E_s[w] - E_t[w]||_2 over the set, without gradient.
double mean_identical_distance(const Tensor& source_table, const Tensor& target_table, const IdenticalSet& iden);

/// Per layer, the hidden-state rows of two languages (each R x 2d).
struct BatchStateSample {
  std::vector<Tensor> source;
  std::vector<Tensor> target;

  std::size_t num_layers() const { return source.size(); }
};

Tensor loss_mv(const BatchStateSample& sample, const AlignmentConfig& cfg);
Tensor loss_avl(const BatchStateSample& sample, const AlignmentConfig& cfg);

/// Uniform subsample without replacement to at most `max_rows` rows, in
/// their original order. Returns `rows` unchanged when it is small enough.
Tensor cap_rows(const Tensor& rows, std::size_t max_rows, Rng& rng);

struct LossTerms {
  Tensor total;
  /// Summed NLL per language (unweighted, unnormalized).
  std::vector<Tensor> nll;
  /// Token count per language.
  std::vector<std::size_t> tokens;
  /// Regularizer per aligned pair, already weighted.
  std::vector<Tensor> pair_reg;
  Tensor reg;
};

/// Training objective sum_i lambda_i^lm NLL_i + L_reg over the configured
/// language pairs. Identical-string sets are computed once at construction.
class AlignmentObjective {
 public:
  AlignmentObjective(const MlmaModel& model, AlignmentConfig cfg);

  const AlignmentConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& pairs() const { return pairs_; }
  const IdenticalSet& identical(std::size_t pair) const { return identical_.at(pair); }

  /// `batches[i]` holds sentences of model language i; every language must be
  /// present. `rng` drives row subsampling.
  LossTerms operator()(std::span<const EncodedBatch> batches, Rng& rng) const;

 private:
  const MlmaModel* model_;
  AlignmentConfig cfg_;
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::vector<IdenticalSet> identical_;
};

/// Convenience wrapper that builds the objective and evaluates it once.
LossTerms total_loss(std::span<const EncodedBatch> batches, const MlmaModel& model, const AlignmentConfig& cfg,
                     Rng& rng);

MLMA_NAMESPACE_END
