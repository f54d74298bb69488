#pragma once

#include <span>
#include <vector>

#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

// Linear-chain CRF over T tags. Transitions are (T+2) x (T+2), indexed
// [from][to], with START = T and STOP = T+1. A path y_0..y_{N-1} scores
//   trans[START][y_0] + sum_k emit[k][y_k] + sum_k trans[y_{k-1}][y_k] + trans[y_{N-1}][STOP].

inline std::size_t crf_start(std::size_t num_tags) { return num_tags; }
inline std::size_t crf_stop(std::size_t num_tags) { return num_tags + 1; }

/// log Z - score(gold), differentiable in emissions (N x T) and transitions.
Tensor crf_nll(const Tensor& emissions, const Tensor& transitions, std::span<const std::size_t> gold);

double crf_log_partition(const Tensor& emissions, const Tensor& transitions);
double crf_path_score(const Tensor& emissions, const Tensor& transitions, std::span<const std::size_t> path);

struct ViterbiResult {
  std::vector<std::size_t> path;
  double score = 0.0;
};

/// Best path. Ties go to the lowest tag index at every backpointer and at
/// the final step.
ViterbiResult viterbi(const Tensor& emissions, const Tensor& transitions);

MLMA_NAMESPACE_END
