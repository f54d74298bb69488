#pragma once

#include <string>
#include <vector>

#include "mlma/precision.hpp"

MLMA_NAMESPACE_BEGIN

/// A labeled span [begin, end) of one sentence.
struct Chunk {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string type;

  bool operator==(const Chunk&) const = default;
};

/// BIO(ES) chunks with conlleval semantics: an I-X that does not continue an
/// X chunk opens a new one.
std::vector<Chunk> extract_chunks(const std::vector<std::string>& tags);

struct ChunkScores {
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
  /// Percentages; 0 when the denominator is 0.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Entity-level exact-span, exact-type scores over a corpus.
ChunkScores score_chunks(const std::vector<std::vector<std::string>>& gold,
                         const std::vector<std::vector<std::string>>& predicted);

/// Token accuracy in percent.
double token_accuracy(const std::vector<std::vector<std::string>>& gold,
                      const std::vector<std::vector<std::string>>& predicted);

struct SeedMetrics {
  std::uint64_t seed = 0;
  /// NER: P, R, F1. POS: accuracy only.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
};

struct MetricsReport {
  std::string task;
  std::vector<SeedMetrics> seeds;

  double mean_f1() const;
  double std_f1() const;
  double mean_accuracy() const;
  double std_accuracy() const;

  /// Aligned text table.
  std::string table() const;
  /// One JSON object per line: each seed, then the summary.
  std::string json_lines() const;
};

double mean(const std::vector<double>& v);
/// Sample standard deviation; 0 for fewer than two values.
double sample_std(const std::vector<double>& v);

MLMA_NAMESPACE_END
