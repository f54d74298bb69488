#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mlma/checkpoint.hpp"
#include "mlma/corpus.hpp"

MLMA_NAMESPACE_BEGIN

/// A pair of artificial languages that realize one latent tag-Markov
/// process through two different surface vocabularies. Every latent lexeme
/// belongs to exactly one tag; a fraction of lexemes share their surface
/// string across the two languages.
struct SyntheticPairSpec {
  std::size_t num_tags = 8;
  std::size_t lexemes_per_tag = 25;
  /// Fraction of lexemes rendered identically in both languages.
  double shared_fraction = 0.1;
  /// Render every lexeme identically (implies shared_fraction = 1).
  bool identical_renderings = false;
  std::size_t mono_sentences = 5000;
  std::size_t labeled_train = 1000;
  std::size_t labeled_test = 500;
  std::size_t min_length = 5;
  std::size_t max_length = 15;
  /// Word frequencies within a tag follow 1 / rank^zipf_exponent.
  double zipf_exponent = 1.0;
  /// Number of strongly preferred successor tags per tag in the generated
  /// transition matrix.
  std::size_t preferred_successors = 2;
  /// Probability mass on the preferred successors.
  double preferred_mass = 0.85;
  /// Explicit num_tags x num_tags transition matrix; generated when empty.
  std::vector<std::vector<double>> transitions;
  /// Explicit start distribution; generated when empty.
  std::vector<double> start;

  void validate() const;
  KeyValues to_key_values() const;
  static SyntheticPairSpec from_key_values(const KeyValues& kv);
};

struct SyntheticPair {
  std::vector<Sentence> mono_source;
  std::vector<Sentence> mono_target;
  std::vector<LabeledSentence> train_source;
  std::vector<LabeledSentence> test_target;
  /// Surface string of latent lexeme i in each language.
  std::vector<std::string> lexicon_source;
  std::vector<std::string> lexicon_target;
  std::vector<std::size_t> lexeme_tag;
  std::vector<std::string> tag_names;
  /// Row-stochastic matrix and start distribution actually used.
  std::vector<std::vector<double>> transitions;
  std::vector<double> start;

  /// Oracle lexeme of a surface string; -1 when unknown.
  long lexeme_of_source(const std::string& word) const;
  long lexeme_of_target(const std::string& word) const;

  std::unordered_map<std::string, std::size_t> source_index;
  std::unordered_map<std::string, std::size_t> target_index;
};

/// Deterministic in (spec, seed).
SyntheticPair gen_synthetic_pair(const SyntheticPairSpec& spec, std::uint64_t seed);

/// Empirical tag-transition frequencies of a labeled corpus, indexed by tag
/// order in `tag_names`.
std::vector<std::vector<double>> empirical_transitions(const std::vector<LabeledSentence>& corpus,
                                                       const std::vector<std::string>& tag_names);

MLMA_NAMESPACE_END
