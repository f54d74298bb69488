#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mlma/alignment.hpp"
#include "mlma/checkpoint.hpp"
#include "mlma/clcr.hpp"
#include "mlma/corpus.hpp"
#include "mlma/metrics.hpp"
#include "mlma/model.hpp"
#include "mlma/synthetic.hpp"
#include "mlma/tagger.hpp"

MLMA_NAMESPACE_BEGIN

enum class LrDecay {
  /// lr_e = lr_0 / (1 + rate * e)
  Inverse,
  /// lr_e = lr_0 * rate^e
  Multiplicative,
};

struct LmTrainOptions {
  double learning_rate = 1e-4;
  double clip_norm = 5.0;
  std::size_t epochs = 10;
  /// Approximate tokens per language per batch.
  std::size_t batch_tokens = 256;
  /// Record a no-update pass over the first batch plan as epoch 0.
  bool log_initial = true;
};

struct TaggerTrainOptions {
  double learning_rate = 1e-3;
  std::size_t batch_size = 20;
  std::size_t epochs = 20;
  std::size_t patience = 3;
  double decay = 0.1;
  LrDecay decay_mode = LrDecay::Inverse;
  double clip_norm = 5.0;
  /// Share of the source training data held out when no dev set is given.
  double dev_fraction = 0.1;
};

/// Everything one run needs, read from a UTF-8 key=value file.
struct RunConfig {
  std::vector<std::string> languages;
  /// Monolingual corpus per language.
  std::map<std::string, std::filesystem::path> corpus;
  /// Optional "word v1 ... vd" embedding files per language.
  std::map<std::string, std::filesystem::path> embeddings;
  MlmaConfig model;
  AlignmentConfig align;
  TaggerConfig tagger;
  /// Character encoder switch; unset means on for NER and off for POS.
  std::optional<bool> use_char;
  CombinerMode combiner = CombinerMode::Sws;
  TaskKind task = TaskKind::Ner;
  LmTrainOptions lm;
  TaggerTrainOptions train;
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::string> sources;
  std::string target;
  /// Labeled CoNLL data per source language, an optional source dev file and
  /// the target evaluation file.
  std::map<std::string, std::filesystem::path> train_files;
  std::optional<std::filesystem::path> dev_file;
  std::optional<std::filesystem::path> test_file;
  std::filesystem::path output_dir = "run";

  /// Config with every default and no languages.
  static RunConfig defaults();
  /// Reads keys over the defaults; relative paths resolve against `base`.
  static RunConfig from_key_values(const KeyValues& kv, const std::filesystem::path& base = {});
  static RunConfig load(const std::filesystem::path& path);
  KeyValues to_key_values() const;
  void validate() const;

  /// Tagger config with the character switch resolved for the task.
  TaggerConfig effective_tagger() const;
  std::filesystem::path lm_checkpoint() const { return output_dir / "lm.ckpt"; }
  std::filesystem::path tagger_checkpoint(std::uint64_t seed) const;
};

struct LmEpochStats {
  std::size_t epoch = 0;
  /// Mean per-token bidirectional NLL of each language.
  std::vector<double> nll;
  /// Mean regularizer value per batch.
  double reg = 0.0;
  double loss = 0.0;
  double seconds = 0.0;
};

struct LmTrainResult {
  MlmaModel model;
  std::vector<LmEpochStats> log;
};

using LmEpochCallback = std::function<void(const LmEpochStats&)>;

/// Builds vocabularies, initializes a model and optimizes the alignment
/// objective. `corpora[i]` is the monolingual corpus of cfg.languages[i].
LmTrainResult train_lm(const RunConfig& cfg, const std::vector<std::vector<Sentence>>& corpora, std::uint64_t seed,
                       const LmEpochCallback& on_epoch = {});

/// Continues training an existing model for cfg.lm.epochs epochs.
std::vector<LmEpochStats> train_lm_epochs(MlmaModel& model, const RunConfig& cfg,
                                          const std::vector<std::vector<Sentence>>& corpora, std::uint64_t seed,
                                          const LmEpochCallback& on_epoch = {});

struct TaggerEpochStats {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  /// F1 (NER) or accuracy (POS) on the dev split.
  double dev_score = 0.0;
  bool improved = false;
};

struct TaggerTrainResult {
  CrfTagger tagger;
  std::vector<TaggerEpochStats> log;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  /// Language-model parameter hash, identical before and after training.
  std::uint64_t lm_hash = 0;
};

/// Precomputed frozen representations of a labeled corpus.
std::vector<TaggedInput> prepare_inputs(const MlmaModel& lm, const std::vector<LabeledSentence>& data,
                                        const TagScheme* scheme);

/// Trains a tagger on source-language data with the LM frozen. Sentences
/// must carry a source language; target-language data is refused. Without
/// `dev`, a seeded share of `train` is held out.
TaggerTrainResult train_tagger(const RunConfig& cfg, const MlmaModel& lm, const std::vector<LabeledSentence>& train,
                               const std::vector<LabeledSentence>& dev, std::uint64_t seed);

struct Evaluation {
  SeedMetrics metrics;
  std::vector<std::vector<std::string>> predicted;
};

/// Tags `data` and scores it. Tags outside the tagger's scheme are a
/// contract error.
Evaluation evaluate_tagger(const CrfTagger& tagger, const MlmaModel& lm, const std::vector<LabeledSentence>& data);

/// Scores predictions against the gold tags of `data`.
SeedMetrics score_predictions(TaskKind task, const std::vector<LabeledSentence>& data,
                              const std::vector<std::vector<std::string>>& predicted);

struct Neighbor {
  std::size_t sentence = 0;
  std::size_t position = 0;
  std::string token;
  std::string context;
  double cosine = 0.0;
};

struct NeighborQuery {
  std::size_t sentence = 0;
  std::size_t position = 0;
  std::string context;
  std::vector<Neighbor> neighbors;
};

/// For every occurrence of `query` in the source corpus, the k target token
/// occurrences with the highest cosine similarity of combined
/// representations. Layers are averaged unless a combiner is given.
std::vector<NeighborQuery> nearest_neighbors(const MlmaModel& lm, const std::vector<Sentence>& source,
                                             const std::string& source_language, const std::vector<Sentence>& target,
                                             const std::string& target_language, const std::string& query,
                                             std::size_t k, const LayerCombiner* combiner = nullptr,
                                             std::size_t window = 3);

/// "a b [c] d e" around `position`.
std::string context_window(const Sentence& sentence, std::size_t position, std::size_t radius);

double learning_rate_at(const TaggerTrainOptions& opt, std::size_t epoch);

// File-level commands used by the command-line tool. Each writes its
// outputs under cfg.output_dir and returns what it produced.

LmTrainResult cmd_train_lm(const RunConfig& cfg, std::uint64_t seed);
std::vector<std::filesystem::path> cmd_train_tagger(const RunConfig& cfg);
MetricsReport cmd_evaluate(const RunConfig& cfg);
/// Uses the combiner of `tagger_checkpoint` when given, else layer averages.
std::vector<NeighborQuery> cmd_neighbors(const RunConfig& cfg, const std::filesystem::path& source_corpus,
                                         const std::filesystem::path& target_corpus, const std::string& query,
                                         std::size_t k, const std::optional<std::filesystem::path>& tagger_checkpoint);
/// Writes mono.<lang>.txt, train.<source>.conll, test.<target>.conll,
/// lexicon.tsv and spec.txt under `dir`.
SyntheticPair cmd_synth_gen(const SyntheticPairSpec& spec, std::uint64_t seed, const std::filesystem::path& dir);

MLMA_NAMESPACE_END
