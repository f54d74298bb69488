#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mlma/checkpoint.hpp"
#include "mlma/clcr.hpp"
#include "mlma/corpus.hpp"
#include "mlma/rng.hpp"
#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

enum class TaskKind { Ner, Pos };

TaskKind parse_task(const std::string& s);
std::string to_string(TaskKind task);

/// Tag inventory with a fixed index order.
class TagScheme {
 public:
  TagScheme() = default;
  TagScheme(TaskKind task, std::vector<std::string> tags);
  /// Sorted set of tags seen in the corpus.
  static TagScheme from_corpus(TaskKind task, const std::vector<LabeledSentence>& corpus);

  TaskKind task() const { return task_; }
  std::size_t size() const { return tags_.size(); }
  const std::vector<std::string>& tags() const { return tags_; }
  const std::string& tag(std::size_t i) const { return tags_.at(i); }
  bool contains(const std::string& tag) const { return index_.count(tag) != 0; }
  /// Throws ContractError for a tag outside the scheme.
  std::size_t index(const std::string& tag) const;
  std::vector<std::size_t> encode(const std::vector<std::string>& tags) const;
  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const;

 private:
  TaskKind task_ = TaskKind::Ner;
  std::vector<std::string> tags_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TaggerConfig {
  std::size_t word_hidden = 64;
  std::size_t char_hidden = 16;
  std::size_t char_embedding = 16;
  double dropout = 0.5;
  bool use_char = true;

  /// Word LSTM 300, char LSTM 100, char embedding 100, dropout 0.5.
  static TaggerConfig full();
  static TaggerConfig desk();

  std::size_t char_features() const { return use_char ? 2 * char_hidden : 0; }
  void validate() const;
  void write(KeyValues& kv, const std::string& prefix) const;
  static TaggerConfig read(const KeyValues& kv, const std::string& prefix, TaggerConfig defaults);
};

/// Characters (UTF-8 code points) seen in training words.
class CharVocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  CharVocabulary();
  static CharVocabulary build(const std::vector<LabeledSentence>& corpus);
  static CharVocabulary from_chars(const std::vector<std::string>& chars);

  std::size_t size() const { return chars_.size(); }
  std::size_t id(const std::string& ch) const;
  std::vector<std::size_t> encode(const std::string& word) const;
  /// Characters after the two reserved entries.
  std::vector<std::string> regular_chars() const;

 private:
  std::vector<std::string> chars_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Unidirectional LSTM parameters. Gate blocks are ordered
/// [input, forget, candidate, output].
struct LstmParams {
  Tensor w_x;  // in x 4h
  Tensor w_h;  // h x 4h
  Tensor b;    // 1 x 4h

  static LstmParams create(std::size_t input, std::size_t hidden, Rng& rng);
  std::size_t hidden() const { return w_h.rows(); }
  void append_named(NamedTensors& out, const std::string& prefix) const;
};

struct LstmRun {
  /// Time-major outputs, (steps * group) x h; row t * group + g.
  Tensor outputs;
  /// State after the last processed step, group x h.
  Tensor final_h;
};

/// Runs `group` equal-length sequences packed time-major in `x`
/// ((steps * group) x in) from zero state. With `reverse`, steps run from
/// the end; outputs stay in input order.
LstmRun run_lstm(const LstmParams& p, const Tensor& x, std::size_t steps, std::size_t group, bool reverse);

/// One tagger input: the frozen stack and the surface tokens, plus gold tag
/// indices when labeled.
struct TaggedInput {
  ClcrStack clcr;
  Sentence tokens;
  std::vector<std::size_t> gold;
};

/// Bi-LSTM-CRF over x_k = combine(CLCR)_k | charLSTM(word_k).
class CrfTagger {
 public:
  CrfTagger(TaggerConfig config, TagScheme scheme, CharVocabulary chars, CombinerMode combiner,
            std::size_t clcr_layers, std::size_t clcr_width, std::uint64_t seed);

  const TaggerConfig& config() const { return config_; }
  const TagScheme& scheme() const { return scheme_; }
  const CharVocabulary& chars() const { return chars_; }
  const LayerCombiner& combiner() const { return *combiner_; }
  const Tensor& transitions() const { return transitions_; }

  /// Bi-LSTM char features of each word, words x (2 * char_hidden). Zero rows
  /// for empty words and for every word when the encoder is disabled; the
  /// emissions then skip the block entirely.
  Tensor char_encode(const std::vector<std::string>& words, bool training, Rng* rng) const;

  /// Emission scores of each input, each N x T.
  std::vector<Tensor> emissions(std::span<const TaggedInput* const> inputs, bool training, Rng* rng) const;

  /// Summed CRF negative log-likelihood of the gold paths.
  Tensor loss(std::span<const TaggedInput* const> inputs, bool training, Rng* rng) const;

  /// Viterbi tag indices per input.
  std::vector<std::vector<std::size_t>> predict(std::span<const TaggedInput* const> inputs) const;

  NamedTensors parameters() const;
  std::vector<Tensor> parameter_list() const;

  /// Checkpoint plus ".meta" sidecar holding config, scheme and characters.
  void save(const std::filesystem::path& checkpoint, const KeyValues& extra = {}) const;
  static CrfTagger load(const std::filesystem::path& checkpoint, KeyValues* meta = nullptr);

 private:
  TaggerConfig config_;
  TagScheme scheme_;
  CharVocabulary chars_;
  std::uint64_t seed_;
  std::size_t clcr_layers_, clcr_width_;
  std::shared_ptr<LayerCombiner> combiner_;
  Tensor char_table_;
  LstmParams char_fwd_, char_bwd_;
  LstmParams word_fwd_, word_bwd_;
  Tensor proj_w_, proj_b_;
  Tensor transitions_;
};

MLMA_NAMESPACE_END
