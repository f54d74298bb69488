#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mlma/precision.hpp"

MLMA_NAMESPACE_BEGIN

using TokenId = std::size_t;
using Sentence = std::vector<std::string>;

/// Lowercases ASCII, Latin-1, Latin Extended-A, Greek and Cyrillic letters;
/// other code points pass through unchanged.
std::string to_lower_utf8(std::string_view s);

/// Splits UTF-8 text into code points (each returned as its byte sequence).
std::vector<std::string> utf8_chars(std::string_view s);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr std::size_t kNumSpecials = 4;

  /// Specials only.
  Vocabulary();

  /// Keeps the (cap - 4) most frequent lowercased tokens; frequency ties are
  /// broken lexicographically.
  static Vocabulary build(const std::vector<Sentence>& corpus, std::size_t cap);

  /// Rebuilds from tokens listed in id order (specials excluded).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens, const std::vector<std::uint64_t>& counts = {});

  std::size_t size() const { return tokens_.size(); }
  /// Id of the lowercased token, or kUnk.
  TokenId id(std::string_view token) const;
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::uint64_t count(TokenId id) const { return counts_.at(id); }
  static bool is_special(TokenId id) { return id < kNumSpecials; }

  std::vector<TokenId> encode(const Sentence& sentence) const;

  /// Non-special tokens in id order.
  std::vector<std::string> regular_tokens() const;
  std::uint64_t hash() const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  void add(std::string token, std::uint64_t count);

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, TokenId> index_;
};

struct LabeledSentence {
  std::vector<std::string> tokens;
  std::vector<std::string> tags;
  std::string language;
};

/// CoNLL columns: token first, label last, whitespace separated; blank lines
/// separate sentences; "-DOCSTART-" lines are skipped.
std::vector<LabeledSentence> parse_conll(std::string_view text, const std::string& language = {},
                                         const std::string& origin = "<string>");
std::vector<LabeledSentence> load_conll(const std::filesystem::path& path, const std::string& language = {});
std::string format_conll(const std::vector<LabeledSentence>& sentences);
void write_conll(const std::filesystem::path& path, const std::vector<LabeledSentence>& sentences);

/// One sentence per line, whitespace-tokenized; blank lines skipped.
std::vector<Sentence> load_sentences(const std::filesystem::path& path);
void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences);

/// One LM step: for every language, indices into that language's corpus.
struct LmBatch {
  std::vector<std::vector<std::size_t>> sentences;
};

struct BatchPlan {
  std::vector<LmBatch> batches;
};

/// Groups sentences of similar length into batches that each hold about
/// `tokens_per_language` tokens from every language. Sentences with
/// `max_length` or more tokens are dropped. Deterministic in `seed`.
BatchPlan lm_batches(const std::vector<std::vector<std::vector<TokenId>>>& corpora, std::size_t tokens_per_language,
                     std::uint64_t seed, std::size_t max_length = 200);

MLMA_NAMESPACE_END
