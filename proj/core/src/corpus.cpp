#include "mlma/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "mlma/checkpoint.hpp"
#include "mlma/error.hpp"
#include "mlma/rng.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

std::uint32_t lower_code_point(std::uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 32;
  // Latin Extended-A pairs upper/lower case in adjacent code points; the
  // parity of the upper-case member flips at U+0139, U+014A and U+0179.
  if ((cp >= 0x100 && cp <= 0x137) || (cp >= 0x14A && cp <= 0x177)) return cp % 2 == 0 ? cp + 1 : cp;
  if ((cp >= 0x139 && cp <= 0x148) || (cp >= 0x179 && cp <= 0x17E)) return cp % 2 == 1 ? cp + 1 : cp;
  if (cp == 0x178) return 0xFF;
  if (cp >= 0x391 && cp <= 0x3AB && cp != 0x3A2) return cp + 32;
  if (cp >= 0x410 && cp <= 0x42F) return cp + 32;
  if (cp >= 0x400 && cp <= 0x40F) return cp + 80;
  return cp;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Decodes one code point starting at s[i]; malformed or truncated
// sequences decode as a single byte.
std::uint32_t decode_utf8(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t extra = 0;
  std::uint32_t cp = b0;
  if (b0 >= 0xC0 && b0 < 0xE0) {
    extra = 1;
    cp = b0 & 0x1F;
  } else if (b0 >= 0xE0 && b0 < 0xF0) {
    extra = 2;
    cp = b0 & 0x0F;
  } else if (b0 >= 0xF0 && b0 < 0xF8) {
    extra = 3;
    cp = b0 & 0x07;
  }
  if (extra == 0 || i + extra >= s.size()) {
    ++i;
    return b0;
  }
  for (std::size_t k = 1; k <= extra; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      ++i;
      return b0;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += extra + 1;
  return cp;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

std::string to_lower_utf8(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t start = i;
    const std::uint32_t cp = decode_utf8(s, i);
    const std::uint32_t lc = lower_code_point(cp);
    if (lc == cp) {
      out.append(s.substr(start, i - start));
    } else {
      append_utf8(out, lc);
    }
  }
  return out;
}

std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t start = i;
    decode_utf8(s, i);
    out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
  add("<pad>", 0);
  add("<unk>", 0);
  add("<s>", 0);
  add("</s>", 0);
}

void Vocabulary::add(std::string token, std::uint64_t count) {
  index_.emplace(token, tokens_.size());
  tokens_.push_back(std::move(token));
  counts_.push_back(count);
}

Vocabulary Vocabulary::build(const std::vector<Sentence>& corpus, std::size_t cap) {
  if (cap < kNumSpecials) throw ContractError("vocabulary cap must be at least 4");
  std::map<std::string, std::uint64_t> freq;
  for (const auto& s : corpus) {
    for (const auto& t : s) ++freq[to_lower_utf8(t)];
  }
  std::vector<std::pair<std::string, std::uint64_t>> entries(freq.begin(), freq.end());
  // std::map iteration is lexicographic, so a stable sort by count keeps
  // lexicographic order among ties.
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  const std::size_t keep = std::min(entries.size(), cap - kNumSpecials);
  std::uint64_t dropped = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (i < keep && v.index_.find(entries[i].first) == v.index_.end()) {
      v.add(entries[i].first, entries[i].second);
    } else {
      dropped += entries[i].second;
    }
  }
  v.counts_[kUnk] = dropped;
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens, const std::vector<std::uint64_t>& counts) {
  Vocabulary v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (v.index_.count(tokens[i])) throw ParseError("vocabulary: duplicate token '" + tokens[i] + "'");
    v.add(tokens[i], i < counts.size() ? counts[i] : 0);
  }
  return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(to_lower_utf8(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnk); }

std::vector<TokenId> Vocabulary::encode(const Sentence& sentence) const {
  std::vector<TokenId> ids;
  ids.reserve(sentence.size());
  for (const auto& t : sentence) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::regular_tokens() const {
  return std::vector<std::string>(tokens_.begin() + kNumSpecials, tokens_.end());
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xFF;
    h *= 1099511628211ULL;
  }
  return h;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string text;
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) {
    text += tokens_[i] + "\t" + std::to_string(counts_[i]) + "\n";
  }
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::vector<std::uint64_t> counts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected token<TAB>count");
    tokens.push_back(line.substr(0, tab));
    counts.push_back(std::stoull(line.substr(tab + 1)));
  }
  return from_tokens(tokens, counts);
}

// ---------------------------------------------------------------------------

std::vector<LabeledSentence> parse_conll(std::string_view text, const std::string& language,
                                         const std::string& origin) {
  std::vector<LabeledSentence> out;
  LabeledSentence current;
  current.language = language;
  auto flush = [&] {
    if (!current.tokens.empty()) out.push_back(current);
    current.tokens.clear();
    current.tags.clear();
  };
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto cols = split_ws(line);
    if (cols.empty()) {
      flush();
      continue;
    }
    if (cols[0] == "-DOCSTART-") continue;
    if (cols.size() < 2) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": expected at least 2 columns, got '" + line + "'");
    }
    current.tokens.push_back(cols.front());
    current.tags.push_back(cols.back());
  }
  flush();
  return out;
}

std::vector<LabeledSentence> load_conll(const std::filesystem::path& path, const std::string& language) {
  auto bytes = read_file_bytes(path);
  return parse_conll(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), language,
                     path.string());
}

std::string format_conll(const std::vector<LabeledSentence>& sentences) {
  std::string out;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    if (s) out += "\n";
    const auto& ls = sentences[s];
    for (std::size_t i = 0; i < ls.tokens.size(); ++i) out += ls.tokens[i] + " " + ls.tags[i] + "\n";
  }
  return out;
}

void write_conll(const std::filesystem::path& path, const std::vector<LabeledSentence>& sentences) {
  const std::string text = format_conll(sentences);
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<Sentence> load_sentences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) {
    auto toks = split_ws(line);
    if (!toks.empty()) out.push_back(std::move(toks));
  }
  return out;
}

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences) {
  std::string text;
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) text += ' ';
      text += s[i];
    }
    text += '\n';
  }
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------

BatchPlan lm_batches(const std::vector<std::vector<std::vector<TokenId>>>& corpora, std::size_t tokens_per_language,
                     std::uint64_t seed, std::size_t max_length) {
  if (corpora.empty()) throw ConfigError("lm_batches: no languages");
  if (tokens_per_language == 0) throw ConfigError("lm_batches: token budget must be positive");
  Rng rng(seed);
  std::vector<std::vector<std::vector<std::size_t>>> chunks(corpora.size());
  for (std::size_t lang = 0; lang < corpora.size(); ++lang) {
    const auto& corpus = corpora[lang];
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (!corpus[i].empty() && corpus[i].size() < max_length) usable.push_back(i);
    }
    if (usable.empty()) {
      throw ConfigError("lm_batches: language #" + std::to_string(lang) + " has no sentence shorter than " +
                        std::to_string(max_length) + " tokens");
    }
    rng.shuffle(usable);
    std::stable_sort(usable.begin(), usable.end(),
                     [&](std::size_t a, std::size_t b) { return corpus[a].size() < corpus[b].size(); });

    auto& lang_chunks = chunks[lang];
    std::vector<std::size_t> chunk;
    std::size_t tokens = 0;
    for (std::size_t idx : usable) {
      const std::size_t len = corpus[idx].size();
      if (!chunk.empty() && tokens + len > tokens_per_language) {
        lang_chunks.push_back(std::move(chunk));
        chunk.clear();
        tokens = 0;
      }
      chunk.push_back(idx);
      tokens += len;
    }
    // Top up a short final chunk by wrapping around to the shortest sentences.
    for (std::size_t w = 0; w < usable.size() && !lang_chunks.empty(); ++w) {
      const std::size_t len = corpus[usable[w]].size();
      if (tokens + len > tokens_per_language) break;
      if (std::find(chunk.begin(), chunk.end(), usable[w]) != chunk.end()) break;
      chunk.push_back(usable[w]);
      tokens += len;
    }
    lang_chunks.push_back(std::move(chunk));
    rng.shuffle(lang_chunks);
  }
  std::size_t count = 0;
  for (const auto& c : chunks) count = std::max(count, c.size());
  BatchPlan plan;
  plan.batches.resize(count);
  for (std::size_t b = 0; b < count; ++b) {
    plan.batches[b].sentences.resize(corpora.size());
    for (std::size_t lang = 0; lang < corpora.size(); ++lang) {
      plan.batches[b].sentences[lang] = chunks[lang][b % chunks[lang].size()];
    }
  }
  return plan;
}

MLMA_NAMESPACE_END
