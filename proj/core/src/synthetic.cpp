#include "mlma/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mlma/error.hpp"
#include "mlma/rng.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

const char* const kTagNames[] = {"NOUN", "VERB", "ADJ", "ADV", "DET", "ADP",
                                 "PRON", "NUM",  "CONJ", "PRT", "X",   "PUNCT"};

std::string random_word(Rng& rng) {
  static const std::string consonants = "ptkbdgmnslrfvzh";
  static const std::string vowels = "aeiou";
  const std::size_t syllables = 2 + rng.below(2);
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += consonants[rng.below(consonants.size())];
    w += vowels[rng.below(vowels.size())];
    if (rng.uniform() < 0.3) w += consonants[rng.below(consonants.size())];
  }
  return w;
}

std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    os << v[i];
  }
  return os.str();
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

struct Process {
  const std::vector<std::vector<double>>& transitions;
  const std::vector<double>& start;
  const std::vector<std::vector<std::size_t>>& tag_lexemes;
  const std::vector<double>& zipf;
  std::size_t min_length;
  std::size_t max_length;

  // Returns (lexeme, tag) pairs.
  std::vector<std::pair<std::size_t, std::size_t>> sample(Rng& rng) const {
    const std::size_t len = min_length + rng.below(max_length - min_length + 1);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(len);
    std::size_t tag = rng.categorical(start);
    for (std::size_t k = 0; k < len; ++k) {
      if (k > 0) tag = rng.categorical(transitions[tag]);
      const auto& lex = tag_lexemes[tag];
      out.emplace_back(lex[rng.categorical(zipf)], tag);
    }
    return out;
  }
};

}  // namespace

void SyntheticPairSpec::validate() const {
  if (num_tags == 0 || lexemes_per_tag == 0) throw ConfigError("synthetic spec: tag and lexeme counts must be positive");
  if (!(shared_fraction >= 0.0 && shared_fraction <= 1.0)) throw ConfigError("synthetic spec: shared fraction outside [0,1]");
  if (min_length == 0 || min_length > max_length) throw ConfigError("synthetic spec: invalid sentence length range");
  if (preferred_successors == 0 || preferred_successors > num_tags) {
    throw ConfigError("synthetic spec: preferred successors must lie in [1, num_tags]");
  }
  if (!transitions.empty()) {
    if (transitions.size() != num_tags) throw ConfigError("synthetic spec: transition matrix needs num_tags rows");
    for (std::size_t r = 0; r < transitions.size(); ++r) {
      const auto& row = transitions[r];
      if (row.size() != num_tags) throw ConfigError("synthetic spec: transition row " + std::to_string(r) + " has wrong width");
      double total = 0.0;
      for (double p : row) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("synthetic spec: negative or non-finite transition");
        total += p;
      }
      if (total <= 0.0) throw ConfigError("synthetic spec: transition row " + std::to_string(r) + " sums to zero");
    }
  }
  if (!start.empty()) {
    if (start.size() != num_tags) throw ConfigError("synthetic spec: start distribution needs num_tags entries");
    if (std::accumulate(start.begin(), start.end(), 0.0) <= 0.0) throw ConfigError("synthetic spec: start sums to zero");
  }
}

KeyValues SyntheticPairSpec::to_key_values() const {
  KeyValues kv;
  kv["num_tags"] = std::to_string(num_tags);
  kv["lexemes_per_tag"] = std::to_string(lexemes_per_tag);
  std::ostringstream rho;
  rho.precision(17);
  rho << shared_fraction;
  kv["shared_fraction"] = rho.str();
  kv["identical_renderings"] = identical_renderings ? "true" : "false";
  kv["mono_sentences"] = std::to_string(mono_sentences);
  kv["labeled_train"] = std::to_string(labeled_train);
  kv["labeled_test"] = std::to_string(labeled_test);
  kv["min_length"] = std::to_string(min_length);
  kv["max_length"] = std::to_string(max_length);
  kv["zipf_exponent"] = join_doubles({zipf_exponent});
  kv["preferred_successors"] = std::to_string(preferred_successors);
  kv["preferred_mass"] = join_doubles({preferred_mass});
  for (std::size_t r = 0; r < transitions.size(); ++r) kv["transition." + std::to_string(r)] = join_doubles(transitions[r]);
  if (!start.empty()) kv["start"] = join_doubles(start);
  return kv;
}

SyntheticPairSpec SyntheticPairSpec::from_key_values(const KeyValues& kv) {
  SyntheticPairSpec s;
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  try {
    if (auto v = get("num_tags")) s.num_tags = std::stoul(*v);
    if (auto v = get("lexemes_per_tag")) s.lexemes_per_tag = std::stoul(*v);
    if (auto v = get("shared_fraction")) s.shared_fraction = std::stod(*v);
    if (auto v = get("identical_renderings")) s.identical_renderings = (*v == "true" || *v == "1");
    if (auto v = get("mono_sentences")) s.mono_sentences = std::stoul(*v);
    if (auto v = get("labeled_train")) s.labeled_train = std::stoul(*v);
    if (auto v = get("labeled_test")) s.labeled_test = std::stoul(*v);
    if (auto v = get("min_length")) s.min_length = std::stoul(*v);
    if (auto v = get("max_length")) s.max_length = std::stoul(*v);
    if (auto v = get("zipf_exponent")) s.zipf_exponent = std::stod(*v);
    if (auto v = get("preferred_successors")) s.preferred_successors = std::stoul(*v);
    if (auto v = get("preferred_mass")) s.preferred_mass = std::stod(*v);
    for (std::size_t r = 0;; ++r) {
      auto it = kv.find("transition." + std::to_string(r));
      if (it == kv.end()) break;
      s.transitions.push_back(split_doubles(it->second));
    }
    if (auto v = get("start")) s.start = split_doubles(*v);
  } catch (const std::logic_error& e) {
    throw ConfigError(std::string("synthetic spec: malformed number (") + e.what() + ")");
  }
  s.validate();
  return s;
}

long SyntheticPair::lexeme_of_source(const std::string& word) const {
  auto it = source_index.find(word);
  return it == source_index.end() ? -1 : static_cast<long>(it->second);
}

long SyntheticPair::lexeme_of_target(const std::string& word) const {
  auto it = target_index.find(word);
  return it == target_index.end() ? -1 : static_cast<long>(it->second);
}

SyntheticPair gen_synthetic_pair(const SyntheticPairSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Rng structure = rng.fork();
  Rng lexicon_rng = rng.fork();
  Rng source_rng = rng.fork();
  Rng target_rng = rng.fork();
  Rng train_rng = rng.fork();
  Rng test_rng = rng.fork();

  SyntheticPair out;
  const std::size_t tags = spec.num_tags;
  for (std::size_t t = 0; t < tags; ++t) {
    out.tag_names.push_back(t < std::size(kTagNames) ? kTagNames[t] : "T" + std::to_string(t));
  }

  // Tag dynamics: each tag strongly prefers a few successors.
  if (spec.transitions.empty()) {
    out.transitions.assign(tags, std::vector<double>(tags, 0.0));
    for (std::size_t r = 0; r < tags; ++r) {
      std::vector<std::size_t> order(tags);
      std::iota(order.begin(), order.end(), std::size_t{0});
      structure.shuffle(order);
      const std::size_t pref = spec.preferred_successors;
      std::vector<double> w(pref);
      double wsum = 0.0;
      for (auto& x : w) {
        x = 0.5 + structure.uniform();
        wsum += x;
      }
      for (std::size_t c = 0; c < tags; ++c) out.transitions[r][c] = (1.0 - spec.preferred_mass) / static_cast<double>(tags);
      for (std::size_t k = 0; k < pref; ++k) out.transitions[r][order[k]] += spec.preferred_mass * w[k] / wsum;
    }
  } else {
    out.transitions = spec.transitions;
    for (auto& row : out.transitions) {
      const double s = std::accumulate(row.begin(), row.end(), 0.0);
      for (auto& p : row) p /= s;
    }
  }
  if (spec.start.empty()) {
    out.start.assign(tags, 0.0);
    double s = 0.0;
    for (auto& p : out.start) {
      p = 0.2 + structure.uniform();
      s += p;
    }
    for (auto& p : out.start) p /= s;
  } else {
    out.start = spec.start;
    const double s = std::accumulate(out.start.begin(), out.start.end(), 0.0);
    for (auto& p : out.start) p /= s;
  }

  // Lexicon: lexeme i belongs to tag i / lexemes_per_tag.
  const std::size_t lexemes = tags * spec.lexemes_per_tag;
  std::vector<std::vector<std::size_t>> tag_lexemes(tags);
  out.lexeme_tag.resize(lexemes);
  for (std::size_t i = 0; i < lexemes; ++i) {
    out.lexeme_tag[i] = i / spec.lexemes_per_tag;
    tag_lexemes[out.lexeme_tag[i]].push_back(i);
  }
  std::unordered_set<std::string> used;
  auto fresh = [&] {
    for (;;) {
      std::string w = random_word(lexicon_rng);
      if (used.insert(w).second) return w;
    }
  };
  out.lexicon_source.resize(lexemes);
  out.lexicon_target.resize(lexemes);
  for (std::size_t i = 0; i < lexemes; ++i) out.lexicon_source[i] = fresh();
  std::vector<bool> shared(lexemes, spec.identical_renderings);
  if (!spec.identical_renderings) {
    std::vector<std::size_t> order(lexemes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    lexicon_rng.shuffle(order);
    const auto n_shared = static_cast<std::size_t>(std::llround(spec.shared_fraction * static_cast<double>(lexemes)));
    for (std::size_t k = 0; k < n_shared && k < lexemes; ++k) shared[order[k]] = true;
  }
  for (std::size_t i = 0; i < lexemes; ++i) out.lexicon_target[i] = shared[i] ? out.lexicon_source[i] : fresh();
  for (std::size_t i = 0; i < lexemes; ++i) {
    out.source_index.emplace(out.lexicon_source[i], i);
    out.target_index.emplace(out.lexicon_target[i], i);
  }

  std::vector<double> zipf(spec.lexemes_per_tag);
  for (std::size_t r = 0; r < zipf.size(); ++r) zipf[r] = 1.0 / std::pow(static_cast<double>(r + 1), spec.zipf_exponent);

  const Process process{out.transitions, out.start, tag_lexemes, zipf, spec.min_length, spec.max_length};
  auto render = [&](const std::vector<std::string>& lexicon, Rng& r, std::size_t count, std::vector<Sentence>& dst) {
    dst.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
      Sentence sent;
      for (auto [lex, tag] : process.sample(r)) sent.push_back(lexicon[lex]);
      dst.push_back(std::move(sent));
    }
  };
  auto render_labeled = [&](const std::vector<std::string>& lexicon, Rng& r, std::size_t count,
                            const std::string& language, std::vector<LabeledSentence>& dst) {
    dst.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
      LabeledSentence ls;
      ls.language = language;
      for (auto [lex, tag] : process.sample(r)) {
        ls.tokens.push_back(lexicon[lex]);
        ls.tags.push_back(out.tag_names[tag]);
      }
      dst.push_back(std::move(ls));
    }
  };
  render(out.lexicon_source, source_rng, spec.mono_sentences, out.mono_source);
  render(out.lexicon_target, target_rng, spec.mono_sentences, out.mono_target);
  render_labeled(out.lexicon_source, train_rng, spec.labeled_train, "src", out.train_source);
  render_labeled(out.lexicon_target, test_rng, spec.labeled_test, "tgt", out.test_target);
  return out;
}

std::vector<std::vector<double>> empirical_transitions(const std::vector<LabeledSentence>& corpus,
                                                       const std::vector<std::string>& tag_names) {
  const std::size_t n = tag_names.size();
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) index.emplace(tag_names[i], i);
  std::vector<std::vector<double>> counts(n, std::vector<double>(n, 0.0));
  for (const auto& s : corpus) {
    for (std::size_t k = 1; k < s.tags.size(); ++k) counts[index.at(s.tags[k - 1])][index.at(s.tags[k])] += 1.0;
  }
  for (auto& row : counts) {
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    if (total > 0) {
      for (auto& c : row) c /= total;
    }
  }
  return counts;
}

MLMA_NAMESPACE_END
