#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "mlma/alignment.hpp"
#include "mlma/synthetic.hpp"
#include "test_util.hpp"

using namespace mlma;

namespace {

SyntheticPairSpec small_spec(double rho) {
  SyntheticPairSpec s;
  s.shared_fraction = rho;
  s.mono_sentences = 300;
  s.labeled_train = 50;
  s.labeled_test = 50;
  return s;
}

std::map<long, double> lexeme_frequencies(const SyntheticPair& p, bool source) {
  std::map<long, double> f;
  double total = 0;
  for (const auto& s : source ? p.mono_source : p.mono_target) {
    for (const auto& w : s) {
      f[source ? p.lexeme_of_source(w) : p.lexeme_of_target(w)] += 1;
      total += 1;
    }
  }
  for (auto& [k, v] : f) v /= total;
  return f;
}

}  // namespace

TEST(Synthetic, NoSharingGivesEmptyIdenticalSet) {
  const auto p = gen_synthetic_pair(small_spec(0.0), 1);
  const auto iden = identical_set(Vocabulary::build(p.mono_source, 2000), Vocabulary::build(p.mono_target, 2000));
  EXPECT_TRUE(iden.empty());
}

TEST(Synthetic, SharedFractionControlsSharedStrings) {
  const auto spec = small_spec(0.3);
  const auto p = gen_synthetic_pair(spec, 1);
  std::size_t shared = 0;
  for (std::size_t i = 0; i < p.lexicon_source.size(); ++i) shared += p.lexicon_source[i] == p.lexicon_target[i];
  EXPECT_EQ(shared, static_cast<std::size_t>(std::llround(0.3 * p.lexicon_source.size())));
}

TEST(Synthetic, RenderingsAreInjective) {
  const auto p = gen_synthetic_pair(small_spec(0.2), 2);
  EXPECT_EQ(p.source_index.size(), p.lexicon_source.size());
  EXPECT_EQ(p.target_index.size(), p.lexicon_target.size());
}

TEST(Synthetic, IdenticalRenderingsAreDistributionallyIdentical) {
  auto spec = small_spec(0.0);
  spec.identical_renderings = true;
  spec.mono_sentences = 5000;
  const auto p = gen_synthetic_pair(spec, 3);
  EXPECT_EQ(p.lexicon_source, p.lexicon_target);
  const auto fs = lexeme_frequencies(p, true);
  const auto ft = lexeme_frequencies(p, false);
  double tv = 0;
  for (long i = 0; i < static_cast<long>(p.lexicon_source.size()); ++i) {
    const double a = fs.count(i) ? fs.at(i) : 0.0;
    const double b = ft.count(i) ? ft.at(i) : 0.0;
    tv += std::abs(a - b);
  }
  EXPECT_LT(tv / 2, 0.05);
}

TEST(Synthetic, ByteIdenticalUnderSeed) {
  testing_util::TempDir a, b;
  const auto spec = small_spec(0.1);
  const auto p = gen_synthetic_pair(spec, 42);
  const auto q = gen_synthetic_pair(spec, 42);
  write_sentences(a / "s.txt", p.mono_source);
  write_sentences(b / "s.txt", q.mono_source);
  write_conll(a / "t.conll", p.test_target);
  write_conll(b / "t.conll", q.test_target);
  EXPECT_EQ(read_file_bytes(a / "s.txt"), read_file_bytes(b / "s.txt"));
  EXPECT_EQ(read_file_bytes(a / "t.conll"), read_file_bytes(b / "t.conll"));
  EXPECT_NE(gen_synthetic_pair(spec, 43).mono_source, p.mono_source);
}

TEST(Synthetic, DegenerateTransitionRowIsRejected) {
  auto spec = small_spec(0.1);
  spec.num_tags = 2;
  spec.preferred_successors = 1;
  spec.transitions = {{1, 0}, {0, 0}};
  EXPECT_THROW(gen_synthetic_pair(spec, 1), ConfigError);
}

TEST(Synthetic, LabelsMatchLexemeTags) {
  const auto p = gen_synthetic_pair(small_spec(0.1), 5);
  for (const auto& s : p.train_source) {
    EXPECT_EQ(s.language, "src");
    for (std::size_t k = 0; k < s.tokens.size(); ++k) {
      const long lex = p.lexeme_of_source(s.tokens[k]);
      ASSERT_GE(lex, 0);
      EXPECT_EQ(p.tag_names[p.lexeme_tag[lex]], s.tags[k]);
    }
  }
  for (const auto& s : p.test_target) {
    EXPECT_EQ(s.language, "tgt");
    for (std::size_t k = 0; k < s.tokens.size(); ++k) {
      const long lex = p.lexeme_of_target(s.tokens[k]);
      ASSERT_GE(lex, 0);
      EXPECT_EQ(p.tag_names[p.lexeme_tag[lex]], s.tags[k]);
    }
  }
}

TEST(Synthetic, TransitionFrequenciesConverge) {
  SyntheticPairSpec spec;
  spec.mono_sentences = 10;
  spec.labeled_train = 10000;
  spec.labeled_test = 10;
  const auto p = gen_synthetic_pair(spec, 6);
  const auto emp = empirical_transitions(p.train_source, p.tag_names);
  for (std::size_t r = 0; r < spec.num_tags; ++r) {
    double tv = 0;
    for (std::size_t c = 0; c < spec.num_tags; ++c) tv += std::abs(emp[r][c] - p.transitions[r][c]);
    EXPECT_LT(tv / 2, 0.05) << "row " << r;
  }
}

TEST(Synthetic, SpecKeyValueRoundTrip) {
  auto spec = small_spec(0.25);
  spec.num_tags = 3;
  spec.preferred_successors = 1;
  spec.transitions = {{0.5, 0.5, 0}, {0, 0.5, 0.5}, {0.5, 0, 0.5}};
  const auto again = SyntheticPairSpec::from_key_values(spec.to_key_values());
  EXPECT_EQ(again.to_key_values(), spec.to_key_values());
  EXPECT_EQ(again.transitions, spec.transitions);
}
