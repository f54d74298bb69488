#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "mlma/corpus.hpp"
#include "test_util.hpp"

using namespace mlma;
using testing_util::TempDir;

TEST(Conll, TwoSentences) {
  const auto s = parse_conll("-DOCSTART- -X- O\n\nJohn NNP B-PER\nruns VBZ O\n\nParis NNP B-LOC\n\n\n", "en");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].tokens, (std::vector<std::string>{"John", "runs"}));
  EXPECT_EQ(s[0].tags, (std::vector<std::string>{"B-PER", "O"}));
  EXPECT_EQ(s[1].tags, (std::vector<std::string>{"B-LOC"}));
  EXPECT_EQ(s[1].language, "en");
}

TEST(Conll, NoTrailingBlankLine) {
  EXPECT_EQ(parse_conll("a X\nb Y").size(), 1u);
}

TEST(Conll, OneColumnLineNamesLine) {
  try {
    parse_conll("a X\nb\n", "", "f.conll");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("f.conll:2"), std::string::npos) << e.what();
  }
}

TEST(Conll, WriteReloadRoundTrip) {
  TempDir dir;
  const auto original = parse_conll("El DA O\nrey NC B-PER\n\ncasa NC B-LOC\n", "es");
  write_conll(dir / "x.conll", original);
  const auto again = load_conll(dir / "x.conll", "es");
  ASSERT_EQ(again.size(), original.size());
  for (std::size_t i = 0; i < again.size(); ++i) {
    EXPECT_EQ(again[i].tokens, original[i].tokens);
    EXPECT_EQ(again[i].tags, original[i].tags);
    EXPECT_EQ(again[i].language, "es");
  }
}

TEST(Sentences, WriteLoadRoundTrip) {
  TempDir dir;
  std::vector<Sentence> s{{"a", "b"}, {"c"}};
  write_sentences(dir / "m.txt", s);
  EXPECT_EQ(load_sentences(dir / "m.txt"), s);
}

TEST(Lowercase, Utf8) {
  EXPECT_EQ(to_lower_utf8("The \xc3\x89T\xc3\x89 \xce\x91\xd0\x96"), "the \xc3\xa9t\xc3\xa9 \xce\xb1\xd0\xb6");
  EXPECT_EQ(utf8_chars("a\xc3\xa9\xe4\xb8\xad").size(), 3u);
}

TEST(Vocabulary, SpecialsFixed) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.token(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(v.token(Vocabulary::kUnk), "<unk>");
  EXPECT_EQ(v.token(Vocabulary::kBos), "<s>");
  EXPECT_EQ(v.token(Vocabulary::kEos), "</s>");
}

TEST(Vocabulary, LargeCapKeepsEverything) {
  const auto v = Vocabulary::build({{"a", "b"}, {"c", "a"}}, 100);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.id("zzz"), Vocabulary::kUnk);
}

TEST(Vocabulary, CaseMerges) {
  const auto v = Vocabulary::build({{"The", "the", "THE", "cat"}}, 100);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.count(v.id("the")), 3u);
  EXPECT_EQ(v.id("The"), v.id("the"));
  for (const auto& t : v.regular_tokens()) EXPECT_EQ(t, to_lower_utf8(t));
}

TEST(Vocabulary, FrequencyThenLexicographic) {
  const auto v = Vocabulary::build({{"b", "a", "c", "c", "d", "d"}}, 6);
  EXPECT_EQ(v.regular_tokens(), (std::vector<std::string>{"c", "d"}));
  const auto w = Vocabulary::build({{"z", "y", "x"}}, 6);
  EXPECT_EQ(w.regular_tokens(), (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(w.hash(), Vocabulary::build({{"x", "z", "y"}}, 6).hash());
  EXPECT_THROW(Vocabulary::build({}, 3), ContractError);
}

TEST(Vocabulary, SaveLoad) {
  TempDir dir;
  const auto v = Vocabulary::build({{"b", "a", "c", "c"}}, 100);
  v.save(dir / "v.txt");
  const auto w = Vocabulary::load(dir / "v.txt");
  EXPECT_EQ(w.regular_tokens(), v.regular_tokens());
  EXPECT_EQ(w.hash(), v.hash());
}

namespace {

std::vector<std::vector<TokenId>> uniform_corpus(std::size_t n, std::size_t len) {
  return std::vector<std::vector<TokenId>>(n, std::vector<TokenId>(len, 5));
}

}  // namespace

TEST(LmBatches, AllTooLongIsConfigError) {
  EXPECT_THROW(lm_batches({uniform_corpus(3, 5), uniform_corpus(3, 200)}, 40, 1), ConfigError);
}

TEST(LmBatches, BudgetArithmetic) {
  const auto plan = lm_batches({uniform_corpus(10, 10), uniform_corpus(10, 10)}, 40, 1);
  ASSERT_FALSE(plan.batches.empty());
  for (const auto& b : plan.batches) {
    ASSERT_EQ(b.sentences.size(), 2u);
    EXPECT_EQ(b.sentences[0].size(), 4u);
    EXPECT_EQ(b.sentences[1].size(), 4u);
  }
}

TEST(LmBatches, SeedDeterminism) {
  Rng rng(3);
  std::vector<std::vector<std::vector<TokenId>>> corpora(2);
  for (auto& c : corpora) {
    for (int i = 0; i < 200; ++i) c.push_back(std::vector<TokenId>(1 + rng.below(30), 4));
  }
  auto flat = [](const BatchPlan& p) {
    std::vector<std::size_t> out;
    for (const auto& b : p.batches) {
      for (const auto& l : b.sentences) out.insert(out.end(), l.begin(), l.end());
    }
    return out;
  };
  EXPECT_EQ(flat(lm_batches(corpora, 64, 9)), flat(lm_batches(corpora, 64, 9)));
  EXPECT_NE(flat(lm_batches(corpora, 64, 9)), flat(lm_batches(corpora, 64, 10)));
}

TEST(LmBatches, EveryBatchHasEveryLanguageWithinOneSentenceOfBudget) {
  Rng rng(4);
  std::vector<std::vector<std::vector<TokenId>>> corpora(3);
  for (std::size_t l = 0; l < 3; ++l) {
    for (int i = 0; i < 100 + 50 * static_cast<int>(l); ++i) corpora[l].push_back(std::vector<TokenId>(1 + rng.below(25), 4));
    corpora[l].push_back(std::vector<TokenId>(250, 4));  // filtered
  }
  const std::size_t budget = 80;
  const auto plan = lm_batches(corpora, budget, 5);
  std::vector<std::set<std::size_t>> seen(3);
  for (const auto& b : plan.batches) {
    ASSERT_EQ(b.sentences.size(), 3u);
    for (std::size_t l = 0; l < 3; ++l) {
      ASSERT_FALSE(b.sentences[l].empty());
      std::size_t tokens = 0, longest = 0;
      for (auto i : b.sentences[l]) {
        EXPECT_LT(corpora[l][i].size(), 200u);
        tokens += corpora[l][i].size();
        longest = std::max(longest, corpora[l][i].size());
        seen[l].insert(i);
      }
      EXPECT_LE(tokens, budget);
      EXPECT_GT(tokens + longest, budget) << "batch short by more than one sentence";
    }
  }
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(seen[l].size(), corpora[l].size() - 1);
}
