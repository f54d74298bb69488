#include <gtest/gtest.h>

#include <algorithm>

#include "mlma/clcr.hpp"
#include "mlma/gradcheck.hpp"
#include "test_util.hpp"

using namespace mlma;
using testing_util::random_tensor;

namespace {

MlmaModel small_model() {
  MlmaConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 4;
  c.d_ff = 8;
  c.max_sentence_len = 12;
  return MlmaModel(c, {"en", "es"},
                   {Vocabulary::build({{"the", "cat", "sat", "on", "mat"}}, 100),
                    Vocabulary::build({{"el", "gato", "en", "la"}}, 100)},
                   3);
}

ClcrStack random_stack(Rng& rng, std::size_t tokens, std::size_t layers, std::size_t width) {
  return ClcrStack{random_tensor({tokens, layers * width}, rng, -2, 2, false), layers, width};
}

Real layer_value(const ClcrStack& s, std::size_t k, std::size_t l, std::size_t d) {
  return s.packed.at(k, l * s.width + d);
}

}  // namespace

TEST(Extract, DeterministicAndSentinelFree) {
  const auto m = small_model();
  const Sentence s{"the", "cat", "sat", "zebra"};
  const auto a = extract_clcr(s, "en", m);
  const auto b = extract_clcr(s, "en", m);
  EXPECT_EQ(a.tokens(), 4u);
  EXPECT_EQ(a.layers, 3u);
  EXPECT_EQ(a.width, 8u);
  EXPECT_EQ(testing_util::values(a.packed), testing_util::values(b.packed));
  EXPECT_FALSE(a.packed.requires_grad());
  EXPECT_THROW(extract_clcr(s, "de", m), ContractError);
}

TEST(Extract, MatchesHiddenStackLayout) {
  const auto m = small_model();
  const Sentence s{"el", "gato", "en", "la"};
  const auto stack = extract_clcr(s, "es", m);
  const auto ids = m.vocab(1).encode(s);
  const auto hidden = m.hidden_stack(ids, 1);
  for (std::size_t l = 0; l < 3; ++l) {
    const auto layer = stack.layer(l);
    for (std::size_t i = 0; i < layer.size(); ++i) EXPECT_EQ(layer.data()[i], hidden.layers[l].data()[i]);
  }
  EXPECT_EQ(testing_util::values(pack_stack(hidden).packed), testing_util::values(stack.packed));
}

TEST(Extract, CorpusMatchesSingleSentences) {
  const auto m = small_model();
  std::vector<Sentence> corpus;
  for (int i = 0; i < 40; ++i) corpus.push_back(Sentence(1 + i % 6, i % 2 ? "cat" : "mat"));
  const auto all = extract_corpus(corpus, "en", m);
  ASSERT_EQ(all.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); i += 7) {
    const auto one = extract_clcr(corpus[i], "en", m);
    ASSERT_EQ(one.tokens(), corpus[i].size());
    for (std::size_t j = 0; j < one.packed.size(); ++j) EXPECT_NEAR(one.packed.data()[j], all[i].packed.data()[j], 1e-12);
  }
}

TEST(Extract, NoGradientReachesTheModel) {
  const auto m = small_model();
  for (auto& [n, t] : m.parameters()) const_cast<Tensor&>(t).drop_grad();
  const auto stack = extract_clcr({"the", "cat"}, "en", m);
  Rng rng(1);
  SwsCombiner sws(stack.layers, stack.width, rng);
  backward(sum(sws.combine(stack)));
  for (const auto& [n, t] : m.parameters()) EXPECT_FALSE(t.has_grad()) << n;
  bool nonzero = false;
  for (auto g : sws.w1.grad()) nonzero |= g != 0;
  EXPECT_TRUE(nonzero);
}

TEST(Cache, RoundTrip) {
  testing_util::TempDir dir;
  const auto m = small_model();
  const auto stacks = extract_corpus({{"the"}, {"cat", "sat"}, {"on", "the", "mat"}}, "en", m);
  save_clcr_cache(dir / "c.ckpt", stacks);
  const auto again = load_clcr_cache(dir / "c.ckpt");
  ASSERT_EQ(again.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(again[i].layers, stacks[i].layers);
    EXPECT_EQ(again[i].width, stacks[i].width);
    EXPECT_EQ(testing_util::values(again[i].packed), testing_util::values(stacks[i].packed));
  }
}

TEST(Sws, ZeroLogitsGiveLayerMean) {
  Rng rng(2);
  const auto stack = random_stack(rng, 5, 3, 4);
  SwsCombiner sws(3, 4, rng);
  std::fill(sws.w2.mutable_data().begin(), sws.w2.mutable_data().end(), Real(0));
  const auto out = sws.combine(stack);
  for (std::size_t k = 0; k < 5; ++k) {
    for (std::size_t d = 0; d < 4; ++d) {
      const double mean = (layer_value(stack, k, 0, d) + layer_value(stack, k, 1, d) + layer_value(stack, k, 2, d)) / 3;
      EXPECT_NEAR(out.at(k, d), mean, 1e-15);
    }
  }
}

TEST(Sws, SaturatedLogitSelectsLayer) {
  Rng rng(3);
  const auto stack = random_stack(rng, 4, 3, 4);
  SwsCombiner sws(3, 4, rng);
  std::fill(sws.w2.mutable_data().begin(), sws.w2.mutable_data().end(), Real(0));
  sws.b2.mutable_data()[1] = 1000;
  const auto out = sws.combine(stack);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(out.at(k, d), layer_value(stack, k, 1, d), 1e-6);
  }
}

TEST(Sws, MatchesLoopOracleAndWeightsSumToOne) {
  Rng rng(4);
  const auto stack = random_stack(rng, 6, 3, 5);
  SwsCombiner sws(3, 5, rng);
  for (auto* t : {&sws.b1, &sws.b2}) {
    for (auto& v : t->mutable_data()) v = rng.uniform(-1, 1);
  }
  const auto out = sws.combine(stack);
  for (std::size_t k = 0; k < 6; ++k) {
    // hidden = tanh(x W1 + b1); logits = hidden W2 + b2
    std::vector<double> hidden(5), logits(3);
    for (std::size_t j = 0; j < 5; ++j) {
      double z = sws.b1.data()[j];
      for (std::size_t i = 0; i < 15; ++i) z += stack.packed.at(k, i) * sws.w1.at(i, j);
      hidden[j] = std::tanh(z);
    }
    double mx = -1e300;
    for (std::size_t l = 0; l < 3; ++l) {
      logits[l] = sws.b2.data()[l];
      for (std::size_t j = 0; j < 5; ++j) logits[l] += hidden[j] * sws.w2.at(j, l);
      mx = std::max(mx, logits[l]);
    }
    double z = 0;
    for (auto& x : logits) z += x = std::exp(x - mx);
    double wsum = 0;
    for (std::size_t l = 0; l < 3; ++l) wsum += sws.weights(stack).at(k, l);
    EXPECT_NEAR(wsum, 1.0, 1e-6);
    for (std::size_t d = 0; d < 5; ++d) {
      double oracle = 0;
      for (std::size_t l = 0; l < 3; ++l) oracle += logits[l] / z * layer_value(stack, k, l, d);
      EXPECT_NEAR(out.at(k, d), oracle, 1e-9);
    }
  }
}

TEST(Sws, PermutationCovariant) {
  Rng rng(5);
  const auto stack = random_stack(rng, 5, 3, 4);
  SwsCombiner sws(3, 4, rng);
  const std::size_t perm[] = {3, 0, 4, 1, 2};
  const ClcrStack shuffled{gather_rows(stack.packed, perm), 3, 4};
  const auto a = sws.combine(stack);
  const auto b = sws.combine(shuffled);
  for (std::size_t k = 0; k < 5; ++k) {
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(b.at(k, d), a.at(perm[k], d), 1e-14);
  }
}

TEST(Sws, LayerMismatchIsContractError) {
  Rng rng(6);
  SwsCombiner sws(3, 4, rng);
  EXPECT_THROW(sws.combine(random_stack(rng, 2, 2, 4)), ContractError);
  FwsCombiner fws(3, 4);
  EXPECT_THROW(fws.combine(random_stack(rng, 2, 3, 5)), ContractError);
}

TEST(Fws, ZeroMatrixGivesDimensionwiseMean) {
  Rng rng(7);
  const auto stack = random_stack(rng, 3, 4, 2);
  FwsCombiner fws(4, 2);
  const auto out = fws.combine(stack);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t d = 0; d < 2; ++d) {
      double mean = 0;
      for (std::size_t l = 0; l < 4; ++l) mean += layer_value(stack, k, l, d) / 4;
      EXPECT_NEAR(out.at(k, d), mean, 1e-15);
    }
  }
}

TEST(Fws, ConvexColumnsAndLoopOracle) {
  Rng rng(8);
  const auto stack = random_stack(rng, 6, 3, 5);
  FwsCombiner fws(3, 5);
  for (auto& v : fws.f.mutable_data()) v = rng.uniform(-3, 3);
  const auto w = fws.column_weights();
  for (std::size_t d = 0; d < 5; ++d) {
    double s = 0;
    for (std::size_t l = 0; l < 3; ++l) s += w.at(l, d);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  const auto out = fws.combine(stack);
  for (std::size_t k = 0; k < 6; ++k) {
    for (std::size_t d = 0; d < 5; ++d) {
      double z = 0, oracle = 0, lo = 1e300, hi = -1e300;
      for (std::size_t l = 0; l < 3; ++l) z += std::exp(fws.f.at(l, d));
      for (std::size_t l = 0; l < 3; ++l) {
        const double h = layer_value(stack, k, l, d);
        oracle += std::exp(fws.f.at(l, d)) / z * h;
        lo = std::min(lo, h);
        hi = std::max(hi, h);
      }
      EXPECT_NEAR(out.at(k, d), oracle, 1e-9);
      EXPECT_GE(out.at(k, d), lo - 1e-12);
      EXPECT_LE(out.at(k, d), hi + 1e-12);
    }
  }
}

TEST(Combiners, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  const auto stack = random_stack(rng, 4, 3, 4);
  SwsCombiner sws(3, 4, rng);
  FwsCombiner fws(3, 4);
  for (auto& v : fws.f.mutable_data()) v = rng.uniform(-1, 1);
  auto w = random_tensor({4, 4}, rng, -1, 1, false);
  auto r1 = gradient_check([&] { return testing_util::weighted_sum(sws.combine(stack), w); }, {sws.w1, sws.b1, sws.w2, sws.b2});
  EXPECT_LT(r1.max_relative_error, 1e-6);
  auto r2 = gradient_check([&] { return testing_util::weighted_sum(fws.combine(stack), w); }, {fws.f});
  EXPECT_LT(r2.max_relative_error, 1e-6);
}

TEST(Combiners, ModeNames) {
  EXPECT_EQ(parse_combiner_mode("sws"), CombinerMode::Sws);
  EXPECT_EQ(to_string(CombinerMode::Fws), "fws");
  EXPECT_THROW(parse_combiner_mode("avg"), ConfigError);
}
