#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mlma/crf.hpp"
#include "mlma/gradcheck.hpp"
#include "test_util.hpp"

using namespace mlma;
using testing_util::random_tensor;

namespace {

struct Brute {
  double log_z = 0;
  double best = -1e300;
  std::vector<std::size_t> argmax;
  std::vector<std::vector<std::size_t>> paths;
  std::vector<double> scores;
};

// Enumerates all T^N paths. Ties in the maximum go to the path whose
// reversed tag sequence is lexicographically smallest, which is what
// lowest-index backpointers produce.
Brute enumerate(const Tensor& e, const Tensor& tr) {
  const std::size_t n = e.rows(), t = e.cols();
  Brute b;
  std::vector<std::size_t> path(n, 0);
  double mx = -1e300;
  for (;;) {
    const double s = crf_path_score(e, tr, path);
    b.paths.push_back(path);
    b.scores.push_back(s);
    mx = std::max(mx, s);
    const bool better = s > b.best;
    const bool tie_lower = s == b.best && std::lexicographical_compare(path.rbegin(), path.rend(), b.argmax.rbegin(),
                                                                       b.argmax.rend());
    if (better || tie_lower) {
      b.best = s;
      b.argmax = path;
    }
    std::size_t k = 0;
    while (k < n && ++path[k] == t) path[k++] = 0;
    if (k == n) break;
  }
  double z = 0;
  for (double s : b.scores) z += std::exp(s - mx);
  b.log_z = mx + std::log(z);
  return b;
}

double manual_score(const Tensor& e, const Tensor& tr, const std::vector<std::size_t>& p) {
  const std::size_t t = e.cols();
  double s = tr.at(crf_start(t), p[0]) + tr.at(p.back(), crf_stop(t));
  for (std::size_t k = 0; k < p.size(); ++k) {
    s += e.at(k, p[k]);
    if (k) s += tr.at(p[k - 1], p[k]);
  }
  return s;
}

Tensor integer_tensor(Shape shape, Rng& rng, int range) {
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(static_cast<int>(rng.below(2 * range + 1)) - range);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

TEST(Crf, PathScoreDefinition) {
  Rng rng(1);
  auto e = random_tensor({4, 3}, rng);
  auto tr = random_tensor({5, 5}, rng);
  const std::vector<std::size_t> p{2, 0, 0, 1};
  EXPECT_NEAR(crf_path_score(e, tr, p), manual_score(e, tr, p), 1e-14);
}

TEST(Crf, SingleTagHasZeroNll) {
  Rng rng(2);
  auto e = random_tensor({5, 1}, rng);
  auto tr = random_tensor({3, 3}, rng);
  const std::vector<std::size_t> gold(5, 0);
  EXPECT_EQ(crf_nll(e, tr, gold).item(), 0.0);
  EXPECT_EQ(viterbi(e, tr).path, gold);
}

TEST(Crf, UniformScoresGiveNLogT) {
  for (std::size_t n = 1; n <= 5; ++n) {
    auto e = Tensor::zeros({n, 4});
    auto tr = Tensor::zeros({6, 6});
    const std::vector<std::size_t> gold(n, 3);
    EXPECT_NEAR(crf_log_partition(e, tr), n * std::log(4.0), 1e-12);
    EXPECT_NEAR(crf_nll(e, tr, gold).item(), n * std::log(4.0), 1e-12);
  }
}

TEST(Crf, InvalidInputs) {
  auto e = Tensor::zeros({3, 2});
  auto tr = Tensor::zeros({4, 4});
  const std::vector<std::size_t> bad_tag{0, 2, 1};
  const std::vector<std::size_t> short_path{0, 1};
  EXPECT_THROW(crf_nll(e, tr, bad_tag), ContractError);
  EXPECT_THROW(crf_nll(e, tr, short_path), ContractError);
  EXPECT_THROW(crf_nll(e, Tensor::zeros({3, 3}), short_path), DimensionError);
}

TEST(Crf, SeparableViterbiIsPositionwiseArgmax) {
  auto e = Tensor::from({4, 3}, {5, 0, 0, 0, 0, 5, 0, 5, 0, 5, 0, 0});
  auto tr = Tensor::zeros({5, 5});
  EXPECT_EQ(viterbi(e, tr).path, (std::vector<std::size_t>{0, 2, 1, 0}));
}

TEST(Crf, ExhaustiveOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(5), t = 1 + rng.below(4);
    auto e = random_tensor({n, t}, rng, -3, 3);
    auto tr = random_tensor({t + 2, t + 2}, rng, -3, 3);
    const auto b = enumerate(e, tr);
    const double log_z = crf_log_partition(e, tr);
    EXPECT_NEAR(log_z, b.log_z, 1e-8);
    double mass = 0;
    for (double s : b.scores) mass += std::exp(s - log_z);
    EXPECT_NEAR(mass, 1.0, 1e-8);
    const auto v = viterbi(e, tr);
    EXPECT_EQ(v.path, b.argmax);
    EXPECT_NEAR(v.score, b.best, 1e-12);
    EXPECT_GE(log_z, v.score);
    const auto& sample = b.paths[rng.below(b.paths.size())];
    EXPECT_GE(log_z, crf_path_score(e, tr, sample) - 1e-12);
    EXPECT_GE(crf_nll(e, tr, sample).item(), 0.0);
  }
}

TEST(Crf, TieBreakingOnIntegerScores) {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(5), t = 1 + rng.below(4);
    auto e = integer_tensor({n, t}, rng, 1);
    auto tr = integer_tensor({t + 2, t + 2}, rng, 1);
    const auto b = enumerate(e, tr);
    const auto v = viterbi(e, tr);
    EXPECT_EQ(v.path, b.argmax);
    EXPECT_EQ(v.score, b.best);
  }
  // All-zero scores: every path ties, the lowest index wins everywhere.
  EXPECT_EQ(viterbi(Tensor::zeros({3, 3}), Tensor::zeros({5, 5})).path, (std::vector<std::size_t>{0, 0, 0}));
}

TEST(Crf, SaturatedGoldHasZeroNll) {
  auto e = Tensor::from({3, 2}, {200, 0, 0, 200, 200, 0});
  auto tr = Tensor::zeros({4, 4});
  const std::vector<std::size_t> gold{0, 1, 0};
  EXPECT_NEAR(crf_nll(e, tr, gold).item(), 0.0, 1e-12);
  const std::vector<std::size_t> wrong{0, 1, 1};
  EXPECT_GT(crf_nll(e, tr, wrong).item(), 100.0);
  // Zero-temperature limit: logZ approaches the Viterbi score.
  EXPECT_NEAR(crf_log_partition(e, tr), viterbi(e, tr).score, 1e-12);
}

TEST(Crf, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(5), t = 1 + rng.below(4);
    auto e = random_tensor({n, t}, rng, -2, 2);
    auto tr = random_tensor({t + 2, t + 2}, rng, -2, 2);
    std::vector<std::size_t> gold(n);
    for (auto& g : gold) g = rng.below(t);
    auto r = gradient_check([&] { return crf_nll(e, tr, gold); }, {e, tr});
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}

TEST(Crf, StartAndStopRowsAreUnused) {
  // Transitions into START and out of STOP never enter any path score.
  Rng rng(6);
  auto e = random_tensor({3, 2}, rng);
  auto tr = random_tensor({4, 4}, rng);
  const double before = crf_log_partition(e, tr);
  auto data = tr.mutable_data();
  for (std::size_t i = 0; i < 4; ++i) {
    data[i * 4 + crf_start(2)] = 1e3;
    data[crf_stop(2) * 4 + i] = 1e3;
  }
  EXPECT_EQ(crf_log_partition(e, tr), before);
}
