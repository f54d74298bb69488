#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mlma/gradcheck.hpp"
#include "mlma/ops.hpp"
#include "test_util.hpp"

using namespace mlma;
using testing_util::random_tensor;
using testing_util::weighted_sum;

namespace {

constexpr int kPoints = 100;
constexpr double kTol = 1e-4;

// Runs a gradient check of `build(inputs)` weighted by a fixed random tensor
// at kPoints random input draws.
void check_primitive(const std::vector<Shape>& shapes, const std::function<Tensor(std::vector<Tensor>&)>& build,
                     double lo = -1.0, double hi = 1.0) {
  for (int point = 0; point < kPoints; ++point) {
    Rng rng(1000 + point);
    std::vector<Tensor> inputs;
    for (const auto& s : shapes) inputs.push_back(random_tensor(s, rng, lo, hi));
    Tensor out;
    {
      NoGradGuard guard;
      out = build(inputs);
    }
    auto w = random_tensor(out.shape(), rng, -1, 1, false);
    auto r = gradient_check([&] { return weighted_sum(build(inputs), w); }, inputs);
    ASSERT_LT(r.max_relative_error, kTol) << "point " << point << " param " << r.worst_param << " index "
                                          << r.worst_index << " analytic " << r.worst_analytic << " numeric "
                                          << r.worst_numeric;
  }
}

}  // namespace

TEST(Matmul, IdentityAndHandProduct) {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(testing_util::values(matmul(eye, b)), (std::vector<double>{5, 6, 7, 8}));
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto ones = Tensor::from({2, 1}, {1, 1});
  EXPECT_EQ(testing_util::values(matmul(a, ones)), (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, FiniteDifferences4x3By3x2) {
  Rng rng(11);
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({3, 2}, rng);
  auto w = random_tensor({4, 2}, rng, -1, 1, false);
  auto r = gradient_check([&] { return weighted_sum(matmul(a, b), w); }, {a, b});
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(Matmul, TransposedRightOperand) {
  Rng rng(12);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({5, 4}, rng);
  NoGradGuard guard;
  auto direct = matmul(a, b, Transpose::Yes);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(j, k);
      EXPECT_NEAR(direct.at(i, j), s, 1e-12);
    }
  }
}

TEST(Softmax, ZeroRowIsUniform) {
  auto p = softmax(Tensor::zeros({1, 4}));
  for (auto v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 7}, rng, -5, 5, false);
    const double c = rng.uniform(-100, 100);
    auto p = softmax(x);
    auto q = softmax(add_scalar(x, c));
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p.data()[i], q.data()[i], 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += p.at(r, j);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, LargeGapDoesNotOverflow) {
  auto p = softmax(Tensor::from({1, 2}, {1000, 0}));
  // log-domain oracle: log p1 = -1000 - log(1 + e^-1000) underflows to 0 in double.
  const double log_p1 = -1000.0 - std::log1p(std::exp(-1000.0));
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(p.data()[1], std::exp(log_p1));
  EXPECT_EQ(p.data()[1], 0.0);
  EXPECT_TRUE(std::isfinite(p.data()[0]));
}

TEST(Softmax, ColumnAxis) {
  auto p = softmax(Tensor::from({2, 2}, {0, 1, 0, 1}), 0);
  for (auto v : p.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  EXPECT_THROW(softmax(Tensor::from({1, 2}, {NAN, 0})), NumericError);
  EXPECT_THROW(softmax(Tensor::from({1, 2}, {INFINITY, 0})), NumericError);
}

TEST(CrossEntropy, IgnoredRowsContributeNothing) {
  auto z = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  const std::int64_t t[] = {2, kIgnoreTarget};
  auto loss = cross_entropy(z, t);
  const double expected = -(3 - std::log(std::exp(1) + std::exp(2) + std::exp(3)));
  EXPECT_NEAR(loss.item(), expected, 1e-12);
  backward(loss);
  for (std::size_t j = 3; j < 6; ++j) EXPECT_EQ(z.grad()[j], 0);
}

TEST(LayerNorm, NormalizesRows) {
  Rng rng(2);
  auto x = random_tensor({4, 8}, rng, -3, 3, false);
  auto y = layer_norm(x, Tensor::full({1, 8}, 1), Tensor::zeros({1, 8}));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 8; ++j) m += y.at(r, j);
    m /= 8;
    for (std::size_t j = 0; j < 8; ++j) v += (y.at(r, j) - m) * (y.at(r, j) - m);
    EXPECT_NEAR(m, 0, 1e-12);
    EXPECT_NEAR(v / 8, 1, 1e-3);
  }
}

TEST(Dropout, InvertedScalingAndEvalIdentity) {
  Rng rng(1);
  auto x = Tensor::full({100, 100}, 1);
  auto eval = dropout(x, 0.5, rng, false);
  EXPECT_TRUE(eval.same_node(x));
  auto y = dropout(x, 0.5, rng, true);
  std::size_t kept = 0;
  for (auto v : y.data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_NEAR(kept / 10000.0, 0.5, 0.03);
}

TEST(Attention, SegmentsDoNotInteract) {
  Rng rng(9);
  auto q = random_tensor({6, 4}, rng, -1, 1, false);
  auto k = random_tensor({6, 4}, rng, -1, 1, false);
  auto v = random_tensor({6, 4}, rng, -1, 1, false);
  const Segment both[] = {{0, 3}, {3, 3}};
  const Segment first[] = {{0, 3}};
  auto joint = masked_attention(q, k, v, both, 2, AttentionMask::Causal);
  auto alone = masked_attention(slice_rows(q, 0, 3), slice_rows(k, 0, 3), slice_rows(v, 0, 3), first, 2,
                                AttentionMask::Causal);
  for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_EQ(joint.data()[i], alone.data()[i]);
  // The first causal row sees only itself.
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(joint.at(0, j), v.at(0, j), 1e-15);
}

TEST(Attention, ReverseCausalLastRowSeesOnlyItself) {
  Rng rng(10);
  auto q = random_tensor({4, 4}, rng, -1, 1, false);
  auto k = random_tensor({4, 4}, rng, -1, 1, false);
  auto v = random_tensor({4, 4}, rng, -1, 1, false);
  const Segment seg[] = {{0, 4}};
  auto out = masked_attention(q, k, v, seg, 1, AttentionMask::ReverseCausal);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(3, j), v.at(3, j), 1e-15);
}

TEST(WeightedLayerSum, MatchesLoop) {
  Rng rng(3);
  auto w = random_tensor({3, 2}, rng, 0, 1, false);
  auto s = random_tensor({3, 8}, rng, -1, 1, false);
  auto out = weighted_layer_sum(w, s);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t d = 0; d < 4; ++d) {
      EXPECT_NEAR(out.at(k, d), w.at(k, 0) * s.at(k, d) + w.at(k, 1) * s.at(k, 4 + d), 1e-15);
    }
  }
}

TEST(MeanPairwiseDistance, MatchesLoop) {
  Rng rng(4);
  auto x = random_tensor({5, 3}, rng, -1, 1, false);
  auto y = random_tensor({4, 3}, rng, -1, 1, false);
  double s = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double d = 0;
      for (std::size_t c = 0; c < 3; ++c) d += (x.at(i, c) - y.at(j, c)) * (x.at(i, c) - y.at(j, c));
      s += std::sqrt(d);
    }
  }
  EXPECT_NEAR(mean_pairwise_distance(x, y).item(), s / 20, 1e-12);
}

// Gradient checks at kPoints random points per primitive.

TEST(PrimitiveGradients, Matmul) {
  check_primitive({{4, 3}, {3, 5}}, [](auto& in) { return matmul(in[0], in[1]); });
  check_primitive({{4, 3}, {5, 3}}, [](auto& in) { return matmul(in[0], in[1], Transpose::Yes); });
}

TEST(PrimitiveGradients, Add) {
  check_primitive({{3, 4}, {3, 4}}, [](auto& in) { return add(in[0], in[1]); });
  check_primitive({{3, 4}, {1, 4}}, [](auto& in) { return add(in[0], in[1]); });
}

TEST(PrimitiveGradients, Mul) {
  check_primitive({{3, 4}, {3, 4}}, [](auto& in) { return mul(in[0], in[1]); });
  check_primitive({{3, 4}, {1, 4}}, [](auto& in) { return mul(in[0], in[1]); });
}

TEST(PrimitiveGradients, Div) {
  check_primitive({{3, 4}, {3, 4}}, [](auto& in) { return div(in[0], add_scalar(square(in[1]), 0.5)); });
}

TEST(PrimitiveGradients, Concat) {
  check_primitive({{3, 2}, {3, 4}}, [](auto& in) {
    const Tensor parts[] = {in[0], in[1]};
    return concat_cols(parts);
  });
  check_primitive({{2, 3}, {4, 3}}, [](auto& in) {
    const Tensor parts[] = {in[0], in[1]};
    return concat_rows(parts);
  });
}

TEST(PrimitiveGradients, SliceAndGather) {
  check_primitive({{5, 4}}, [](auto& in) { return slice_cols(slice_rows(in[0], 1, 4), 1, 3); });
  check_primitive({{5, 4}}, [](auto& in) {
    const std::size_t ids[] = {4, 0, 4, 2};
    return gather_rows(in[0], ids);
  });
}

TEST(PrimitiveGradients, LayerNorm) {
  check_primitive({{3, 6}, {1, 6}, {1, 6}}, [](auto& in) { return layer_norm(in[0], in[1], in[2]); });
}

TEST(PrimitiveGradients, LstmCell) {
  check_primitive({{2, 12}, {2, 3}}, [](auto& in) { return lstm_cell(in[0], in[1]); }, -2, 2);
}

TEST(PrimitiveGradients, Attention) {
  check_primitive({{5, 4}, {5, 4}, {5, 4}}, [](auto& in) {
    const Segment seg[] = {{0, 2}, {2, 3}};
    return masked_attention(in[0], in[1], in[2], seg, 2, AttentionMask::Causal);
  });
  check_primitive({{4, 4}, {4, 4}, {4, 4}}, [](auto& in) {
    const Segment seg[] = {{0, 4}};
    return masked_attention(in[0], in[1], in[2], seg, 1, AttentionMask::ReverseCausal);
  });
}

TEST(PrimitiveGradients, SoftmaxCrossEntropy) {
  for (int point = 0; point < kPoints; ++point) {
    Rng rng(5000 + point);
    auto z = random_tensor({4, 6}, rng, -3, 3);
    std::vector<std::int64_t> t(4);
    for (auto& v : t) v = static_cast<std::int64_t>(rng.below(6));
    auto r = gradient_check([&] { return cross_entropy(z, t); }, {z});
    ASSERT_LT(r.max_relative_error, kTol) << "point " << point;
  }
  check_primitive({{3, 5}}, [](auto& in) { return softmax(in[0], 1); });
  check_primitive({{3, 5}}, [](auto& in) { return softmax(in[0], 0); });
  check_primitive({{3, 5}}, [](auto& in) { return log_softmax(in[0]); });
}

TEST(PrimitiveGradients, Elementwise) {
  check_primitive({{3, 4}}, [](auto& in) { return tanh(in[0]); });
  check_primitive({{3, 4}}, [](auto& in) { return sigmoid(in[0]); });
  check_primitive({{3, 4}}, [](auto& in) { return gelu(in[0]); });
  check_primitive({{3, 4}}, [](auto& in) { return exp(in[0]); });
  check_primitive({{3, 4}}, [](auto& in) { return log(in[0]); }, 0.5, 2.0);
  check_primitive({{3, 4}}, [](auto& in) { return sqrt(in[0]); }, 0.5, 2.0);
}

TEST(PrimitiveGradients, Reductions) {
  check_primitive({{3, 4}}, [](auto& in) { return mean_rows(in[0]); });
  check_primitive({{3, 4}}, [](auto& in) { return row_norms(in[0]); });
  check_primitive({{3, 4}}, [](auto& in) { return l2_norm(in[0]); });
}

TEST(PrimitiveGradients, PairwiseDistanceAndLayerSums) {
  check_primitive({{4, 3}, {5, 3}}, [](auto& in) { return mean_pairwise_distance(in[0], in[1]); });
  check_primitive({{3, 3}, {3, 6}}, [](auto& in) { return weighted_layer_sum(in[0], in[1]); });
  check_primitive({{3, 2}, {4, 6}}, [](auto& in) { return dimwise_layer_sum(in[0], in[1]); });
}
