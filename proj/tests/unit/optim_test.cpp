#include <gtest/gtest.h>

#include <cmath>

#include "mlma/ops.hpp"
#include "mlma/optim.hpp"
#include "test_util.hpp"

using namespace mlma;
using testing_util::random_tensor;

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({5}, rng);
  const auto before_a = testing_util::values(a);
  const auto before_b = testing_util::values(b);
  Adam opt({a, b}, {});
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    opt.step();
  }
  EXPECT_EQ(testing_util::values(a), before_a);
  EXPECT_EQ(testing_util::values(b), before_b);
  EXPECT_EQ(opt.steps(), 5u);
}

TEST(Adam, HandComputedFirstTwoSteps) {
  auto x = Tensor::scalar(1.0, true);
  AdamOptions o;
  o.learning_rate = 0.1;
  o.clip_norm = 0;
  Adam opt({x}, o);
  opt.zero_grad();
  x.mutable_grad()[0] = 1.0;
  opt.step();
  // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; update = 0.1 * 1 / (1 + 1e-8).
  EXPECT_NEAR(x.item(), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);

  opt.zero_grad();
  x.mutable_grad()[0] = 0.5;
  opt.step();
  const double m = 0.9 * 0.1 + 0.1 * 0.5;
  const double v = 0.999 * 0.001 + 0.001 * 0.25;
  const double m_hat = m / (1 - 0.81);
  const double v_hat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(x.item(), 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-14);
}

TEST(Adam, MissingGradientIsContractError) {
  auto x = Tensor::scalar(1.0, true);
  Adam opt({x}, {});
  EXPECT_THROW(opt.step(), ContractError);
}

TEST(Adam, StepCounterStrictlyIncreases) {
  auto x = Tensor::scalar(1.0, true);
  Adam opt({x}, {});
  std::uint64_t last = opt.steps();
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    backward(square(x));
    opt.step();
    EXPECT_GT(opt.steps(), last);
    last = opt.steps();
  }
}

TEST(Clip, NormTenClipFiveHalvesGradients) {
  auto a = Tensor::from({2}, {0, 0}, true);
  auto b = Tensor::from({1}, {0}, true);
  a.mutable_grad()[0] = 6;
  a.mutable_grad()[1] = 0;
  b.mutable_grad()[0] = 8;
  std::vector<Tensor> params{a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 5.0), 10.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 4.0);
}

TEST(Clip, SmallNormUntouched) {
  auto a = Tensor::from({1}, {0}, true);
  a.mutable_grad()[0] = 2;
  std::vector<Tensor> params{a};
  clip_grad_norm(params, 5.0);
  EXPECT_EQ(a.grad()[0], 2);
}

TEST(Adam, ClipAppliedBeforeUpdate) {
  // Two identical optimizers, one fed a gradient pre-scaled by 0.5: the
  // clipped run must reproduce it exactly.
  auto x = Tensor::from({2}, {1, 1}, true);
  auto y = Tensor::from({2}, {1, 1}, true);
  AdamOptions clipped;
  clipped.clip_norm = 5;
  AdamOptions free;
  free.clip_norm = 0;
  Adam ox({x}, clipped), oy({y}, free);
  for (int s = 0; s < 3; ++s) {
    ox.zero_grad();
    oy.zero_grad();
    x.mutable_grad()[0] = 6;
    x.mutable_grad()[1] = 8;
    y.mutable_grad()[0] = 3;
    y.mutable_grad()[1] = 4;
    EXPECT_DOUBLE_EQ(ox.step(), 10.0);
    oy.step();
  }
  EXPECT_EQ(testing_util::values(x), testing_util::values(y));
}

TEST(Adam, MinimizesQuadratic) {
  auto x = Tensor::from({3}, {3, -2, 1}, true);
  AdamOptions o;
  o.learning_rate = 0.05;
  Adam opt({x}, o);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    backward(sum(square(x)));
    opt.step();
  }
  for (auto v : x.data()) EXPECT_NEAR(v, 0, 1e-2);
}
