#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "eocount/adam.hpp"
#include "eocount/grad_suite.hpp"

using namespace eoc;

namespace {

// straight transcription of the update rule, scalar only
double scalar_adam(double x, const std::vector<double>& grads, double lr, double wd = 0.0) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1] + wd * x;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, static_cast<double>(t)));
    const double vh = v / (1 - std::pow(b2, static_cast<double>(t)));
    x -= lr * mh / (std::sqrt(vh) + eps);
  }
  return x;
}

}  // namespace

TEST(Adam, FirstStepMovesByLr) {
  for (double g : {-3.0, 0.01, 250.0}) {
    auto p = Tensor::from({3}, {1, 2, 3}, true);
    for (auto& x : p.grad()) x = g;
    AdamState st;
    std::vector<Tensor> ps{p};
    adam_step(ps, st, 0.01, 0.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(std::abs(p[i] - (i + 1.0)), 0.01, 1e-8);
  }
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = Tensor::from({4}, {1, -2, 3, 0.5}, true);
  const auto before = p.to_vector();
  AdamState st;
  std::vector<Tensor> ps{p};
  for (int i = 0; i < 3; ++i) adam_step(ps, st, 0.1, 0.0);
  EXPECT_EQ(p.to_vector(), before);
  EXPECT_EQ(st.step, 3u);
}

TEST(Adam, TwoStepsMatchScalarOracle) {
  auto p = Tensor::scalar(0.7, true);
  AdamState st;
  std::vector<Tensor> ps{p};
  for (int i = 0; i < 2; ++i) {
    p.grad()[0] = 1.0;
    adam_step(ps, st, 0.001, 0.0);
  }
  EXPECT_NEAR(p.item(), scalar_adam(0.7, {1.0, 1.0}, 0.001), 1e-15);
}

TEST(Adam, WeightDecayIsAddedToGradient) {
  auto p = Tensor::scalar(2.0, true);
  AdamState st;
  std::vector<Tensor> ps{p};
  std::vector<double> gs{0.3, -0.1, 0.2, 0.0};
  double x = 2.0;
  for (double g : gs) {
    p.grad()[0] = g;
    adam_step(ps, st, 0.01, 0.05);
  }
  x = scalar_adam(x, gs, 0.01, 0.05);
  EXPECT_NEAR(p.item(), x, 1e-14);
}

TEST(Adam, FrozenParamsAreSkipped) {
  auto a = Tensor::from({2}, {1, 1}, true);
  auto b = Tensor::from({2}, {5, 5}, false);
  for (auto& g : a.grad()) g = 1.0;
  AdamState st;
  std::vector<Tensor> ps{a, b};
  adam_step(ps, st, 0.1, 0.1);
  EXPECT_EQ(b.to_vector(), (std::vector<double>{5, 5}));
  EXPECT_NE(a[0], 1.0);
}

TEST(Adam, Errors) {
  auto p = Tensor::from({2}, {1, 1}, true);
  AdamState st;
  std::vector<Tensor> ps{p};
  EXPECT_THROW(adam_step(ps, st, 0.0, 0.0), std::invalid_argument);
  adam_step(ps, st, 0.1, 0.0);
  std::vector<Tensor> other{Tensor::zeros({3}, true)};
  EXPECT_THROW(adam_step(other, st, 0.1, 0.0), DimensionError);
}

TEST(GradSuite, EveryOpPasses) {
  GradSuiteOptions o;
  o.seeds = 5;
  const auto rows = run_grad_suite(o);
  ASSERT_EQ(rows.size(), grad_suite_ops().size());
  for (const auto& r : rows) {
    EXPECT_TRUE(r.passed) << r.op << " " << r.max_rel_error;
    EXPECT_GT(r.checked, 0u) << r.op;
  }
  EXPECT_TRUE(all_passed(rows));
}

TEST(GradSuite, ListsEachOpOnce) {
  auto ops = grad_suite_ops();
  auto sorted = ops;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  for (const char* op : {"conv2d", "relu", "sigmoid", "maxpool2d", "global_avgpool", "center_channels", "linear",
                         "softmax_cross_entropy", "bce_loss", "mse_loss", "concat_channels", "full_model"})
    EXPECT_NE(std::find(ops.begin(), ops.end(), op), ops.end()) << op;
}

TEST(GradSuite, InjectedFaultFails) {
  GradSuiteOptions o;
  o.seeds = 2;
  o.fault = GradFault::conv2d_weight;
  const auto rows = run_grad_suite(o);
  EXPECT_FALSE(all_passed(rows));
  EXPECT_EQ(grad_fault(), GradFault::none);
  std::ostringstream os;
  print_grad_table(os, rows, o.tolerance);
  EXPECT_NE(os.str().find("FAIL"), std::string::npos);
}
