#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "embseg/gradcheck.hpp"
#include "embseg/rng.hpp"
#include "embseg/tensor.hpp"
#include "embseg/tensor_io.hpp"

using namespace embseg;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }
std::vector<double> grads(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
}

TEST(Tensor, GradBufferPresentOnlyWhenRequested) {
  Tensor a({3}, {1, 2, 3}, true);
  Tensor b({3}, {1, 2, 3}, false);
  EXPECT_EQ(a.grad().size(), 3u);
  EXPECT_TRUE(b.grad().empty());
}

TEST(Softmax, TwoLogitsAtUnitTemperature) {
  const Tensor p = softmax_with_temperature(Tensor({2}, {1.0, 0.0}), 1.0);
  EXPECT_NEAR(p.data()[0], 0.73105858, 1e-8);
  EXPECT_NEAR(p.data()[1], 0.26894142, 1e-8);
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  EXPECT_THROW(softmax_with_temperature(Tensor({2}, {1.0, 0.0}), 0.0), DomainError);
  EXPECT_THROW(softmax_with_temperature(Tensor({2}, {1.0, 0.0}), -1.0), DomainError);
}

TEST(Softmax, RowsSumToOneForAnyTemperature) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + uniform_index(rng, 6), cols = 1 + uniform_index(rng, 9);
    std::vector<double> x(rows * cols);
    for (auto& v : x) v = 30.0 * gaussian(rng);
    const double tau = std::exp(uniform(rng, std::log(0.01), std::log(10.0)));
    const Tensor p = softmax_with_temperature(Tensor({rows, cols}, x), tau);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += p.data()[r * cols + c];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, SmallTemperatureDoesNotOverflow) {
  const Tensor p = softmax_with_temperature(Tensor({3}, {1.0, -1.0, 0.5}), 0.01);
  for (double v : p.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(p.data()[0], 1.0, 1e-12);
}

TEST(Softmax, ArgmaxInvariantToLogitShift) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(7);
    for (auto& v : x) v = gaussian(rng);
    std::vector<double> shifted = x;
    const double c = 50.0 * gaussian(rng);
    for (auto& v : shifted) v += c;
    const auto a = values(softmax_with_temperature(Tensor({7}, x), 0.3));
    const auto b = values(softmax_with_temperature(Tensor({7}, shifted), 0.3));
    EXPECT_EQ(std::max_element(a.begin(), a.end()) - a.begin(),
              std::max_element(b.begin(), b.end()) - b.begin());
  }
}

TEST(LogSoftmax, MatchesLogOfSoftmax) {
  const Tensor x({2, 3}, {0.5, -1.0, 2.0, 0.0, 0.0, 0.1});
  const auto p = values(softmax_with_temperature(x, 0.7));
  const auto lp = values(log_softmax_with_temperature(x, Tensor::scalar(0.7)));
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(std::log(p[i]), lp[i], 1e-12);
}

TEST(L2Normalize, ThreeFourFive) {
  const auto v = values(l2_normalize(Tensor({2}, {3.0, 4.0})));
  EXPECT_NEAR(v[0], 0.6, 1e-12);
  EXPECT_NEAR(v[1], 0.8, 1e-12);
}

TEST(L2Normalize, Idempotent) {
  Rng rng(5);
  std::vector<double> x(4 * 6);
  for (auto& v : x) v = gaussian(rng);
  const Tensor once = l2_normalize(Tensor({4, 6}, x));
  const auto twice = values(l2_normalize(once));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(once.data()[i], twice[i], 1e-12);
}

TEST(L2Normalize, ZeroRowIsDomainError) {
  EXPECT_THROW(l2_normalize(Tensor({2, 2}, {1.0, 0.0, 0.0, 0.0})), DomainError);
}

TEST(Log, NonPositiveIsDomainError) {
  EXPECT_THROW(log(Tensor({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor({1}, {-2.0})), DomainError);
}

TEST(Ops, ShapeMismatchNamesTheOp) {
  try {
    add(Tensor({2}, {1, 2}), Tensor({3}, {1, 2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  try {
    matmul(Tensor({2, 3}, std::vector<double>(6)), Tensor({2, 3}, std::vector<double>(6)));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
}

TEST(Ops, MatmulValues) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {5, 6});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{17, 39}));
}

TEST(Ops, SliceGatherConcat) {
  const Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(slice(x, {1, 0}, {3, 1})), (std::vector<double>{3, 5}));
  EXPECT_EQ(values(gather_rows(x, std::vector<std::size_t>{2, 0, 2})),
            (std::vector<double>{5, 6, 1, 2, 5, 6}));
  const Tensor c = concat({x, Tensor({1, 2}, {7, 8})});
  EXPECT_EQ(c.shape(), (Shape{4, 2}));
  EXPECT_EQ(values(c).back(), 8.0);
}

TEST(Ops, AxisReductions) {
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(sum(x, 0)), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(values(mean(x, 1)), (std::vector<double>{2, 5}));
  EXPECT_DOUBLE_EQ(sum(x).item(), 21.0);
  EXPECT_DOUBLE_EQ(mean(x).item(), 3.5);
}

TEST(Backward, SumGivesOnes) {
  Tensor x({2, 3, 2}, std::vector<double>(12, 0.3), true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(grads(x), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, MeanOfFour) {
  Tensor x({4}, {1, -2, 3, 9}, true);
  backward(mean(x));
  for (double g : x.grad()) EXPECT_EQ(g, 0.25);
}

TEST(Backward, AnnihilationByZeroTensor) {
  Tensor x({3}, {1, 2, 3}, true);
  const Tensor y = sum(mul(x, Tensor::zeros({3})));
  EXPECT_EQ(y.item(), 0.0);
  backward(y);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x({2}, {1, 2}, true);
  const Tensor y = sum(mul(x, x));
  backward(y);
  backward(y);
  EXPECT_EQ(grads(x), (std::vector<double>{4, 8}));
  x.zero_grad();
  backward(y);
  EXPECT_EQ(grads(x), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarIsError) {
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, SharedSubexpression) {
  Tensor x({1}, {3.0}, true);
  const Tensor y = mul(x, x);
  backward(sum(add(y, y)));  // d/dx 2x^2 = 4x
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, TopologicalOrder) {
  Tensor x({2}, {1, 2}, true);
  const Tensor a = exp(x);
  const Tensor b = mul(a, x);
  const Tensor loss = sum(add(b, a));
  const Tape tape(loss);
  const auto& e = tape.entries();
  auto pos = [&](const Tensor& t) {
    return std::find(e.begin(), e.end(), t.node().get()) - e.begin();
  };
  EXPECT_LT(pos(a), pos(b));
  EXPECT_LT(pos(b), pos(loss));
  EXPECT_EQ(e.back(), loss.node().get());
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(99);
    std::vector<double> v(24);
    for (auto& x : v) x = gaussian(rng);
    Tensor x({4, 6}, v, true);
    const Tensor w({6, 3}, std::vector<double>(v.begin(), v.begin() + 18));
    backward(sum(softmax_with_temperature(matmul(l2_normalize(x), w), 0.1)));
    return grads(x);
  };
  EXPECT_EQ(run(), run());
}

TEST(CheckGradients, SumOfSquares) {
  const Tensor x({5}, {0.3, -1.0, 2.0, 0.7, -0.2});
  EXPECT_LE(check_gradients([](const Tensor& v) { return sum(mul(v, v)); }, x, 1e-5), 1e-6);
}

TEST(CheckGradients, ConstantIsZero) {
  const Tensor x({3}, {1, 2, 3});
  EXPECT_EQ(check_gradients([](const Tensor&) { return Tensor::scalar(4.0); }, x, 1e-5), 0.0);
}

TEST(CheckGradients, NonScalarIsError) {
  const Tensor x({3}, {1, 2, 3});
  EXPECT_THROW(check_gradients([](const Tensor& v) { return exp(v); }, x, 1e-5), ShapeError);
}

TEST(CheckGradients, LargeStepShowsTruncationError) {
  const Tensor x({3}, {1.0, 2.0, 0.5});
  EXPECT_GT(check_gradients([](const Tensor& v) { return sum(exp(v)); }, x, 1e-1), 1e-4);
}

TEST(CheckGradients, LargeShapes) {
  Rng rng(8);
  std::vector<double> v(16 * 16 * 4);
  for (auto& x : v) x = gaussian(rng);
  const Tensor x({16, 16, 4}, v);
  const Tensor w({64, 16}, std::vector<double>(v.begin(), v.begin() + 64 * 16));
  const double err = check_gradients(
      [&](const Tensor& t) {
        return sum(softmax_with_temperature(matmul(reshape(t, {64, 16}), reshape(w, {16, 64})), 0.5));
      },
      x, 1e-5);
  EXPECT_LE(err, 1e-4);
}

TEST(GradientSuite, EveryTargetWithinTolerance) {
  for (const auto& r : run_gradcheck("all", 10, 1e-5, 1234)) {
    EXPECT_LE(r.max_error, kGradTolerance) << r.name;
  }
}

TEST(GradientSuite, ModuleFilter) {
  const auto head = run_gradcheck("head", 1, 1e-5, 0);
  const auto losses = run_gradcheck("losses", 1, 1e-5, 0);
  for (const auto& r : head) EXPECT_EQ(r.group, "head");
  for (const auto& r : losses) EXPECT_EQ(r.group, "losses");
  EXPECT_EQ(head.size() + losses.size(), gradient_targets().size());
  EXPECT_THROW(run_gradcheck("bogus", 1, 1e-5, 0), DomainError);
}

TEST(GradientSuite, SingleTrialIsStable) {
  const auto a = run_gradcheck("all", 1, 1e-5, 42);
  const auto b = run_gradcheck("all", 1, 1e-5, 42);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].max_error, b[i].max_error);
}

TEST(TensorIo, RoundTrip) {
  const Tensor t({2, 1, 3}, {1.5, -2.0, 3.25, 1e-300, 7.0, -0.0});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "TNSR");
  EXPECT_EQ(bytes.size(), 4u + 4u + 3u * 4u + 6u * 8u);
  const Tensor back = read_tensor(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(values(back), values(t));
}

TEST(TensorIo, RejectsBadMagic) {
  std::stringstream ss("XXXX\0\0\0\0");
  EXPECT_THROW(read_tensor(ss), ParseError);
}
