#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "ncl/diffcore.hpp"
#include "ncl/rng.hpp"
#include "oracle.hpp"

using namespace ncl;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), true);
}

// Largest relative error between the tape gradient of f(inputs) and central differences.
double fd_worst(std::vector<Tensor> inputs, const std::function<Tensor(const std::vector<Tensor>&)>& f) {
  for (auto& t : inputs) t.zero_grad();
  backward(f(inputs));
  double worst = 0.0;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    std::vector<double> x(inputs[a].values().begin(), inputs[a].values().end());
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto eval = [&] {
        std::vector<Tensor> probe;
        for (std::size_t b = 0; b < inputs.size(); ++b) {
          const auto v = inputs[b].values();
          probe.emplace_back(inputs[b].shape(), b == a ? x : std::vector<double>(v.begin(), v.end()));
        }
        return f(probe).item();
      };
      const double numeric = oracle::central_diff(x, i, eval);
      const double analytic = inputs[a].has_grad() ? inputs[a].grad()[i] : 0.0;
      worst = std::max(worst, oracle::rel_err(analytic, numeric));
    }
  }
  return worst;
}

void expect_values(const Tensor& t, std::vector<double> expected, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.values()[i], expected[i], tol) << "entry " << i;
}

}  // namespace

TEST(Matmul, IdentityTimesColumn) {
  const auto r = matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{2}, {3}}));
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  expect_values(r, {2, 3});
}

TEST(Matmul, RowTimesColumn) { expect_values(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})), {11}); }

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(5), n = 1 + rng.below(4);
    const double e = fd_worst({random_tensor(rng, {m, k}), random_tensor(rng, {k, n})},
                              [](const auto& in) { return sum(matmul(in[0], in[1])); });
    EXPECT_LT(e, 1e-6);
  }
}

TEST(Matmul, RejectsMismatchedInnerDimension) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(matmul(Tensor::zeros({3}), Tensor::zeros({3, 1})), ShapeError);
}

TEST(Elementwise, Examples) {
  expect_values(exp(Tensor::vector({0, 0})), {1, 1});
  expect_values(relu(Tensor::vector({-1, 2})), {0, 2});
  expect_values(clamp_min(Tensor::vector({-3, 0.5}), 0.0), {0, 0.5});
  expect_values(Tensor::vector({1, 2}) * Tensor::vector({3, 4}), {3, 8});
  expect_values(Tensor::vector({1, 2}) - Tensor::vector({3, 5}), {-2, -3});
  expect_values(-Tensor::vector({1, -2}), {-1, 2});
  expect_values(2.5 * Tensor::vector({2}), {5});
}

TEST(Elementwise, LogDerivativeAtTwo) {
  Tensor x = Tensor::scalar(2.0, true);
  backward(log(x));
  EXPECT_NEAR(x.grad()[0], 0.5, 1e-15);
  std::vector<double> v{2.0};
  const double numeric = oracle::central_diff(v, 0, [&] { return std::log(v[0]); });
  EXPECT_NEAR(x.grad()[0], numeric, 1e-9);
}

TEST(Elementwise, LogOutsideDomainThrows) {
  EXPECT_THROW(log(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::vector({-1.0})), DomainError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 1 + rng.below(3), c = 1 + rng.below(4);
    EXPECT_LT(fd_worst({random_tensor(rng, {r, c}), random_tensor(rng, {r, c})},
                       [](const auto& in) { return sum(exp(in[0]) * in[1] - 0.3 * in[0]); }),
              1e-6);
    EXPECT_LT(fd_worst({random_tensor(rng, {r, c}, 0.5, 3.0)}, [](const auto& in) { return sum(log(in[0])); }), 1e-6);
  }
}

TEST(Broadcast, RowColumnAndScalar) {
  const auto m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  expect_values(m + Tensor::vector({10, 20, 30}), {11, 22, 33, 14, 25, 36});
  expect_values(m + Tensor::matrix({{10, 20, 30}}), {11, 22, 33, 14, 25, 36});
  expect_values(m - Tensor::matrix({{1}, {4}}), {0, 1, 2, 0, 1, 2});
  expect_values(m * Tensor::scalar(2), {2, 4, 6, 8, 10, 12});
  expect_values(Tensor::scalar(1) - m, {0, -1, -2, -3, -4, -5});
  EXPECT_THROW(m + Tensor::vector({1, 2}), ShapeError);
  EXPECT_THROW(m + Tensor::zeros({3, 2}), ShapeError);
}

TEST(Broadcast, GradientsReduceOverBroadcastAxes) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(4);
    EXPECT_LT(fd_worst({random_tensor(rng, {r, c}), random_tensor(rng, {c})},
                       [](const auto& in) { return sum(exp(in[0] + in[1]) * in[1]); }),
              1e-6);
    EXPECT_LT(fd_worst({random_tensor(rng, {r, c}), random_tensor(rng, {r, 1})},
                       [](const auto& in) { return sum(exp(in[0] - in[1])); }),
              1e-6);
    EXPECT_LT(fd_worst({random_tensor(rng, {r, c}), random_tensor(rng, {})},
                       [](const auto& in) { return sum(in[0] * in[1] * in[0]); }),
              1e-6);
  }
}

TEST(Reduce, Examples) {
  expect_values(sum(Tensor::vector({1, 2, 3})), {6});
  const auto m = mean(Tensor::matrix({{1, 3}, {5, 7}}), 1);
  EXPECT_EQ(m.shape(), (Shape{2}));
  expect_values(m, {2, 6});
  expect_values(mean(Tensor::matrix({{1, 3}, {5, 7}}), 0), {3, 5});
  expect_values(max(Tensor::matrix({{1, 9}, {5, 7}}), 0), {5, 9});
  expect_values(sum(Tensor::matrix({{1, 3}, {5, 7}})), {16});
}

TEST(Reduce, MaxTieSendsGradientToLowestIndex) {
  Tensor x = Tensor::vector({2, 2, 1}, true);
  backward(max(x));
  expect_values(Tensor::vector(std::vector<double>(x.grad().begin(), x.grad().end())), {1, 0, 0});
  Tensor m = Tensor::matrix({{3, 3}, {1, 4}}, true);
  backward(sum(max(m, 1)));
  expect_values(Tensor::vector(std::vector<double>(m.grad().begin(), m.grad().end())), {1, 0, 0, 1});
}

TEST(Reduce, ErrorsOnBadAxisOrEmpty) {
  EXPECT_THROW(sum(Tensor::vector({1, 2}), 1), ShapeError);
  EXPECT_THROW(max(Tensor(Shape{0}, {})), ShapeError);
}

TEST(Reduce, GradientsMatchFiniteDifferences) {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(4);
    EXPECT_LT(fd_worst({random_tensor(rng, {r, c})},
                       [](const auto& in) { return sum(exp(mean(in[0], 0))) + sum(max(in[0], 1)) + mean(in[0]); }),
              1e-6);
  }
}

TEST(Gather, Examples) {
  expect_values(gather(Tensor::vector({10, 20, 30}), {2, 0}), {30, 10});
  const auto t = Tensor::matrix({{1, 2}, {3, 4}});
  const auto all = gather(t, {0, 1, 2, 3});
  expect_values(all, {1, 2, 3, 4});
  EXPECT_THROW(gather(t, {4}), IndexError);
}

TEST(Gather, BackwardScatters) {
  Tensor x = Tensor::vector({5, 6, 7}, true);
  backward(sum(gather(x, {1})));
  expect_values(Tensor::vector(std::vector<double>(x.grad().begin(), x.grad().end())), {0, 1, 0});
  Tensor y = Tensor::vector({5, 6, 7}, true);
  backward(sum(gather(y, {2, 2, 0})));
  expect_values(Tensor::vector(std::vector<double>(y.grad().begin(), y.grad().end())), {1, 0, 2});
}

TEST(Reshape, KeepsValuesAndRoutesGradient) {
  Tensor x = Tensor::vector({1, 2, 3, 4, 5, 6}, true);
  const auto r = reshape(x, Shape{2, 3});
  EXPECT_EQ(r.shape(), (Shape{2, 3}));
  backward(sum(r * r));
  expect_values(Tensor::vector(std::vector<double>(x.grad().begin(), x.grad().end())), {2, 4, 6, 8, 10, 12});
  EXPECT_THROW(reshape(x, Shape{4}), ShapeError);
}

TEST(Detach, Examples) {
  Tensor t = Tensor::vector({1.5, -2, 3}, true);
  const auto d = detach(t);
  expect_values(d, {1.5, -2, 3});
  EXPECT_FALSE(d.requires_grad());

  Tensor u = Tensor::vector({1, 2}, true);
  backward(sum(exp(detach(u))));
  EXPECT_FALSE(u.has_grad() && (u.grad()[0] != 0.0 || u.grad()[1] != 0.0));

  Tensor w = Tensor::vector({1.5, -2, 3}, true);
  backward(sum(w * detach(w)));
  expect_values(Tensor::vector(std::vector<double>(w.grad().begin(), w.grad().end())), {1.5, -2, 3});
}

TEST(Backward, LinearityAndSquare) {
  Tensor x = Tensor::vector({1, -2, 3}, true);
  backward(sum(x));
  expect_values(Tensor::vector(std::vector<double>(x.grad().begin(), x.grad().end())), {1, 1, 1});
  Tensor y = Tensor::vector({1, -2, 3}, true);
  backward(sum(y * y));
  expect_values(Tensor::vector(std::vector<double>(y.grad().begin(), y.grad().end())), {2, -4, 6});
}

TEST(Backward, RejectsNonScalarLoss) { EXPECT_THROW(backward(Tensor::vector({1, 2}, true)), ShapeError); }

TEST(Backward, LeafGradientsAccumulateAcrossCalls) {
  Tensor x = Tensor::vector({1, 2}, true);
  const auto loss = sum(x * x);
  backward(loss);
  backward(loss);
  expect_values(Tensor::vector(std::vector<double>(x.grad().begin(), x.grad().end())), {4, 8});
  x.zero_grad();
  backward(loss);
  expect_values(Tensor::vector(std::vector<double>(x.grad().begin(), x.grad().end())), {2, 4});
}

TEST(Backward, SharedSubexpressionCountsEveryUse) {
  Tensor x = Tensor::scalar(3.0, true);
  const auto y = exp(x);
  backward(y * y + y);
  EXPECT_NEAR(x.grad()[0], 2 * std::exp(6.0) + std::exp(3.0), 1e-9);
}

TEST(Backward, ConstantGraphIsANoOp) {
  const auto c = sum(Tensor::vector({1, 2}));
  EXPECT_NO_THROW(backward(c));
  EXPECT_EQ(Graph::trace(c).size(), 0u);
}

TEST(Graph, TraceIsTopological) {
  Tensor a = Tensor::vector({1, 2}, true);
  const auto loss = sum(exp(a) * a);
  const auto ops = Graph::trace(loss).ops();
  ASSERT_FALSE(ops.empty());
  EXPECT_EQ(ops.front(), "leaf");
  EXPECT_EQ(ops.back(), "sum");
}

TEST(LogSoftmax, RowsNormaliseAndAreShiftInvariant) {
  Rng rng(3);
  const auto z = random_tensor(rng, {3, 5}, -50, 50);
  const auto lp = log_softmax_rows(z);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += std::exp(lp.at(i, j));
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const auto shifted = log_softmax_rows(z + Tensor::scalar(1000.0));
  for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(shifted.values()[i], lp.values()[i], 1e-9);
  EXPECT_LT(fd_worst({random_tensor(rng, {3, 4})},
                     [](const auto& in) { return sum(log_softmax_rows(in[0]) * Tensor::vector({1, -2, 0.5, 3})); }),
            1e-6);
}

TEST(Determinism, SameInputsSameBits) {
  auto run = [] {
    Rng rng(77);
    Tensor a = random_tensor(rng, {4, 3});
    Tensor b = random_tensor(rng, {3, 2});
    backward(sum(log_softmax_rows(matmul(a, b))));
    std::vector<double> g(a.grad().begin(), a.grad().end());
    g.insert(g.end(), b.grad().begin(), b.grad().end());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, ConstructionChecks) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), ShapeError);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), ShapeError);
  EXPECT_EQ(Tensor::scalar(4).item(), 4.0);
  EXPECT_EQ(Tensor::matrix({{1, 2}, {3, 4}}).at(1, 0), 3.0);
}
