#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ncl/metrics.hpp"
#include "ncl/train.hpp"

using namespace ncl;

namespace {

// logits = x W_k, with W_k stored row-major d x C.
struct LinearStub {
  std::size_t d = 0, c = 0;
  std::vector<std::vector<double>> w;

  std::size_t num_experts() const { return w.size(); }
  Tensor expert_logits(std::size_t k, const Tensor& x) const {
    std::vector<double> out(x.rows() * c, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t f = 0; f < d; ++f) out[i * c + j] += x.values()[i * d + f] * w[k][f * c + j];
    return Tensor::matrix(x.rows(), c, std::move(out));
  }
};

// Puts `margin` on the label's logit; the label is read from the first feature.
struct ConfidentStub {
  std::size_t c = 0;
  double margin = 30.0;
  std::size_t num_experts() const { return 1; }
  Tensor expert_logits(std::size_t, const Tensor& x) const {
    std::vector<double> out(x.rows() * c, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) out[i * c + static_cast<std::size_t>(x.values()[i * x.cols()])] = margin;
    return Tensor::matrix(x.rows(), c, std::move(out));
  }
};

LinearStub random_stub(Rng& rng, std::size_t k, std::size_t d, std::size_t c) {
  LinearStub s{d, c, std::vector<std::vector<double>>(k, std::vector<double>(d * c))};
  for (auto& m : s.w)
    for (auto& v : m) v = rng.normal();
  return s;
}

std::vector<Sample> random_samples(Rng& rng, std::size_t n, std::size_t d, int c) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.features.resize(d);
    for (auto& v : s.features) v = rng.normal();
    s.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(c)));
    s.id = i;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> brute_balanced(const std::vector<double>& z, const ClassPrior& prior) {
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) s += (p[j] = static_cast<double>(prior.counts[j]) * std::exp(z[j]));
  for (auto& v : p) v /= s;
  return p;
}

double brute_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > 0) s += p[j] * (std::log(p[j]) - std::log(q[j]));
  return s;
}

std::vector<double> stub_row(const LinearStub& m, std::size_t k, const std::vector<double>& x) {
  std::vector<double> z(m.c, 0.0);
  for (std::size_t j = 0; j < m.c; ++j)
    for (std::size_t f = 0; f < m.d; ++f) z[j] += x[f] * m.w[k][f * m.c + j];
  return z;
}

}  // namespace

TEST(PerClassAccuracy, Examples) {
  const std::vector<int> pred{0, 1, 1, 2, 0}, labels{0, 1, 0, 2, 2};
  const auto acc = per_class_accuracy(pred, labels, 4);
  ASSERT_EQ(acc.size(), 4u);
  EXPECT_DOUBLE_EQ(*acc[0], 0.5);
  EXPECT_DOUBLE_EQ(*acc[1], 1.0);
  EXPECT_DOUBLE_EQ(*acc[2], 0.5);
  EXPECT_FALSE(acc[3].has_value());
  EXPECT_THROW(per_class_accuracy(std::vector<int>{0}, std::vector<int>{0, 1}, 2), ShapeError);
  EXPECT_THROW(per_class_accuracy(std::vector<int>{0}, std::vector<int>{5}, 2), IndexError);
}

TEST(PerClassAccuracy, AllCorrectAndAllZero) {
  const std::vector<int> labels{0, 1, 1, 0};
  for (const auto& v : per_class_accuracy(labels, labels, 2)) EXPECT_DOUBLE_EQ(*v, 1.0);
  const auto zero = per_class_accuracy(std::vector<int>{0, 0, 0, 0}, labels, 2);
  EXPECT_DOUBLE_EQ(*zero[0], 1.0);
  EXPECT_DOUBLE_EQ(*zero[1], 0.0);
}

TEST(ArgmaxRows, TiesGoLow) {
  EXPECT_EQ(argmax_rows(Tensor::matrix({{1, 3, 3}, {0, 0, 0}, {-1, -2, 5}})), (std::vector<int>{1, 0, 2}));
}

TEST(Evaluate, ConstantModelIsAtChance) {
  ConfidentStub flat{5, 0.0};
  std::vector<Sample> test;
  for (int j = 0; j < 5; ++j)
    for (int r = 0; r < 10; ++r) test.push_back({{static_cast<double>(j)}, j, test.size()});
  const auto ev = evaluate(flat, test, split_categories(ClassPrior::uniform(5, 50)));
  EXPECT_DOUBLE_EQ(ev.single_accuracy, 0.2);
  EXPECT_DOUBLE_EQ(ev.ensemble_accuracy, 0.2);
  EXPECT_DOUBLE_EQ(*ev.ensemble_per_class[0], 1.0);
  EXPECT_DOUBLE_EQ(*ev.ensemble_per_class[3], 0.0);

  ConfidentStub sharp{5, 4.0};
  EXPECT_DOUBLE_EQ(evaluate(sharp, test, split_categories(ClassPrior::uniform(5, 50))).ensemble_accuracy, 1.0);
}

TEST(InterKL, MatchesBruteForce) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + rng.below(3), d = 1 + rng.below(4), c = 2 + rng.below(5);
    const auto m = random_stub(rng, k, d, c);
    const auto test = random_samples(rng, 1 + rng.below(12), d, static_cast<int>(c));
    std::vector<std::int64_t> counts(c);
    for (auto& n : counts) n = 1 + static_cast<std::int64_t>(rng.below(300));
    const ClassPrior prior{counts};
    const auto got = inter_expert_kl(m, test, prior);

    double overall = 0.0;
    std::vector<double> per_class(c, 0.0), seen(c, 0.0);
    for (const auto& s : test) {
      double acc = 0.0;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b)
          if (a != b)
            acc += brute_kl(brute_balanced(stub_row(m, a, s.features), prior), brute_balanced(stub_row(m, b, s.features), prior));
      acc /= static_cast<double>(k * (k - 1));
      overall += acc;
      per_class[static_cast<std::size_t>(s.label)] += acc;
      seen[static_cast<std::size_t>(s.label)] += 1;
    }
    EXPECT_NEAR(got.overall, overall / static_cast<double>(test.size()), 1e-10);
    for (std::size_t j = 0; j < c; ++j)
      EXPECT_NEAR(got.per_class[j], seen[j] > 0 ? per_class[j] / seen[j] : 0.0, 1e-10);
    EXPECT_NEAR(0.5 * (got.forward + got.reverse), got.overall, 1e-10);
  }
}

TEST(InterKL, InvariantToExpertAndSampleOrder) {
  Rng rng(12);
  auto m = random_stub(rng, 3, 3, 4);
  auto test = random_samples(rng, 15, 3, 4);
  const ClassPrior prior{{40, 20, 10, 5}};
  const auto a = inter_expert_kl(m, test, prior);
  std::reverse(m.w.begin(), m.w.end());
  std::reverse(test.begin(), test.end());
  const auto b = inter_expert_kl(m, test, prior);
  EXPECT_NEAR(a.overall, b.overall, 1e-12);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.per_class[j], b.per_class[j], 1e-12);
}

TEST(InterKL, IdenticalExpertsAgreeAndSingleExpertIsRejected) {
  Rng rng(13);
  auto m = random_stub(rng, 1, 2, 3);
  const auto test = random_samples(rng, 6, 2, 3);
  const auto prior = ClassPrior::uniform(3, 10);
  EXPECT_THROW(inter_expert_kl(m, test, prior), ConfigError);
  m.w.push_back(m.w[0]);
  EXPECT_EQ(inter_expert_kl(m, test, prior).overall, 0.0);
}

TEST(IntraKL, MatchesBruteForce) {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 1 + rng.below(3), d = 2 + rng.below(3), c = 2 + rng.below(4);
    const auto m = random_stub(rng, k, d, c);
    const auto test = random_samples(rng, 1 + rng.below(8), d, static_cast<int>(c));
    const auto prior = ClassPrior::uniform(c, 7);
    const AugmentationPolicy pol(0.5, 0.2, 2, 100 + static_cast<std::uint64_t>(trial));
    const int pairs = 1 + static_cast<int>(rng.below(3));
    const auto got = intra_expert_kl(m, test, prior, pol, pairs);

    double overall = 0.0;
    for (const auto& s : test) {
      double acc = 0.0;
      for (int p = 0; p < pairs; ++p)
        for (std::size_t e = 0; e < k; ++e) {
          const auto pa = brute_balanced(stub_row(m, e, augment(s, pol, 2 * p).features), prior);
          const auto pb = brute_balanced(stub_row(m, e, augment(s, pol, 2 * p + 1).features), prior);
          acc += 0.5 * (brute_kl(pa, pb) + brute_kl(pb, pa));
        }
      overall += acc / static_cast<double>(static_cast<std::size_t>(pairs) * k);
    }
    EXPECT_NEAR(got.overall, overall / static_cast<double>(test.size()), 1e-10);
  }
}

TEST(IntraKL, ZeroWithoutAugmentationAndRejectsBadArguments) {
  Rng rng(15);
  const auto m = random_stub(rng, 2, 3, 3);
  const auto test = random_samples(rng, 5, 3, 3);
  const auto prior = ClassPrior::uniform(3, 4);
  EXPECT_EQ(intra_expert_kl(m, test, prior, AugmentationPolicy(0, 0, 2, 1)).overall, 0.0);
  EXPECT_THROW(intra_expert_kl(m, test, prior, AugmentationPolicy(0.1, 0, 1, 1)), ConfigError);
  EXPECT_THROW(intra_expert_kl(m, test, prior, AugmentationPolicy(0.1, 0, 2, 1), 0), ConfigError);
}

TEST(Histogram, UniformModelScoresOneOverC) {
  ConfidentStub flat{4, 0.0};
  std::vector<Sample> test;
  for (int j = 0; j < 4; ++j) test.push_back({{static_cast<double>(j)}, j, static_cast<std::uint64_t>(j)});
  const auto h = hardest_negative_scores(flat, test);
  for (double s : h.scores) EXPECT_NEAR(s, 0.25, 1e-15);
  EXPECT_EQ(h.counts[5], 4);
  EXPECT_EQ(h.total(), 4);
  EXPECT_EQ(h.fraction_above(0.4), 0.0);
  EXPECT_DOUBLE_EQ(h.fraction_above(0.2), 1.0);
}

TEST(Histogram, ConfidentModelLandsInLowestBin) {
  ConfidentStub sharp{6, 30.0};
  std::vector<Sample> test;
  for (int j = 0; j < 6; ++j) test.push_back({{static_cast<double>(j)}, j, static_cast<std::uint64_t>(j)});
  const auto h = hardest_negative_scores(sharp, test, std::size_t{0}, 10);
  EXPECT_EQ(h.counts.size(), 10u);
  EXPECT_EQ(h.counts[0], 6);
  EXPECT_LT(h.mean(), 1e-12);
}

TEST(Histogram, BinsConserveCountsAndClampEdges) {
  const auto h = make_histogram({0.0, 0.05, 0.5, 0.999, 1.0, 1.0}, 4);
  EXPECT_EQ(h.edges, (std::vector<double>{0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(h.counts, (std::vector<std::int64_t>{2, 0, 1, 3}));
  EXPECT_EQ(h.total(), 6);
  EXPECT_THROW(make_histogram({}, 0), ConfigError);

  Rng rng(16);
  std::vector<double> s(500);
  for (auto& v : s) v = rng.uniform();
  EXPECT_EQ(make_histogram(s, 7).total(), 500);
}
