#pragma once

// Synthetic long-tailed classification data.
//
// Class j keeps n_max * IF^(-j/(C-1)) training samples (rounded, at least one),
// drawn from an isotropic Gaussian around a class mean. Means are random
// directions rescaled so the closest pair sits exactly `cluster_separation`
// apart; the spread of the other distances gives every class a few natural
// confusers. The test set is balanced.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ncl/errors.hpp"
#include "ncl/rng.hpp"

namespace ncl {

struct ClassPrior {
  std::vector<std::int64_t> counts;

  std::size_t num_classes() const noexcept { return counts.size(); }

  std::int64_t total() const noexcept {
    std::int64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }

  std::vector<double> log_counts() const {
    std::vector<double> out(counts.size());
    for (std::size_t j = 0; j < counts.size(); ++j) out[j] = std::log(static_cast<double>(counts[j]));
    return out;
  }

  void validate() const {
    if (counts.empty()) throw ConfigError("class prior is empty", "counts");
    for (auto c : counts)
      if (c < 1) throw ConfigError("every class count must be >= 1", "counts");
  }

  static ClassPrior uniform(std::size_t classes, std::int64_t count = 1) {
    return ClassPrior{std::vector<std::int64_t>(classes, count)};
  }
};

struct LongTailSpec {
  int num_classes = 20;
  int n_max = 500;
  double imbalance_factor = 100.0;
  int feature_dim = 16;
  double cluster_separation = 2.0;
  double noise_sigma = 1.0;
  int test_per_class = 50;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw ConfigError("need at least 2 classes", "dataset.num_classes");
    if (n_max < 1) throw ConfigError("must be >= 1", "dataset.n_max");
    if (!(imbalance_factor >= 1.0)) throw ConfigError("must be >= 1", "dataset.imbalance_factor");
    if (feature_dim < 1) throw ConfigError("must be >= 1", "dataset.feature_dim");
    if (!(cluster_separation > 0.0)) throw ConfigError("must be > 0", "dataset.cluster_separation");
    if (!(noise_sigma >= 0.0)) throw ConfigError("must be >= 0", "dataset.noise_sigma");
    if (test_per_class < 0) throw ConfigError("must be >= 0", "dataset.test_per_class");
  }
};

/// One example. `id` is the position within its split and keys augmentation streams.
struct Sample {
  std::vector<double> features;
  int label = 0;
  std::uint64_t id = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::vector<std::vector<double>> class_means;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct AugmentationPolicy {
  double noise_sigma = 0.0;
  double mask_prob = 0.0;
  int copies = 1;
  std::uint64_t seed = 0;

  AugmentationPolicy() = default;
  AugmentationPolicy(double noise, double mask, int num_copies, std::uint64_t stream_seed)
      : noise_sigma(noise), mask_prob(mask), copies(num_copies), seed(stream_seed) {
    validate();
  }

  void validate() const {
    if (!(noise_sigma >= 0.0)) throw ConfigError("must be >= 0", "augmentation.noise_sigma");
    if (!(mask_prob >= 0.0 && mask_prob < 1.0)) throw ConfigError("must lie in [0, 1)", "augmentation.mask_prob");
    if (copies < 1) throw ConfigError("must be >= 1", "augmentation.copies");
  }
};

inline ClassPrior build_longtail_counts(const LongTailSpec& spec) {
  spec.validate();
  const int c = spec.num_classes;
  ClassPrior prior;
  prior.counts.resize(static_cast<std::size_t>(c));
  for (int j = 0; j < c; ++j) {
    const double exponent = -static_cast<double>(j) / static_cast<double>(c - 1);
    const double n = static_cast<double>(spec.n_max) * std::pow(spec.imbalance_factor, exponent);
    prior.counts[static_cast<std::size_t>(j)] = std::max<std::int64_t>(1, std::llround(n));
  }
  prior.counts[0] = spec.n_max;
  return prior;
}

namespace detail {

inline std::vector<std::vector<double>> place_class_means(const LongTailSpec& spec) {
  const auto c = static_cast<std::size_t>(spec.num_classes);
  const auto d = static_cast<std::size_t>(spec.feature_dim);
  Rng rng(mix_seed(spec.seed, 1));
  std::vector<std::vector<double>> means(c, std::vector<double>(d));
  for (auto& m : means)
    for (auto& v : m) v = rng.normal();

  double closest = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = a + 1; b < c; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += (means[a][i] - means[b][i]) * (means[a][i] - means[b][i]);
      closest = std::min(closest, std::sqrt(s));
    }
  if (!(closest > 0.0)) throw ConfigError("degenerate class means; pick another seed", "seed");
  const double k = spec.cluster_separation / closest;
  for (auto& m : means)
    for (auto& v : m) v *= k;
  return means;
}

}  // namespace detail

inline Dataset generate_dataset(const LongTailSpec& spec, const ClassPrior& prior) {
  spec.validate();
  prior.validate();
  if (prior.num_classes() != static_cast<std::size_t>(spec.num_classes)) {
    throw ConfigError("prior has " + std::to_string(prior.num_classes()) + " classes, spec has " +
                          std::to_string(spec.num_classes),
                      "counts");
  }
  Dataset ds;
  ds.class_means = detail::place_class_means(spec);
  const auto d = static_cast<std::size_t>(spec.feature_dim);

  auto draw = [&](std::vector<Sample>& out, std::uint64_t tag, std::size_t cls, std::int64_t n) {
    Rng rng(mix_seed(spec.seed, tag, cls));
    for (std::int64_t i = 0; i < n; ++i) {
      Sample s;
      s.label = static_cast<int>(cls);
      s.id = out.size();
      s.features.resize(d);
      for (std::size_t f = 0; f < d; ++f) s.features[f] = ds.class_means[cls][f] + spec.noise_sigma * rng.normal();
      out.push_back(std::move(s));
    }
  };
  for (std::size_t j = 0; j < prior.num_classes(); ++j) draw(ds.train, 2, j, prior.counts[j]);
  for (std::size_t j = 0; j < prior.num_classes(); ++j) draw(ds.test, 3, j, spec.test_per_class);
  return ds;
}

/// One stochastic view of `x`. Pure function of (policy.seed, x.id, draw).
inline Sample augment(const Sample& x, const AugmentationPolicy& policy, int draw) {
  Rng rng(mix_seed(policy.seed, x.id, static_cast<std::uint64_t>(draw)));
  Sample out = x;
  if (policy.noise_sigma == 0.0 && policy.mask_prob == 0.0) return out;
  for (auto& v : out.features) {
    const bool masked = rng.uniform() < policy.mask_prob;
    const double noise = rng.normal();
    v = masked ? 0.0 : v + policy.noise_sigma * noise;
  }
  return out;
}

enum class Split { many, medium, few };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::many: return "many";
    case Split::medium: return "medium";
    case Split::few: return "few";
  }
  return "?";
}

struct CategorySplits {
  std::vector<int> many;
  std::vector<int> medium;
  std::vector<int> few;
  std::vector<Split> of_class;  // indexed by class
};

inline CategorySplits split_categories(const ClassPrior& prior, int many_threshold = 100, int few_threshold = 20) {
  if (!(many_threshold > few_threshold && few_threshold > 0)) {
    throw ConfigError("need many_threshold > few_threshold > 0", "splits");
  }
  CategorySplits s;
  s.of_class.resize(prior.num_classes());
  for (std::size_t j = 0; j < prior.num_classes(); ++j) {
    const auto n = prior.counts[j];
    const int cls = static_cast<int>(j);
    if (n > many_threshold) {
      s.many.push_back(cls);
      s.of_class[j] = Split::many;
    } else if (n < few_threshold) {
      s.few.push_back(cls);
      s.of_class[j] = Split::few;
    } else {
      s.medium.push_back(cls);
      s.of_class[j] = Split::medium;
    }
  }
  return s;
}

}  // namespace ncl
