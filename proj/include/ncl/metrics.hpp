#pragma once

// Post-hoc diagnostics on a frozen model: per-class accuracy, disagreement
// between experts and between augmented views (KL), and the distribution of
// the hardest negative's probability.
//
// Everything is generic over a LogitSource so tests can plug in stub experts.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ncl/data.hpp"
#include "ncl/diffcore.hpp"
#include "ncl/errors.hpp"
#include "ncl/losses.hpp"
#include "ncl/model.hpp"

namespace ncl {

template <class M>
concept LogitSource = requires(const M& m, std::size_t k, const Tensor& x) {
  { m.num_experts() } -> std::convertible_to<std::size_t>;
  { m.expert_logits(k, x) } -> std::convertible_to<Tensor>;
};

inline Tensor features_matrix(std::span<const Sample> samples) {
  if (samples.empty()) throw ShapeError("no samples");
  const std::size_t d = samples.front().features.size();
  std::vector<double> v;
  v.reserve(samples.size() * d);
  for (const auto& s : samples) {
    if (s.features.size() != d) throw ShapeError("samples disagree on feature width");
    v.insert(v.end(), s.features.begin(), s.features.end());
  }
  return Tensor::matrix(samples.size(), d, std::move(v));
}

inline std::vector<int> labels_of(std::span<const Sample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

/// Row-wise argmax; ties go to the lower index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t c = logits.cols();
  const auto v = logits.values();
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (v[i * c + j] > v[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Accuracy within each class; nullopt for classes with no samples.
inline std::vector<std::optional<double>> per_class_accuracy(std::span<const int> predictions,
                                                             std::span<const int> labels, int num_classes) {
  if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  std::vector<std::int64_t> hit(static_cast<std::size_t>(num_classes), 0), seen(hit.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw IndexError("label out of range");
    const auto y = static_cast<std::size_t>(labels[i]);
    ++seen[y];
    if (predictions[i] == labels[i]) ++hit[y];
  }
  std::vector<std::optional<double>> out(hit.size());
  for (std::size_t j = 0; j < hit.size(); ++j)
    if (seen[j] > 0) out[j] = static_cast<double>(hit[j]) / static_cast<double>(seen[j]);
  return out;
}

/// One half of a KL report (inter- or intra-expert).
struct KLPart {
  std::vector<double> per_class;  // mean over that class's samples; 0 where absent
  double overall = 0.0;           // mean over all samples
  double forward = 0.0;           // direction-resolved means (see producers)
  double reverse = 0.0;
};

struct KLReport {
  std::vector<std::int64_t> class_counts;
  std::optional<KLPart> inter;
  std::optional<KLPart> intra;
};

struct ScoreHistogram {
  std::vector<double> edges;  // bins + 1, strictly increasing
  std::vector<std::int64_t> counts;
  std::vector<double> scores;  // raw per-sample scores, in test order

  std::int64_t total() const {
    std::int64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }

  double fraction_above(double threshold) const {
    if (scores.empty()) return 0.0;
    const auto n = std::count_if(scores.begin(), scores.end(), [&](double s) { return s > threshold; });
    return static_cast<double>(n) / static_cast<double>(scores.size());
  }

  double mean() const {
    double s = 0.0;
    for (double x : scores) s += x;
    return scores.empty() ? 0.0 : s / static_cast<double>(scores.size());
  }
};

namespace detail {

inline std::vector<std::int64_t> class_counts(std::span<const Sample> samples, std::size_t classes) {
  std::vector<std::int64_t> n(classes, 0);
  for (const auto& s : samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes) throw IndexError("label out of range");
    ++n[static_cast<std::size_t>(s.label)];
  }
  return n;
}

inline KLPart finish_part(std::span<const Sample> samples, std::span<const double> per_sample,
                          std::span<const double> fwd, std::span<const double> rev, std::size_t classes) {
  KLPart part;
  part.per_class.assign(classes, 0.0);
  const auto counts = class_counts(samples, classes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto y = static_cast<std::size_t>(samples[i].label);
    part.per_class[y] += per_sample[i];
    part.overall += per_sample[i];
    part.forward += fwd[i];
    part.reverse += rev[i];
  }
  for (std::size_t j = 0; j < classes; ++j)
    if (counts[j] > 0) part.per_class[j] /= static_cast<double>(counts[j]);
  const double n = static_cast<double>(samples.size());
  part.overall /= n;
  part.forward /= n;
  part.reverse /= n;
  return part;
}

}  // namespace detail

/// Per sample: mean over ordered expert pairs of KL(p_k || p_q) on balanced
/// probabilities of the clean input. `forward` averages KL(p_k || p_q) over
/// k < q, `reverse` the opposite direction.
template <LogitSource M>
KLPart inter_expert_kl(const M& model, std::span<const Sample> test, const ClassPrior& prior) {
  const std::size_t kk = model.num_experts();
  if (kk < 2) throw ConfigError("inter-expert KL needs at least two experts", "loss.experts");
  const Tensor x = features_matrix(test);
  std::vector<Tensor> probs;
  for (std::size_t k = 0; k < kk; ++k) probs.push_back(balanced_prob(detach(model.expert_logits(k, x)), prior));
  const std::size_t c = prior.num_classes();
  std::vector<double> sym(test.size()), fwd(test.size()), rev(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    double s = 0.0, f = 0.0, r = 0.0;
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t q = k + 1; q < kk; ++q) {
        const auto pk = probs[k].values().subspan(i * c, c);
        const auto pq = probs[q].values().subspan(i * c, c);
        const double a = kl_div(pk, pq), b = kl_div(pq, pk);
        s += a + b;
        f += a;
        r += b;
      }
    const double pairs = static_cast<double>(kk * (kk - 1) / 2);
    sym[i] = s / (2.0 * pairs);
    fwd[i] = f / pairs;
    rev[i] = r / pairs;
  }
  return detail::finish_part(test, sym, fwd, rev, c);
}

/// Per sample: symmetrised KL between balanced probabilities of independently
/// augmented views (draws 2p and 2p+1 for pair p), averaged over pairs and
/// experts. `forward` is KL(view a || view b), `reverse` the opposite.
template <LogitSource M>
KLPart intra_expert_kl(const M& model, std::span<const Sample> test, const ClassPrior& prior,
                       const AugmentationPolicy& policy, int pairs = 1) {
  policy.validate();
  if (policy.copies < 2) throw ConfigError("intra-expert KL needs an augmentation policy with copies >= 2", "augmentation.copies");
  if (pairs < 1) throw ConfigError("must be >= 1", "pairs");
  const std::size_t kk = model.num_experts();
  const std::size_t c = prior.num_classes();
  std::vector<double> sym(test.size(), 0.0), fwd(test.size(), 0.0), rev(test.size(), 0.0);
  for (int p = 0; p < pairs; ++p) {
    std::vector<Sample> va, vb;
    va.reserve(test.size());
    vb.reserve(test.size());
    for (const auto& s : test) {
      va.push_back(augment(s, policy, 2 * p));
      vb.push_back(augment(s, policy, 2 * p + 1));
    }
    const Tensor xa = features_matrix(va), xb = features_matrix(vb);
    for (std::size_t k = 0; k < kk; ++k) {
      const Tensor pa = balanced_prob(detach(model.expert_logits(k, xa)), prior);
      const Tensor pb = balanced_prob(detach(model.expert_logits(k, xb)), prior);
      for (std::size_t i = 0; i < test.size(); ++i) {
        const auto ra = pa.values().subspan(i * c, c);
        const auto rb = pb.values().subspan(i * c, c);
        const double a = kl_div(ra, rb), b = kl_div(rb, ra);
        sym[i] += 0.5 * (a + b);
        fwd[i] += a;
        rev[i] += b;
      }
    }
  }
  const double norm = 1.0 / static_cast<double>(static_cast<std::size_t>(pairs) * kk);
  for (std::size_t i = 0; i < test.size(); ++i) sym[i] *= norm, fwd[i] *= norm, rev[i] *= norm;
  return detail::finish_part(test, sym, fwd, rev, c);
}

inline ScoreHistogram make_histogram(std::vector<double> scores, int bins = 20) {
  if (bins < 1) throw ConfigError("must be >= 1", "bins");
  ScoreHistogram h;
  h.edges.resize(static_cast<std::size_t>(bins) + 1);
  for (int b = 0; b <= bins; ++b) h.edges[static_cast<std::size_t>(b)] = static_cast<double>(b) / bins;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double s : scores) {
    auto b = static_cast<int>(std::floor(std::clamp(s, 0.0, 1.0) * bins));
    ++h.counts[static_cast<std::size_t>(std::min(b, bins - 1))];
  }
  h.scores = std::move(scores);
  return h;
}

/// Largest softmax probability among the non-label classes, per test sample.
/// `expert` selects one expert; nullopt scores the logit-averaged ensemble.
template <LogitSource M>
ScoreHistogram hardest_negative_scores(const M& model, std::span<const Sample> test,
                                       std::optional<std::size_t> expert = std::nullopt, int bins = 20) {
  const Tensor x = features_matrix(test);
  Tensor logits;
  if (expert) {
    logits = detach(model.expert_logits(*expert, x));
  } else {
    std::vector<Tensor> all;
    for (std::size_t k = 0; k < model.num_experts(); ++k) all.push_back(detach(model.expert_logits(k, x)));
    logits = ensemble_logits(all);
  }
  const Tensor p = softmax_prob(logits);
  const std::size_t c = logits.cols();
  std::vector<double> scores(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    double best = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (static_cast<int>(j) != test[i].label) best = std::max(best, p.values()[i * c + j]);
    scores[i] = best;
  }
  return make_histogram(std::move(scores), bins);
}

}  // namespace ncl
