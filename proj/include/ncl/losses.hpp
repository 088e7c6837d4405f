#pragma once

// Nested collaborative losses over a grid of expert logits.
//
// Conventions shared by every loss here:
//  * "balanced" probabilities reweight the softmax by the class counts n_j,
//    computed in log space as log_softmax(z + log n).
//  * A partial ("nested") view restricts the softmax to a per-row category set
//    Psi = {label} + C_hard negatives, mined from the teacher's logits.
//  * Distillation terms are KL(teacher || student). With detach_teacher the
//    teacher side is cut from the graph, so each term trains only the student.
//  * Losses are averaged over the batch. Individual and inter-expert terms are
//    also averaged over augmented copies; the intra-expert term is normalised
//    by 2 / (T (T - 1)) over ordered copy pairs instead.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ncl/data.hpp"
#include "ncl/diffcore.hpp"
#include "ncl/errors.hpp"
#include "ncl/model.hpp"
#include "ncl/rng.hpp"

namespace ncl {

enum class Objective { balanced, cross_entropy };
enum class CategorySelection { hard, random };

struct LossConfig {
  double lambda = 0.6;
  double beta = 0.3;
  bool detach_teacher = true;
  int experts = 2;
  int copies = 4;
  bool use_inter = true;
  bool use_intra = true;
  bool use_nfl = true;
  Objective objective = Objective::balanced;
  CategorySelection selection = CategorySelection::hard;
  std::uint64_t selection_seed = 0;  // only read by CategorySelection::random

  /// round(beta * C) clamped to [1, C - 1].
  int hard_count(int num_classes) const {
    const auto c = static_cast<long long>(std::llround(beta * num_classes));
    return static_cast<int>(std::clamp<long long>(c, 1, num_classes - 1));
  }

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("must be >= 0", "loss.lambda");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("must lie in (0, 1]", "loss.beta");
    if (experts < 1) throw ConfigError("must be >= 1", "loss.experts");
    if (copies < 1) throw ConfigError("must be >= 1", "loss.copies");
  }
};

/// Category indices of one row, ascending. Always contains the label.
struct HardCategorySet {
  std::vector<std::size_t> members;

  std::size_t size() const noexcept { return members.size(); }
  bool contains(std::size_t j) const { return std::binary_search(members.begin(), members.end(), j); }
  std::size_t position(std::size_t j) const {
    auto it = std::lower_bound(members.begin(), members.end(), j);
    if (it == members.end() || *it != j) throw IndexError("category " + std::to_string(j) + " not in set");
    return static_cast<std::size_t>(it - members.begin());
  }
  friend bool operator==(const HardCategorySet&, const HardCategorySet&) = default;
};

struct LossBreakdown {
  Tensor bil_g = Tensor::scalar(0.0);
  Tensor bil_p = Tensor::scalar(0.0);
  Tensor inter_g = Tensor::scalar(0.0);
  Tensor inter_p = Tensor::scalar(0.0);
  Tensor intra_g = Tensor::scalar(0.0);
  Tensor intra_p = Tensor::scalar(0.0);
  Tensor total = Tensor::scalar(0.0);
};

/// Plain numbers of a LossBreakdown, for logging and averaging.
struct LossValues {
  double bil_g = 0, bil_p = 0, inter_g = 0, inter_p = 0, intra_g = 0, intra_p = 0, total = 0;

  static LossValues of(const LossBreakdown& b) {
    return {b.bil_g.item(), b.bil_p.item(), b.inter_g.item(), b.inter_p.item(),
            b.intra_g.item(), b.intra_p.item(), b.total.item()};
  }

  LossValues& operator+=(const LossValues& o) {
    bil_g += o.bil_g, bil_p += o.bil_p, inter_g += o.inter_g, inter_p += o.inter_p;
    intra_g += o.intra_g, intra_p += o.intra_p, total += o.total;
    return *this;
  }
  LossValues scaled(double s) const {
    return {bil_g * s, bil_p * s, inter_g * s, inter_p * s, intra_g * s, intra_p * s, total * s};
  }
};

inline constexpr double kKlFloor = 1e-12;

// ---------------------------------------------------------------------------
// Probabilities

namespace detail {

// Applies a row-wise map to a rank-1 vector by viewing it as a 1xC matrix.
template <class F>
Tensor on_rows(const Tensor& z, F f) {
  if (z.rank() == 1) return reshape(f(reshape(z, Shape{1, z.numel()})), z.shape());
  if (z.rank() != 2) throw ShapeError("expected logits of rank 1 or 2, got " + shape_str(z.shape()));
  return f(z);
}

inline void check_prior(const ClassPrior& prior, std::size_t classes) {
  if (prior.num_classes() != classes) {
    throw ShapeError("prior has " + std::to_string(prior.num_classes()) + " classes, logits have " +
                     std::to_string(classes));
  }
  prior.validate();
}

}  // namespace detail

inline Tensor softmax_prob(const Tensor& z) {
  return detail::on_rows(z, [](const Tensor& m) { return exp(log_softmax_rows(m)); });
}

/// log(n_j exp(z_j) / sum_l n_l exp(z_l)), row-wise.
inline Tensor balanced_log_prob(const Tensor& z, const ClassPrior& prior) {
  detail::check_prior(prior, z.cols());
  const Tensor log_prior = Tensor::vector(prior.log_counts());
  return detail::on_rows(z, [&](const Tensor& m) { return log_softmax_rows(m + log_prior); });
}

inline Tensor balanced_prob(const Tensor& z, const ClassPrior& prior) { return exp(balanced_log_prob(z, prior)); }

// ---------------------------------------------------------------------------
// Hard category mining

inline void check_hard_count(int c_hard, std::size_t classes) {
  if (c_hard < 1 || static_cast<std::size_t>(c_hard) > classes - 1) {
    throw ConfigError("C_hard = " + std::to_string(c_hard) + " outside [1, " + std::to_string(classes - 1) + "]",
                      "loss.beta");
  }
}

/// The label plus the c_hard highest-logit negatives (ties go to the lower index).
inline HardCategorySet hard_category_mine(std::span<const double> z_row, int label, int c_hard) {
  const std::size_t c = z_row.size();
  check_hard_count(c_hard, c);
  if (label < 0 || static_cast<std::size_t>(label) >= c) throw IndexError("label " + std::to_string(label) + " out of range");
  std::vector<std::size_t> negatives;
  negatives.reserve(c - 1);
  for (std::size_t j = 0; j < c; ++j)
    if (j != static_cast<std::size_t>(label)) negatives.push_back(j);
  const auto take = static_cast<std::size_t>(c_hard);
  std::partial_sort(negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(take), negatives.end(),
                    [&](std::size_t a, std::size_t b) { return z_row[a] > z_row[b] || (z_row[a] == z_row[b] && a < b); });
  HardCategorySet psi;
  psi.members.assign(negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(take));
  psi.members.push_back(static_cast<std::size_t>(label));
  std::sort(psi.members.begin(), psi.members.end());
  return psi;
}

inline HardCategorySet hard_category_mine(const Tensor& z_row, int label, int c_hard) {
  if (z_row.rank() != 1) throw ShapeError("hard_category_mine expects a row vector");
  return hard_category_mine(z_row.values(), label, c_hard);
}

/// The label plus c_hard negatives chosen uniformly at random (control for mining).
inline HardCategorySet random_categories(std::size_t classes, int label, int c_hard, Rng& rng) {
  check_hard_count(c_hard, classes);
  std::vector<std::size_t> negatives;
  for (std::size_t j = 0; j < classes; ++j)
    if (j != static_cast<std::size_t>(label)) negatives.push_back(j);
  for (std::size_t i = 0; i < static_cast<std::size_t>(c_hard); ++i) {
    const auto pick = i + static_cast<std::size_t>(rng.below(negatives.size() - i));
    std::swap(negatives[i], negatives[pick]);
  }
  HardCategorySet psi;
  psi.members.assign(negatives.begin(), negatives.begin() + c_hard);
  psi.members.push_back(static_cast<std::size_t>(label));
  std::sort(psi.members.begin(), psi.members.end());
  return psi;
}

/// Balanced probabilities renormalised over psi, in psi member order.
inline std::vector<double> partial_balanced_prob(std::span<const double> z_row, const HardCategorySet& psi,
                                                 const ClassPrior& prior) {
  if (psi.members.empty()) throw ConfigError("empty category set", "psi");
  detail::check_prior(prior, z_row.size());
  std::vector<double> a(psi.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < psi.size(); ++r) {
    const auto j = psi.members[r];
    if (j >= z_row.size()) throw IndexError("category " + std::to_string(j) + " out of range");
    a[r] = z_row[j] + std::log(static_cast<double>(prior.counts[j]));
    top = std::max(top, a[r]);
  }
  double norm = 0.0;
  for (auto& v : a) norm += (v = std::exp(v - top));
  for (auto& v : a) v /= norm;
  return a;
}

// ---------------------------------------------------------------------------
// KL divergence

/// sum_j p_j log(p_j / q_j), with 0 log 0 = 0 and q clamped below at 1e-12.
inline double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl_div: length mismatch");
  auto check = [](std::span<const double> v, const char* name) {
    double s = 0.0;
    for (double x : v) {
      if (!(x >= 0.0)) throw DomainError(std::string("kl_div: negative entry in ") + name);
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-6) throw DomainError(std::string("kl_div: ") + name + " does not sum to 1");
  };
  check(p, "p");
  check(q, "q");
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] == 0.0) continue;
    kl += p[j] * (std::log(p[j]) - std::log(std::max(q[j], kKlFloor)));
  }
  return kl;
}

/// Per-row KL(p || q) from log-probabilities [B x m]; returns [B].
inline Tensor kl_rows(const Tensor& log_p, const Tensor& log_q) {
  if (log_p.shape() != log_q.shape()) throw ShapeError("kl_rows: shape mismatch");
  const Tensor p = exp(log_p);
  return sum(p * (log_p - clamp_min(log_q, std::log(kKlFloor))), 1);
}

// ---------------------------------------------------------------------------
// Shared per-call state: balanced log-probs and category sets per (expert, copy).

namespace detail {

/// A per-row category set flattened for gather on a [B x C] matrix.
struct Restriction {
  std::size_t width = 0;
  std::vector<HardCategorySet> rows;
  std::vector<std::size_t> flat;       // i * C + member, B * width entries
  std::vector<std::size_t> label_pos;  // i * width + position of label
  Tensor log_prior;                    // [B x width] constant
};

class LossContext {
 public:
  LossContext(const LogitGrid& grid, std::span<const int> labels, const ClassPrior& prior, const LossConfig& cfg)
      : grid_(grid), labels_(labels), prior_(prior), cfg_(cfg) {
    if (grid.empty() || grid.front().empty()) throw ShapeError("empty logit grid");
    experts_ = grid.size();
    copies_ = grid.front().size();
    const auto& first = grid.front().front();
    if (first.rank() != 2) throw ShapeError("logits must be [B x C], got " + shape_str(first.shape()));
    batch_ = first.rows();
    classes_ = first.cols();
    for (const auto& row : grid) {
      if (row.size() != copies_) throw ShapeError("ragged logit grid");
      for (const auto& z : row)
        if (z.shape() != first.shape()) throw ShapeError("logit grid entries disagree on shape");
    }
    if (labels.size() != batch_) throw ShapeError("labels do not match batch size");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= classes_) throw IndexError("label " + std::to_string(y) + " out of range");
    check_prior(prior, classes_);
    log_prior_row_ = Tensor::vector(prior.log_counts());
    label_flat_.resize(batch_);
    for (std::size_t i = 0; i < batch_; ++i) label_flat_[i] = i * classes_ + static_cast<std::size_t>(labels[i]);
    log_prob_.assign(experts_, std::vector<std::optional<Tensor>>(copies_));
    teacher_log_prob_ = log_prob_;
    restriction_.assign(experts_, std::vector<std::optional<Restriction>>(copies_));
    restricted_.assign(experts_, std::vector<std::optional<Tensor>>(copies_));
    teacher_restricted_ = restricted_;
  }

  std::size_t experts() const noexcept { return experts_; }
  std::size_t copies() const noexcept { return copies_; }
  std::size_t batch() const noexcept { return batch_; }
  std::size_t classes() const noexcept { return classes_; }
  std::span<const std::size_t> label_flat() const noexcept { return label_flat_; }
  const LossConfig& config() const noexcept { return cfg_; }

  const Tensor& log_prob(std::size_t k, std::size_t t) {
    auto& slot = log_prob_[k][t];
    if (!slot) slot = log_softmax_rows(grid_[k][t] + log_prior_row_);
    return *slot;
  }

  const Tensor& teacher_log_prob(std::size_t k, std::size_t t) {
    if (!cfg_.detach_teacher) return log_prob(k, t);
    auto& slot = teacher_log_prob_[k][t];
    if (!slot) slot = detach(log_prob(k, t));
    return *slot;
  }

  /// Category sets mined from expert k's logits on copy t.
  const Restriction& restriction(std::size_t k, std::size_t t) {
    auto& slot = restriction_[k][t];
    if (slot) return *slot;
    const int c_hard = cfg_.hard_count(static_cast<int>(classes_));
    check_hard_count(c_hard, classes_);
    Restriction r;
    r.width = static_cast<std::size_t>(c_hard) + 1;
    r.rows.reserve(batch_);
    const auto z = grid_[k][t].values();
    const auto log_n = prior_.log_counts();
    std::vector<double> lp;
    lp.reserve(batch_ * r.width);
    for (std::size_t i = 0; i < batch_; ++i) {
      const auto row = z.subspan(i * classes_, classes_);
      if (cfg_.selection == CategorySelection::hard) {
        r.rows.push_back(hard_category_mine(row, labels_[i], c_hard));
      } else {
        Rng rng(mix_seed(cfg_.selection_seed, k * 0x10000 + t, i));
        r.rows.push_back(random_categories(classes_, labels_[i], c_hard, rng));
      }
      const auto& psi = r.rows.back();
      for (auto j : psi.members) {
        r.flat.push_back(i * classes_ + j);
        lp.push_back(log_n[j]);
      }
      r.label_pos.push_back(i * r.width + psi.position(static_cast<std::size_t>(labels_[i])));
    }
    r.log_prior = Tensor::matrix(batch_, r.width, std::move(lp));
    slot = std::move(r);
    return *slot;
  }

  /// Balanced log-probs of logits[k][t] renormalised over `r`: [B x width].
  Tensor restricted_log_prob(std::size_t k, std::size_t t, const Restriction& r) {
    const auto gathered = reshape(gather(grid_[k][t], r.flat), Shape{batch_, r.width});
    return log_softmax_rows(gathered + r.log_prior);
  }

  /// Restricted log-probs of (k, t) over its own mined set.
  const Tensor& own_restricted(std::size_t k, std::size_t t) {
    auto& slot = restricted_[k][t];
    if (!slot) slot = restricted_log_prob(k, t, restriction(k, t));
    return *slot;
  }

  const Tensor& teacher_restricted(std::size_t k, std::size_t t) {
    if (!cfg_.detach_teacher) return own_restricted(k, t);
    auto& slot = teacher_restricted_[k][t];
    if (!slot) slot = detach(own_restricted(k, t));
    return *slot;
  }

 private:
  const LogitGrid& grid_;
  std::span<const int> labels_;
  const ClassPrior& prior_;
  LossConfig cfg_;
  std::size_t experts_ = 0, copies_ = 0, batch_ = 0, classes_ = 0;
  Tensor log_prior_row_;
  std::vector<std::size_t> label_flat_;
  std::vector<std::vector<std::optional<Tensor>>> log_prob_, teacher_log_prob_;
  std::vector<std::vector<std::optional<Restriction>>> restriction_;
  std::vector<std::vector<std::optional<Tensor>>> restricted_, teacher_restricted_;
};

inline Tensor accumulate(std::optional<Tensor>& acc, const Tensor& term) {
  acc = acc ? *acc + term : term;
  return *acc;
}

inline Tensor finish(const std::optional<Tensor>& acc, double factor) {
  return acc ? scale(*acc, factor) : Tensor::scalar(0.0);
}

// Each helper below works on a prepared context so total_loss shares the caches.

inline Tensor bil_global(LossContext& ctx) {
  std::optional<Tensor> acc;
  for (std::size_t k = 0; k < ctx.experts(); ++k)
    for (std::size_t t = 0; t < ctx.copies(); ++t) accumulate(acc, sum(gather(ctx.log_prob(k, t), ctx.label_flat())));
  return finish(acc, -1.0 / static_cast<double>(ctx.batch() * ctx.copies()));
}

inline Tensor bil_partial(LossContext& ctx) {
  std::optional<Tensor> acc;
  for (std::size_t k = 0; k < ctx.experts(); ++k)
    for (std::size_t t = 0; t < ctx.copies(); ++t) {
      const auto& r = ctx.restriction(k, t);
      accumulate(acc, sum(gather(ctx.own_restricted(k, t), r.label_pos)));
    }
  return finish(acc, -1.0 / static_cast<double>(ctx.batch() * ctx.copies()));
}

inline Tensor inter_global(LossContext& ctx) {
  const std::size_t kk = ctx.experts();
  if (kk < 2) return Tensor::scalar(0.0);
  std::optional<Tensor> acc;
  for (std::size_t t = 0; t < ctx.copies(); ++t)
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t q = 0; q < kk; ++q) {
        if (q == k) continue;
        accumulate(acc, sum(kl_rows(ctx.teacher_log_prob(k, t), ctx.log_prob(q, t))));
      }
  const double pair_factor = 2.0 / static_cast<double>(kk * (kk - 1));
  return finish(acc, pair_factor / static_cast<double>(ctx.batch() * ctx.copies()));
}

inline Tensor inter_partial(LossContext& ctx) {
  const std::size_t kk = ctx.experts();
  if (kk < 2) return Tensor::scalar(0.0);
  std::optional<Tensor> acc;
  for (std::size_t t = 0; t < ctx.copies(); ++t)
    for (std::size_t k = 0; k < kk; ++k) {
      const auto& r = ctx.restriction(k, t);
      const auto& teacher = ctx.teacher_restricted(k, t);
      for (std::size_t q = 0; q < kk; ++q) {
        if (q == k) continue;
        accumulate(acc, sum(kl_rows(teacher, ctx.restricted_log_prob(q, t, r))));
      }
    }
  const double pair_factor = 2.0 / static_cast<double>(kk * (kk - 1));
  return finish(acc, pair_factor / static_cast<double>(ctx.batch() * ctx.copies()));
}

inline Tensor intra_global(LossContext& ctx) {
  const std::size_t tt = ctx.copies();
  if (tt < 2) return Tensor::scalar(0.0);
  std::optional<Tensor> acc;
  for (std::size_t k = 0; k < ctx.experts(); ++k)
    for (std::size_t t = 0; t < tt; ++t)
      for (std::size_t tau = 0; tau < tt; ++tau) {
        if (tau == t) continue;
        accumulate(acc, sum(kl_rows(ctx.teacher_log_prob(k, t), ctx.log_prob(k, tau))));
      }
  const double pair_factor = 2.0 / static_cast<double>(tt * (tt - 1));
  return finish(acc, pair_factor / static_cast<double>(ctx.batch()));
}

inline Tensor intra_partial(LossContext& ctx) {
  const std::size_t tt = ctx.copies();
  if (tt < 2) return Tensor::scalar(0.0);
  std::optional<Tensor> acc;
  for (std::size_t k = 0; k < ctx.experts(); ++k)
    for (std::size_t t = 0; t < tt; ++t) {
      const auto& r = ctx.restriction(k, t);
      const auto& teacher = ctx.teacher_restricted(k, t);
      for (std::size_t tau = 0; tau < tt; ++tau) {
        if (tau == t) continue;
        accumulate(acc, sum(kl_rows(teacher, ctx.restricted_log_prob(k, tau, r))));
      }
    }
  const double pair_factor = 2.0 / static_cast<double>(tt * (tt - 1));
  return finish(acc, pair_factor / static_cast<double>(ctx.batch()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public losses

inline Tensor ce_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("ce_loss expects [B x C] logits");
  if (labels.size() != logits.rows()) throw ShapeError("labels do not match batch size");
  std::vector<std::size_t> flat(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= logits.cols())
      throw IndexError("label " + std::to_string(labels[i]) + " out of range");
    flat[i] = i * logits.cols() + static_cast<std::size_t>(labels[i]);
  }
  return neg(mean(gather(log_softmax_rows(logits), flat)));
}

/// Sum over experts of -log p_y, averaged over batch and copies.
inline Tensor bil_global_loss(const LogitGrid& grid, std::span<const int> labels, const ClassPrior& prior) {
  detail::LossContext ctx(grid, labels, prior, LossConfig{});
  return detail::bil_global(ctx);
}

inline Tensor bil_partial_loss(const LogitGrid& grid, std::span<const int> labels, const ClassPrior& prior,
                               const LossConfig& cfg) {
  detail::LossContext ctx(grid, labels, prior, cfg);
  return detail::bil_partial(ctx);
}

/// Needs no labels: the global view compares full distributions.
inline Tensor inter_global_loss(const LogitGrid& grid, const ClassPrior& prior, const LossConfig& cfg) {
  const std::size_t b = grid.empty() || grid.front().empty() ? 0 : grid.front().front().rows();
  const std::vector<int> no_labels(b, 0);
  detail::LossContext ctx(grid, no_labels, prior, cfg);
  return detail::inter_global(ctx);
}

inline Tensor inter_partial_loss(const LogitGrid& grid, std::span<const int> labels, const ClassPrior& prior,
                                 const LossConfig& cfg) {
  detail::LossContext ctx(grid, labels, prior, cfg);
  return detail::inter_partial(ctx);
}

struct IntraLosses {
  Tensor global;
  Tensor partial;
};

inline IntraLosses intra_losses(const LogitGrid& grid, std::span<const int> labels, const ClassPrior& prior,
                                const LossConfig& cfg) {
  detail::LossContext ctx(grid, labels, prior, cfg);
  return {detail::intra_global(ctx), detail::intra_partial(ctx)};
}

/// Fills `parts.total` from the six components according to the ablation flags.
inline LossBreakdown combine(LossBreakdown parts, const LossConfig& cfg) {
  Tensor total = parts.bil_g;
  if (cfg.use_nfl) total = total + parts.bil_p;
  if (cfg.use_intra) {
    Tensor intra = cfg.use_nfl ? parts.intra_g + parts.intra_p : parts.intra_g;
    total = total + scale(intra, cfg.lambda);
  }
  if (cfg.use_inter) {
    Tensor inter = cfg.use_nfl ? parts.inter_g + parts.inter_p : parts.inter_g;
    total = total + scale(inter, cfg.lambda);
  }
  parts.total = total;
  return parts;
}

inline LossBreakdown total_loss(const LogitGrid& grid, std::span<const int> labels, const ClassPrior& prior,
                                const LossConfig& cfg) {
  cfg.validate();
  if (grid.size() != static_cast<std::size_t>(cfg.experts) || grid.empty() ||
      grid.front().size() != static_cast<std::size_t>(cfg.copies)) {
    throw ShapeError("logit grid is " + std::to_string(grid.size()) + "x" +
                     std::to_string(grid.empty() ? 0 : grid.front().size()) + ", config expects " +
                     std::to_string(cfg.experts) + "x" + std::to_string(cfg.copies));
  }
  detail::LossContext ctx(grid, labels, prior, cfg);
  LossBreakdown parts;
  if (cfg.objective == Objective::cross_entropy) {
    detail::LossContext plain(grid, labels, ClassPrior::uniform(ctx.classes()), cfg);
    parts.bil_g = detail::bil_global(plain);
  } else {
    parts.bil_g = detail::bil_global(ctx);
  }
  if (cfg.use_nfl) parts.bil_p = detail::bil_partial(ctx);
  if (cfg.use_inter) {
    parts.inter_g = detail::inter_global(ctx);
    if (cfg.use_nfl) parts.inter_p = detail::inter_partial(ctx);
  }
  if (cfg.use_intra) {
    parts.intra_g = detail::intra_global(ctx);
    if (cfg.use_nfl) parts.intra_p = detail::intra_partial(ctx);
  }
  return combine(std::move(parts), cfg);
}

}  // namespace ncl
