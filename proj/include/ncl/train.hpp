#pragma once

// Training loop for the multi-expert model.
//
// One step: draw a batch (instance-balanced shuffling), build T views of it,
// run every expert on every view, evaluate the configured losses, backprop,
// and apply SGD with momentum and weight decay to each expert. Every random
// stream is derived from TrainConfig::seed, so a config replays bit-identically.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ncl/data.hpp"
#include "ncl/diffcore.hpp"
#include "ncl/errors.hpp"
#include "ncl/losses.hpp"
#include "ncl/metrics.hpp"
#include "ncl/model.hpp"
#include "ncl/rng.hpp"

namespace ncl {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 128;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  std::vector<int> lr_decay_epochs{60, 85};
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 1;
  int eval_every = 10;
  std::vector<int> hidden_dims{64, 64};
  int many_threshold = 100;
  int few_threshold = 20;
  int kl_pairs = 1;  // augmented view pairs per test sample in the final intra-KL report
  bool augment_single_view = true;  // with copies == 1, train on an augmented view instead of the original
  LossConfig loss;
  LongTailSpec dataset;
  AugmentationPolicy augmentation{1.0, 0.2, 4, 0};

  void validate() const {
    if (epochs < 0) throw ConfigError("must be >= 0", "epochs");
    if (batch_size < 1) throw ConfigError("must be >= 1", "batch_size");
    if (!(lr > 0.0)) throw ConfigError("must be > 0", "lr");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("must lie in [0, 1)", "momentum");
    if (!(weight_decay >= 0.0)) throw ConfigError("must be >= 0", "weight_decay");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) throw ConfigError("must lie in (0, 1]", "lr_decay_factor");
    for (int e : lr_decay_epochs)
      if (e < 0) throw ConfigError("decay epochs must be >= 0", "lr_decay_epochs");
    if (eval_every < 1) throw ConfigError("must be >= 1", "eval_every");
    if (kl_pairs < 1) throw ConfigError("must be >= 1", "kl_pairs");
    if (!(many_threshold > few_threshold && few_threshold > 0))
      throw ConfigError("need many_threshold > few_threshold > 0", "splits");
    loss.validate();
    dataset.validate();
    augmentation.validate();
    if (loss.copies != augmentation.copies) throw ConfigError("must equal augmentation.copies", "loss.copies");
    loss.hard_count(dataset.num_classes);
    architecture().validate();
  }

  Architecture architecture() const { return Architecture{dataset.feature_dim, hidden_dims, dataset.num_classes}; }

  /// Copies `seed` into the derived dataset and augmentation streams.
  TrainConfig& derive_seeds() {
    dataset.seed = mix_seed(seed, 0xDA7A);
    augmentation.seed = mix_seed(seed, 0xA06);
    loss.copies = augmentation.copies;
    return *this;
  }
};

struct OptimizerState {
  std::vector<std::vector<double>> velocity;

  static OptimizerState for_parameters(std::span<const Tensor> params) {
    OptimizerState s;
    for (const auto& p : params) s.velocity.emplace_back(p.numel(), 0.0);
    return s;
  }
};

/// v <- momentum v + grad + weight_decay param;  param <- param - lr v
inline void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity, double lr,
                     double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) throw ShapeError("sgd_step: size mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

inline void sgd_step(std::span<Tensor> params, OptimizerState& state, double lr, double momentum, double weight_decay) {
  if (state.velocity.size() != params.size()) throw ShapeError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto grad = params[i].grad();
    sgd_step(params[i].mutable_values(), grad, state.velocity[i], lr, momentum, weight_decay);
  }
}

/// Base rate times factor^(number of decay epochs <= epoch).
inline double lr_at(int epoch, const TrainConfig& cfg) {
  double lr = cfg.lr;
  for (int e : cfg.lr_decay_epochs)
    if (e <= epoch) lr *= cfg.lr_decay_factor;
  return lr;
}

struct SplitAccuracy {
  std::optional<double> many, medium, few;
};

struct EvalReport {
  std::vector<double> expert_accuracy;
  double single_accuracy = 0.0;  // mean over experts
  double ensemble_accuracy = 0.0;
  SplitAccuracy single_splits;  // mean over experts
  SplitAccuracy ensemble_splits;
  std::vector<std::optional<double>> ensemble_per_class;
  std::vector<std::optional<double>> single_per_class;  // mean over experts
};

namespace detail {

inline double accuracy(std::span<const int> pred, std::span<const int> labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline SplitAccuracy split_accuracy(std::span<const int> pred, std::span<const int> labels, const CategorySplits& splits) {
  std::int64_t hit[3] = {0, 0, 0}, seen[3] = {0, 0, 0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto s = static_cast<int>(splits.of_class.at(static_cast<std::size_t>(labels[i])));
    ++seen[s];
    hit[s] += pred[i] == labels[i];
  }
  auto frac = [&](int s) -> std::optional<double> {
    if (seen[s] == 0) return std::nullopt;
    return static_cast<double>(hit[s]) / static_cast<double>(seen[s]);
  };
  return {frac(0), frac(1), frac(2)};
}

inline void add_split(SplitAccuracy& acc, const SplitAccuracy& s, double w) {
  auto add = [w](std::optional<double>& a, const std::optional<double>& b) {
    if (b) a = a.value_or(0.0) + w * *b;
  };
  add(acc.many, s.many);
  add(acc.medium, s.medium);
  add(acc.few, s.few);
}

}  // namespace detail

/// Top-1 accuracy from raw logits (argmax), per expert and for the logit-averaged ensemble.
template <LogitSource M>
EvalReport evaluate(const M& model, std::span<const Sample> test, const CategorySplits& splits) {
  EvalReport r;
  if (test.empty()) return r;
  const Tensor x = features_matrix(test);
  const auto labels = labels_of(test);
  const std::size_t kk = model.num_experts();
  const int classes = static_cast<int>(splits.of_class.size());
  const double w = 1.0 / static_cast<double>(kk);
  std::vector<Tensor> logits;
  r.single_per_class.assign(splits.of_class.size(), std::nullopt);
  for (std::size_t k = 0; k < kk; ++k) {
    logits.push_back(detach(model.expert_logits(k, x)));
    const auto pred = argmax_rows(logits.back());
    r.expert_accuracy.push_back(detail::accuracy(pred, labels));
    r.single_accuracy += w * r.expert_accuracy.back();
    detail::add_split(r.single_splits, detail::split_accuracy(pred, labels, splits), w);
    const auto pc = per_class_accuracy(pred, labels, classes);
    for (std::size_t j = 0; j < pc.size(); ++j)
      if (pc[j]) r.single_per_class[j] = r.single_per_class[j].value_or(0.0) + w * *pc[j];
  }
  const auto pred = argmax_rows(ensemble_logits(logits));
  r.ensemble_accuracy = detail::accuracy(pred, labels);
  r.ensemble_splits = detail::split_accuracy(pred, labels, splits);
  r.ensemble_per_class = per_class_accuracy(pred, labels, classes);
  return r;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossValues loss;  // mean over the epoch's samples
  std::optional<double> single_accuracy;
  std::optional<double> ensemble_accuracy;
};

struct RunResult {
  TrainConfig config;  // resolved, seeds derived
  ClassPrior prior;
  EvalReport final_eval;
  std::vector<EpochRecord> history;
  KLReport kl;
  ScoreHistogram hardest_single;    // expert 0
  ScoreHistogram hardest_ensemble;  // logit average
  double wall_clock_seconds = 0.0;  // not part of the reproducible record
};

struct TrainedRun {
  RunResult result;
  MultiExpert model;
  Dataset data;
};

namespace detail {

inline Tensor batch_matrix(const std::vector<Sample>& train, std::span<const std::size_t> idx,
                           const AugmentationPolicy& policy, bool augmented, int draw) {
  const std::size_t d = train.front().features.size();
  std::vector<double> v;
  v.reserve(idx.size() * d);
  for (auto i : idx) {
    if (!augmented) {
      v.insert(v.end(), train[i].features.begin(), train[i].features.end());
    } else {
      const auto view = augment(train[i], policy, draw);
      v.insert(v.end(), view.features.begin(), view.features.end());
    }
  }
  return Tensor::matrix(idx.size(), d, std::move(v));
}

inline KLReport final_kl(const MultiExpert& model, const Dataset& data, const ClassPrior& prior, const TrainConfig& cfg) {
  KLReport kl;
  kl.class_counts = detail::class_counts(data.test, prior.num_classes());
  if (data.test.empty()) return kl;
  if (model.num_experts() >= 2) kl.inter = inter_expert_kl(model, data.test, prior);
  AugmentationPolicy probe(cfg.augmentation.noise_sigma, cfg.augmentation.mask_prob, 2,
                           mix_seed(cfg.seed, 0x7E57));
  kl.intra = intra_expert_kl(model, data.test, prior, probe, cfg.kl_pairs);
  return kl;
}

}  // namespace detail

/// Trains from scratch and keeps the model and data for later analysis.
inline TrainedRun train_full(TrainConfig cfg) {
  const auto started = std::chrono::steady_clock::now();
  cfg.derive_seeds();
  cfg.validate();

  const ClassPrior prior = build_longtail_counts(cfg.dataset);
  Dataset data = generate_dataset(cfg.dataset, prior);
  const CategorySplits splits = split_categories(prior, cfg.many_threshold, cfg.few_threshold);
  MultiExpert model(cfg.architecture(), cfg.loss.experts, cfg.seed);

  std::vector<std::vector<Tensor>> params;
  std::vector<OptimizerState> velocity;
  for (const auto& e : model.experts()) {
    params.push_back(e.parameters());
    velocity.push_back(OptimizerState::for_parameters(params.back()));
  }

  RunResult result;
  result.prior = prior;
  const std::size_t n = data.train.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const int copies = cfg.augmentation.copies;
  const bool augmented = copies > 1 || cfg.augment_single_view;
  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng(mix_seed(cfg.seed, 0x5FF1E, static_cast<std::uint64_t>(epoch))).shuffle(std::span<std::size_t>(order));
    AugmentationPolicy epoch_policy = cfg.augmentation;
    epoch_policy.seed = mix_seed(cfg.augmentation.seed, static_cast<std::uint64_t>(epoch));

    LossValues epoch_loss;
    for (std::size_t start = 0; start < n; start += batch, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch, n - start));
      std::vector<Tensor> views;
      for (int t = 0; t < copies; ++t) views.push_back(detail::batch_matrix(data.train, idx, epoch_policy, augmented, t));
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (auto i : idx) labels.push_back(data.train[i].label);

      LossConfig lc = cfg.loss;
      lc.selection_seed = mix_seed(cfg.seed, 0x5E1, step);
      const LogitGrid grid = forward_all(model, views);
      const LossBreakdown loss = total_loss(grid, labels, prior, lc);
      model.zero_grad();
      backward(loss.total);
      for (std::size_t k = 0; k < params.size(); ++k)
        sgd_step(params[k], velocity[k], lr, cfg.momentum, cfg.weight_decay);
      epoch_loss += LossValues::of(loss).scaled(static_cast<double>(idx.size()));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = epoch_loss.scaled(n ? 1.0 / static_cast<double>(n) : 0.0);
    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      const auto ev = evaluate(model, data.test, splits);
      rec.single_accuracy = ev.single_accuracy;
      rec.ensemble_accuracy = ev.ensemble_accuracy;
    }
    result.history.push_back(rec);
  }

  result.final_eval = evaluate(model, data.test, splits);
  result.kl = detail::final_kl(model, data, prior, cfg);
  if (!data.test.empty()) {
    result.hardest_single = hardest_negative_scores(model, data.test, std::size_t{0});
    result.hardest_ensemble = hardest_negative_scores(model, data.test);
  }
  result.config = cfg;
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return TrainedRun{std::move(result), std::move(model), std::move(data)};
}

inline RunResult train(const TrainConfig& cfg) { return train_full(cfg).result; }

}  // namespace ncl
