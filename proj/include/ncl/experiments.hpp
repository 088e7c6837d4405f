#pragma once

// Ablation grid, sweep axes and a small worker pool for independent runs.

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "ncl/errors.hpp"
#include "ncl/train.hpp"

namespace ncl {

enum class AblationRow { ce, bil, bil_nfl, bil_inter, bil_intra, bil_both, full, full_ensemble };

inline constexpr AblationRow kAblationRows[] = {AblationRow::ce,        AblationRow::bil,       AblationRow::bil_nfl,
                                                AblationRow::bil_inter, AblationRow::bil_intra, AblationRow::bil_both,
                                                AblationRow::full,      AblationRow::full_ensemble};

inline const char* row_label(AblationRow r) {
  switch (r) {
    case AblationRow::ce: return "CE";
    case AblationRow::bil: return "BIL";
    case AblationRow::bil_nfl: return "BIL+NFL";
    case AblationRow::bil_inter: return "BIL+InterCL";
    case AblationRow::bil_intra: return "BIL+IntraCL";
    case AblationRow::bil_both: return "BIL+InterCL+IntraCL";
    case AblationRow::full: return "NCL++";
    case AblationRow::full_ensemble: return "NCL++ ensemble";
  }
  return "?";
}

/// The training config behind one ablation row. `base` is the full model;
/// rows without IntraCL train on a single view. The ensemble row trains the
/// same config as the full row.
inline TrainConfig ablation_config(const TrainConfig& base, AblationRow row) {
  TrainConfig c = base;
  auto& l = c.loss;
  const bool intra_row = row == AblationRow::bil_intra || row == AblationRow::bil_both ||
                         row == AblationRow::full || row == AblationRow::full_ensemble;
  if (!intra_row) c.augmentation.copies = 1;
  l.objective = Objective::balanced;
  l.use_nfl = row == AblationRow::bil_nfl || row == AblationRow::full || row == AblationRow::full_ensemble;
  l.use_inter = row == AblationRow::bil_inter || row == AblationRow::bil_both || row == AblationRow::full ||
                row == AblationRow::full_ensemble;
  l.use_intra = intra_row;
  if (row == AblationRow::ce) {
    l.objective = Objective::cross_entropy;
    l.experts = 1;
  }
  c.loss.copies = c.augmentation.copies;
  return c;
}

/// Runs every config, at most `jobs` at a time. Results keep input order.
inline std::vector<RunResult> run_all(const std::vector<TrainConfig>& configs, int jobs = 1) {
  std::vector<RunResult> out(configs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        out[i] = train(configs[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto n = static_cast<std::size_t>(std::clamp<int>(jobs, 1, static_cast<int>(std::max<std::size_t>(configs.size(), 1))));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

struct AblationEntry {
  AblationRow row;
  std::uint64_t seed;
  RunResult run;  // the ensemble row holds a copy of the full row's run

  double reported_accuracy() const {
    return row == AblationRow::full_ensemble ? run.final_eval.ensemble_accuracy : run.final_eval.single_accuracy;
  }
};

/// Seven trainings per seed; the eighth row re-reads the full model's ensemble accuracy.
inline std::vector<AblationEntry> run_ablation(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                               int jobs = 1) {
  std::vector<TrainConfig> configs;
  for (auto s : seeds)
    for (auto row : kAblationRows) {
      if (row == AblationRow::full_ensemble) continue;
      TrainConfig c = ablation_config(base, row);
      c.seed = s;
      configs.push_back(c);
    }
  auto runs = run_all(configs, jobs);
  std::vector<AblationEntry> out;
  std::size_t i = 0;
  for (auto s : seeds) {
    for (auto row : kAblationRows) {
      if (row == AblationRow::full_ensemble) {
        out.push_back({row, s, out.back().run});
      } else {
        out.push_back({row, s, std::move(runs[i++])});
      }
    }
  }
  return out;
}

enum class SweepAxis { beta, lambda, copies, experts };

inline SweepAxis parse_axis(const std::string& name) {
  if (name == "beta") return SweepAxis::beta;
  if (name == "lambda") return SweepAxis::lambda;
  if (name == "copies") return SweepAxis::copies;
  if (name == "experts") return SweepAxis::experts;
  throw ConfigError("unknown sweep axis '" + name + "' (expected beta, lambda, copies or experts)", "axis");
}

/// `base` with one axis set to `value`. One expert leaves nothing for InterCL,
/// so that axis point switches it off and reports it through `note`.
inline TrainConfig sweep_config(const TrainConfig& base, SweepAxis axis, double value, std::string* note = nullptr) {
  TrainConfig c = base;
  auto integral = [&](const char* key) {
    if (value != static_cast<double>(static_cast<int>(value))) throw ConfigError("expected an integer value", key);
    return static_cast<int>(value);
  };
  switch (axis) {
    case SweepAxis::beta: c.loss.beta = value; break;
    case SweepAxis::lambda: c.loss.lambda = value; break;
    case SweepAxis::copies:
      c.augmentation.copies = integral("copies");
      c.loss.copies = c.augmentation.copies;
      break;
    case SweepAxis::experts:
      c.loss.experts = integral("experts");
      if (c.loss.experts == 1 && c.loss.use_inter) {
        c.loss.use_inter = false;
        if (note) *note = "experts=1: InterCL disabled";
      }
      break;
  }
  c.validate();
  return c;
}

}  // namespace ncl
