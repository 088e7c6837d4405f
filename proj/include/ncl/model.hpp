#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncl/diffcore.hpp"
#include "ncl/errors.hpp"
#include "ncl/rng.hpp"

namespace ncl {

struct Architecture {
  int feature_dim = 16;
  std::vector<int> hidden_dims{64, 64};
  int num_classes = 20;

  void validate() const {
    if (feature_dim < 1) throw ConfigError("must be >= 1", "model.feature_dim");
    if (num_classes < 2) throw ConfigError("must be >= 2", "model.num_classes");
    for (int h : hidden_dims)
      if (h < 1) throw ConfigError("hidden widths must be >= 1", "model.hidden_dims");
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Layer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

/// Fully connected ReLU network. Copies are deep: each copy owns its parameters.
class ExpertNet {
 public:
  /// Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  ExpertNet(Architecture arch, std::uint64_t init_seed) : arch_(std::move(arch)), init_seed_(init_seed) {
    arch_.validate();
    Rng rng(init_seed_);
    int in = arch_.feature_dim;
    auto widths = arch_.hidden_dims;
    widths.push_back(arch_.num_classes);
    for (int out : widths) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::vector<double> w(static_cast<std::size_t>(in) * static_cast<std::size_t>(out));
      std::vector<double> b(static_cast<std::size_t>(out));
      for (auto& v : w) v = rng.uniform(-bound, bound);
      for (auto& v : b) v = rng.uniform(-bound, bound);
      layers_.push_back(Layer{Tensor(Shape{static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, std::move(w), true),
                              Tensor(Shape{static_cast<std::size_t>(out)}, std::move(b), true)});
      in = out;
    }
  }

  ExpertNet(const ExpertNet& other) : arch_(other.arch_), init_seed_(other.init_seed_) {
    for (const auto& l : other.layers_) layers_.push_back(Layer{copy_leaf(l.weight), copy_leaf(l.bias)});
  }
  ExpertNet& operator=(const ExpertNet& other) {
    if (this != &other) *this = ExpertNet(other);
    return *this;
  }
  ExpertNet(ExpertNet&&) noexcept = default;
  ExpertNet& operator=(ExpertNet&&) noexcept = default;

  const Architecture& architecture() const noexcept { return arch_; }
  std::uint64_t init_seed() const noexcept { return init_seed_; }

  std::span<Layer> layers() noexcept { return layers_; }
  std::span<const Layer> layers() const noexcept { return layers_; }

  /// Parameter handles in a fixed order: w0, b0, w1, b1, ...
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.numel() + l.bias.numel();
    return n;
  }

  void zero_grad() {
    for (auto& l : layers_) {
      l.weight.zero_grad();
      l.bias.zero_grad();
    }
  }

  /// [B x feature_dim] -> [B x num_classes] logits.
  Tensor forward(const Tensor& batch) const {
    if (batch.rank() != 2 || batch.cols() != static_cast<std::size_t>(arch_.feature_dim)) {
      throw ShapeError("expert expects [B x " + std::to_string(arch_.feature_dim) + "] input, got " +
                       shape_str(batch.shape()));
    }
    Tensor h = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = matmul(h, layers_[i].weight) + layers_[i].bias;
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

 private:
  static Tensor copy_leaf(const Tensor& t) {
    return Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), t.requires_grad());
  }

  Architecture arch_;
  std::uint64_t init_seed_;
  std::vector<Layer> layers_;
};

/// logits[k][t]: expert k applied to augmented copy t.
using LogitGrid = std::vector<std::vector<Tensor>>;

class MultiExpert {
 public:
  static std::uint64_t expert_seed(std::uint64_t seed, std::size_t k) { return mix_seed(seed, 0x6578, k); }

  MultiExpert(const Architecture& arch, int num_experts, std::uint64_t seed) {
    if (num_experts < 1) throw ConfigError("need at least one expert", "loss.experts");
    for (int k = 0; k < num_experts; ++k) experts_.emplace_back(arch, expert_seed(seed, static_cast<std::size_t>(k)));
  }

  explicit MultiExpert(std::vector<ExpertNet> experts) : experts_(std::move(experts)) {
    if (experts_.empty()) throw ConfigError("need at least one expert", "loss.experts");
    for (const auto& e : experts_)
      if (!(e.architecture() == experts_.front().architecture()))
        throw ConfigError("experts must share one architecture", "model");
  }

  std::size_t num_experts() const noexcept { return experts_.size(); }
  std::size_t num_classes() const noexcept { return static_cast<std::size_t>(architecture().num_classes); }
  const Architecture& architecture() const noexcept { return experts_.front().architecture(); }

  ExpertNet& expert(std::size_t k) { return experts_.at(k); }
  const ExpertNet& expert(std::size_t k) const { return experts_.at(k); }
  std::span<ExpertNet> experts() noexcept { return experts_; }
  std::span<const ExpertNet> experts() const noexcept { return experts_; }

  Tensor expert_logits(std::size_t k, const Tensor& batch) const { return experts_.at(k).forward(batch); }

  void zero_grad() {
    for (auto& e : experts_) e.zero_grad();
  }

 private:
  std::vector<ExpertNet> experts_;
};

inline Tensor forward(const ExpertNet& expert, const Tensor& batch) { return expert.forward(batch); }

inline LogitGrid forward_all(const MultiExpert& model, std::span<const Tensor> batches) {
  if (batches.empty()) throw ConfigError("forward_all needs at least one batch", "copies");
  for (const auto& b : batches)
    if (b.shape() != batches.front().shape()) throw ShapeError("augmented batches must share one shape");
  LogitGrid grid(model.num_experts());
  for (std::size_t k = 0; k < model.num_experts(); ++k) {
    grid[k].reserve(batches.size());
    for (const auto& b : batches) grid[k].push_back(model.expert(k).forward(b));
  }
  return grid;
}

/// Arithmetic mean of expert logits.
inline Tensor ensemble_logits(std::span<const Tensor> logits_per_expert) {
  if (logits_per_expert.empty()) throw ShapeError("ensemble of zero experts");
  Tensor acc = logits_per_expert.front();
  for (std::size_t k = 1; k < logits_per_expert.size(); ++k) {
    if (logits_per_expert[k].shape() != acc.shape()) throw ShapeError("ensemble members disagree on logit shape");
    acc = acc + logits_per_expert[k];
  }
  if (logits_per_expert.size() == 1) return acc;
  return scale(acc, 1.0 / static_cast<double>(logits_per_expert.size()));
}

}  // namespace ncl
