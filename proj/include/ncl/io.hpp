#pragma once

// JSON and CSV artifacts: run configs (strictly parsed), datasets, model
// checkpoints, run results, analysis reports.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ncl/data.hpp"
#include "ncl/errors.hpp"
#include "ncl/losses.hpp"
#include "ncl/metrics.hpp"
#include "ncl/model.hpp"
#include "ncl/train.hpp"

namespace ncl {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Files

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline json parse_json(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what(), origin);
  }
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

/// 64-bit FNV-1a, hex encoded. Used for artifact checksums in manifests.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Strict object reader: typed lookups with defaults, unknown keys rejected.

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected an object", path_.empty() ? "<root>" : path_);
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    const auto kp = key_path(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("expected true/false", kp);
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("expected an integer", kp);
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned() || v.get<long long>() >= 0) {
          out = v.get<T>();
        } else {
          throw ConfigError("expected a non-negative integer", kp);
        }
      } else {
        out = v.get<T>();
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("expected a number", kp);
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("expected a string", kp);
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) throw ConfigError("expected an array of integers", kp);
      out.clear();
      for (const auto& e : v) {
        if (!e.is_number_integer()) throw ConfigError("expected an array of integers", kp);
        out.push_back(e.get<int>());
      }
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) throw ConfigError("unknown key", key_path(key));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// TrainConfig

inline const char* to_string(Objective o) { return o == Objective::balanced ? "balanced" : "cross_entropy"; }
inline const char* to_string(CategorySelection s) { return s == CategorySelection::hard ? "hard" : "random"; }

inline json to_json(const TrainConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["lr_decay_epochs"] = c.lr_decay_epochs;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["eval_every"] = c.eval_every;
  j["hidden_dims"] = c.hidden_dims;
  j["kl_pairs"] = c.kl_pairs;
  j["augment_single_view"] = c.augment_single_view;
  j["splits"] = {{"many_threshold", c.many_threshold}, {"few_threshold", c.few_threshold}};
  j["dataset"] = {{"num_classes", c.dataset.num_classes},
                  {"n_max", c.dataset.n_max},
                  {"imbalance_factor", c.dataset.imbalance_factor},
                  {"feature_dim", c.dataset.feature_dim},
                  {"cluster_separation", c.dataset.cluster_separation},
                  {"noise_sigma", c.dataset.noise_sigma},
                  {"test_per_class", c.dataset.test_per_class}};
  j["augmentation"] = {{"noise_sigma", c.augmentation.noise_sigma},
                       {"mask_prob", c.augmentation.mask_prob},
                       {"copies", c.augmentation.copies}};
  j["loss"] = {{"objective", to_string(c.loss.objective)},
               {"lambda", c.loss.lambda},
               {"beta", c.loss.beta},
               {"detach_teacher", c.loss.detach_teacher},
               {"experts", c.loss.experts},
               {"use_inter", c.loss.use_inter},
               {"use_intra", c.loss.use_intra},
               {"use_nfl", c.loss.use_nfl},
               {"category_selection", to_string(c.loss.selection)}};
  return j;
}

/// Missing keys keep the defaults of `base`. Derived seeds are recomputed.
inline TrainConfig train_config_from_json(const json& j, TrainConfig base = {}) {
  TrainConfig c = std::move(base);
  ObjectReader r(j, "");
  r.read("seed", c.seed);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("lr", c.lr);
  r.read("momentum", c.momentum);
  r.read("weight_decay", c.weight_decay);
  r.read("lr_decay_epochs", c.lr_decay_epochs);
  r.read("lr_decay_factor", c.lr_decay_factor);
  r.read("eval_every", c.eval_every);
  r.read("hidden_dims", c.hidden_dims);
  r.read("kl_pairs", c.kl_pairs);
  r.read("augment_single_view", c.augment_single_view);
  if (r.has("splits")) {
    ObjectReader s(r.raw("splits"), "splits");
    s.read("many_threshold", c.many_threshold);
    s.read("few_threshold", c.few_threshold);
    s.finish();
  }
  if (r.has("dataset")) {
    ObjectReader d(r.raw("dataset"), "dataset");
    d.read("num_classes", c.dataset.num_classes);
    d.read("n_max", c.dataset.n_max);
    d.read("imbalance_factor", c.dataset.imbalance_factor);
    d.read("feature_dim", c.dataset.feature_dim);
    d.read("cluster_separation", c.dataset.cluster_separation);
    d.read("noise_sigma", c.dataset.noise_sigma);
    d.read("test_per_class", c.dataset.test_per_class);
    d.finish();
  }
  if (r.has("augmentation")) {
    ObjectReader a(r.raw("augmentation"), "augmentation");
    a.read("noise_sigma", c.augmentation.noise_sigma);
    a.read("mask_prob", c.augmentation.mask_prob);
    a.read("copies", c.augmentation.copies);
    a.finish();
  }
  if (r.has("loss")) {
    ObjectReader l(r.raw("loss"), "loss");
    std::string objective = to_string(c.loss.objective);
    std::string selection = to_string(c.loss.selection);
    l.read("objective", objective);
    l.read("lambda", c.loss.lambda);
    l.read("beta", c.loss.beta);
    l.read("detach_teacher", c.loss.detach_teacher);
    l.read("experts", c.loss.experts);
    l.read("use_inter", c.loss.use_inter);
    l.read("use_intra", c.loss.use_intra);
    l.read("use_nfl", c.loss.use_nfl);
    l.read("category_selection", selection);
    l.finish();
    if (objective == "balanced") c.loss.objective = Objective::balanced;
    else if (objective == "cross_entropy") c.loss.objective = Objective::cross_entropy;
    else throw ConfigError("expected \"balanced\" or \"cross_entropy\"", "loss.objective");
    if (selection == "hard") c.loss.selection = CategorySelection::hard;
    else if (selection == "random") c.loss.selection = CategorySelection::random;
    else throw ConfigError("expected \"hard\" or \"random\"", "loss.category_selection");
  }
  r.finish();
  c.derive_seeds();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset

inline json to_json(const LongTailSpec& s) {
  return {{"num_classes", s.num_classes},   {"n_max", s.n_max},
          {"imbalance_factor", s.imbalance_factor}, {"feature_dim", s.feature_dim},
          {"cluster_separation", s.cluster_separation}, {"noise_sigma", s.noise_sigma},
          {"test_per_class", s.test_per_class}, {"seed", s.seed}};
}

inline json dataset_to_json(const LongTailSpec& spec, const ClassPrior& prior, const Dataset& ds) {
  auto samples = [](const std::vector<Sample>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back(json::array({s.features, s.label}));
    return a;
  };
  json j;
  j["spec"] = to_json(spec);
  j["counts"] = prior.counts;
  j["train"] = samples(ds.train);
  j["test"] = samples(ds.test);
  return j;
}

struct LoadedDataset {
  LongTailSpec spec;
  ClassPrior prior;
  Dataset data;
};

inline LoadedDataset dataset_from_json(const json& j) {
  LoadedDataset out;
  try {
    ObjectReader r(j, "");
    ObjectReader s(r.raw("spec"), "spec");
    s.read("num_classes", out.spec.num_classes);
    s.read("n_max", out.spec.n_max);
    s.read("imbalance_factor", out.spec.imbalance_factor);
    s.read("feature_dim", out.spec.feature_dim);
    s.read("cluster_separation", out.spec.cluster_separation);
    s.read("noise_sigma", out.spec.noise_sigma);
    s.read("test_per_class", out.spec.test_per_class);
    s.read("seed", out.spec.seed);
    s.finish();
    out.prior.counts = r.raw("counts").get<std::vector<std::int64_t>>();
    auto samples = [](const json& a) {
      std::vector<Sample> v;
      for (const auto& e : a) {
        Sample s;
        s.features = e.at(0).get<std::vector<double>>();
        s.label = e.at(1).get<int>();
        s.id = v.size();
        v.push_back(std::move(s));
      }
      return v;
    };
    out.data.train = samples(r.raw("train"));
    out.data.test = samples(r.raw("test"));
    r.finish();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed dataset: ") + e.what(), "dataset");
  }
  out.prior.validate();
  for (const auto* set : {&out.data.train, &out.data.test})
    for (const auto& s : *set)
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= out.prior.num_classes())
        throw ConfigError("sample label out of range", "dataset");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint

inline json checkpoint_to_json(const MultiExpert& model) {
  const auto& arch = model.architecture();
  json j;
  j["architecture"] = {{"feature_dim", arch.feature_dim}, {"hidden_dims", arch.hidden_dims}, {"num_classes", arch.num_classes}};
  json experts = json::array();
  for (const auto& e : model.experts()) {
    json layers = json::array();
    for (const auto& l : e.layers()) {
      layers.push_back({{"rows", l.weight.rows()},
                        {"cols", l.weight.cols()},
                        {"weight", std::vector<double>(l.weight.values().begin(), l.weight.values().end())},
                        {"bias", std::vector<double>(l.bias.values().begin(), l.bias.values().end())}});
    }
    experts.push_back({{"init_seed", e.init_seed()}, {"layers", layers}});
  }
  j["experts"] = experts;
  return j;
}

inline MultiExpert checkpoint_from_json(const json& j) {
  try {
    Architecture arch;
    const auto& a = j.at("architecture");
    arch.feature_dim = a.at("feature_dim").get<int>();
    arch.hidden_dims = a.at("hidden_dims").get<std::vector<int>>();
    arch.num_classes = a.at("num_classes").get<int>();
    std::vector<ExpertNet> experts;
    for (const auto& e : j.at("experts")) {
      ExpertNet net(arch, e.at("init_seed").get<std::uint64_t>());
      const auto& layers = e.at("layers");
      if (layers.size() != net.layers().size()) throw ConfigError("layer count does not match architecture", "checkpoint");
      for (std::size_t i = 0; i < layers.size(); ++i) {
        auto w = layers[i].at("weight").get<std::vector<double>>();
        auto b = layers[i].at("bias").get<std::vector<double>>();
        auto& layer = net.layers()[i];
        if (w.size() != layer.weight.numel() || b.size() != layer.bias.numel())
          throw ConfigError("layer " + std::to_string(i) + " has the wrong size", "checkpoint");
        std::copy(w.begin(), w.end(), layer.weight.mutable_values().begin());
        std::copy(b.begin(), b.end(), layer.bias.mutable_values().begin());
      }
      experts.push_back(std::move(net));
    }
    return MultiExpert(std::move(experts));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what(), "checkpoint");
  }
}

// ---------------------------------------------------------------------------
// Reports

inline json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const LossValues& v, int step) {
  return {{"step", step},       {"bil_g", v.bil_g},     {"bil_p", v.bil_p},     {"inter_g", v.inter_g},
          {"inter_p", v.inter_p}, {"intra_g", v.intra_g}, {"intra_p", v.intra_p}, {"total", v.total}};
}

inline json to_json(const SplitAccuracy& s) {
  return {{"many", opt(s.many)}, {"medium", opt(s.medium)}, {"few", opt(s.few)}};
}

inline json to_json(const EvalReport& e) {
  json pc_e = json::array(), pc_s = json::array();
  for (const auto& v : e.ensemble_per_class) pc_e.push_back(opt(v));
  for (const auto& v : e.single_per_class) pc_s.push_back(opt(v));
  return {{"expert_accuracy", e.expert_accuracy},
          {"single_accuracy", e.single_accuracy},
          {"ensemble_accuracy", e.ensemble_accuracy},
          {"single_splits", to_json(e.single_splits)},
          {"ensemble_splits", to_json(e.ensemble_splits)},
          {"single_per_class", pc_s},
          {"ensemble_per_class", pc_e}};
}

inline json to_json(const KLPart& p) {
  return {{"overall", p.overall}, {"forward", p.forward}, {"reverse", p.reverse}, {"per_class", p.per_class}};
}

inline json to_json(const KLReport& r) {
  json j;
  j["class_counts"] = r.class_counts;
  j["inter"] = r.inter ? to_json(*r.inter) : json(nullptr);
  j["intra"] = r.intra ? to_json(*r.intra) : json(nullptr);
  return j;
}

inline json to_json(const ScoreHistogram& h) {
  return {{"edges", h.edges},
          {"counts", h.counts},
          {"total", h.total()},
          {"mean", h.mean()},
          {"fraction_above_0.4", h.fraction_above(0.4)}};
}

/// Everything reproducible about a run; wall-clock time is left to the manifest.
inline json to_json(const RunResult& r) {
  json j;
  j["seed"] = r.config.seed;
  j["config"] = to_json(r.config);
  j["counts"] = r.prior.counts;
  j["final"] = to_json(r.final_eval);
  j["kl"] = to_json(r.kl);
  j["hardest_negative"] = {{"expert0", to_json(r.hardest_single)}, {"ensemble", to_json(r.hardest_ensemble)}};
  json hist = json::array();
  for (const auto& e : r.history) hist.push_back(to_json(e.loss, e.epoch));
  j["loss_history"] = hist;
  return j;
}

namespace detail {

inline std::string csv_num(double v) { return json(v).dump(); }

inline std::string csv_opt(const std::optional<double>& v) { return v ? csv_num(*v) : std::string(); }

}  // namespace detail

inline std::string history_csv(const RunResult& r) {
  std::ostringstream os;
  os << "epoch,lr,bil_g,bil_p,inter_g,inter_p,intra_g,intra_p,total,single_acc,ensemble_acc\n";
  for (const auto& e : r.history) {
    using detail::csv_num;
    os << e.epoch << ',' << csv_num(e.lr) << ',' << csv_num(e.loss.bil_g) << ',' << csv_num(e.loss.bil_p) << ','
       << csv_num(e.loss.inter_g) << ',' << csv_num(e.loss.inter_p) << ',' << csv_num(e.loss.intra_g) << ','
       << csv_num(e.loss.intra_p) << ',' << csv_num(e.loss.total) << ',' << detail::csv_opt(e.single_accuracy) << ','
       << detail::csv_opt(e.ensemble_accuracy) << '\n';
  }
  return os.str();
}

/// class_id, n_j, accuracy, inter_kl, intra_kl. Missing values are left empty.
inline std::string per_class_csv(const ClassPrior& prior, const std::vector<std::optional<double>>& accuracy,
                                 const KLReport& kl) {
  std::ostringstream os;
  os << "class_id,n_j,accuracy,inter_kl,intra_kl\n";
  for (std::size_t j = 0; j < prior.num_classes(); ++j) {
    os << j << ',' << prior.counts[j] << ',' << (j < accuracy.size() ? detail::csv_opt(accuracy[j]) : "") << ','
       << (kl.inter ? detail::csv_num(kl.inter->per_class[j]) : "") << ','
       << (kl.intra ? detail::csv_num(kl.intra->per_class[j]) : "") << '\n';
  }
  return os.str();
}

}  // namespace ncl
