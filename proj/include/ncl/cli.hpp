#pragma once

// ncl_lab commands: train, ablate, sweep, analyze.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ncl/experiments.hpp"
#include "ncl/io.hpp"

namespace ncl::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 2, kIo = 3 };

struct Options {
  std::string command;
  std::string config;  // empty: built-in defaults
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;
  std::string axis;
  std::vector<double> values;
  std::string run;
};

namespace detail {

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

/// A config file, or a manifest written by `train` (its "config" member is replayed).
inline TrainConfig load_config(const std::string& path) {
  if (path.empty()) return TrainConfig{}.derive_seeds();
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what(), "config");
  }
  const json j = parse_json(text, path);
  if (j.is_object() && j.contains("config") && j.contains("command")) return train_config_from_json(j.at("config"));
  return train_config_from_json(j);
}

inline TrainConfig resolved_config(const Options& o) {
  TrainConfig c = load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  c.derive_seeds();
  c.validate();
  return c;
}

inline std::vector<std::uint64_t> seed_list(const Options& o, const TrainConfig& c) {
  if (!o.seeds.empty()) return o.seeds;
  return {c.seed};
}

inline std::string number(double v) { return json(v).dump(); }

inline std::string slug(std::string s) {
  for (auto& ch : s) ch = std::isalnum(static_cast<unsigned char>(ch)) ? static_cast<char>(std::tolower(ch)) : '_';
  return s;
}

/// Writes `files` into `dir` and returns their checksums in write order.
inline json write_all(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& files) {
  ensure_dir(dir);
  json sums = json::object();
  for (const auto& [name, text] : files) {
    write_text_file(dir / name, text);
    sums[name] = fnv1a_hex(text);
  }
  return sums;
}

inline json manifest(const Options& o, const TrainConfig& c, const fs::path& out, json artifacts, double seconds) {
  json m;
  m["command"] = o.command;
  m["config_path"] = o.config;
  m["seed"] = c.seed;
  m["out"] = out.string();
  m["config"] = to_json(c);
  m["artifacts"] = std::move(artifacts);
  m["wall_clock_seconds"] = seconds;
  return m;
}

}  // namespace detail

inline int cmd_train(const Options& o, std::ostream& log) {
  const TrainConfig cfg = detail::resolved_config(o);
  const fs::path out = o.out.empty() ? fs::path("runs") / ("seed_" + std::to_string(cfg.seed)) : fs::path(o.out);
  detail::ensure_dir(out);
  log << "train: seed " << cfg.seed << ", " << cfg.epochs << " epochs -> " << out.string() << '\n';
  TrainedRun run = train_full(cfg);
  const auto& r = run.result;
  const json sums = detail::write_all(out, {{"result.json", dump(to_json(r))},
                                            {"history.csv", history_csv(r)},
                                            {"checkpoint.json", dump(checkpoint_to_json(run.model))},
                                            {"dataset.json", dump(dataset_to_json(r.config.dataset, r.prior, run.data))}});
  write_text_file(out / "manifest.json", dump(detail::manifest(o, r.config, out, sums, r.wall_clock_seconds)));
  log << "single " << r.final_eval.single_accuracy << "  ensemble " << r.final_eval.ensemble_accuracy << '\n';
  return kOk;
}

inline int cmd_ablate(const Options& o, std::ostream& log) {
  const TrainConfig base = detail::resolved_config(o);
  const auto seeds = detail::seed_list(o, base);
  const fs::path out = o.out.empty() ? fs::path("runs") / "ablation" : fs::path(o.out);
  detail::ensure_dir(out);
  log << "ablate: " << seeds.size() << " seed(s), " << o.jobs << " job(s) -> " << out.string() << '\n';
  const auto entries = run_ablation(base, seeds, o.jobs);

  std::ostringstream csv;
  csv << "row,seed,single_acc,ensemble_acc\n";
  for (const auto& e : entries) {
    csv << row_label(e.row) << ',' << e.seed << ',' << detail::number(e.run.final_eval.single_accuracy) << ','
        << detail::number(e.run.final_eval.ensemble_accuracy) << '\n';
    if (e.row != AblationRow::full_ensemble) {
      detail::write_all(out / ("seed_" + std::to_string(e.seed)) / detail::slug(row_label(e.row)),
                        {{"result.json", dump(to_json(e.run))}});
    }
    log << "  seed " << e.seed << "  " << row_label(e.row) << "  " << e.reported_accuracy() << '\n';
  }
  write_text_file(out / "ablation.csv", csv.str());
  return kOk;
}

inline int cmd_sweep(const Options& o, std::ostream& log) {
  if (o.axis.empty()) throw ConfigError("--axis is required", "axis");
  const SweepAxis axis = parse_axis(o.axis);
  if (o.values.empty()) throw ConfigError("--values needs at least one value", "values");
  const TrainConfig base = detail::resolved_config(o);
  const auto seeds = detail::seed_list(o, base);
  const fs::path out = o.out.empty() ? fs::path("runs") / ("sweep_" + o.axis) : fs::path(o.out);

  std::vector<TrainConfig> configs;
  for (double v : o.values) {
    std::string note;
    const TrainConfig point = sweep_config(base, axis, v, &note);
    if (!note.empty()) log << "note: " << note << '\n';
    for (auto s : seeds) {
      TrainConfig c = point;
      c.seed = s;
      configs.push_back(c);
    }
  }
  detail::ensure_dir(out);
  log << "sweep " << o.axis << ": " << configs.size() << " run(s) -> " << out.string() << '\n';
  const auto runs = run_all(configs, o.jobs);

  std::ostringstream csv;
  csv << o.axis << ",seed,single_acc,ensemble_acc\n";
  std::size_t i = 0;
  for (double v : o.values) {
    for (auto s : seeds) {
      const auto& r = runs[i++];
      csv << detail::number(v) << ',' << s << ',' << detail::number(r.final_eval.single_accuracy) << ','
          << detail::number(r.final_eval.ensemble_accuracy) << '\n';
      detail::write_all(out / (o.axis + "_" + detail::number(v)) / ("seed_" + std::to_string(s)),
                        {{"result.json", dump(to_json(r))}});
    }
  }
  write_text_file(out / "sweep.csv", csv.str());
  return kOk;
}

inline int cmd_analyze(const Options& o, std::ostream& log) {
  if (o.run.empty()) throw ConfigError("--run DIR is required", "run");
  const fs::path run(o.run);
  const fs::path ckpt = run / "checkpoint.json";
  const fs::path data = run / "dataset.json";
  if (!fs::exists(ckpt)) throw ConfigError("missing " + ckpt.string(), "run");
  if (!fs::exists(data)) throw ConfigError("missing " + data.string(), "run");

  Options co = o;
  if (co.config.empty() && fs::exists(run / "manifest.json")) co.config = (run / "manifest.json").string();
  const TrainConfig cfg = detail::resolved_config(co);

  const MultiExpert model = checkpoint_from_json(parse_json(read_text_file(ckpt), ckpt.string()));
  const LoadedDataset ds = dataset_from_json(parse_json(read_text_file(data), data.string()));
  if (model.num_classes() != ds.prior.num_classes())
    throw ConfigError("checkpoint has " + std::to_string(model.num_classes()) + " classes, dataset has " +
                          std::to_string(ds.prior.num_classes()),
                      "run");
  if (model.num_experts() < 2) log << "warning: single-expert checkpoint, inter-expert KL skipped\n";

  const CategorySplits splits = split_categories(ds.prior, cfg.many_threshold, cfg.few_threshold);
  const EvalReport ev = evaluate(model, ds.data.test, splits);
  const KLReport kl = ncl::detail::final_kl(model, ds.data, ds.prior, cfg);
  json hardest = json::object();
  if (!ds.data.test.empty()) {
    hardest["expert0"] = to_json(hardest_negative_scores(model, ds.data.test, std::size_t{0}));
    hardest["ensemble"] = to_json(hardest_negative_scores(model, ds.data.test));
  }
  const fs::path out = o.out.empty() ? run : fs::path(o.out);
  detail::write_all(out, {{"kl_report.json", dump(to_json(kl))},
                          {"per_class.csv", per_class_csv(ds.prior, ev.ensemble_per_class, kl)},
                          {"hardest_negative.json", dump(hardest)}});
  log << "analyze: wrote kl_report.json, per_class.csv, hardest_negative.json to " << out.string() << '\n';
  return kOk;
}

inline int dispatch(const Options& o, std::ostream& log) {
  if (o.command == "train") return cmd_train(o, log);
  if (o.command == "ablate") return cmd_ablate(o, log);
  if (o.command == "sweep") return cmd_sweep(o, log);
  if (o.command == "analyze") return cmd_analyze(o, log);
  throw ConfigError("unknown command '" + o.command + "'", "command");
}

/// Parses `args` (without the program name) and runs the command.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"NCL++ long-tailed classification lab", "ncl_lab"};
  app.require_subcommand(1);
  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "config JSON or a run manifest to replay");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--seeds", o.seeds, "seed list for grids, e.g. 1,2,3")->delimiter(',');
    sub->add_option("--jobs", o.jobs, "parallel runs")->check(CLI::PositiveNumber);
  };
  auto* train_cmd = app.add_subcommand("train", "train one model");
  auto* ablate_cmd = app.add_subcommand("ablate", "8-row component ablation");
  auto* sweep_cmd = app.add_subcommand("sweep", "one-axis hyperparameter sweep");
  auto* analyze_cmd = app.add_subcommand("analyze", "KL and hardest-negative analysis of a trained run");
  for (auto* s : {train_cmd, ablate_cmd, sweep_cmd, analyze_cmd}) common(s);
  sweep_cmd->add_option("--axis", o.axis, "beta | lambda | copies | experts");
  sweep_cmd->add_option("--values", o.values, "axis values, e.g. 0.1,0.3,0.5")->delimiter(',');
  analyze_cmd->add_option("--run", o.run, "directory written by train");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  o.command = app.get_subcommands().front()->get_name();

  try {
    return dispatch(o, err);
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::domain_error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  }
}

}  // namespace ncl::cli
