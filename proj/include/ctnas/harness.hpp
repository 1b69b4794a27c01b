#pragma once

// Experiment driver behind the command-line tool: configuration, data
// preparation, the search / retrain / eval / stats / ablate / synth commands,
// run reports and SVG charts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctnas/core/checkpoint.hpp"
#include "ctnas/eeg_data.hpp"
#include "ctnas/search.hpp"
#include "ctnas/train.hpp"

namespace ctnas {

namespace fs = std::filesystem;
using Real = float;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- configuration

struct DataConfig {
  std::string source = "synth";  // "synth" or a trial directory / CSV path
  std::string format = "auto";   // auto | directory | csv
  double csv_rate_hz = 250.0;
  SynthSpec synth{4, 8, 750, 250.0, 200, 20.0, 9, 0};
  double resample_hz = 250.0;
  std::int64_t window = 400;
  std::int64_t stride = 50;
  std::string split = "mixed";  // mixed | subject_specific | leave_ratio
  std::string subject;
  double test_ratio = 0.2;        // held out for retrain / eval
  double search_val_ratio = 0.5;  // share of the remaining trials used for architecture steps
  std::uint64_t seed = 0;         // split seed
};

struct ArchConfig {
  int blocks = 2;
  int nodes = 2;
  std::int64_t channels = 0;  // 0: taken from the data
  std::int64_t classes = 0;   // 0: taken from the data
};

struct StatsConfig {
  double threshold = 0.1;      // structures within this fraction of the best accuracy count
  std::string best = "global";  // global | per_run
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/latest";
  DataConfig data;
  std::string search_space = "desk";  // desk | full | custom
  std::vector<std::string> operators;  // custom space
  ArchConfig arch;
  SearchConfig search;
  bool bounds_explicit = false;  // false: bounds scale with the channel count
  TrainConfig retrain;
  StatsConfig stats;

  SearchSpace space(std::int64_t channels) const {
    if (search_space == "desk") return SearchSpace::desk(channels);
    if (search_space == "full") return SearchSpace::full(channels);
    return SearchSpace::from_names(operators, channels);
  }
};

namespace detail {

class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <typename V>
  void get(const std::string& key, V& out) {
    used_.insert(key);
    if (!has(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  JsonReader child(const std::string& key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return JsonReader(has(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown setting");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& s = c.search;
  const auto& k = s.constraints;
  nlohmann::json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["data"] = {{"source", c.data.source},
               {"format", c.data.format},
               {"csv_rate_hz", c.data.csv_rate_hz},
               {"synth",
                {{"classes", c.data.synth.classes},
                 {"channels", c.data.synth.channels},
                 {"points", c.data.synth.points},
                 {"rate_hz", c.data.synth.rate_hz},
                 {"trials_per_class", c.data.synth.trials_per_class},
                 {"snr_db", c.data.synth.snr_db},
                 {"subjects", c.data.synth.subjects},
                 {"seed", c.data.synth.seed}}},
               {"resample_hz", c.data.resample_hz},
               {"window", c.data.window},
               {"stride", c.data.stride},
               {"split", c.data.split},
               {"subject", c.data.subject},
               {"test_ratio", c.data.test_ratio},
               {"search_val_ratio", c.data.search_val_ratio},
               {"seed", c.data.seed}};
  if (c.search_space == "custom") {
    j["search_space"] = c.operators;
  } else {
    j["search_space"] = c.search_space;
  }
  j["architecture"] = {{"blocks", c.arch.blocks}, {"nodes", c.arch.nodes}, {"channels", c.arch.channels},
                       {"classes", c.arch.classes}};
  j["search"] = {{"epochs", s.epochs},
                 {"batch_size", s.batch_size},
                 {"max_steps_per_epoch", s.max_steps_per_epoch},
                 {"stop_after_epochs", s.stop_after_epochs},
                 {"lr_w", s.lr_w},
                 {"lr_w_min", s.lr_w_min},
                 {"momentum", s.momentum},
                 {"weight_decay", s.weight_decay},
                 {"grad_clip", s.grad_clip},
                 {"lr_theta", s.lr_theta},
                 {"theta_betas", {s.theta_beta1, s.theta_beta2}},
                 {"theta_milestones", s.theta_milestones},
                 {"theta_gamma", s.theta_gamma},
                 {"theta_init_std", s.theta_init_std},
                 {"patience", s.patience}};
  j["constraints"] = {{"c_low", k.c_low},
                      {"c_high", k.c_high},
                      {"lambda1", k.lambda1},
                      {"lambda2", k.lambda2},
                      {"lambda3", k.lambda3},
                      {"beta", k.beta},
                      {"temperature", k.temperature},
                      {"time_scale", k.time_scale},
                      {"bounds_in_sigma", k.bounds_in_sigma},
                      {"phi_mean", k.phi_mean}};
  const auto& r = c.retrain;
  j["retrain"] = {{"epochs", r.epochs},         {"batch_size", r.batch_size},     {"lr", r.lr},
                  {"lr_min", r.lr_min},         {"momentum", r.momentum},         {"weight_decay", r.weight_decay},
                  {"grad_clip", r.grad_clip}};
  j["stats"] = {{"threshold", c.stats.threshold}, {"best", c.stats.best}};
  return j;
}

// Desk-scale bounds: the reference 22-channel bounds scaled by (C / 22)^2.
inline void scale_bounds(ConstraintConfig& k, std::int64_t channels) {
  const double f = std::pow(static_cast<double>(channels) / 22.0, 2.0);
  k.c_low = 18200.0 * f;
  k.c_high = 32100.0 * f;
}

inline std::int64_t declared_channels(const ExperimentConfig& c) {
  return c.data.source == "synth" ? c.data.synth.channels : c.arch.channels;
}

inline void validate(const ExperimentConfig& c) {
  try {
    const auto& d = c.data;
    if (d.format != "auto" && d.format != "directory" && d.format != "csv") {
      throw ConfigError("data.format must be auto, directory or csv");
    }
    if (d.source.empty()) throw ConfigError("data.source is empty");
    if (d.source == "synth") {
      const auto& s = d.synth;
      if (!std::isfinite(s.snr_db)) throw ConfigError("data.synth.snr_db must be finite");
      if (s.classes < 2 || s.channels < s.classes || s.points < 8 || s.trials_per_class < 1 || s.subjects < 1 ||
          !(s.rate_hz > 0)) {
        throw ConfigError("data.synth: need classes >= 2, channels >= classes, points >= 8, positive rate and counts");
      }
    }
    if (!(d.resample_hz > 0)) throw ConfigError("data.resample_hz must be positive");
    if (d.window < 1 || d.stride < 1) throw ConfigError("data.window and data.stride must be positive");
    if (d.split != "mixed" && d.split != "subject_specific" && d.split != "leave_ratio") {
      throw ConfigError("data.split must be mixed, subject_specific or leave_ratio");
    }
    if (d.split == "subject_specific" && d.subject.empty()) throw ConfigError("data.subject is required");
    if (!(d.test_ratio > 0 && d.test_ratio < 1)) throw ConfigError("data.test_ratio must lie in (0, 1)");
    if (!(d.search_val_ratio > 0 && d.search_val_ratio < 1)) {
      throw ConfigError("data.search_val_ratio must lie in (0, 1)");
    }
    if (c.search_space != "desk" && c.search_space != "full" && c.search_space != "custom") {
      throw ConfigError("search_space must be desk, full or an operator list");
    }
    c.space(std::max<std::int64_t>(1, declared_channels(c))).validate();
    if (c.arch.blocks < 1) throw ConfigError("architecture.blocks must be >= 1");
    if (c.arch.nodes < 1) throw ConfigError("architecture.nodes must be >= 1");
    if (c.arch.channels < 0 || c.arch.classes < 0) throw ConfigError("architecture channels/classes must be >= 0");
    if (d.window < (std::int64_t{1} << c.arch.blocks)) {
      throw ConfigError("data.window too short for " + std::to_string(c.arch.blocks) + " reductions");
    }
    c.search.validate();
    c.retrain.validate();
    if (!(c.stats.threshold >= 0 && c.stats.threshold < 1)) throw ConfigError("stats.threshold must lie in [0, 1)");
    if (c.stats.best != "global" && c.stats.best != "per_run") throw ConfigError("stats.best must be global or per_run");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::JsonReader r(j, "$");
  r.get("seed", c.seed);
  r.get("output_dir", c.output_dir);
  {
    auto d = r.child("data");
    d.get("source", c.data.source);
    d.get("format", c.data.format);
    d.get("csv_rate_hz", c.data.csv_rate_hz);
    auto s = d.child("synth");
    s.get("classes", c.data.synth.classes);
    s.get("channels", c.data.synth.channels);
    s.get("points", c.data.synth.points);
    s.get("rate_hz", c.data.synth.rate_hz);
    s.get("trials_per_class", c.data.synth.trials_per_class);
    s.get("snr_db", c.data.synth.snr_db);
    s.get("subjects", c.data.synth.subjects);
    s.get("seed", c.data.synth.seed);
    s.finish();
    d.get("resample_hz", c.data.resample_hz);
    d.get("window", c.data.window);
    d.get("stride", c.data.stride);
    d.get("split", c.data.split);
    d.get("subject", c.data.subject);
    d.get("test_ratio", c.data.test_ratio);
    d.get("search_val_ratio", c.data.search_val_ratio);
    d.get("seed", c.data.seed);
    d.finish();
  }
  if (r.has("search_space")) {
    const auto& sp = r.raw("search_space");
    if (sp.is_array()) {
      c.search_space = "custom";
      r.get("search_space", c.operators);
    } else {
      r.get("search_space", c.search_space);
      if (c.search_space == "custom") throw ConfigError("$.search_space: give the operator list directly");
    }
  } else {
    r.get("search_space", c.search_space);
  }
  {
    auto a = r.child("architecture");
    a.get("blocks", c.arch.blocks);
    a.get("nodes", c.arch.nodes);
    a.get("channels", c.arch.channels);
    a.get("classes", c.arch.classes);
    a.finish();
  }
  {
    auto s = r.child("search");
    auto& q = c.search;
    s.get("epochs", q.epochs);
    s.get("batch_size", q.batch_size);
    s.get("max_steps_per_epoch", q.max_steps_per_epoch);
    s.get("stop_after_epochs", q.stop_after_epochs);
    s.get("lr_w", q.lr_w);
    s.get("lr_w_min", q.lr_w_min);
    s.get("momentum", q.momentum);
    s.get("weight_decay", q.weight_decay);
    s.get("grad_clip", q.grad_clip);
    s.get("lr_theta", q.lr_theta);
    std::vector<double> betas{q.theta_beta1, q.theta_beta2};
    s.get("theta_betas", betas);
    if (betas.size() != 2) throw ConfigError("$.search.theta_betas: expected two values");
    q.theta_beta1 = betas[0];
    q.theta_beta2 = betas[1];
    s.get("theta_milestones", q.theta_milestones);
    s.get("theta_gamma", q.theta_gamma);
    s.get("theta_init_std", q.theta_init_std);
    s.get("patience", q.patience);
    s.finish();
  }
  {
    auto k = r.child("constraints");
    auto& q = c.search.constraints;
    c.bounds_explicit = k.has("c_low") || k.has("c_high");
    k.get("c_low", q.c_low);
    k.get("c_high", q.c_high);
    k.get("lambda1", q.lambda1);
    k.get("lambda2", q.lambda2);
    k.get("lambda3", q.lambda3);
    k.get("beta", q.beta);
    k.get("temperature", q.temperature);
    k.get("time_scale", q.time_scale);
    k.get("bounds_in_sigma", q.bounds_in_sigma);
    k.get("phi_mean", q.phi_mean);
    k.finish();
  }
  {
    auto t = r.child("retrain");
    auto& q = c.retrain;
    t.get("epochs", q.epochs);
    t.get("batch_size", q.batch_size);
    t.get("lr", q.lr);
    t.get("lr_min", q.lr_min);
    t.get("momentum", q.momentum);
    t.get("weight_decay", q.weight_decay);
    t.get("grad_clip", q.grad_clip);
    t.finish();
  }
  {
    auto s = r.child("stats");
    s.get("threshold", c.stats.threshold);
    s.get("best", c.stats.best);
    s.finish();
  }
  r.finish();
  c.search.seed = c.seed;
  c.retrain.seed = c.seed;
  const auto channels = declared_channels(c);
  if (!c.bounds_explicit && channels > 0) {
    scale_bounds(c.search.constraints, channels);
    c.bounds_explicit = true;
  }
  validate(c);
  return c;
}

inline ExperimentConfig default_config() { return config_from_json(nlohmann::json::object()); }

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------- data

struct PreparedData {
  Dataset<Real> search_train, search_val;  // architecture search halves of the development split
  Dataset<Real> dev, test;                 // retraining split and held-out evaluation split
  int classes = 0;
  std::int64_t channels = 0, time_points = 0, slices = 0;
  std::vector<std::string> warnings;
};

inline TrialSet load_trials(const DataConfig& d) {
  if (d.source == "synth") return synth_generate(d.synth);
  const fs::path path(d.source);
  if (!fs::exists(path)) throw ConfigError("data source " + d.source + " does not exist");
  if (d.format == "directory") return ingest(path, TrialFormat::directory);
  if (d.format == "csv") return ingest(path, TrialFormat::csv, d.csv_rate_hz);
  return fs::is_directory(path) ? ingest(path, TrialFormat::directory)
                                : ingest(path, TrialFormat::csv, d.csv_rate_hz);
}

// resample -> split -> normalize (fitted on the training side of each pair) -> slice.
inline PreparedData prepare_data(const DataConfig& d) {
  const auto trials = resample(load_trials(d), d.resample_hz);
  SplitSpec outer;
  outer.subject = d.subject;
  outer.train_ratio = 1.0 - d.test_ratio;
  outer.holdout_ratio = d.test_ratio;
  outer.mode = d.split == "subject_specific" ? SplitSpec::Mode::subject_specific
               : d.split == "leave_ratio"    ? SplitSpec::Mode::leave_ratio
                                             : SplitSpec::Mode::mixed;
  const auto dev_test = split(trials, outer, d.seed);
  SplitSpec inner;
  inner.train_ratio = 1.0 - d.search_val_ratio;
  auto dev_untagged = dev_test.train;
  dev_untagged.tag = SplitTag::none;
  const auto halves = split(dev_untagged, inner, d.seed ^ 0x5eedull);

  PreparedData out;
  const auto search = normalize(halves.train, halves.val);
  const auto retrain = normalize(dev_test.train, dev_test.val);
  out.warnings = retrain.stats.warnings;
  for (const auto* part : {&search.train, &search.val, &retrain.train, &retrain.val})
    if (part->trials.empty()) throw ConfigError("data split leaves an empty partition");
  out.search_train = to_dataset<Real>(slice_stack(search.train, d.window, d.stride));
  out.search_val = to_dataset<Real>(slice_stack(search.val, d.window, d.stride));
  out.dev = to_dataset<Real>(slice_stack(retrain.train, d.window, d.stride));
  out.test = to_dataset<Real>(slice_stack(retrain.val, d.window, d.stride));
  out.classes = trials.num_classes;
  out.channels = trials.channels();
  out.time_points = d.window;
  out.slices = out.dev.sample_shape[2];
  return out;
}

inline MetaNetConfig net_config(const ExperimentConfig& c, const PreparedData& data) {
  if (c.arch.channels != 0 && c.arch.channels != data.channels) {
    throw ConfigError("architecture.channels = " + std::to_string(c.arch.channels) + " but the data has " +
                      std::to_string(data.channels) + " channels");
  }
  if (c.arch.classes != 0 && c.arch.classes != data.classes) {
    throw ConfigError("architecture.classes = " + std::to_string(c.arch.classes) + " but the data has " +
                      std::to_string(data.classes) + " classes");
  }
  MetaNetConfig m;
  m.channels = data.channels;
  m.classes = data.classes;
  m.blocks = c.arch.blocks;
  m.nodes = c.arch.nodes;
  m.time_points = data.time_points;
  m.slices = data.slices;
  m.seed = c.seed;
  return m;
}

// Resolves bounds that depend on the data's channel count.
inline ExperimentConfig resolved(ExperimentConfig c, const PreparedData& data) {
  if (!c.bounds_explicit) {
    scale_bounds(c.search.constraints, data.channels);
    c.bounds_explicit = true;
  }
  if (c.arch.channels == 0) c.arch.channels = data.channels;
  if (c.arch.classes == 0) c.arch.classes = data.classes;
  return c;
}

// ---------------------------------------------------------------- reports

struct RunReport {
  std::string command;
  std::string genotype_path;
  std::string trajectory_path;
  double best_accuracy = 0;
  double final_accuracy = 0;
  double kappa = 0;
  std::int64_t param_count = 0;
  std::int64_t mac_count = 0;
  double wall_time_s = 0;
  std::map<std::string, int> operator_counts;
  bool unconstrained = false;
  int epochs_run = 0;
  bool converged = false;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"command", command},
                     {"genotype_path", genotype_path},
                     {"accuracy", {{"best", best_accuracy}, {"final", final_accuracy}}},
                     {"param_count", param_count},
                     {"mac_count", mac_count},
                     {"wall_time_s", wall_time_s},
                     {"operator_counts", operator_counts},
                     {"seed", seed}};
    if (!trajectory_path.empty()) j["trajectory_path"] = trajectory_path;
    if (command == "search") {
      j["unconstrained"] = unconstrained;
      j["epochs_run"] = epochs_run;
      j["converged"] = converged;
    } else {
      j["kappa"] = kappa;
    }
    return j;
  }
};

inline std::map<std::string, int> operator_counts(const Genotype& g) {
  std::map<std::string, int> out;
  for (const auto* cell : {&g.normal, &g.reduce})
    for (const auto& node : *cell)
      for (const auto& e : node) ++out[e.op];
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void write_penalties_csv(std::ostream& os, const std::vector<EpochRecord>& trajectory) {
  os << "epoch,omega,omega_raw,phi,skip_floor,penalty_lower,penalty_upper,penalty_skip,L_val,L_lag\n";
  os.precision(9);
  for (const auto& r : trajectory) {
    os << r.epoch << ',' << r.omega << ',' << r.omega_raw << ',' << r.phi << ',' << r.skip_floor << ','
       << r.penalty_lower << ',' << r.penalty_upper << ',' << r.penalty_skip << ',' << r.l_val << ',' << r.l_lag
       << '\n';
  }
}

struct SearchOutcome {
  RunReport report;
  SearchResult<Real> result;
  ExperimentConfig config;
};

// Writes config.json, genotype.json, trajectory.csv, penalties.csv, theta.ckpt, report.json.
inline SearchOutcome cmd_search(const ExperimentConfig& base, std::ostream* log = &std::clog) {
  validate(base);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = prepare_data(base.data);
  const auto cfg = resolved(base, data);
  validate(cfg);
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  write_json(out / "config.json", to_json(cfg));
  for (const auto& w : data.warnings)
    if (log) *log << "warning: " << w << "\n";

  MetaNet<Real> net(net_config(cfg, data), cfg.space(data.channels));
  const auto names = net.space().names();
  const auto space_id = cfg.search_space;
  auto result = run_search(net, data.search_train, data.search_val, cfg.search, space_id, [&](const EpochRecord& r) {
    if (log) {
      *log << "epoch " << r.epoch << "  L_train " << r.l_train << "  L_val " << r.l_val << "  val_acc " << r.val_acc
           << "  omega_raw " << r.omega_raw << "  phi " << r.phi << "  floor " << r.skip_floor << "\n";
    }
  });
  {
    std::ofstream csv(out / "trajectory.csv");
    write_trajectory_csv(csv, result.trajectory, names);
  }
  {
    std::ofstream csv(out / "penalties.csv");
    write_penalties_csv(csv, result.trajectory);
  }
  write_text(out / "genotype.json", serialize(result.genotype));
  save_checkpoint<Real>((out / "theta.ckpt").string(), {{"theta.normal", result.theta.normal}, {"theta.reduce", result.theta.reduce}});

  auto compiled = compile<Real>(result.genotype, data.time_points, data.slices, cfg.seed);
  RunReport rep;
  rep.command = "search";
  rep.genotype_path = (out / "genotype.json").string();
  rep.trajectory_path = (out / "trajectory.csv").string();
  for (const auto& r : result.trajectory) rep.best_accuracy = std::max(rep.best_accuracy, r.val_acc);
  rep.final_accuracy = result.trajectory.empty() ? 0.0 : result.trajectory.back().val_acc;
  rep.param_count = count_params(compiled);
  rep.mac_count = count_macs(compiled);
  rep.operator_counts = operator_counts(result.genotype);
  rep.unconstrained = cfg.search.constraints.unconstrained();
  rep.epochs_run = static_cast<int>(result.trajectory.size());
  rep.converged = result.converged;
  rep.seed = cfg.seed;
  rep.wall_time_s = seconds_since(t0);
  write_json(out / "report.json", rep.to_json());
  return {rep, std::move(result), cfg};
}

inline Genotype load_genotype(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open genotype " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_genotype(ss.str());
}

inline void check_genotype_fits(const Genotype& g, const PreparedData& data) {
  if (g.meta.channels != data.channels) {
    throw ConfigError("genotype expects " + std::to_string(g.meta.channels) + " channels, data has " +
                      std::to_string(data.channels));
  }
  if (g.meta.classes != data.classes) {
    throw ConfigError("genotype expects " + std::to_string(g.meta.classes) + " classes, data has " +
                      std::to_string(data.classes));
  }
}

struct RetrainOutcome {
  RunReport report;
  TrainResult result;
};

// Trains the genotype from scratch on the development split and evaluates on
// the held-out split. Writes config.json, genotype.json, history.csv,
// predictions.csv, weights.ckpt, report.json.
inline RetrainOutcome cmd_retrain(const Genotype& g, const ExperimentConfig& base, std::ostream* log = &std::clog) {
  validate(base);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = prepare_data(base.data);
  const auto cfg = resolved(base, data);
  check_genotype_fits(g, data);
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  write_json(out / "config.json", to_json(cfg));
  write_text(out / "genotype.json", serialize(g));
  auto net = compile<Real>(g, data.time_points, data.slices, cfg.seed);
  auto result = train_compiled(net, data.dev, data.test, cfg.retrain, data.classes, [&](const TrainEpoch& e) {
    if (log) {
      *log << "epoch " << e.epoch << "  loss " << e.loss << "  train_acc " << e.train_acc << "  val_acc " << e.val_acc
           << "  kappa " << e.val_kappa << "\n";
    }
  });
  {
    std::ofstream csv(out / "history.csv");
    csv << "epoch,loss,train_acc,val_acc,val_kappa\n";
    csv.precision(9);
    for (const auto& e : result.history)
      csv << e.epoch << ',' << e.loss << ',' << e.train_acc << ',' << e.val_acc << ',' << e.val_kappa << '\n';
  }
  {
    std::ofstream csv(out / "predictions.csv");
    csv << "index,label,prediction\n";
    for (std::size_t i = 0; i < result.predictions.size(); ++i)
      csv << i << ',' << data.test.labels[i] << ',' << result.predictions[i] << '\n';
  }
  auto tensors = net.weights();
  for (const auto& b : net.buffers()) tensors.push_back(b);
  save_checkpoint<Real>((out / "weights.ckpt").string(), tensors);

  RunReport rep;
  rep.command = "retrain";
  rep.genotype_path = (out / "genotype.json").string();
  rep.best_accuracy = result.best_accuracy;
  rep.final_accuracy = result.accuracy;
  rep.kappa = result.kappa;
  rep.param_count = count_params(net);
  rep.mac_count = count_macs(net);
  rep.operator_counts = operator_counts(g);
  rep.seed = cfg.seed;
  rep.wall_time_s = seconds_since(t0);
  write_json(out / "report.json", rep.to_json());
  return {rep, std::move(result)};
}

// Evaluates stored weights on the held-out split; writes eval.json.
inline RunReport cmd_eval(const Genotype& g, const fs::path& weights, const ExperimentConfig& base) {
  validate(base);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = prepare_data(base.data);
  const auto cfg = resolved(base, data);
  check_genotype_fits(g, data);
  auto net = compile<Real>(g, data.time_points, data.slices, cfg.seed);
  const auto stored = load_checkpoint(weights.string());
  auto w = net.weights();
  restore(stored, w);
  auto b = net.buffers();
  restore(stored, b);
  const auto pred = predict(net, data.test);
  RunReport rep;
  rep.command = "eval";
  rep.final_accuracy = rep.best_accuracy = accuracy(pred, data.test.labels);
  rep.kappa = cohen_kappa(pred, data.test.labels, data.classes);
  rep.param_count = count_params(net);
  rep.mac_count = count_macs(net);
  rep.operator_counts = operator_counts(g);
  rep.seed = cfg.seed;
  rep.wall_time_s = seconds_since(t0);
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  write_json(out / "eval.json", rep.to_json());
  return rep;
}

inline TrialSet cmd_synth(const ExperimentConfig& cfg, const fs::path& out) {
  validate(cfg);
  auto set = synth_generate(cfg.data.synth);
  write_trial_dir(set, out);
  return set;
}

// ---------------------------------------------------------------- trajectory files

struct TrajectoryRow {
  int epoch = 0;
  std::string cell_type;
  int edge = 0;
  std::string op;
  double prob = 0;
  double omega_raw = 0, phi = 0, skip_floor = 0, l_train = 0, l_val = 0, l_lag = 0, val_acc = 0;
};

inline std::vector<TrajectoryRow> read_trajectory_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("epoch,cell_type,edge_id,operator_name,softmax_prob", 0) != 0) {
    throw ConfigError(path.string() + ": not a trajectory file");
  }
  std::vector<TrajectoryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 12) throw ConfigError(path.string() + ": malformed row '" + line + "'");
    TrajectoryRow r;
    try {
      r.epoch = std::stoi(f[0]);
      r.cell_type = f[1];
      r.edge = std::stoi(f[2]);
      r.op = f[3];
      r.prob = std::stod(f[4]);
      r.omega_raw = std::stod(f[5]);
      r.phi = std::stod(f[6]);
      r.skip_floor = std::stod(f[7]);
      r.l_train = std::stod(f[8]);
      r.l_val = std::stod(f[9]);
      r.l_lag = std::stod(f[10]);
      r.val_acc = std::stod(f[11]);
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------- SVG charts

namespace svg {

inline std::string esc(const std::string& s) {
  std::string o;
  for (char ch : s) {
    if (ch == '<') o += "&lt;";
    else if (ch == '>') o += "&gt;";
    else if (ch == '&') o += "&amp;";
    else o += ch;
  }
  return o;
}

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                  "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};
  return palette[i % 10];
}

inline std::string bar_chart(const std::string& title, const std::vector<std::string>& labels,
                             const std::vector<double>& values) {
  const double w = 80.0 + 60.0 * static_cast<double>(labels.size()), h = 320, top = 40, bottom = 260, left = 60;
  const double vmax = std::max(1.0, values.empty() ? 1.0 : *std::max_element(values.begin(), values.end()));
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << w - 20 << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << vmax << "</text>\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double bh = (bottom - top) * values[i] / vmax;
    const double x = left + 10 + 60.0 * static_cast<double>(i);
    o << "<rect x=\"" << x << "\" y=\"" << bottom - bh << "\" width=\"40\" height=\"" << bh << "\" fill=\"" << color(i)
      << "\"/>\n";
    o << "<text x=\"" << x + 20 << "\" y=\"" << bottom - bh - 4 << "\" text-anchor=\"middle\">" << values[i] << "</text>\n";
    o << "<text transform=\"translate(" << x + 20 << "," << bottom + 12 << ") rotate(35)\">" << esc(labels[i])
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// One panel per series group; every panel shares the [0, 1] y range.
inline std::string line_panels(const std::string& title,
                               const std::vector<std::pair<std::string, std::map<std::string, std::vector<double>>>>& panels) {
  const double pw = 260, ph = 180, pad = 40;
  const std::size_t cols = 3, rows = (panels.size() + cols - 1) / cols;
  const double w = pad + static_cast<double>(cols) * (pw + pad) + 120, h = 50 + static_cast<double>(rows) * (ph + pad);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  o << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  std::vector<std::string> legend;
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const double x0 = pad + static_cast<double>(p % cols) * (pw + pad);
    const double y0 = 40 + static_cast<double>(p / cols) * (ph + pad);
    o << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
    o << "<text x=\"" << x0 + 4 << "\" y=\"" << y0 + 12 << "\">" << esc(panels[p].first) << "</text>\n";
    std::size_t k = 0;
    for (const auto& [name, ys] : panels[p].second) {
      if (std::find(legend.begin(), legend.end(), name) == legend.end()) legend.push_back(name);
      const auto ci = static_cast<std::size_t>(std::find(legend.begin(), legend.end(), name) - legend.begin());
      o << "<polyline fill=\"none\" stroke=\"" << color(ci) << "\" points=\"";
      for (std::size_t i = 0; i < ys.size(); ++i) {
        const double x = x0 + (ys.size() > 1 ? pw * static_cast<double>(i) / static_cast<double>(ys.size() - 1) : 0);
        o << x << ',' << y0 + ph * (1.0 - ys[i]) << ' ';
      }
      o << "\"/>\n";
      ++k;
    }
  }
  for (std::size_t i = 0; i < legend.size(); ++i) {
    const double y = 50 + 14.0 * static_cast<double>(i);
    o << "<rect x=\"" << w - 115 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\"" << color(i) << "\"/>";
    o << "<text x=\"" << w - 100 << "\" y=\"" << y << "\">" << esc(legend[i]) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace svg

// ---------------------------------------------------------------- stats

struct StatsResult {
  double best = 0;  // global best epoch accuracy
  std::map<std::string, std::map<std::string, int>> counts;  // cell type -> operator -> count
  std::map<std::string, int> totals;                          // operator -> count over both cell types
  std::vector<std::tuple<std::string, int, double, bool>> epochs;  // run, epoch, val_acc, included
};

// Counts the per-edge argmax operator ("none" excluded, ties to the earlier
// operator) over every epoch whose accuracy is within `threshold` of the best.
inline StatsResult cmd_stats(const std::vector<fs::path>& run_dirs, const StatsConfig& cfg, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ConfigError("stats needs at least one run directory");
  if (!(cfg.threshold >= 0 && cfg.threshold < 1)) throw ConfigError("stats.threshold must lie in [0, 1)");
  if (cfg.best != "global" && cfg.best != "per_run") throw ConfigError("stats.best must be global or per_run");
  std::vector<std::vector<TrajectoryRow>> runs;
  for (const auto& d : run_dirs) runs.push_back(read_trajectory_csv(d / "trajectory.csv"));

  StatsResult res;
  std::vector<double> run_best(runs.size(), 0.0);
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (const auto& r : runs[i]) run_best[i] = std::max(run_best[i], r.val_acc);
  res.best = *std::max_element(run_best.begin(), run_best.end());

  std::ostringstream series;
  series << "run,cell_type,edge_id,operator_name,epoch,softmax_prob\n";
  series.precision(9);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const double best = cfg.best == "global" ? res.best : run_best[i];
    const double bar = (1.0 - cfg.threshold) * best;
    // (epoch, cell type, edge) -> ordered (operator, prob)
    std::map<std::tuple<int, std::string, int>, std::vector<std::pair<std::string, double>>> edges;
    std::map<int, double> acc;
    for (const auto& r : runs[i]) {
      edges[{r.epoch, r.cell_type, r.edge}].emplace_back(r.op, r.prob);
      acc[r.epoch] = r.val_acc;
      series << run_dirs[i].filename().string() << ',' << r.cell_type << ',' << r.edge << ',' << r.op << ','
             << r.epoch << ',' << r.prob << '\n';
    }
    for (const auto& [epoch, a] : acc) res.epochs.emplace_back(run_dirs[i].string(), epoch, a, a >= bar);
    for (const auto& [key, ops] : edges) {
      if (acc[std::get<0>(key)] < bar) continue;
      std::size_t arg = ops.size();
      for (std::size_t o = 0; o < ops.size(); ++o) {
        if (ops[o].first == "none") continue;
        if (arg == ops.size() || ops[o].second > ops[arg].second) arg = o;
      }
      if (arg == ops.size()) continue;
      ++res.counts[std::get<1>(key)][ops[arg].first];
      ++res.totals[ops[arg].first];
    }
  }

  fs::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "operator_counts.csv");
    csv << "cell_type,operator_name,count\n";
    for (const auto& [type, m] : res.counts)
      for (const auto& [op, n] : m) csv << type << ',' << op << ',' << n << '\n';
    for (const auto& [op, n] : res.totals) csv << "all," << op << ',' << n << '\n';
  }
  {
    std::ofstream csv(out_dir / "included_epochs.csv");
    csv << "run,epoch,val_acc,included\n";
    csv.precision(9);
    for (const auto& [run, epoch, a, inc] : res.epochs) csv << run << ',' << epoch << ',' << a << ',' << inc << '\n';
  }
  write_text(out_dir / "edge_series.csv", series.str());
  {
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& [op, n] : res.totals) labels.push_back(op), values.push_back(n);
    write_text(out_dir / "operator_counts.svg", svg::bar_chart("Operator selections", labels, values));
  }
  // Probability trajectories of the first run, one panel per edge.
  for (const std::string type : {"normal", "reduce"}) {
    std::map<int, std::map<std::string, std::vector<double>>> per_edge;
    for (const auto& r : runs.front())
      if (r.cell_type == type) per_edge[r.edge][r.op].push_back(r.prob);
    std::vector<std::pair<std::string, std::map<std::string, std::vector<double>>>> panels;
    for (auto& [edge, m] : per_edge) panels.emplace_back("edge " + std::to_string(edge), std::move(m));
    write_text(out_dir / ("probabilities_" + type + ".svg"),
               svg::line_panels(type + " cell: operator probability vs epoch", panels));
  }
  nlohmann::json j{{"best", res.best}, {"threshold", cfg.threshold}, {"best_mode", cfg.best},
                   {"counts", res.counts}, {"totals", res.totals}};
  write_json(out_dir / "stats.json", j);
  return res;
}

// ---------------------------------------------------------------- ablation

struct AblationRow {
  std::string setting;
  std::uint64_t seed = 0;
  double best_acc = 0, final_acc = 0;
  std::int64_t params = 0, macs = 0;
  double phi_early = 0, phi_final = 0, l_val_var_early = 0;
  bool paired = false;
  double d_params = 0, d_phi_early = 0, d_l_val_var_early = 0;  // this run minus the paired "off" run
};

// Mean and population variance over the first ceil(20%) of the configured epochs.
inline std::pair<double, double> early_stats(const std::vector<EpochRecord>& t, int epochs,
                                             double EpochRecord::*field) {
  const std::size_t n = std::min(t.size(), static_cast<std::size_t>(std::max(1, (epochs + 4) / 5)));
  if (n == 0) return {0, 0};
  double m = 0;
  for (std::size_t i = 0; i < n; ++i) m += t[i].*field;
  m /= static_cast<double>(n);
  double v = 0;
  for (std::size_t i = 0; i < n; ++i) v += (t[i].*field - m) * (t[i].*field - m);
  return {m, v / static_cast<double>(n)};
}

inline ExperimentConfig ablation_setting(ExperimentConfig c, const std::string& axis, const std::string& value) {
  auto& k = c.search.constraints;
  const ConstraintConfig defaults;
  try {
    if (axis == "nodes") {
      c.arch.nodes = std::stoi(value);
    } else if (axis == "batch") {
      c.search.batch_size = std::stoi(value);
    } else if (axis == "scale_constraint" || axis == "sparsity") {
      if (value != "on" && value != "off") throw ConfigError(axis + " settings are on/off, got '" + value + "'");
      const bool on = value == "on";
      if (axis == "scale_constraint") {
        k.lambda1 = on ? (k.lambda1 != 0 ? k.lambda1 : defaults.lambda1) : 0.0;
        k.lambda2 = on ? (k.lambda2 != 0 ? k.lambda2 : defaults.lambda2) : 0.0;
      } else {
        k.lambda3 = on ? (k.lambda3 != 0 ? k.lambda3 : defaults.lambda3) : 0.0;
      }
    } else {
      throw ConfigError("unknown ablation axis '" + axis + "' (nodes, batch, scale_constraint, sparsity)");
    }
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("bad " + axis + " setting '" + value + "'");
  }
  validate(c);
  return c;
}

inline std::vector<AblationRow> cmd_ablate(const std::string& axis, const std::vector<std::string>& grid,
                                           const std::vector<std::uint64_t>& seeds, const ExperimentConfig& base,
                                           std::ostream* log = &std::clog) {
  if (grid.empty()) throw ConfigError("ablation grid is empty");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : grid) configs.push_back(ablation_setting(base, axis, v));  // validate all first
  const fs::path root(base.output_dir);
  std::vector<AblationRow> rows;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    for (auto seed : seeds) {
      auto c = configs[g];
      c.seed = c.search.seed = c.retrain.seed = seed;
      c.output_dir = (root / (axis + "_" + grid[g]) / ("seed_" + std::to_string(seed))).string();
      if (log) *log << "ablate " << axis << "=" << grid[g] << " seed " << seed << "\n";
      const auto o = cmd_search(c, nullptr);
      AblationRow r;
      r.setting = grid[g];
      r.seed = seed;
      r.best_acc = o.report.best_accuracy;
      r.final_acc = o.report.final_accuracy;
      r.params = o.report.param_count;
      r.macs = o.report.mac_count;
      const auto& t = o.result.trajectory;
      r.phi_early = early_stats(t, c.search.epochs, &EpochRecord::phi).first;
      r.phi_final = t.empty() ? 0.0 : t.back().phi;
      r.l_val_var_early = early_stats(t, c.search.epochs, &EpochRecord::l_val).second;
      rows.push_back(r);
    }
  }
  if (axis == "scale_constraint" || axis == "sparsity") {
    for (auto& r : rows) {
      if (r.setting != "on") continue;
      for (const auto& off : rows)
        if (off.setting == "off" && off.seed == r.seed) {
          r.paired = true;
          r.d_params = static_cast<double>(r.params - off.params);
          r.d_phi_early = r.phi_early - off.phi_early;
          r.d_l_val_var_early = r.l_val_var_early - off.l_val_var_early;
        }
    }
  }
  std::ostringstream csv;
  csv << "axis,setting,seed,best_val_acc,final_val_acc,params,macs,phi_mean_early,phi_final,l_val_var_early,"
         "paired_delta_params,paired_delta_phi_early,paired_delta_l_val_var_early\n";
  csv.precision(9);
  for (const auto& r : rows) {
    csv << axis << ',' << r.setting << ',' << r.seed << ',' << r.best_acc << ',' << r.final_acc << ',' << r.params
        << ',' << r.macs << ',' << r.phi_early << ',' << r.phi_final << ',' << r.l_val_var_early << ',';
    if (r.paired) {
      csv << r.d_params << ',' << r.d_phi_early << ',' << r.d_l_val_var_early;
    } else {
      csv << ",,";
    }
    csv << '\n';
  }
  write_text(root / "ablate.csv", csv.str());
  return rows;
}

}  // namespace ctnas
