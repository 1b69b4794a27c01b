// ctnas: constrained architecture search for EEG decoding.
//
//   ctnas search  --config run.json --seed 7 --epochs 30
//   ctnas retrain --config run.json --genotype runs/a/genotype.json --out runs/a/retrain
//   ctnas eval    --config run.json --genotype g.json --weights runs/a/retrain/weights.ckpt
//   ctnas stats   runs/s0 runs/s1 runs/s2 --threshold 0.1 --out runs/stats
//   ctnas ablate  --config run.json --axis sparsity --grid off,on --seeds 0,1,2
//   ctnas synth   --out data/synth --snr 20
//
// Exit codes: 0 success, 2 configuration or input error, 3 numerical divergence.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ctnas/core/allocator.hpp"
#include "ctnas/harness.hpp"

namespace {

using nlohmann::json;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, data, space, split, subject;
  std::optional<int> epochs, batch, blocks, nodes, trials_per_class, classes, channels;
  std::optional<double> snr, lambda1, lambda2, lambda3;
  std::vector<std::string> sets;  // dotted.key=value
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON experiment configuration")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Seed for weights, batches and architecture initialisation");
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--data", o.data, "'synth' or a trial directory / CSV file");
  app->add_option("--split", o.split, "mixed | subject_specific | leave_ratio");
  app->add_option("--subject", o.subject, "Subject for subject_specific splits");
  app->add_option("--snr", o.snr, "Synthetic data SNR in dB");
  app->add_option("--trials-per-class", o.trials_per_class, "Synthetic trials per class");
  app->add_option("--set", o.sets, "Override any setting, e.g. --set search.lr_w=0.02")->type_name("KEY=VALUE");
}

void add_search_flags(CLI::App* app, Overrides& o) {
  app->add_option("--search-space", o.space, "desk | full");
  app->add_option("--blocks", o.blocks, "Cell blocks M");
  app->add_option("--nodes", o.nodes, "Intermediate nodes per cell N");
  app->add_option("--lambda1", o.lambda1, "Lower scale-bound weight");
  app->add_option("--lambda2", o.lambda2, "Upper scale-bound weight");
  app->add_option("--lambda3", o.lambda3, "Sparsity (skip-floor) weight");
}

json parse_scalar(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

void set_path(json& j, const std::string& dotted, const json& value) {
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const auto key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ctnas::ConfigError("bad setting path '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

// Config file, then flags; `epochs_key` says which epoch count --epochs sets.
ctnas::ExperimentConfig resolve(const Overrides& o, const std::string& epochs_key, const std::string& batch_key) {
  json j = o.config.empty() ? json::object() : ctnas::read_json_file(o.config);
  if (!j.is_object()) throw ctnas::ConfigError(o.config + ": expected a JSON object");
  if (o.seed) j["seed"] = *o.seed;
  if (o.out) j["output_dir"] = *o.out;
  if (o.data) set_path(j, "data.source", *o.data);
  if (o.split) set_path(j, "data.split", *o.split);
  if (o.subject) set_path(j, "data.subject", *o.subject);
  if (o.snr) set_path(j, "data.synth.snr_db", *o.snr);
  if (o.trials_per_class) set_path(j, "data.synth.trials_per_class", *o.trials_per_class);
  if (o.classes) set_path(j, "data.synth.classes", *o.classes);
  if (o.channels) set_path(j, "data.synth.channels", *o.channels);
  if (o.space) j["search_space"] = *o.space;
  if (o.blocks) set_path(j, "architecture.blocks", *o.blocks);
  if (o.nodes) set_path(j, "architecture.nodes", *o.nodes);
  if (o.lambda1) set_path(j, "constraints.lambda1", *o.lambda1);
  if (o.lambda2) set_path(j, "constraints.lambda2", *o.lambda2);
  if (o.lambda3) set_path(j, "constraints.lambda3", *o.lambda3);
  if (o.epochs) set_path(j, epochs_key, *o.epochs);
  if (o.batch) set_path(j, batch_key, *o.batch);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ctnas::ConfigError("--set expects KEY=VALUE, got '" + s + "'");
    set_path(j, s.substr(0, eq), parse_scalar(s.substr(eq + 1)));
  }
  return ctnas::config_from_json(j);
}

template <typename V>
std::vector<V> split_list(const std::string& text) {
  std::vector<V> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<V, std::string>) {
      out.push_back(item);
    } else {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
        out.push_back(static_cast<V>(v));
      } catch (const std::exception&) {
        throw ctnas::ConfigError("not a seed: '" + item + "'");
      }
    }
  }
  return out;
}

void check_thread_env() {
  const char* env = std::getenv("CTNAS_THREADS");
  if (!env) return;
  const std::string v(env);
  const bool ok = !v.empty() && v.size() < 6 && v.find_first_not_of("0123456789") == std::string::npos && std::stoi(v) >= 1;
  if (!ok) throw ctnas::ConfigError("CTNAS_THREADS must be a positive integer, got '" + v + "'");
}

}  // namespace

int main(int argc, char** argv) {
  ctnas::tune_allocator();
  CLI::App app{"Constrained differentiable architecture search for EEG decoding"};
  app.require_subcommand(1);
  Overrides o;

  auto* search = app.add_subcommand("search", "Run a constrained architecture search");
  add_common(search, o);
  add_search_flags(search, o);
  search->add_option("--epochs", o.epochs, "Search epochs");
  search->add_option("--batch", o.batch, "Search batch size");

  std::string genotype_path, weights_path;
  auto* retrain = app.add_subcommand("retrain", "Train a genotype from scratch and evaluate it");
  add_common(retrain, o);
  retrain->add_option("--genotype", genotype_path, "genotype.json")->required()->check(CLI::ExistingFile);
  retrain->add_option("--epochs", o.epochs, "Training epochs");
  retrain->add_option("--batch", o.batch, "Training batch size");

  auto* eval = app.add_subcommand("eval", "Evaluate stored weights on the held-out split");
  add_common(eval, o);
  eval->add_option("--genotype", genotype_path, "genotype.json")->required()->check(CLI::ExistingFile);
  eval->add_option("--weights", weights_path, "weights.ckpt")->required()->check(CLI::ExistingFile);

  std::vector<std::string> run_dirs;
  ctnas::StatsConfig stats_cfg;
  std::string stats_out = "stats";
  auto* stats = app.add_subcommand("stats", "Count operators over near-best epochs of finished searches");
  stats->add_option("runs", run_dirs, "Search output directories")->required()->check(CLI::ExistingDirectory);
  stats->add_option("--threshold", stats_cfg.threshold, "Relative accuracy window below the best");
  stats->add_option("--best", stats_cfg.best, "global | per_run");
  stats->add_option("--out", stats_out, "Output directory");

  std::string axis, grid, seeds = "0";
  auto* ablate = app.add_subcommand("ablate", "Repeat the search over one axis and several seeds");
  add_common(ablate, o);
  add_search_flags(ablate, o);
  ablate->add_option("--epochs", o.epochs, "Search epochs");
  ablate->add_option("--batch", o.batch, "Search batch size");
  ablate->add_option("--axis", axis, "nodes | batch | scale_constraint | sparsity")->required();
  ablate->add_option("--grid", grid, "Comma-separated settings, e.g. off,on or 1,2,3")->required();
  ablate->add_option("--seeds", seeds, "Comma-separated seeds");

  auto* synth = app.add_subcommand("synth", "Write a synthetic motor-imagery trial directory");
  add_common(synth, o);
  synth->add_option("--classes", o.classes, "Classes");
  synth->add_option("--channels", o.channels, "Channels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    check_thread_env();
    if (*search) {
      const auto r = ctnas::cmd_search(resolve(o, "search.epochs", "search.batch_size"));
      std::cout << r.report.to_json().dump(2) << "\n";
    } else if (*retrain) {
      const auto g = ctnas::load_genotype(genotype_path);
      const auto r = ctnas::cmd_retrain(g, resolve(o, "retrain.epochs", "retrain.batch_size"));
      std::cout << r.report.to_json().dump(2) << "\n";
    } else if (*eval) {
      const auto g = ctnas::load_genotype(genotype_path);
      std::cout << ctnas::cmd_eval(g, weights_path, resolve(o, "retrain.epochs", "retrain.batch_size")).to_json().dump(2)
                << "\n";
    } else if (*stats) {
      std::vector<ctnas::fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto r = ctnas::cmd_stats(dirs, stats_cfg, stats_out);
      for (const auto& [op, n] : r.totals) std::cout << op << "\t" << n << "\n";
    } else if (*ablate) {
      const auto cfg = resolve(o, "search.epochs", "search.batch_size");
      const auto rows =
          ctnas::cmd_ablate(axis, split_list<std::string>(grid), split_list<std::uint64_t>(seeds), cfg);
      std::cout << "wrote " << (ctnas::fs::path(cfg.output_dir) / "ablate.csv").string() << " (" << rows.size()
                << " runs)\n";
    } else if (*synth) {
      auto cfg = resolve(o, "search.epochs", "search.batch_size");
      const auto set = ctnas::cmd_synth(cfg, cfg.output_dir);
      std::cout << "wrote " << set.size() << " trials to " << cfg.output_dir << "\n";
    }
  } catch (const ctnas::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 3;
  } catch (const ctnas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ctnas::GenotypeError& e) {
    std::cerr << "genotype error: " << e.what() << "\n";
    return 2;
  } catch (const ctnas::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ctnas::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
