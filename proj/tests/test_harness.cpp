#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "ctnas/harness.hpp"

using namespace ctnas;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::path(::testing::TempDir()) / ("ctnas_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json tiny_json(const fs::path& out) {
  return json{{"output_dir", out.string()},
              {"data",
               {{"synth", {{"trials_per_class", 10}, {"points", 300}}}, {"window", 200}, {"stride", 100}}},
              {"search", {{"epochs", 2}, {"batch_size", 8}}},
              {"retrain", {{"epochs", 2}, {"batch_size", 8}}}};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " \"" CTNAS_CLI "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST(Config, DefaultsValidateAndScaleBounds) {
  const auto c = default_config();
  EXPECT_EQ(c.search_space, "desk");
  EXPECT_EQ(c.arch.blocks, 2);
  EXPECT_EQ(c.arch.nodes, 2);
  EXPECT_EQ(c.data.window, 400);
  EXPECT_EQ(c.data.stride, 50);
  const double f = (8.0 / 22.0) * (8.0 / 22.0);
  EXPECT_NEAR(c.search.constraints.c_low, 18200.0 * f, 1e-9);
  EXPECT_NEAR(c.search.constraints.c_high, 32100.0 * f, 1e-9);
}

TEST(Config, ExplicitBoundsAreKept) {
  const auto c = config_from_json(json{{"constraints", {{"c_low", 10.0}, {"c_high", 20.0}}}});
  EXPECT_EQ(c.search.constraints.c_low, 10.0);
  EXPECT_EQ(c.search.constraints.c_high, 20.0);
}

TEST(Config, UnknownKeysAndWrongTypesNamePath) {
  try {
    config_from_json(json{{"search", {{"epoch", 3}}}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("$.search.epoch"), std::string::npos) << e.what();
  }
  try {
    config_from_json(json{{"data", {{"window", "long"}}}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("$.data.window"), std::string::npos) << e.what();
  }
  EXPECT_THROW(config_from_json(json::array()), ConfigError);
}

TEST(Config, RangeErrorsBecomeConfigErrors) {
  EXPECT_THROW(config_from_json(json{{"data", {{"test_ratio", 1.5}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"data", {{"split", "random"}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"data", {{"split", "subject_specific"}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"search", {{"batch_size", 0}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"constraints", {{"lambda3", -1.0}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"search_space", "huge"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"search_space", {"skip", "sep 3x1"}}}), ConfigError);  // no none
  EXPECT_THROW(config_from_json(json{{"stats", {{"best", "median"}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"architecture", {{"blocks", 9}}}}), ConfigError);  // window too short
}

TEST(Config, OperatorListAndRoundTrip) {
  const auto c = config_from_json(
      json{{"search_space", {"none", "skip", "sep 3x1"}}, {"seed", 4}, {"constraints", {{"lambda1", 0.0}}}});
  EXPECT_EQ(c.search_space, "custom");
  EXPECT_EQ(c.space(8).size(), 3u);
  EXPECT_EQ(c.search.seed, 4u);
  EXPECT_EQ(c.retrain.seed, 4u);
  const auto j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)), j);
}

TEST(PrepareData, PartitionSizesAndShapes) {
  auto c = config_from_json(tiny_json(scratch("prep")));
  const auto d = prepare_data(c.data);
  // 40 trials: 8 held out, 32 development trials halved for the search.
  EXPECT_EQ(d.test.size(), 8u);
  EXPECT_EQ(d.dev.size(), 32u);
  EXPECT_EQ(d.search_train.size(), 16u);
  EXPECT_EQ(d.search_val.size(), 16u);
  EXPECT_EQ(d.dev.sample_shape, (Shape{8, 200, 2}));
  EXPECT_EQ(d.classes, 4);
  EXPECT_EQ(d.slices, 2);
}

TEST(PrepareData, ChannelMismatchIsConfigError) {
  auto j = tiny_json(scratch("mismatch"));
  j["architecture"] = {{"channels", 6}};
  const auto c = config_from_json(j);
  const auto d = prepare_data(c.data);
  EXPECT_THROW(net_config(c, d), ConfigError);
}

TEST(PrepareData, MissingSourceIsConfigError) {
  auto j = tiny_json(scratch("missing"));
  j["data"]["source"] = "/nonexistent/trials";
  EXPECT_THROW(prepare_data(config_from_json(j).data), ConfigError);
}

TEST(Commands, SearchWritesArtifacts) {
  const auto out = scratch("search");
  const auto o = cmd_search(config_from_json(tiny_json(out)), nullptr);
  for (const auto* f : {"config.json", "genotype.json", "trajectory.csv", "penalties.csv", "theta.ckpt", "report.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto report = json::parse(slurp(out / "report.json"));
  for (const auto* k : {"genotype_path", "accuracy", "param_count", "mac_count", "wall_time_s", "trajectory_path",
                        "operator_counts", "unconstrained", "epochs_run", "converged"})
    EXPECT_TRUE(report.contains(k)) << k;
  EXPECT_EQ(report["epochs_run"], 2);
  EXPECT_FALSE(report["unconstrained"].get<bool>());
  const auto g = load_genotype(out / "genotype.json");
  EXPECT_EQ(g, o.result.genotype);
  EXPECT_EQ(report["param_count"].get<std::int64_t>(), count_params(compile<float>(g, 200, 2, 0)));
  // Header + epochs * 2 cell types * 5 edges * 8 operators.
  EXPECT_EQ(line_count(out / "trajectory.csv"), 1u + 2 * 2 * 5 * 8);
  EXPECT_EQ(line_count(out / "penalties.csv"), 3u);
}

TEST(Commands, UnconstrainedRunHasZeroPenalties) {
  auto j = tiny_json(scratch("free"));
  j["constraints"] = {{"lambda1", 0.0}, {"lambda2", 0.0}, {"lambda3", 0.0}};
  const auto o = cmd_search(config_from_json(j), nullptr);
  EXPECT_TRUE(o.report.unconstrained);
  for (const auto& r : o.result.trajectory) {
    EXPECT_EQ(r.penalty_lower, 0.0);
    EXPECT_EQ(r.penalty_upper, 0.0);
    EXPECT_EQ(r.penalty_skip, 0.0);
  }
}

TEST(Commands, TruncatedSearchIsPrefixOfFullRun) {
  auto j = tiny_json(scratch("full"));
  j["search"]["epochs"] = 3;
  j["search"]["patience"] = 0;
  const auto full = cmd_search(config_from_json(j), nullptr);
  j["output_dir"] = scratch("prefix").string();
  j["search"]["stop_after_epochs"] = 2;
  const auto part = cmd_search(config_from_json(j), nullptr);
  ASSERT_EQ(part.result.trajectory.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(part.result.trajectory[e].probs_normal, full.result.trajectory[e].probs_normal);
    EXPECT_EQ(part.result.trajectory[e].phi, full.result.trajectory[e].phi);
  }
}

TEST(Commands, RetrainThenEvalAgree) {
  const auto out = scratch("retrain");
  const auto cfg = config_from_json(tiny_json(out));
  const auto s = cmd_search(cfg, nullptr);
  const auto r = cmd_retrain(s.result.genotype, cfg, nullptr);
  for (const auto* f : {"report.json", "history.csv", "predictions.csv", "weights.ckpt", "genotype.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(line_count(out / "history.csv"), 3u);
  EXPECT_EQ(line_count(out / "predictions.csv"), 1u + 8u);
  const auto e = cmd_eval(s.result.genotype, out / "weights.ckpt", cfg);
  EXPECT_EQ(e.final_accuracy, r.result.accuracy);
  EXPECT_EQ(e.kappa, r.result.kappa);
  EXPECT_TRUE(fs::exists(out / "eval.json"));
}

TEST(Commands, GenotypeForOtherChannelCountRejected) {
  const auto cfg = config_from_json(tiny_json(scratch("wrong_g")));
  Genotype g;
  g.meta = {2, 2, 22, 4, "desk", ""};
  g.normal = g.reduce = {{{"skip", 0}, {"skip", 1}}, {{"skip", 0}, {"skip", 2}}};
  EXPECT_THROW(cmd_retrain(g, cfg, nullptr), ConfigError);
}

TEST(Commands, SynthWritesReadableDirectory) {
  const auto out = scratch("synth");
  const auto cfg = config_from_json(tiny_json(out));
  const auto set = cmd_synth(cfg, out / "trials");
  const auto back = ingest(out / "trials");
  EXPECT_EQ(back.size(), set.size());
  EXPECT_EQ(back.trials[3].data, set.trials[3].data);
}

namespace {

// Two edges, three operators (none, skip, conv); one row per operator.
void write_trajectory(const fs::path& dir, const std::vector<std::pair<double, std::vector<double>>>& epochs) {
  fs::create_directories(dir);
  std::ofstream out(dir / "trajectory.csv");
  out << "epoch,cell_type,edge_id,operator_name,softmax_prob,omega_raw,phi,skip_floor,L_train,L_val,L_lag,val_acc\n";
  const char* ops[] = {"none", "skip", "conv"};
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    const auto& [acc, p] = epochs[e];
    for (const char* type : {"normal", "reduce"})
      for (int edge = 0; edge < 2; ++edge)
        for (int o = 0; o < 3; ++o)
          out << e << ',' << type << ',' << edge << ',' << ops[o] << ',' << p[static_cast<std::size_t>(edge * 3 + o)]
              << ",0,0,0,0,0,0," << acc << '\n';
  }
}

}  // namespace

TEST(Stats, CountsNearBestEpochsOnly) {
  const auto root = scratch("stats");
  // Epoch 0 is far below the best and must be ignored.
  write_trajectory(root / "a", {{0.30, {0.1, 0.8, 0.1, 0.1, 0.1, 0.8}},
                                {0.95, {0.1, 0.6, 0.3, 0.1, 0.2, 0.7}},
                                {1.00, {0.9, 0.05, 0.05, 0.2, 0.4, 0.4}}});
  const auto r = cmd_stats({root / "a"}, StatsConfig{}, root / "out");
  EXPECT_DOUBLE_EQ(r.best, 1.0);
  // Epoch 1: edge 0 skip, edge 1 conv. Epoch 2: edge 0 tie skip/conv -> skip (none excluded), edge 1 tie -> skip.
  EXPECT_EQ(r.counts.at("normal").at("skip"), 3);
  EXPECT_EQ(r.counts.at("normal").at("conv"), 1);
  EXPECT_EQ(r.totals.at("skip"), 6);
  EXPECT_EQ(r.totals.at("conv"), 2);
  EXPECT_EQ(r.totals.count("none"), 0u);
  EXPECT_EQ(line_count(root / "out" / "included_epochs.csv"), 4u);
  for (const auto* f : {"operator_counts.csv", "edge_series.csv", "operator_counts.svg", "probabilities_normal.svg",
                        "probabilities_reduce.svg", "stats.json"})
    EXPECT_TRUE(fs::exists(root / "out" / f)) << f;
}

TEST(Stats, DegradedRunExcludedUnderGlobalBest) {
  const auto root = scratch("stats_degraded");
  write_trajectory(root / "good", {{0.9, {0.1, 0.1, 0.8, 0.1, 0.1, 0.8}}});
  write_trajectory(root / "bad", {{0.4, {0.1, 0.8, 0.1, 0.1, 0.8, 0.1}}});
  const auto g = cmd_stats({root / "good", root / "bad"}, StatsConfig{}, root / "g");
  EXPECT_EQ(g.totals.count("skip"), 0u);
  EXPECT_EQ(g.totals.at("conv"), 4);
  StatsConfig per_run;
  per_run.best = "per_run";
  const auto p = cmd_stats({root / "good", root / "bad"}, per_run, root / "p");
  EXPECT_EQ(p.totals.at("skip"), 4);
}

TEST(Stats, RejectsBadInput) {
  const auto root = scratch("stats_bad");
  EXPECT_THROW(cmd_stats({}, StatsConfig{}, root / "o"), ConfigError);
  EXPECT_THROW(cmd_stats({root / "missing"}, StatsConfig{}, root / "o"), ConfigError);
  fs::create_directories(root / "x");
  write_text(root / "x" / "trajectory.csv", "epoch,cell_type\n");
  EXPECT_THROW(cmd_stats({root / "x"}, StatsConfig{}, root / "o"), ConfigError);
}

TEST(Ablate, SettingsAndPairedDeltas) {
  const auto base = config_from_json(tiny_json(scratch("ablate")));
  EXPECT_EQ(ablation_setting(base, "nodes", "3").arch.nodes, 3);
  EXPECT_EQ(ablation_setting(base, "batch", "4").search.batch_size, 4);
  EXPECT_EQ(ablation_setting(base, "sparsity", "off").search.constraints.lambda3, 0.0);
  EXPECT_EQ(ablation_setting(base, "scale_constraint", "off").search.constraints.lambda2, 0.0);
  EXPECT_THROW(ablation_setting(base, "sparsity", "maybe"), ConfigError);
  EXPECT_THROW(ablation_setting(base, "depth", "2"), ConfigError);
  EXPECT_THROW(ablation_setting(base, "nodes", "x"), ConfigError);

  const auto rows = cmd_ablate("sparsity", {"off", "on"}, {0, 1}, base, nullptr);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.paired, r.setting == "on");
    if (r.paired) {
      const auto& off = rows[r.seed];
      EXPECT_EQ(r.d_phi_early, r.phi_early - off.phi_early);
    }
  }
  EXPECT_EQ(line_count(fs::path(base.output_dir) / "ablate.csv"), 5u);
}

TEST(Cli, ExitCodes) {
  const auto root = scratch("cli");
  const std::string tiny = "--out " + (root / "run").string() +
                           " --trials-per-class 10 --set data.synth.points=300 --set data.window=200"
                           " --set data.stride=100 --epochs 1 --batch 8";
  EXPECT_EQ(run_cli("search " + tiny), 0);
  EXPECT_TRUE(fs::exists(root / "run" / "genotype.json"));
  EXPECT_EQ(run_cli("search " + tiny + " --set search.bogus=1"), 2);
  EXPECT_EQ(run_cli("search " + tiny, "CTNAS_THREADS=zero"), 2);
  EXPECT_EQ(run_cli("search " + tiny + " --set constraints.lambda1=1e300"), 3);
  EXPECT_EQ(run_cli("bogus"), 2);
  EXPECT_EQ(run_cli("search --config /nonexistent.json"), 2);
  write_text(root / "bad.json", "{ not json");
  EXPECT_EQ(run_cli("search --config " + (root / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("stats " + (root / "run").string() + " --out " + (root / "stats").string()), 0);
  EXPECT_EQ(run_cli("synth --out " + (root / "trials").string() + " --trials-per-class 2"), 0);
  EXPECT_EQ(run_cli("retrain " + tiny + " --genotype " + (root / "run" / "genotype.json").string()), 0);
  EXPECT_EQ(run_cli("--help"), 0);
}
