#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "ctnas/eeg_data.hpp"
#include "ctnas/train.hpp"

using namespace ctnas;

namespace {

Genotype uniform_genotype(const std::string& op, std::int64_t channels, int classes) {
  Genotype g;
  g.meta.blocks = 1;
  g.meta.nodes = 2;
  g.meta.channels = channels;
  g.meta.classes = classes;
  g.meta.search_space = "desk";
  const Genotype::Cell cell{{{op, 0}, {op, 1}}, {{op, 1}, {op, 2}}};
  g.normal = cell;
  g.reduce = cell;
  return g;
}

struct Splits {
  Dataset<float> train, val;
};

Splits small_synth(double snr_db, std::uint64_t seed) {
  SynthSpec spec;
  spec.classes = 4;
  spec.channels = 8;
  spec.points = 300;
  spec.trials_per_class = 30;
  spec.snr_db = snr_db;
  spec.seed = seed;
  const auto set = synth_generate(spec);
  SplitSpec s;
  s.train_ratio = 0.5;
  const auto parts = split(set, s, seed);
  const auto norm = normalize(parts.train, parts.val);
  return {to_dataset<float>(slice_stack(norm.train, 200, 50)), to_dataset<float>(slice_stack(norm.val, 200, 50))};
}

}  // namespace

TEST(Metrics, ConfusionAndAccuracy) {
  const std::vector<int> truth{0, 0, 1, 1, 2};
  const std::vector<int> pred{0, 1, 1, 1, 0};
  const auto m = confusion_matrix(pred, truth, 3);
  EXPECT_EQ(m[0][0], 1);
  EXPECT_EQ(m[0][1], 1);
  EXPECT_EQ(m[1][1], 2);
  EXPECT_EQ(m[2][0], 1);
  EXPECT_DOUBLE_EQ(accuracy(pred, truth), 0.6);
  EXPECT_THROW(confusion_matrix({3}, {0}, 3), std::out_of_range);
  EXPECT_THROW(accuracy({0}, {0, 1}), std::invalid_argument);
}

TEST(Metrics, KappaOfPerfectPredictionIsOne) {
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
  EXPECT_DOUBLE_EQ(cohen_kappa(y, y, 4), 1.0);
  EXPECT_DOUBLE_EQ(cohen_kappa({2, 2, 2}, {2, 2, 2}, 4), 1.0);
}

TEST(Metrics, KappaTextbookValue) {
  // 20 agree-yes, 15 agree-no, 5 + 10 disagreements: p_o = 0.7, p_e = 0.5.
  std::vector<int> truth, pred;
  auto add = [&](int t, int p, int n) {
    for (int i = 0; i < n; ++i) truth.push_back(t), pred.push_back(p);
  };
  add(0, 0, 20);
  add(0, 1, 5);
  add(1, 0, 10);
  add(1, 1, 15);
  EXPECT_NEAR(cohen_kappa(pred, truth, 2), 0.4, 1e-12);
}

TEST(Metrics, KappaOfRandomPredictionsNearZero) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(0, 3);
  std::vector<int> truth(1000), pred(1000);
  for (auto& v : truth) v = d(rng);
  for (auto& v : pred) v = d(rng);
  EXPECT_NEAR(cohen_kappa(pred, truth, 4), 0.0, 0.1);
}

TEST(Metrics, ArgmaxTakesFirstMaximum) {
  const auto logits = Tensor<float>({2, 3}, {1, 3, 3, 0, -1, -2});
  EXPECT_EQ(argmax_rows(logits), (std::vector<int>{1, 0}));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.lr_min = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Retrain, LearnsCleanSyntheticData) {
  const auto d = small_synth(20.0, 1);
  const auto g = uniform_genotype("sep 3x1", 8, 4);
  auto net = compile<float>(g, 200, d.train.sample_shape[2], 0);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  const auto r = train_compiled(net, d.train, d.val, cfg, 4);
  ASSERT_EQ(r.history.size(), 10u);
  EXPECT_EQ(r.predictions.size(), d.val.size());
  EXPECT_GT(r.accuracy, 0.8);
  EXPECT_GT(r.kappa, 0.7);
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
}

TEST(Retrain, SeededRunsAreIdentical) {
  const auto d = small_synth(0.0, 2);
  const auto g = uniform_genotype("dil 3x1", 8, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 5;
  auto a = compile<float>(g, 200, d.train.sample_shape[2], 0);
  auto b = compile<float>(g, 200, d.train.sample_shape[2], 0);
  const auto ra = train_compiled(a, d.train, d.val, cfg, 4);
  const auto rb = train_compiled(b, d.train, d.val, cfg, 4);
  for (std::size_t i = 0; i < ra.history.size(); ++i) EXPECT_EQ(ra.history[i].loss, rb.history[i].loss);
  EXPECT_EQ(ra.predictions, rb.predictions);
}

TEST(Retrain, NonFiniteLossThrowsDivergence) {
  const auto d = small_synth(0.0, 3);
  const auto g = uniform_genotype("sep 3x1", 8, 4);
  auto net = compile<float>(g, 200, d.train.sample_shape[2], 0);
  for (auto& [name, t] : net.weights())
    if (name.find("head") != std::string::npos)
      for (auto& v : t.data()) v = std::numeric_limits<float>::infinity();
  TrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train_compiled(net, d.train, d.val, cfg, 4), DivergenceError);
}

TEST(Retrain, RejectsEmptySplits) {
  const auto d = small_synth(0.0, 4);
  auto net = compile<float>(uniform_genotype("skip", 8, 4), 200, d.train.sample_shape[2], 0);
  Dataset<float> empty;
  EXPECT_THROW(train_compiled(net, d.train, empty, TrainConfig{}, 4), std::invalid_argument);
}
