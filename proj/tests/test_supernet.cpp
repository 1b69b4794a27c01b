#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ctnas/supernet.hpp"
#include "gradcheck.hpp"

using namespace ctnas;
using ctnas::testing::random_projection;
using ctnas::testing::random_tensor;

using TD = Tensor<double>;

namespace {

std::vector<std::unique_ptr<Operator<double>>> build_ops(const std::vector<std::string>& names, std::int64_t c,
                                                         std::uint64_t seed = 4) {
  Rng rng(seed);
  std::vector<std::unique_ptr<Operator<double>>> ops;
  for (const auto& n : names) ops.push_back(build_operator<double>(OperatorSpec::parse(n), c, false, rng));
  return ops;
}

MetaNetConfig tiny_config() {
  MetaNetConfig cfg;
  cfg.channels = 4;
  cfg.classes = 4;
  cfg.blocks = 1;
  cfg.nodes = 2;
  cfg.time_points = 64;
  cfg.slices = 8;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(CellTopology, EdgeCountAndOrder) {
  for (int n = 1; n <= 5; ++n) {
    const auto t = CellTopology::make(n);
    std::size_t expected = 0;
    for (int k = 0; k < n; ++k) expected += 2 + k;
    EXPECT_EQ(t.edge_count(), expected);
    for (const auto& e : t.edges) EXPECT_LT(e.source, e.dest);
  }
  EXPECT_THROW(CellTopology::make(0), std::invalid_argument);
}

TEST(MixedEdge, SkipAndNoneUniformHalvesInput) {
  auto ops = build_ops({"skip", "none"}, 3);
  std::mt19937_64 g(1);
  auto x = random_tensor<double>({2, 3, 6, 4}, g);
  auto y = mixed_edge_forward(x, TD({2}, {0.0, 0.0}), ops, Mode::train);
  for (std::size_t i = 0; i < x.values().size(); ++i) EXPECT_NEAR(y.values()[i], 0.5 * x.values()[i], 1e-15);
}

TEST(MixedEdge, SaturatedSkipReturnsInput) {
  auto ops = build_ops({"skip", "none", "sep 3x1"}, 3);
  std::mt19937_64 g(2);
  auto x = random_tensor<double>({2, 3, 6, 4}, g);
  auto y = mixed_edge_forward(x, TD({3}, {20.0, 0.0, 0.0}), ops, Mode::train);
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < x.values().size(); ++i) {
    diff += std::pow(y.values()[i] - x.values()[i], 2);
    norm += std::pow(x.values()[i], 2);
  }
  EXPECT_LT(std::sqrt(diff), 1e-6 * std::sqrt(norm));
}

TEST(MixedEdge, WeightsFollowSoftmax) {
  auto ops = build_ops({"sep 3x1", "dil 3x1", "maxpool 3x3"}, 3);
  auto ref = build_ops({"sep 3x1", "dil 3x1", "maxpool 3x3"}, 3);
  std::mt19937_64 g(3);
  auto x = random_tensor<double>({2, 3, 8, 4}, g);
  auto y = mixed_edge_forward(x, TD({3}, {std::log(3.0), 0.0, 0.0}), ops, Mode::train);
  std::vector<std::vector<double>> parts;
  for (auto& op : ref) {
    EdgeInput<double> in(x);
    parts.push_back(op->forward(in, Mode::train).values());
  }
  for (std::size_t i = 0; i < y.values().size(); ++i)
    EXPECT_NEAR(y.values()[i], 0.6 * parts[0][i] + 0.2 * parts[1][i] + 0.2 * parts[2][i], 1e-12);
}

TEST(MixedEdge, Errors) {
  auto ops = build_ops({"skip", "none"}, 3);
  auto x = TD::zeros({1, 3, 4, 4});
  EXPECT_THROW(mixed_edge_forward(x, TD({3}, {0, 0, 0}), ops, Mode::train), ShapeError);
  EXPECT_THROW(mixed_edge_forward(x, TD({2}, {std::nan(""), 0.0}), ops, Mode::train), DivergenceError);
}

TEST(MixedEdge, MaskingMatchesReducedSpace) {
  auto full = build_ops({"skip", "sep 3x1", "dil 3x1"}, 3, 8);
  std::mt19937_64 g(4);
  auto x = random_tensor<double>({2, 3, 8, 4}, g);
  const double inf = std::numeric_limits<double>::infinity();
  auto masked = mixed_edge_forward(x, TD({3}, {0.3, -inf, -0.2}), full, Mode::train);
  std::vector<std::unique_ptr<Operator<double>>> reduced;
  reduced.push_back(std::move(full[0]));
  reduced.push_back(std::move(full[2]));
  auto direct = mixed_edge_forward(x, TD({2}, {0.3, -0.2}), reduced, Mode::train);
  for (std::size_t i = 0; i < masked.values().size(); ++i) EXPECT_NEAR(masked.values()[i], direct.values()[i], 1e-12);
}

TEST(MetaNet, LogitsShape) {
  MetaNet<double> net(tiny_config(), SearchSpace::desk(4));
  Rng rng(1);
  auto theta = net.init_arch_params(rng);
  std::mt19937_64 g(1);
  auto x = random_tensor<double>({2, 4, 64, 8}, g);
  auto logits = net.forward(x, theta, Mode::train);
  EXPECT_EQ(logits.shape(), (Shape{2, 4}));
  for (double v : logits.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(MetaNet, RejectsIncompatibleInputBeforeCompute) {
  MetaNet<double> net(tiny_config(), SearchSpace::desk(4));
  Rng rng(1);
  auto theta = net.init_arch_params(rng);
  EXPECT_THROW(net.forward(TD::zeros({2, 4, 32, 8}), theta, Mode::train), ShapeError);
  EXPECT_THROW(net.forward(TD::zeros({2, 5, 64, 8}), theta, Mode::train), ShapeError);
  EXPECT_THROW(net.forward(TD::zeros({4, 64, 8}), theta, Mode::train), ShapeError);
  auto cfg = tiny_config();
  cfg.time_points = 1;
  EXPECT_THROW(MetaNet<double>(cfg, SearchSpace::desk(4)), ShapeError);
  EXPECT_THROW(MetaNet<double>(tiny_config(), SearchSpace::desk(5)), ShapeError);
}

TEST(MetaNet, DuplicateRowsGiveIdenticalLogits) {
  MetaNet<double> net(tiny_config(), SearchSpace::desk(4));
  const auto e = static_cast<std::int64_t>(net.topology().edge_count());
  auto theta = ArchParams<double>::zeros(e, 8);
  std::mt19937_64 g(5);
  auto row = random_tensor<double>({1, 4, 64, 8}, g);
  std::vector<double> v = row.values();
  v.insert(v.end(), row.values().begin(), row.values().end());
  auto logits = net.forward(TD({2, 4, 64, 8}, v), theta, Mode::eval);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(logits.values()[k], logits.values()[4 + k]);
}

TEST(MetaNet, ArchGradientMatchesFiniteDifferences) {
  auto cfg = tiny_config();
  cfg.time_points = 8;
  cfg.slices = 3;
  cfg.channels = 2;
  cfg.classes = 3;
  cfg.nodes = 2;
  const auto space = SearchSpace::from_names({"none", "skip", "maxpool 3x1", "sep 3x1", "dil 3x1"}, 2);
  MetaNet<double> net(cfg, space);
  std::mt19937_64 g(6);
  auto x = random_tensor<double>({3, 2, 8, 3}, g);
  const std::vector<int> labels{0, 2, 1};
  Rng rng(2);
  auto theta0 = net.init_arch_params(rng, 0.5);
  auto res = ctnas::testing::grad_check(
      [&](std::vector<TD>& l) {
        ArchParams<double> th{l[0], l[1]};
        return cross_entropy(net.forward(x, th, Mode::eval), labels);
      },
      {theta0.normal, theta0.reduce});
  EXPECT_LT(res.max_rel_error, 1e-3);
  EXPECT_GT(res.checked, 0u);
}

TEST(MetaNet, EveryCandidateReceivesGradient) {
  MetaNet<double> net(tiny_config(), SearchSpace::desk(4));
  Rng rng(1);
  auto theta = net.init_arch_params(rng);
  std::mt19937_64 g(8);
  auto x = random_tensor<double>({3, 4, 64, 8}, g);
  const std::vector<int> labels{0, 1, 3};
  cross_entropy(net.forward(x, theta, Mode::train), labels).backward();
  for (const auto& [name, t] : net.weights()) {
    ASSERT_TRUE(t.has_grad()) << name;
    double mag = 0;
    for (double v : t.grad()) mag += std::abs(v);
    EXPECT_GT(mag, 0.0) << name;
  }
  for (const auto* th : {&theta.normal, &theta.reduce}) {
    ASSERT_TRUE(th->has_grad());
  }
}

TEST(MetaNet, LongKernelsExcludedFromShortCells) {
  auto cfg = tiny_config();
  cfg.time_points = 20;
  cfg.blocks = 2;
  const auto space = SearchSpace::from_names({"none", "skip", "sep 17x1", "sep 3x1"}, 4);
  MetaNet<double> net(cfg, space);
  // Cell inputs span 20, 20, 10, 10 time points.
  EXPECT_TRUE(net.cells()[0].allowed[2]);
  EXPECT_TRUE(net.cells()[1].allowed[2]);
  EXPECT_FALSE(net.cells()[2].allowed[2]);
  EXPECT_FALSE(net.cells()[3].allowed[2]);
  EXPECT_TRUE(net.cells()[3].allowed[3]);
  Rng rng(1);
  auto theta = net.init_arch_params(rng);
  std::mt19937_64 g(8);
  auto logits = net.forward(random_tensor<double>({2, 4, 20, 8}, g), theta, Mode::train);
  for (double v : logits.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(MetaNet, NanArchitectureDiverges) {
  MetaNet<double> net(tiny_config(), SearchSpace::desk(4));
  Rng rng(1);
  auto theta = net.init_arch_params(rng);
  theta.normal.data()[3] = std::nan("");
  EXPECT_THROW(net.forward(TD::zeros({2, 4, 64, 8}), theta, Mode::train), DivergenceError);
}

TEST(MetaNet, FixedParamCountCoversStemPreprocessHead) {
  auto cfg = tiny_config();
  cfg.blocks = 2;
  MetaNet<double> net(cfg, SearchSpace::desk(4));
  // stem conv 16 + bn 8, head 4*4+4, preprocess in cell 2: 16 + 8
  EXPECT_EQ(net.fixed_param_count(), 16 + 8 + 20 + 24);
}
