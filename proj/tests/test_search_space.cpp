#include <gtest/gtest.h>

#include <random>

#include "ctnas/search_space.hpp"
#include "gradcheck.hpp"

using namespace ctnas;
using ctnas::testing::random_tensor;

namespace {

std::int64_t enumerate_weights(const Operator<double>& op) {
  NamedTensors<double> out;
  op.collect("op", out);
  return count_elements(out);
}

}  // namespace

TEST(OperatorSpec, ParsesTableNames) {
  EXPECT_EQ(OperatorSpec::parse("sep 3x1").kind, OpKind::sep_conv);
  const auto d = OperatorSpec::parse("dil 1x7");
  EXPECT_EQ(d.kind, OpKind::dil_conv);
  EXPECT_EQ(d.kernel_h, 1);
  EXPECT_EQ(d.kernel_w, 7);
  EXPECT_EQ(d.dilation, 2);
  EXPECT_EQ(OperatorSpec::parse("maxpool 3x3").name(), "maxpool 3x3");
  EXPECT_EQ(OperatorSpec::parse("skip").kind, OpKind::skip);
  EXPECT_EQ(OperatorSpec::parse("none").kind, OpKind::none);
}

TEST(OperatorSpec, RejectsShapesOutsideTable) {
  EXPECT_THROW(OperatorSpec::parse("sep 4x1"), SearchSpaceError);
  EXPECT_THROW(OperatorSpec::parse("maxpool 7x7"), SearchSpaceError);
  EXPECT_THROW(OperatorSpec::parse("avgpool 3x3"), SearchSpaceError);
  EXPECT_THROW(OperatorSpec::parse("sep 3by1"), SearchSpaceError);
  EXPECT_THROW(OperatorSpec::parse("conv"), SearchSpaceError);
}

TEST(SearchSpace, NeedsExactlyOneSkipAndNone) {
  EXPECT_THROW(SearchSpace::from_names({"skip", "sep 3x1"}, 4), SearchSpaceError);
  EXPECT_THROW(SearchSpace::from_names({"none", "skip", "skip"}, 4), SearchSpaceError);
  EXPECT_THROW(SearchSpace::from_names({"none", "skip", "sep 3x1", "sep 3x1"}, 4), SearchSpaceError);
  EXPECT_NO_THROW(SearchSpace::desk(8));
  EXPECT_EQ(SearchSpace::full(22).size(), 2u + 4u + 28u);
}

TEST(ParamCount, ParameterlessCores) {
  for (std::int64_t c : {4, 22}) {
    EXPECT_EQ(param_count(OperatorSpec::parse("skip"), c), 0);
    EXPECT_EQ(param_count(OperatorSpec::parse("none"), c), 0);
    EXPECT_EQ(param_count(OperatorSpec::parse("maxpool 3x1"), c), 2 * c);
  }
}

TEST(ParamCount, DilatedThreeByOneAtFourChannels) {
  const auto spec = OperatorSpec::parse("dil 3x1");
  EXPECT_EQ(param_count(spec, 4), 36);
  Rng rng(0);
  EXPECT_EQ(enumerate_weights(*build_operator<double>(spec, 4, false, rng)), 36);
}

TEST(ParamCount, SeparableThreeByOneAtTwentyTwoChannels) {
  const auto spec = OperatorSpec::parse("sep 3x1");
  Rng rng(0);
  const auto enumerated = enumerate_weights(*build_operator<double>(spec, 22, false, rng));
  EXPECT_EQ(enumerated, 2 * (3 * 22 + 22 * 22 + 2 * 22));
  EXPECT_EQ(param_count(spec, 22), enumerated);
}

TEST(ParamCount, MatchesWeightEnumerationForEveryOperator) {
  for (std::int64_t c : {1, 4, 8, 22}) {
    const auto space = SearchSpace::full(c);
    for (const auto& spec : space.operators) {
      for (bool reduction : {false, true}) {
        if (spec.kind == OpKind::skip && reduction) continue;  // the strided skip is a learned reduction
        Rng rng(1);
        auto op = build_operator<double>(spec, c, reduction, rng);
        EXPECT_EQ(param_count(spec, c), enumerate_weights(*op)) << spec.name() << " C=" << c;
      }
    }
  }
}

TEST(NormalizedCosts, SkipAndOneConv) {
  const auto space = SearchSpace::from_names({"none", "skip", "sep 3x1"}, 4);
  const auto m = normalized_costs(space, 4);
  EXPECT_EQ(m.sigma, (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(NormalizedCosts, RatioOfTwoConvs) {
  const auto m = CostModel::from_raw({100.0, 50.0}, {true, true});
  EXPECT_DOUBLE_EQ(m.sigma[0], 1.0);
  EXPECT_DOUBLE_EQ(m.sigma[1], 0.5);
}

TEST(NormalizedCosts, AllZeroIsLegal) {
  const auto m = CostModel::from_raw({0.0, 0.0}, {false, false});
  EXPECT_EQ(m.sigma, (std::vector<double>{0.0, 0.0}));
}

TEST(NormalizedCosts, LargestKernelDominatesFullSpace) {
  const auto space = SearchSpace::full(22);
  const auto m = normalized_costs(space, 22);
  std::size_t best = 0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    EXPECT_GE(m.sigma[i], 0.0);
    EXPECT_LE(m.sigma[i], 1.0);
    if (m.raw_params[i] > m.raw_params[best]) best = i;
  }
  EXPECT_EQ(space.operators[best].name(), "sep 33x3");
  EXPECT_DOUBLE_EQ(m.sigma[best], 1.0);
  for (const char* zero : {"skip", "none", "maxpool 3x3", "maxpool 3x1", "maxpool 5x1", "maxpool 1x3"}) {
    for (std::size_t i = 0; i < space.size(); ++i)
      if (space.operators[i].name() == zero) EXPECT_EQ(m.sigma[i], 0.0) << zero;
  }
}

TEST(NormalizedCosts, ScaleInvariant) {
  const std::vector<double> raw{0, 12, 40, 7, 0};
  const std::vector<bool> par{false, true, true, true, false};
  const auto a = CostModel::from_raw(raw, par);
  std::vector<double> scaled;
  for (double r : raw) scaled.push_back(r * 37.5);
  const auto b = CostModel::from_raw(scaled, par);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(a.sigma[i], b.sigma[i], 1e-15);
}

TEST(BuildOperator, SkipIsIdentityInNormalCell) {
  Rng rng(3);
  auto op = build_operator<double>(OperatorSpec::parse("skip"), 4, false, rng);
  std::mt19937_64 g(5);
  auto x = random_tensor<double>({2, 4, 9, 8}, g);
  EdgeInput<double> in(x);
  EXPECT_EQ(op->forward(in, Mode::train).values(), x.values());
}

TEST(BuildOperator, NoneIsZeroOfStridedShape) {
  Rng rng(3);
  std::mt19937_64 g(5);
  auto x = random_tensor<double>({2, 4, 9, 8}, g);
  for (bool reduction : {false, true}) {
    auto op = build_operator<double>(OperatorSpec::parse("none"), 4, reduction, rng);
    EdgeInput<double> in(x);
    auto y = op->forward(in, Mode::train);
    EXPECT_EQ(y.shape(), (Shape{2, 4, reduction ? 5 : 9, 8}));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(BuildOperator, ChannelsPreservedAndTimeHalvedOnReduction) {
  const auto space = SearchSpace::full(3);
  std::mt19937_64 g(11);
  for (std::int64_t h : {33, 40}) {
    auto x = random_tensor<double>({2, 3, h, 8}, g);
    for (const auto& spec : space.operators) {
      for (bool reduction : {false, true}) {
        Rng rng(2);
        auto op = build_operator<double>(spec, 3, reduction, rng);
        EdgeInput<double> in(x);
        auto y = op->forward(in, Mode::train);
        EXPECT_EQ(y.shape(), (Shape{2, 3, reduction ? (h + 1) / 2 : h, 8})) << spec.name() << " H=" << h;
        EXPECT_EQ(op->output_shape({3, h, 8}), (Shape{y.dim(1), y.dim(2), y.dim(3)}));
      }
    }
  }
}

TEST(BuildOperator, RejectsZeroChannels) {
  Rng rng(0);
  EXPECT_THROW(build_operator<double>(OperatorSpec::parse("sep 3x1"), 0, false, rng), SearchSpaceError);
}

TEST(BuildOperator, SharedActivationMatchesFreshInput) {
  Rng r1(9), r2(9);
  auto a = build_operator<double>(OperatorSpec::parse("sep 3x3"), 4, false, r1);
  auto b = build_operator<double>(OperatorSpec::parse("sep 3x3"), 4, false, r2);
  std::mt19937_64 g(1);
  auto x = random_tensor<double>({3, 4, 10, 8}, g);
  EdgeInput<double> shared(x);
  auto dil = build_operator<double>(OperatorSpec::parse("dil 3x1"), 4, false, r1);
  dil->forward(shared, Mode::train);
  EdgeInput<double> fresh(x);
  EXPECT_EQ(a->forward(shared, Mode::train).values(), b->forward(fresh, Mode::train).values());
}
