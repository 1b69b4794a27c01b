#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <tuple>

#include "ctnas/genotype.hpp"
#include "gradcheck.hpp"

using namespace ctnas;
using ctnas::testing::random_tensor;

using TD = Tensor<double>;

namespace {

ArchParams<double> random_theta(std::int64_t edges, std::int64_t ops, std::mt19937_64& g, double spread = 1.0) {
  return {random_tensor<double>({edges, ops}, g, -spread, spread), random_tensor<double>({edges, ops}, g, -spread, spread)};
}

// Exhaustive search over every way to keep two incoming edges of a node and
// one non-'none' operator on each. The best selection maximizes the summed
// probability; among equal sums it prefers lower operator indices, then
// lower source ids.
Genotype::Cell brute_force_cell(const TD& theta, const SearchSpace& space, int nodes) {
  const auto ops = static_cast<std::int64_t>(space.size());
  std::vector<double> probs(theta.values().size());
  for (std::int64_t e = 0; e < theta.dim(0); ++e) {
    double z = 0;
    for (std::int64_t o = 0; o < ops; ++o) z += std::exp(theta.values()[e * ops + o]);
    for (std::int64_t o = 0; o < ops; ++o) probs[e * ops + o] = std::exp(theta.values()[e * ops + o]) / z;
  }
  Genotype::Cell cell;
  int first_edge = 0;
  for (int n = 0; n < nodes; ++n) {
    const int in_count = n + 2;
    double best_score = -1;
    std::tuple<int, int, int, int> best_key{};  // (op a, op b, src a, src b)
    std::vector<GenotypeEdge> best;
    for (int a = 0; a < in_count; ++a)
      for (int b = a + 1; b < in_count; ++b)
        for (int oa = 0; oa < ops; ++oa)
          for (int ob = 0; ob < ops; ++ob) {
            if (space.operators[oa].kind == OpKind::none || space.operators[ob].kind == OpKind::none) continue;
            const double s = probs[(first_edge + a) * ops + oa] + probs[(first_edge + b) * ops + ob];
            const auto key = std::make_tuple(oa, ob, a, b);
            if (s > best_score || (s == best_score && key < best_key)) {
              best_score = s;
              best_key = key;
              best = {{space.operators[oa].name(), a}, {space.operators[ob].name(), b}};
            }
          }
    cell.push_back(best);
    first_edge += in_count;
  }
  return cell;
}

Genotype sample_genotype(std::mt19937_64& g, const SearchSpace& space, int blocks, int nodes) {
  Genotype gen;
  gen.meta.blocks = blocks;
  gen.meta.nodes = nodes;
  gen.meta.channels = space.channel_count;
  gen.meta.classes = 4;
  gen.meta.search_space = "desk";
  gen.meta.theta_checksum = "0123456789abcdef";
  std::vector<std::string> names;
  for (const auto& op : space.operators)
    if (op.kind != OpKind::none) names.push_back(op.name());
  for (auto* cell : {&gen.normal, &gen.reduce}) {
    for (int n = 0; n < nodes; ++n) {
      std::vector<int> sources(static_cast<std::size_t>(n + 2));
      for (int s = 0; s < n + 2; ++s) sources[static_cast<std::size_t>(s)] = s;
      std::shuffle(sources.begin(), sources.end(), g);
      std::vector<GenotypeEdge> node;
      for (int k = 0; k < 2; ++k)
        node.push_back({names[std::uniform_int_distribution<std::size_t>(0, names.size() - 1)(g)],
                        sources[static_cast<std::size_t>(k)]});
      std::sort(node.begin(), node.end(), [](auto& a, auto& b) { return a.source < b.source; });
      cell->push_back(node);
    }
  }
  return gen;
}

// Independent count: stem 1x1 conv + BN, head, a factorized reduction wherever
// a cell follows a reduction, and the closed-form count of every retained
// operator (strided skips carry a 1x1 conv + BN).
std::int64_t formula_params(const Genotype& g) {
  const std::int64_t c = g.meta.channels;
  std::int64_t total = c * c + 2 * c + g.meta.classes * c + g.meta.classes;
  for (int i = 0; i < 2 * g.meta.blocks; ++i) {
    const bool reduce = i % 2 == 1;
    if (i >= 2 && i % 2 == 0) total += c * c + 2 * c;
    for (const auto& node : reduce ? g.reduce : g.normal)
      for (const auto& e : node) {
        const auto spec = OperatorSpec::parse(e.op);
        if (reduce && spec.kind == OpKind::skip && e.source < 2) total += c * c + 2 * c;
        else total += param_count(spec, c);
      }
  }
  return total;
}

}  // namespace

TEST(Derive, ArgmaxPerEdge) {
  const auto space = SearchSpace::from_names({"none", "skip", "sep 3x1"}, 4);
  ArchParams<double> th{TD({2, 3}, {0.1, 0.9, 0.3, 0.0, 0.0, 0.0}), TD({2, 3}, {0, 0, 0, 0, 0, 0})};
  auto g = derive(th, space);
  ASSERT_EQ(g.normal.size(), 1u);
  EXPECT_EQ(g.normal[0][0], (GenotypeEdge{"skip", 0}));
}

TEST(Derive, NoneNeverRetained) {
  const auto space = SearchSpace::from_names({"none", "skip", "sep 3x1"}, 4);
  // Probabilities close to (0.9, 0.08, 0.02).
  const double a = std::log(0.9), b = std::log(0.08), c = std::log(0.02);
  ArchParams<double> th{TD({2, 3}, {a, b, c, a, b, c}), TD({2, 3}, {a, b, c, a, b, c})};
  auto g = derive(th, space);
  for (const auto& e : g.normal[0]) EXPECT_EQ(e.op, "skip");
}

TEST(Derive, MatchesExhaustiveEnumeration) {
  const auto space = SearchSpace::desk(4);
  std::mt19937_64 g(17);
  for (int trial = 0; trial < 200; ++trial) {
    auto th = random_theta(5, 8, g, 2.0);
    const auto gen = derive(th, space);
    EXPECT_EQ(gen.normal, brute_force_cell(th.normal, space, 2)) << trial;
    EXPECT_EQ(gen.reduce, brute_force_cell(th.reduce, space, 2)) << trial;
  }
}

TEST(Derive, ThreeNodeCellsMatchEnumeration) {
  const auto space = SearchSpace::desk(4);
  std::mt19937_64 g(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto th = random_theta(9, 8, g);
    EXPECT_EQ(derive(th, space).normal, brute_force_cell(th.normal, space, 3));
  }
}

TEST(Derive, TieBreaksTowardLowerIndices) {
  const auto space = SearchSpace::desk(4);
  const auto g = derive(ArchParams<double>::zeros(5, 8), space);
  for (const auto* cell : {&g.normal, &g.reduce}) {
    EXPECT_EQ((*cell)[0], (std::vector<GenotypeEdge>{{"skip", 0}, {"skip", 1}}));
    EXPECT_EQ((*cell)[1], (std::vector<GenotypeEdge>{{"skip", 0}, {"skip", 1}}));
  }
}

TEST(Derive, ShiftInvariant) {
  const auto space = SearchSpace::desk(4);
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto th = random_theta(5, 8, g);
    auto shifted = th.clone();
    for (std::int64_t e = 0; e < 5; ++e) {
      const double s = std::uniform_real_distribution<double>(-3, 3)(g);
      for (std::int64_t o = 0; o < 8; ++o) shifted.normal.data()[e * 8 + o] += s;
    }
    EXPECT_EQ(derive(th, space).normal, derive(shifted, space).normal);
  }
}

TEST(Derive, ExcludedOperatorsSkipped) {
  const auto space = SearchSpace::desk(4);
  auto th = ArchParams<double>::zeros(5, 8);
  for (std::int64_t e = 0; e < 5; ++e) th.normal.data()[e * 8 + 4] = 5.0;  // sep 3x1
  std::vector<bool> excluded(8, false);
  excluded[4] = true;
  for (const auto& node : derive(th, space, excluded).normal)
    for (const auto& e : node) EXPECT_NE(e.op, "sep 3x1");
}

TEST(Derive, RejectsNaN) {
  auto th = ArchParams<double>::zeros(5, 8);
  th.reduce.data()[0] = std::nan("");
  EXPECT_THROW(derive(th, SearchSpace::desk(4)), DivergenceError);
}

TEST(GenotypeJson, RoundTrip) {
  const auto space = SearchSpace::desk(8);
  std::mt19937_64 g(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto gen = sample_genotype(g, space, 1 + trial % 3, 1 + trial % 4);
    EXPECT_EQ(parse_genotype(serialize(gen)), gen);
  }
}

TEST(GenotypeJson, MissingReduceNamesField) {
  std::mt19937_64 g(2);
  auto j = to_json(sample_genotype(g, SearchSpace::desk(8), 2, 2));
  j.erase("reduce");
  try {
    parse_genotype(j.dump());
    FAIL() << "expected a parse error";
  } catch (const GenotypeParseError& e) {
    EXPECT_EQ(e.where(), "$.reduce");
    EXPECT_NE(std::string(e.what()).find("reduce"), std::string::npos);
  }
}

TEST(GenotypeJson, StructuredErrors) {
  std::mt19937_64 g(2);
  const auto base = to_json(sample_genotype(g, SearchSpace::desk(8), 2, 2));
  auto expect_where = [](const std::string& text, const std::string& where) {
    try {
      parse_genotype(text);
      ADD_FAILURE() << "expected a parse error at " << where;
    } catch (const GenotypeParseError& e) {
      EXPECT_EQ(e.where(), where) << e.what();
    }
  };
  auto j = base;
  j["normal"][1][0]["op"] = "sep 4x1";
  expect_where(j.dump(), "$.normal[1][0].op");
  j = base;
  j["meta"]["nodes"] = "two";
  expect_where(j.dump(), "$.meta.nodes");
  j = base;
  j["reduce"][0][1]["op"] = "none";
  expect_where(j.dump(), "$");
  j = base;
  j["schema_version"] = 7;
  expect_where(j.dump(), "$.schema_version");
  expect_where("{\"schema_version\": 1, ", "byte 23");
}

TEST(GenotypeJson, HandWrittenFigureGenotype) {
  const std::string text = R"({
    "schema_version": 1,
    "meta": {"blocks": 3, "nodes": 2, "channels": 22, "classes": 4,
             "search_space": "full", "theta_checksum": ""},
    "normal": [[{"op": "dil 17x1", "source": 0}, {"op": "sep 3x3", "source": 1}],
               [{"op": "dil 7x1", "source": 1}, {"op": "skip", "source": 2}]],
    "reduce": [[{"op": "dil 1x7", "source": 0}, {"op": "maxpool 3x3", "source": 1}],
               [{"op": "sep 5x1", "source": 0}, {"op": "dil 3x1", "source": 2}]]
  })";
  const auto g = parse_genotype(text);
  auto net = compile<double>(g, 400, 8, 1);
  std::mt19937_64 rng(1);
  auto logits = net.forward(random_tensor<double>({2, 22, 400, 8}, rng), Mode::train);
  EXPECT_EQ(logits.shape(), (Shape{2, 4}));
}

TEST(Compile, ShapeContractAndNoNone) {
  std::mt19937_64 g(4);
  const auto space = SearchSpace::desk(4);
  auto gen = sample_genotype(g, space, 1, 2);
  auto net = compile<double>(gen, 64, 8);
  auto logits = net.forward(random_tensor<double>({2, 4, 64, 8}, g), Mode::train);
  EXPECT_EQ(logits.shape(), (Shape{2, 4}));
  net.visit_ops([](const std::string& name, const Operator<double>& op, std::size_t) {
    EXPECT_NE(op.spec().kind, OpKind::none) << name;
  });
  EXPECT_THROW(net.forward(TD::zeros({2, 4, 32, 8}), Mode::train), ShapeError);
}

TEST(Compile, AllSkipUsesOnlyStemHeadAndReductions) {
  Genotype g;
  g.meta = {2, 2, 4, 3, "desk", ""};
  g.normal = {{{"skip", 0}, {"skip", 1}}, {{"skip", 0}, {"skip", 2}}};
  g.reduce = g.normal;
  auto net = compile<double>(g, 32, 4);
  for (const auto& [name, t] : net.weights()) {
    const bool allowed = name.rfind("stem.", 0) == 0 || name.rfind("head.", 0) == 0 ||
                         name.find(".pre0.") != std::string::npos || name.find(".skip.") != std::string::npos;
    EXPECT_TRUE(allowed) << name;
  }
  std::mt19937_64 rng(2);
  auto logits = net.forward(random_tensor<double>({3, 4, 32, 4}, rng), Mode::train);
  for (double v : logits.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Compile, LongKernelInShortCellNamesLocation) {
  Genotype g;
  g.meta = {2, 1, 4, 3, "full", ""};
  g.normal = {{{"sep 17x1", 0}, {"skip", 1}}};
  g.reduce = {{{"skip", 0}, {"skip", 1}}};
  try {
    compile<double>(g, 20, 4);
    FAIL() << "expected an error";
  } catch (const GenotypeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("cell 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("sep 17x1"), std::string::npos) << msg;
  }
}

TEST(Compile, SaturatedSupernetMatchesCompiledNet) {
  MetaNetConfig cfg;
  cfg.channels = 4;
  cfg.classes = 3;
  cfg.blocks = 2;
  cfg.nodes = 2;
  cfg.time_points = 32;
  cfg.slices = 4;
  cfg.seed = 9;
  const auto space = SearchSpace::desk(4);
  MetaNet<double> super(cfg, space);
  std::mt19937_64 g(6);
  for (int trial = 0; trial < 5; ++trial) {
    auto gen = sample_genotype(g, space, cfg.blocks, cfg.nodes);
    gen.meta.classes = cfg.classes;
    // One-hot logits of 20: retained edges on their operator, the rest on 'none'.
    auto theta = ArchParams<double>::zeros(5, 8);
    const auto topo = CellTopology::make(2);
    for (CellType t : {CellType::normal, CellType::reduce}) {
      auto& table = theta.of(t);
      for (std::size_t e = 0; e < topo.edge_count(); ++e) {
        std::size_t chosen = space.none_index();
        for (const auto& in : gen.of(t)[static_cast<std::size_t>(topo.edges[e].dest - 2)])
          if (in.source == topo.edges[e].source)
            for (std::size_t o = 0; o < space.size(); ++o)
              if (space.operators[o].name() == in.op) chosen = o;
        table.data()[e * 8 + chosen] = 20.0;
      }
    }
    auto derived = derive(theta, space);
    EXPECT_EQ(derived.normal, gen.normal);
    EXPECT_EQ(derived.reduce, gen.reduce);

    auto net = compile<double>(gen, cfg.time_points, cfg.slices, 77);
    const auto w = net.weights();
    EXPECT_EQ(copy_matching(super.weights(), w), w.size());
    std::mt19937_64 xr(trial);
    auto x = random_tensor<double>({3, 4, 32, 4}, xr);
    // Train-mode batch statistics exercise every BN identically in both nets.
    auto a = super.forward(x, theta, Mode::train);
    auto b = net.forward(x, Mode::train);
    for (std::size_t i = 0; i < a.values().size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-4);
  }
}

TEST(Accounting, LinearLayerParams) {
  Rng rng(0);
  LinearLayer<double> fc(7, 3, rng);
  NamedTensors<double> out;
  fc.collect("fc", out);
  EXPECT_EQ(count_elements(out), 3 * 7 + 3);
}

TEST(Accounting, ConvMacs) {
  Rng rng(0);
  Conv2dLayer<double> pw(6, 6, 1, 1, {}, false, rng);
  EXPECT_EQ(pw.macs(pw.output_shape({6, 10, 4})), 6 * 6 * 10 * 4);
  Conv2dOptions o;
  o.pad_h = 1;
  Conv2dLayer<double> full(6, 5, 3, 1, o, false, rng);
  EXPECT_EQ(full.macs(full.output_shape({6, 10, 4})), 5 * 10 * 4 * 3 * 6);
  o.groups = 6;
  Conv2dLayer<double> dw(6, 6, 3, 1, o, false, rng);
  EXPECT_EQ(dw.macs(dw.output_shape({6, 10, 4})), 6 * 10 * 4 * 3);
}

TEST(Accounting, CompiledMacsByHand) {
  Genotype g;
  g.meta = {1, 1, 4, 3, "desk", ""};
  g.normal = {{{"sep 3x1", 0}, {"skip", 1}}};
  g.reduce = {{{"dil 3x1", 0}, {"skip", 1}}};
  auto net = compile<double>(g, 10, 2);
  const std::int64_t c = 4, h = 10, w = 2;
  const std::int64_t stem = c * c * h * w;
  const std::int64_t sep = 2 * (c * h * w * 3 + c * c * h * w);
  const std::int64_t h2 = 5;
  const std::int64_t dil = c * h2 * w * 3 + c * c * h2 * w;
  const std::int64_t fr = c * c * h2 * w;
  const std::int64_t head = 3 * c;
  EXPECT_EQ(count_macs(net), stem + sep + dil + fr + head);
}

TEST(Accounting, ParamsMatchFormulaForRandomGenotypes) {
  std::mt19937_64 g(12);
  for (std::int64_t c : {4, 8}) {
    const auto space = SearchSpace::desk(c);
    for (int trial = 0; trial < 10; ++trial) {
      auto gen = sample_genotype(g, space, 1 + trial % 3, 2);
      auto net = compile<double>(gen, 64, 8);
      std::int64_t enumerated = 0;
      for (const auto& [name, t] : net.weights()) enumerated += t.numel();
      EXPECT_EQ(count_params(net), enumerated);
      EXPECT_EQ(count_params(net), formula_params(gen));
    }
  }
}
