#pragma once

// Discrete architectures: derivation from learned architecture parameters,
// JSON (de)serialization, compilation into a standalone network and exact
// parameter / MAC accounting.
//
// Genotype JSON (schema_version 1):
//   {
//     "schema_version": 1,
//     "meta": {"blocks": M, "nodes": N, "channels": C, "classes": K,
//              "search_space": "<id>", "theta_checksum": "<16 hex digits>"},
//     "normal": [[{"op": "sep 3x1", "source": 0}, {"op": "skip", "source": 1}], ...],
//     "reduce": [...]
//   }
// Each cell list holds one entry per intermediate node with exactly two
// retained inputs. Source ids: 0 = c_{k-2}, 1 = c_{k-1}, n + 2 = node n.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctnas/supernet.hpp"

namespace ctnas {

class GenotypeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed genotype text; `where` is a JSON path ("$.reduce[1][0].op") or a
// byte offset for syntax errors.
class GenotypeParseError : public GenotypeError {
 public:
  GenotypeParseError(std::string where, const std::string& what)
      : GenotypeError(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

struct GenotypeEdge {
  std::string op;
  int source = 0;
  bool operator==(const GenotypeEdge&) const = default;
};

struct GenotypeMeta {
  int blocks = 2;
  int nodes = 2;
  std::int64_t channels = 8;
  std::int64_t classes = 4;
  std::string search_space = "custom";
  std::string theta_checksum;
  bool operator==(const GenotypeMeta&) const = default;
};

struct Genotype {
  using Cell = std::vector<std::vector<GenotypeEdge>>;  // [node][2]
  Cell normal;
  Cell reduce;
  GenotypeMeta meta;

  bool operator==(const Genotype&) const = default;

  const Cell& of(CellType t) const { return t == CellType::normal ? normal : reduce; }

  void validate() const {
    for (CellType t : {CellType::normal, CellType::reduce}) {
      const auto& cell = of(t);
      const std::string name = cell_type_name(t);
      if (static_cast<int>(cell.size()) != meta.nodes) {
        throw GenotypeError(name + " cell has " + std::to_string(cell.size()) + " nodes, meta says " +
                            std::to_string(meta.nodes));
      }
      for (std::size_t n = 0; n < cell.size(); ++n) {
        const std::string where = name + " node " + std::to_string(n);
        if (cell[n].size() != 2) throw GenotypeError(where + " must retain exactly 2 inputs");
        if (cell[n][0].source == cell[n][1].source) throw GenotypeError(where + " retains the same input twice");
        for (const auto& e : cell[n]) {
          if (e.source < 0 || e.source >= static_cast<int>(n) + 2) {
            throw GenotypeError(where + " has source " + std::to_string(e.source) + " outside the DAG order");
          }
          const auto spec = OperatorSpec::parse(e.op);
          if (spec.kind == OpKind::none) throw GenotypeError(where + " retains a 'none' edge");
        }
      }
    }
  }
};

inline bool same_structure(const Genotype& a, const Genotype& b) {
  return a.normal == b.normal && a.reduce == b.reduce;
}

// FNV-1a over the raw bytes of both tables, as 16 hex digits.
template <typename T>
std::string theta_checksum(const ArchParams<T>& theta) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto* t : {&theta.normal, &theta.reduce}) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t->values().data());
    for (std::size_t i = 0; i < t->values().size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace detail {

template <typename T>
Genotype::Cell derive_cell(const Tensor<T>& theta, const SearchSpace& space, const CellTopology& topo,
                           const std::vector<bool>& excluded) {
  const auto probs = softmax(theta.detach(), 1);
  const auto ops = space.size();
  const std::size_t none = space.none_index();
  struct Choice {
    std::size_t edge;
    int source;
    std::size_t op;
    T prob;
  };
  Genotype::Cell cell(static_cast<std::size_t>(topo.nodes));
  for (int n = 0; n < topo.nodes; ++n) {
    std::vector<Choice> choices;
    for (std::size_t e : topo.incoming(n + 2)) {
      std::optional<std::size_t> best;
      for (std::size_t o = 0; o < ops; ++o) {
        if (o == none || (!excluded.empty() && excluded[o])) continue;
        if (!best || probs.values()[e * ops + o] > probs.values()[e * ops + *best]) best = o;
      }
      if (!best) throw GenotypeError("no selectable operator on edge " + std::to_string(e));
      choices.push_back({e, topo.edges[e].source, *best, probs.values()[e * ops + *best]});
    }
    std::stable_sort(choices.begin(), choices.end(), [](const Choice& a, const Choice& b) {
      if (a.prob != b.prob) return a.prob > b.prob;
      return a.source < b.source;
    });
    choices.resize(2);
    std::sort(choices.begin(), choices.end(), [](const Choice& a, const Choice& b) { return a.source < b.source; });
    for (const auto& c : choices) cell[static_cast<std::size_t>(n)].push_back({space.operators[c.op].name(), c.source});
  }
  return cell;
}

inline int nodes_for_edges(std::int64_t edges) {
  int n = 0;
  std::int64_t count = 0;
  while (count < edges) count += 2 + n++;
  if (count != edges) throw GenotypeError("edge count " + std::to_string(edges) + " matches no cell topology");
  return n;
}

}  // namespace detail

// Per edge the most probable operator other than 'none'; per node the two
// edges whose chosen operator is most probable. Ties go to the lower operator
// index, then to the lower source id. Operators flagged in `excluded` (one
// flag per operator) are never chosen.
template <typename T>
Genotype derive(const ArchParams<T>& theta, const SearchSpace& space, const std::vector<bool>& excluded = {}) {
  theta.check_finite();
  if (theta.normal.rank() != 2 || theta.normal.dim(1) != static_cast<std::int64_t>(space.size()) ||
      theta.reduce.shape() != theta.normal.shape()) {
    throw ShapeError("architecture tables do not match the search space");
  }
  const auto topo = CellTopology::make(detail::nodes_for_edges(theta.normal.dim(0)));
  Genotype g;
  g.meta.nodes = topo.nodes;
  g.meta.channels = space.channel_count;
  g.meta.theta_checksum = theta_checksum(theta);
  g.normal = detail::derive_cell(theta.normal, space, topo, excluded);
  g.reduce = detail::derive_cell(theta.reduce, space, topo, excluded);
  return g;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const Genotype& g) {
  auto cell = [](const Genotype::Cell& c) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& node : c) {
      nlohmann::json in = nlohmann::json::array();
      for (const auto& e : node) in.push_back({{"op", e.op}, {"source", e.source}});
      nodes.push_back(in);
    }
    return nodes;
  };
  return {{"schema_version", 1},
          {"meta",
           {{"blocks", g.meta.blocks},
            {"nodes", g.meta.nodes},
            {"channels", g.meta.channels},
            {"classes", g.meta.classes},
            {"search_space", g.meta.search_space},
            {"theta_checksum", g.meta.theta_checksum}}},
          {"normal", cell(g.normal)},
          {"reduce", cell(g.reduce)}};
}

inline std::string serialize(const Genotype& g) { return to_json(g).dump(2) + "\n"; }

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& obj, const std::string& path, const std::string& key) {
  if (!obj.is_object()) throw GenotypeParseError(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw GenotypeParseError(path + "." + key, "missing field");
  return *it;
}

template <typename V>
V typed(const nlohmann::json& v, const std::string& path) {
  if constexpr (std::is_same_v<V, std::string>) {
    if (!v.is_string()) throw GenotypeParseError(path, "expected a string");
  } else {
    if (!v.is_number_integer()) throw GenotypeParseError(path, "expected an integer");
  }
  return v.get<V>();
}

inline Genotype::Cell parse_cell(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw GenotypeParseError(path, "expected an array of nodes");
  Genotype::Cell cell;
  for (std::size_t n = 0; n < j.size(); ++n) {
    const std::string np = path + "[" + std::to_string(n) + "]";
    if (!j[n].is_array()) throw GenotypeParseError(np, "expected an array of inputs");
    std::vector<GenotypeEdge> node;
    for (std::size_t k = 0; k < j[n].size(); ++k) {
      const std::string ep = np + "[" + std::to_string(k) + "]";
      GenotypeEdge e;
      e.op = typed<std::string>(field(j[n][k], ep, "op"), ep + ".op");
      e.source = typed<int>(field(j[n][k], ep, "source"), ep + ".source");
      try {
        OperatorSpec::parse(e.op);
      } catch (const SearchSpaceError& err) {
        throw GenotypeParseError(ep + ".op", err.what());
      }
      node.push_back(e);
    }
    cell.push_back(std::move(node));
  }
  return cell;
}

}  // namespace detail

inline Genotype parse_genotype(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw GenotypeParseError("byte " + std::to_string(e.byte), e.what());
  }
  const std::string root = "$";
  const auto version = detail::typed<int>(detail::field(j, root, "schema_version"), "$.schema_version");
  if (version != 1) throw GenotypeParseError("$.schema_version", "unsupported version " + std::to_string(version));
  Genotype g;
  const auto& meta = detail::field(j, root, "meta");
  g.meta.blocks = detail::typed<int>(detail::field(meta, "$.meta", "blocks"), "$.meta.blocks");
  g.meta.nodes = detail::typed<int>(detail::field(meta, "$.meta", "nodes"), "$.meta.nodes");
  g.meta.channels = detail::typed<std::int64_t>(detail::field(meta, "$.meta", "channels"), "$.meta.channels");
  g.meta.classes = detail::typed<std::int64_t>(detail::field(meta, "$.meta", "classes"), "$.meta.classes");
  g.meta.search_space =
      detail::typed<std::string>(detail::field(meta, "$.meta", "search_space"), "$.meta.search_space");
  g.meta.theta_checksum =
      detail::typed<std::string>(detail::field(meta, "$.meta", "theta_checksum"), "$.meta.theta_checksum");
  g.normal = detail::parse_cell(detail::field(j, root, "normal"), "$.normal");
  g.reduce = detail::parse_cell(detail::field(j, root, "reduce"), "$.reduce");
  if (g.meta.blocks < 1) throw GenotypeParseError("$.meta.blocks", "must be >= 1");
  if (g.meta.channels < 1) throw GenotypeParseError("$.meta.channels", "must be >= 1");
  if (g.meta.classes < 2) throw GenotypeParseError("$.meta.classes", "must be >= 2");
  try {
    g.validate();
  } catch (const GenotypeError& e) {
    throw GenotypeParseError("$", e.what());
  }
  return g;
}

// ---------------------------------------------------------------- compiled network

template <typename T>
class CompiledNet {
 public:
  struct Node {
    std::vector<int> sources;
    std::vector<std::size_t> edge_ids;  // supernet edge index, used in parameter names
    std::vector<std::unique_ptr<Operator<T>>> ops;
  };
  struct Cell {
    CellType type;
    std::int64_t time_extent;
    std::unique_ptr<Operator<T>> preprocess0;
    std::vector<Node> nodes;
  };

  CompiledNet(const Genotype& g, std::int64_t time_points, std::int64_t slices, std::uint64_t seed)
      : genotype_(g), time_points_(time_points), slices_(slices) {
    g.validate();
    if (time_points < (std::int64_t{1} << g.meta.blocks)) {
      throw ShapeError("time extent " + std::to_string(time_points) + " too short for " +
                       std::to_string(g.meta.blocks) + " reductions");
    }
    const auto topo = CellTopology::make(g.meta.nodes);
    const std::int64_t c = g.meta.channels;
    Rng rng(seed);
    stem_conv_ = Conv2dLayer<T>(c, c, 1, 1, {}, false, rng);
    stem_bn_ = BatchNormLayer<T>(c);
    const auto extents = detail::cell_time_extents(time_points, g.meta.blocks);
    std::int64_t prev_prev = time_points, prev = time_points;
    for (int i = 0; i < 2 * g.meta.blocks; ++i) {
      Cell cell;
      cell.type = i % 2 == 0 ? CellType::normal : CellType::reduce;
      cell.time_extent = extents[static_cast<std::size_t>(i)];
      if (prev_prev != prev) cell.preprocess0 = std::make_unique<FactorizedReduce<T>>(OperatorSpec{OpKind::skip}, c, rng);
      const auto& spec_cell = g.of(cell.type);
      for (int n = 0; n < g.meta.nodes; ++n) {
        Node node;
        for (const auto& in : spec_cell[static_cast<std::size_t>(n)]) {
          const auto spec = OperatorSpec::parse(in.op);
          if (spec.kind != OpKind::skip && spec.time_extent() > cell.time_extent) {
            throw GenotypeError("cell " + std::to_string(i) + " (" + cell_type_name(cell.type) + ") node " +
                                std::to_string(n) + " edge from " + std::to_string(in.source) + ": operator '" +
                                in.op + "' spans " + std::to_string(spec.time_extent()) +
                                " time points but the cell input has " + std::to_string(cell.time_extent));
          }
          std::size_t edge_id = 0;
          for (std::size_t e : topo.incoming(n + 2))
            if (topo.edges[e].source == in.source) edge_id = e;
          const bool reduction = cell.type == CellType::reduce && in.source < 2;
          node.sources.push_back(in.source);
          node.edge_ids.push_back(edge_id);
          node.ops.push_back(build_operator<T>(spec, c, reduction, rng));
        }
        cell.nodes.push_back(std::move(node));
      }
      prev_prev = prev;
      prev = cell.type == CellType::reduce ? (prev + 1) / 2 : prev;
      cells_.push_back(std::move(cell));
    }
    head_ = LinearLayer<T>(c, g.meta.classes, rng);
  }

  const Genotype& genotype() const { return genotype_; }
  Shape input_shape() const { return {genotype_.meta.channels, time_points_, slices_}; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || Shape{x.dim(1), x.dim(2), x.dim(3)} != input_shape()) {
      throw ShapeError("network expects input [B, " + std::to_string(genotype_.meta.channels) + ", " +
                       std::to_string(time_points_) + ", " + std::to_string(slices_) + "], got " +
                       shape_str(x.shape()));
    }
    auto stem = stem_bn_(stem_conv_(x), mode);
    Tensor<T> s0 = stem, s1 = stem;
    for (auto& cell : cells_) {
      std::vector<EdgeInput<T>> states;
      if (cell.preprocess0) {
        EdgeInput<T> raw(s0);
        states.emplace_back(cell.preprocess0->forward(raw, mode));
      } else {
        states.emplace_back(s0);
      }
      states.emplace_back(s1);
      std::vector<Tensor<T>> intermediates;
      for (auto& node : cell.nodes) {
        std::vector<Tensor<T>> ins;
        for (std::size_t k = 0; k < node.ops.size(); ++k)
          ins.push_back(node.ops[k]->forward(states[static_cast<std::size_t>(node.sources[k])], mode));
        auto h = add_n(ins);
        intermediates.push_back(h);
        states.emplace_back(h);
      }
      s0 = s1;
      s1 = add_n(intermediates);
    }
    return head_(global_avg_pool(s1));
  }

  template <typename F>
  void visit_ops(F&& f) const {
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      const std::string p = "cells." + std::to_string(i);
      if (cells_[i].preprocess0) f(p + ".pre0", *cells_[i].preprocess0, i);
      for (const auto& node : cells_[i].nodes)
        for (std::size_t k = 0; k < node.ops.size(); ++k)
          f(p + ".edges." + std::to_string(node.edge_ids[k]) + "." + param_key(node.ops[k]->spec()), *node.ops[k], i);
    }
  }

  NamedTensors<T> weights() const {
    NamedTensors<T> out;
    stem_conv_.collect("stem.conv", out);
    stem_bn_.collect("stem.bn", out);
    visit_ops([&](const std::string& name, const Operator<T>& op, std::size_t) { op.collect(name, out); });
    head_.collect("head", out);
    return out;
  }

  NamedTensors<T> buffers() const {
    NamedTensors<T> out;
    stem_bn_.collect_buffers("stem.bn", out);
    visit_ops([&](const std::string& name, const Operator<T>& op, std::size_t) { op.collect_buffers(name, out); });
    return out;
  }

  // Per-sample multiply-accumulates of every conv and FC layer.
  std::int64_t macs() const {
    const std::int64_t c = genotype_.meta.channels;
    std::int64_t total = stem_conv_.macs({c, time_points_, slices_});
    const auto extents = detail::cell_time_extents(time_points_, genotype_.meta.blocks);
    std::int64_t prev_prev = time_points_;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      const Shape in{c, extents[i], slices_};
      if (cells_[i].preprocess0) total += cells_[i].preprocess0->macs({c, prev_prev, slices_});
      for (const auto& node : cells_[i].nodes)
        for (const auto& op : node.ops) total += op->macs(in);
      prev_prev = extents[i];
    }
    return total + head_.macs();
  }

 private:
  Genotype genotype_;
  std::int64_t time_points_;
  std::int64_t slices_;
  Conv2dLayer<T> stem_conv_;
  BatchNormLayer<T> stem_bn_;
  std::vector<Cell> cells_;
  LinearLayer<T> head_;
};

template <typename T>
CompiledNet<T> compile(const Genotype& g, std::int64_t time_points, std::int64_t slices, std::uint64_t seed = 0) {
  return CompiledNet<T>(g, time_points, slices, seed);
}

template <typename T>
std::int64_t count_params(const CompiledNet<T>& net) {
  return count_elements(net.weights());
}

template <typename T>
std::int64_t count_macs(const CompiledNet<T>& net) {
  return net.macs();
}

// Copies every tensor of `from` whose name also appears in `to`; returns the
// number copied.
template <typename T>
std::size_t copy_matching(const NamedTensors<T>& from, const NamedTensors<T>& to) {
  std::size_t n = 0;
  for (const auto& [name, dst] : to) {
    for (const auto& [src_name, src] : from) {
      if (src_name != name) continue;
      if (src.shape() != dst.shape()) throw ShapeError("tensor " + name + " changed shape");
      Tensor<T> d = dst;
      std::copy(src.values().begin(), src.values().end(), d.data().begin());
      ++n;
      break;
    }
  }
  return n;
}

}  // namespace ctnas
