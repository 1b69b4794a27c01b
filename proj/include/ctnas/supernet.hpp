#pragma once

// The Meta-Net: a 1x1 channel-mixing stem, M pairs of (Normal, Reduction)
// cells whose edges mix every candidate operator under softmax(theta), and a
// global-average-pool + fully connected head. The electrode dimension C is
// preserved throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctnas/search_space.hpp"

namespace ctnas {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CellType { normal, reduce };

inline const char* cell_type_name(CellType t) { return t == CellType::normal ? "normal" : "reduce"; }

// Node ids: 0 and 1 are the cell inputs c_{k-2}, c_{k-1}; intermediate node n
// has id n + 2. Edges are ordered by destination, then source.
struct CellTopology {
  int nodes = 0;
  struct Edge {
    int source;
    int dest;
  };
  std::vector<Edge> edges;

  static CellTopology make(int intermediate_nodes) {
    if (intermediate_nodes < 1) throw std::invalid_argument("a cell needs at least one intermediate node");
    CellTopology t;
    t.nodes = intermediate_nodes;
    for (int n = 0; n < intermediate_nodes; ++n)
      for (int s = 0; s < n + 2; ++s) t.edges.push_back({s, n + 2});
    return t;
  }

  std::size_t edge_count() const { return edges.size(); }

  std::vector<std::size_t> incoming(int dest) const {
    std::vector<std::size_t> out;
    for (std::size_t e = 0; e < edges.size(); ++e)
      if (edges[e].dest == dest) out.push_back(e);
    return out;
  }
};

template <typename T>
struct ArchParams {
  Tensor<T> normal;  // [edges, |O|]
  Tensor<T> reduce;  // [edges, |O|]

  static ArchParams init(std::int64_t edges, std::int64_t ops, Rng& rng, double stddev = 1e-3) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto draw = [&] {
      std::vector<T> v(static_cast<std::size_t>(edges * ops));
      for (auto& x : v) x = static_cast<T>(dist(rng));
      return Tensor<T>({edges, ops}, std::move(v), true);
    };
    ArchParams a;
    a.normal = draw();
    a.reduce = draw();
    return a;
  }

  static ArchParams zeros(std::int64_t edges, std::int64_t ops) {
    return {Tensor<T>::zeros({edges, ops}, true), Tensor<T>::zeros({edges, ops}, true)};
  }

  const Tensor<T>& of(CellType t) const { return t == CellType::normal ? normal : reduce; }
  Tensor<T>& of(CellType t) { return t == CellType::normal ? normal : reduce; }

  ArchParams clone() const {
    return {Tensor<T>(normal.shape(), normal.values(), normal.requires_grad()),
            Tensor<T>(reduce.shape(), reduce.values(), reduce.requires_grad())};
  }

  void set_requires_grad(bool v) {
    normal.set_requires_grad(v);
    reduce.set_requires_grad(v);
  }

  void check_finite() const {
    for (const auto* t : {&normal, &reduce})
      for (T v : t->values())
        if (std::isnan(v)) throw DivergenceError("architecture parameters contain NaN (search diverged)");
  }
};

inline std::string param_key(const OperatorSpec& spec) {
  std::string n = spec.name();
  for (auto& ch : n)
    if (ch == ' ') ch = '_';
  return n;
}

// sum_o softmax(theta_edge)_o * op_o(x) for one edge.
template <typename T>
Tensor<T> mixed_edge_forward(const Tensor<T>& x, const Tensor<T>& theta_edge,
                             std::vector<std::unique_ptr<Operator<T>>>& ops, Mode mode) {
  if (theta_edge.numel() != static_cast<std::int64_t>(ops.size())) {
    throw ShapeError("mixed edge: " + std::to_string(theta_edge.numel()) + " weights for " +
                     std::to_string(ops.size()) + " operators");
  }
  for (T v : theta_edge.values())
    if (std::isnan(v)) throw DivergenceError("edge weights contain NaN (search diverged)");
  const auto probs = softmax(reshape(theta_edge, {1, theta_edge.numel()}), 1);
  EdgeInput<T> in(x);
  std::vector<Tensor<T>> ys(ops.size());
  for (std::size_t o = 0; o < ops.size(); ++o) {
    if (!ops[o] || ops[o]->spec().kind == OpKind::none || probs.values()[o] == T(0)) continue;
    ys[o] = ops[o]->forward(in, mode);
  }
  for (std::size_t o = 0; o < ops.size() && std::none_of(ys.begin(), ys.end(), [](auto& y) { return y.defined(); }); ++o)
    if (ops[o]) ys[o] = ops[o]->forward(in, mode);
  return mix(probs, 0, ys);
}

struct MetaNetConfig {
  std::int64_t channels = 8;
  std::int64_t classes = 4;
  int blocks = 2;  // (Normal, Reduction) pairs
  int nodes = 2;   // intermediate nodes per cell
  std::int64_t time_points = 400;
  std::int64_t slices = 8;
  std::uint64_t seed = 0;
};

namespace detail {

// Time extent of each cell's input for a stack of 2 * blocks cells; entry
// 2 * blocks is the head's input.
inline std::vector<std::int64_t> cell_time_extents(std::int64_t time_points, int blocks) {
  std::vector<std::int64_t> h{time_points};
  for (int i = 0; i < 2 * blocks; ++i) h.push_back(i % 2 == 1 ? (h.back() + 1) / 2 : h.back());
  return h;
}

}  // namespace detail

template <typename T>
class MetaNet {
 public:
  struct Cell {
    CellType type;
    std::int64_t time_extent;                 // of the cell's (preprocessed) inputs
    std::unique_ptr<Operator<T>> preprocess0;  // aligns c_{k-2} when c_{k-1} was reduced
    std::vector<std::vector<std::unique_ptr<Operator<T>>>> ops;  // [edge][operator]
    std::vector<bool> allowed;                                   // per operator
    Tensor<T> mask;                                              // additive -inf mask, if any excluded
  };

  MetaNet(const MetaNetConfig& cfg, SearchSpace space)
      : cfg_(cfg), space_(std::move(space)), topology_(CellTopology::make(cfg.nodes)) {
    if (space_.channel_count != cfg.channels) {
      throw ShapeError("search space built for " + std::to_string(space_.channel_count) +
                       " channels, network has " + std::to_string(cfg.channels));
    }
    if (cfg.blocks < 1) throw ShapeError("the network needs at least one cell pair");
    if (cfg.time_points < (std::int64_t{1} << cfg.blocks)) {
      throw ShapeError("time extent " + std::to_string(cfg.time_points) + " too short for " +
                       std::to_string(cfg.blocks) + " reductions");
    }
    Rng rng(cfg.seed);
    const std::int64_t c = cfg.channels;
    stem_conv_ = Conv2dLayer<T>(c, c, 1, 1, {}, false, rng);
    stem_bn_ = BatchNormLayer<T>(c);
    const auto extents = detail::cell_time_extents(cfg.time_points, cfg.blocks);
    std::int64_t prev_prev = cfg.time_points, prev = cfg.time_points;
    for (int i = 0; i < 2 * cfg.blocks; ++i) {
      Cell cell;
      cell.type = i % 2 == 0 ? CellType::normal : CellType::reduce;
      cell.time_extent = extents[i];
      if (prev_prev != prev) cell.preprocess0 = std::make_unique<FactorizedReduce<T>>(OperatorSpec{OpKind::skip}, c, rng);
      for (const auto& op : space_.operators) {
        cell.allowed.push_back(op.kind == OpKind::none || op.kind == OpKind::skip ||
                               op.time_extent() <= cell.time_extent);
      }
      cell.ops.resize(topology_.edge_count());
      for (std::size_t e = 0; e < topology_.edge_count(); ++e) {
        const bool reduction = cell.type == CellType::reduce && topology_.edges[e].source < 2;
        for (std::size_t o = 0; o < space_.size(); ++o) {
          const auto& spec = space_.operators[o];
          if (!cell.allowed[o] || spec.kind == OpKind::none) {
            cell.ops[e].push_back(nullptr);
          } else {
            cell.ops[e].push_back(build_operator<T>(spec, c, reduction, rng));
          }
        }
      }
      bool any_excluded = false;
      std::vector<T> mask(topology_.edge_count() * space_.size(), T(0));
      for (std::size_t e = 0; e < topology_.edge_count(); ++e)
        for (std::size_t o = 0; o < space_.size(); ++o)
          if (!cell.allowed[o]) {
            mask[e * space_.size() + o] = -std::numeric_limits<T>::infinity();
            any_excluded = true;
          }
      if (any_excluded) {
        cell.mask = Tensor<T>({static_cast<std::int64_t>(topology_.edge_count()),
                               static_cast<std::int64_t>(space_.size())},
                              std::move(mask));
      }
      prev_prev = prev;
      prev = cell.type == CellType::reduce ? (prev + 1) / 2 : prev;
      cells_.push_back(std::move(cell));
    }
    head_ = LinearLayer<T>(c, cfg.classes, rng);
  }

  const MetaNetConfig& config() const { return cfg_; }
  const SearchSpace& space() const { return space_; }
  const CellTopology& topology() const { return topology_; }
  const std::vector<Cell>& cells() const { return cells_; }

  ArchParams<T> init_arch_params(Rng& rng, double stddev = 1e-3) const {
    return ArchParams<T>::init(static_cast<std::int64_t>(topology_.edge_count()),
                               static_cast<std::int64_t>(space_.size()), rng, stddev);
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.channels || x.dim(2) != cfg_.time_points || x.dim(3) != cfg_.slices) {
      throw ShapeError("network expects input [B, " + std::to_string(cfg_.channels) + ", " +
                       std::to_string(cfg_.time_points) + ", " + std::to_string(cfg_.slices) + "], got " +
                       shape_str(x.shape()));
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const ArchParams<T>& theta, Mode mode) {
    check_input(x);
    const auto expected = Shape{static_cast<std::int64_t>(topology_.edge_count()),
                                static_cast<std::int64_t>(space_.size())};
    if (theta.normal.shape() != expected || theta.reduce.shape() != expected) {
      throw ShapeError("architecture parameters must be " + shape_str(expected));
    }
    theta.check_finite();
    const Tensor<T> probs_normal = softmax(theta.normal, 1);
    const Tensor<T> probs_reduce = softmax(theta.reduce, 1);

    auto stem = stem_bn_(stem_conv_(x), mode);
    Tensor<T> s0 = stem, s1 = stem;
    for (auto& cell : cells_) {
      const Tensor<T>& logits = theta.of(cell.type);
      Tensor<T> probs = cell.mask.defined() ? softmax(add(logits, cell.mask), 1)
                                            : (cell.type == CellType::normal ? probs_normal : probs_reduce);
      auto out = cell_forward(cell, s0, s1, probs, mode);
      s0 = s1;
      s1 = out;
    }
    return head_(global_avg_pool(s1));
  }

  // Learnable weights w (everything except the architecture parameters).
  NamedTensors<T> weights() const {
    NamedTensors<T> out;
    stem_conv_.collect("stem.conv", out);
    stem_bn_.collect("stem.bn", out);
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      const std::string p = "cells." + std::to_string(i);
      if (cells_[i].preprocess0) cells_[i].preprocess0->collect(p + ".pre0", out);
      for (std::size_t e = 0; e < cells_[i].ops.size(); ++e)
        for (const auto& op : cells_[i].ops[e])
          if (op) op->collect(p + ".edges." + std::to_string(e) + "." + param_key(op->spec()), out);
    }
    head_.collect("head", out);
    return out;
  }

  NamedTensors<T> buffers() const {
    NamedTensors<T> out;
    stem_bn_.collect_buffers("stem.bn", out);
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      const std::string p = "cells." + std::to_string(i);
      if (cells_[i].preprocess0) cells_[i].preprocess0->collect_buffers(p + ".pre0", out);
      for (std::size_t e = 0; e < cells_[i].ops.size(); ++e)
        for (const auto& op : cells_[i].ops[e])
          if (op) op->collect_buffers(p + ".edges." + std::to_string(e) + "." + param_key(op->spec()), out);
    }
    return out;
  }

  void set_weights_trainable(bool v) {
    for (auto& [name, t] : weights()) {
      Tensor<T> h = t;
      h.set_requires_grad(v);
    }
  }

  // Learnable scalars outside the searchable edges (stem, preprocessing, head).
  std::int64_t fixed_param_count() const {
    NamedTensors<T> out;
    stem_conv_.collect("stem.conv", out);
    stem_bn_.collect("stem.bn", out);
    for (const auto& cell : cells_)
      if (cell.preprocess0) cell.preprocess0->collect("pre0", out);
    head_.collect("head", out);
    return count_elements(out);
  }

  // Number of cells sharing each architecture-parameter table.
  int cells_per_type() const { return cfg_.blocks; }

 private:
  Tensor<T> cell_forward(Cell& cell, const Tensor<T>& s0, const Tensor<T>& s1, const Tensor<T>& probs, Mode mode) {
    std::vector<EdgeInput<T>> states;
    states.reserve(static_cast<std::size_t>(topology_.nodes + 2));
    if (cell.preprocess0) {
      EdgeInput<T> raw(s0);
      states.emplace_back(cell.preprocess0->forward(raw, mode));
    } else {
      states.emplace_back(s0);
    }
    states.emplace_back(s1);
    const std::int64_t width = static_cast<std::int64_t>(space_.size());
    std::vector<Tensor<T>> intermediates;
    for (int n = 0; n < topology_.nodes; ++n) {
      std::vector<Tensor<T>> edge_outputs;
      for (std::size_t e : topology_.incoming(n + 2)) {
        auto& in = states[static_cast<std::size_t>(topology_.edges[e].source)];
        std::vector<Tensor<T>> ys(space_.size());
        for (std::size_t o = 0; o < space_.size(); ++o) {
          auto& op = cell.ops[e][o];
          if (!op || (probs.values()[e * width + o] == T(0) && op->spec().kind != OpKind::skip)) continue;
          ys[o] = op->forward(in, mode);
        }
        edge_outputs.push_back(mix(probs, static_cast<std::int64_t>(e), ys));
      }
      auto node = add_n(edge_outputs);
      intermediates.push_back(node);
      states.emplace_back(node);
    }
    return add_n(intermediates);
  }

  MetaNetConfig cfg_;
  SearchSpace space_;
  CellTopology topology_;
  Conv2dLayer<T> stem_conv_;
  BatchNormLayer<T> stem_bn_;
  std::vector<Cell> cells_;
  LinearLayer<T> head_;
};

}  // namespace ctnas
