#pragma once

// Differentiable constraint surrogates and the penalized architecture loss:
//
//   Omega(theta)   = sum_edges sum_o softmax(theta_e)_o * sigma_o
//   Phi(theta)     = sum_edges softmax(theta_e / T)_skip
//   floor(t)       = beta * exp(-t)
//   L_lag = L_val + l1 * max(C_l - Omega_raw, 0) + l2 * max(Omega_raw - C_h, 0)
//                 + l3 * max(floor(t) - Phi, 0)
//
// Omega_raw expresses the same mixture in parameter units: the parameters
// outside the searchable edges plus, for every cell, the softmax-weighted
// parameter count of each edge's candidates.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ctnas/supernet.hpp"

namespace ctnas {

struct ConstraintConfig {
  double c_low = 18200.0;
  double c_high = 32100.0;
  double lambda1 = 0.05;
  double lambda2 = 0.05;
  double lambda3 = 0.1;
  double beta = -1.0;  // < 0: half the number of edges
  double temperature = 1.0;
  double time_scale = 5.0;
  bool bounds_in_sigma = false;  // compare bounds against Omega instead of Omega_raw
  bool phi_mean = false;         // Phi averaged over edges instead of summed

  bool unconstrained() const { return lambda1 == 0 && lambda2 == 0 && lambda3 == 0; }

  void validate() const {
    if (!(c_low < c_high)) throw std::invalid_argument("constraint bounds need c_low < c_high");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw std::invalid_argument("penalty weights must be >= 0");
    if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
    if (!(time_scale >= 0)) throw std::invalid_argument("time_scale must be >= 0");
  }

  double resolved_beta(std::int64_t edges) const {
    const double b = beta < 0 ? 0.5 * static_cast<double>(edges) : beta;
    const double cap = phi_mean ? 1.0 : static_cast<double>(edges);
    if (!(b > 0) || b > cap) throw std::invalid_argument("beta must lie in (0, " + std::to_string(cap) + "]");
    return b;
  }
};

// Per-edge cost tables for both cell types, aligned with ArchParams.
struct ScaleModel {
  std::int64_t edges = 0;  // per cell type
  std::int64_t ops = 0;
  std::size_t skip_index = 0;
  double fixed_params = 0.0;
  int cells_per_type = 1;
  std::vector<double> sigma;       // [ops]
  std::vector<double> raw_normal;  // [edges * ops]
  std::vector<double> raw_reduce;  // [edges * ops]

  std::int64_t total_edges() const { return 2 * edges; }

  template <typename T>
  static ScaleModel from_net(const MetaNet<T>& net) {
    const auto& space = net.space();
    const auto& topo = net.topology();
    const std::int64_t c = space.channel_count;
    ScaleModel m;
    m.edges = static_cast<std::int64_t>(topo.edge_count());
    m.ops = static_cast<std::int64_t>(space.size());
    m.skip_index = space.skip_index();
    m.fixed_params = static_cast<double>(net.fixed_param_count());
    m.cells_per_type = net.cells_per_type();
    m.sigma = normalized_costs(space, c).sigma;
    for (std::size_t e = 0; e < topo.edge_count(); ++e) {
      for (const auto& op : space.operators) {
        const double p = static_cast<double>(param_count(op, c));
        m.raw_normal.push_back(p);
        const bool strided_skip = op.kind == OpKind::skip && topo.edges[e].source < 2;
        m.raw_reduce.push_back(strided_skip ? static_cast<double>(c * c + 2 * c) : p);
      }
    }
    return m;
  }
};

namespace detail {

template <typename T>
Tensor<T> constant_like(const Shape& shape, const std::vector<double>& v) {
  return Tensor<T>(shape, std::vector<T>(v.begin(), v.end()));
}

template <typename T>
Tensor<T> broadcast_rows(std::int64_t rows, const std::vector<double>& row) {
  std::vector<double> v;
  for (std::int64_t r = 0; r < rows; ++r) v.insert(v.end(), row.begin(), row.end());
  return constant_like<T>({rows, static_cast<std::int64_t>(row.size())}, v);
}

template <typename T>
void check_table(const Tensor<T>& theta, std::size_t ops) {
  if (theta.rank() != 2 || theta.dim(1) != static_cast<std::int64_t>(ops)) {
    throw ShapeError("architecture table " + shape_str(theta.shape()) + " does not match " + std::to_string(ops) +
                     " operators");
  }
}

}  // namespace detail

// Omega of a single [edges, |O|] table.
template <typename T>
Tensor<T> omega(const Tensor<T>& theta, const std::vector<double>& sigma) {
  detail::check_table(theta, sigma.size());
  return sum(mul(softmax(theta, 1), detail::broadcast_rows<T>(theta.dim(0), sigma)));
}

template <typename T>
Tensor<T> omega(const ArchParams<T>& theta, const ScaleModel& m) {
  return add(omega(theta.normal, m.sigma), omega(theta.reduce, m.sigma));
}

template <typename T>
Tensor<T> omega_raw(const ArchParams<T>& theta, const ScaleModel& m) {
  const auto ops = static_cast<std::size_t>(m.ops);
  detail::check_table(theta.normal, ops);
  detail::check_table(theta.reduce, ops);
  const Shape s{m.edges, m.ops};
  auto searchable = add(sum(mul(softmax(theta.normal, 1), detail::constant_like<T>(s, m.raw_normal))),
                        sum(mul(softmax(theta.reduce, 1), detail::constant_like<T>(s, m.raw_reduce))));
  return add_scalar(scale(searchable, static_cast<T>(m.cells_per_type)), static_cast<T>(m.fixed_params));
}

// Phi of a single table.
template <typename T>
Tensor<T> phi(const Tensor<T>& theta, std::size_t skip_index, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  if (theta.rank() != 2 || static_cast<std::int64_t>(skip_index) >= theta.dim(1)) {
    throw SearchSpaceError("skip operator index outside the architecture table");
  }
  auto p = softmax(scale(theta, static_cast<T>(1.0 / temperature)), 1);
  return sum(select_column(p, static_cast<std::int64_t>(skip_index)));
}

template <typename T>
Tensor<T> phi(const ArchParams<T>& theta, const ScaleModel& m, double temperature, bool mean = false) {
  auto total = add(phi(theta.normal, m.skip_index, temperature), phi(theta.reduce, m.skip_index, temperature));
  return mean ? scale(total, static_cast<T>(1.0 / static_cast<double>(m.total_edges()))) : total;
}

inline double skip_floor(double t, double beta) {
  if (t < 0) throw std::invalid_argument("skip floor time must be >= 0");
  return beta * std::exp(-t);
}

// Normalized time of the floor: fraction of the run times time_scale.
inline double floor_time(double epoch, double total_epochs, double time_scale) {
  return total_epochs > 0 ? epoch / total_epochs * time_scale : 0.0;
}

template <typename T>
struct LagrangianTerms {
  Tensor<T> loss;
  double l_val = 0;
  double omega = 0;
  double omega_raw = 0;
  double phi = 0;
  double floor = 0;
  bool lower_active = false;
  bool upper_active = false;
  bool skip_active = false;
};

template <typename T>
LagrangianTerms<T> lagrangian_loss(const Tensor<T>& l_val, const ArchParams<T>& theta, const ConstraintConfig& cfg,
                                   double t, const ScaleModel& m) {
  LagrangianTerms<T> out;
  out.l_val = static_cast<double>(l_val.item());
  const auto om = omega(theta, m);
  const auto om_raw = omega_raw(theta, m);
  const auto ph = phi(theta, m, cfg.temperature, cfg.phi_mean);
  out.omega = static_cast<double>(om.item());
  out.omega_raw = static_cast<double>(om_raw.item());
  out.phi = static_cast<double>(ph.item());
  out.floor = skip_floor(t, cfg.resolved_beta(m.total_edges()));

  const auto& scale_measure = cfg.bounds_in_sigma ? om : om_raw;
  const double measured = cfg.bounds_in_sigma ? out.omega : out.omega_raw;
  out.lower_active = measured < cfg.c_low;
  out.upper_active = measured > cfg.c_high;
  out.skip_active = out.phi < out.floor;

  std::vector<Tensor<T>> terms{l_val};
  if (cfg.lambda1 != 0) {
    // lambda1 * relu(C_l - Omega)
    auto h = relu(add_scalar(scale(scale_measure, T(-1)), static_cast<T>(cfg.c_low)));
    terms.push_back(scale(h, static_cast<T>(cfg.lambda1)));
  }
  if (cfg.lambda2 != 0) {
    auto h = relu(add_scalar(scale_measure, static_cast<T>(-cfg.c_high)));
    terms.push_back(scale(h, static_cast<T>(cfg.lambda2)));
  }
  if (cfg.lambda3 != 0) {
    auto h = relu(add_scalar(scale(ph, T(-1)), static_cast<T>(out.floor)));
    terms.push_back(scale(h, static_cast<T>(cfg.lambda3)));
  }
  out.loss = terms.size() == 1 ? l_val : add_n(terms);
  return out;
}

}  // namespace ctnas
