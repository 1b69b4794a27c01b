#pragma once

// Optimizers and learning-rate schedules. Both optimizers act on a fixed list
// of leaf tensors and keep their state in plain vectors so it can be compared
// and snapshotted.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "ctnas/core/tensor.hpp"

namespace ctnas {

// lr(e) = min + (max - min) * (1 + cos(pi * e / total)) / 2
inline double cosine_lr(double lr_max, double lr_min, double epoch, double total_epochs) {
  if (total_epochs <= 0) return lr_max;
  const double f = std::clamp(epoch / total_epochs, 0.0, 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * f));
}

// Multiplies by gamma at each milestone (given as fractions of the run).
inline double multistep_lr(double lr, double epoch, double total_epochs, const std::vector<double>& milestones,
                           double gamma) {
  for (double m : milestones)
    if (total_epochs > 0 && epoch >= m * total_epochs) lr *= gamma;
  return lr;
}

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (T g : p.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

// Heavy-ball SGD with L2 weight decay and global-norm gradient clipping:
//   g <- clip(g) + wd * w;  buf <- m * buf + g;  w <- w - lr * buf
template <typename T>
class SGD {
 public:
  struct Options {
    double momentum = 0.9;
    double weight_decay = 3e-4;
    double clip_norm = 5.0;  // <= 0 disables clipping
  };

  SGD() = default;
  SGD(std::vector<Tensor<T>> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) buffers_.emplace_back(p.values().size(), T(0));
  }

  void step(double lr) {
    double scale = 1.0;
    if (opt_.clip_norm > 0) {
      const double norm = global_grad_norm(params_);
      if (norm > opt_.clip_norm) scale = opt_.clip_norm / (norm + 1e-6);
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      auto& buf = buffers_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = scale * g[i] + opt_.weight_decay * w[i];
        buf[i] = static_cast<T>(opt_.momentum * buf[i] + d);
        w[i] = static_cast<T>(w[i] - lr * buf[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<std::vector<T>>& state() const { return buffers_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  Options opt_;
  std::vector<std::vector<T>> buffers_;
};

template <typename T>
class Adam {
 public:
  struct Options {
    double beta1 = 0.5;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam() = default;
  Adam(std::vector<Tensor<T>> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.values().size(), 0.0);
      v_.emplace_back(p.values().size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, t_);
    const double c2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] + opt_.weight_decay * w[i];
        m_[k][i] = opt_.beta1 * m_[k][i] + (1 - opt_.beta1) * gi;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1 - opt_.beta2) * gi * gi;
        const double mh = m_[k][i] / c1;
        const double vh = v_[k][i] / c2;
        w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor<T>> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace ctnas
