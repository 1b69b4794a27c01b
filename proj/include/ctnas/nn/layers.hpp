#pragma once

// Parameter-owning wrappers around the primitives. Layers expose their
// learnable tensors and buffers by dotted name so checkpoints and weight
// transfers can address them uniformly.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "ctnas/core/checkpoint.hpp"
#include "ctnas/core/ops.hpp"

namespace ctnas {

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> uniform_init(const Shape& shape, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  Conv2dOptions options;

  Conv2dLayer() = default;
  Conv2dLayer(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel_h,
              std::int64_t kernel_w, const Conv2dOptions& opt, bool with_bias, Rng& rng)
      : options(opt) {
    const std::int64_t fan_in = (in_channels / opt.groups) * kernel_h * kernel_w;
    const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
    weight = uniform_init<T>({out_channels, in_channels / opt.groups, kernel_h, kernel_w}, bound, rng);
    if (with_bias) bias = uniform_init<T>({out_channels}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, options); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }

  // Multiply-accumulates for one sample producing an output of `out_shape`
  // ([C, H, W]).
  std::int64_t macs(const Shape& out_shape) const {
    return numel_of(out_shape) * weight.dim(2) * weight.dim(3) * weight.dim(1);
  }

  Shape output_shape(const Shape& in) const {
    return {weight.dim(0),
            conv_out_extent(in[1], weight.dim(2), options.stride_h, options.pad_h, options.dilation_h),
            conv_out_extent(in[2], weight.dim(3), options.stride_w, options.pad_w, options.dilation_w)};
  }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::int64_t channels)
      : gamma(Tensor<T>::full({channels}, T(1), true)), beta(Tensor<T>::zeros({channels}, true)), state(channels) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return batch_norm(x, gamma, beta, state, mode); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
  void collect_buffers(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".running_mean", state.running_mean);
    out.emplace_back(prefix + ".running_var", state.running_var);
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;
  Tensor<T> bias;

  LinearLayer() = default;
  LinearLayer(std::int64_t in_features, std::int64_t out_features, Rng& rng) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in_features));
    weight = uniform_init<T>({out_features, in_features}, bound, rng);
    bias = uniform_init<T>({out_features}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
  std::int64_t macs() const { return weight.dim(0) * weight.dim(1); }
};

}  // namespace ctnas
