#pragma once

// Differentiable primitives. Every op returns a fresh tensor (no in-place
// mutation of graph values) and registers a local-gradient rule.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctnas/core/parallel.hpp"
#include "ctnas/core/tensor.hpp"

namespace ctnas {

enum class Mode { train, eval };

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

// Reductions with eight independent double accumulators, combined in a fixed order.
template <typename T>
double sum_of(const T* a, std::int64_t n) {
  double acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) acc[k] += a[i + k];
  for (; i < n; ++i) acc[0] += a[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double dot_of(const T* a, const T* b, std::int64_t n) {
  double acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) acc[k] += static_cast<double>(a[i + k]) * b[i + k];
  for (; i < n; ++i) acc[0] += static_cast<double>(a[i]) * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double sq_dev_of(const T* a, std::int64_t n, double mean) {
  double acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) {
      const double d = a[i + k] - mean;
      acc[k] += d * d;
    }
  for (; i < n; ++i) acc[0] += (a[i] - mean) * (a[i] - mean);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                                [](detail::TensorNode<T>& self) {
                                  for (auto& p : self.parents) {
                                    if (!p->requires_grad) continue;
                                    auto& g = p->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                                [](detail::TensorNode<T>& self) {
                                  for (std::size_t k = 0; k < 2; ++k) {
                                    auto& p = self.parents[k];
                                    if (!p->requires_grad) continue;
                                    auto& g = p->grad_buffer();
                                    const T sign = k == 0 ? T(1) : T(-1);
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
                                  }
                                });
}

// Sum of same-shaped tensors; undefined entries are skipped.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  const Tensor<T>* first = nullptr;
  for (const auto& x : xs) {
    if (x.defined()) {
      first = &x;
      break;
    }
  }
  detail::require(first != nullptr, "add_n: no defined inputs");
  std::vector<T> out(first->values().size(), T(0));
  std::vector<detail::NodePtr<T>> parents;
  for (const auto& x : xs) {
    if (!x.defined()) continue;
    detail::require_same_shape(*first, x, "add_n");
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    parents.push_back(x.node());
  }
  return detail::make_result<T>(first->shape(), std::move(out), std::move(parents),
                                [](detail::TensorNode<T>& self) {
                                  for (auto& p : self.parents) {
                                    if (!p->requires_grad) continue;
                                    auto& g = p->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                                [](detail::TensorNode<T>& self) {
                                  auto& pa = self.parents[0];
                                  auto& pb = self.parents[1];
                                  if (pa->requires_grad) {
                                    auto& g = pa->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
                                  }
                                  if (pb->requires_grad) {
                                    auto& g = pb->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  return detail::make_result<T>(a.shape(), std::move(out), {a.node()},
                                [s](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
                                });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v += s;
  return detail::make_result<T>(a.shape(), std::move(out), {a.node()},
                                [](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  detail::require(numel_of(shape) == a.numel(),
                  "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result<T>(shape, a.values(), {a.node()},
                                [](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

// max(x, 0); the gradient at exactly 0 is 0, so an inactive hinge contributes nothing.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(a.shape(), std::move(out), {a.node()},
                                [](detail::TensorNode<T>& self) {
                                  auto& p = self.parents[0];
                                  auto& g = p->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    if (p->data[i] > T(0)) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> elu(const Tensor<T>& a, T alpha = T(1)) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T(0) ? v : alpha * std::expm1(v);
  return detail::make_result<T>(a.shape(), std::move(out), {a.node()},
                                [alpha](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  const auto& x = self.parents[0]->data;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    // d/dx alpha*(e^x - 1) = y + alpha
                                    g[i] += x[i] > T(0) ? self.grad[i] : self.grad[i] * (self.data[i] + alpha);
                                  }
                                });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T(0) ? v : slope * v;
  return detail::make_result<T>(a.shape(), std::move(out), {a.node()},
                                [slope](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  const auto& x = self.parents[0]->data;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    g[i] += x[i] > T(0) ? self.grad[i] : slope * self.grad[i];
                                  }
                                });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return detail::make_result<T>(Shape{}, {s}, {a.node()}, [](detail::TensorNode<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  const T n = static_cast<T>(a.numel());
  return detail::make_result<T>(Shape{}, {s / n}, {a.node()}, [n](detail::TensorNode<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

// x[:, j] of a rank-2 tensor.
template <typename T>
Tensor<T> select_column(const Tensor<T>& a, std::int64_t j) {
  detail::require(a.rank() == 2, "select_column: expected rank-2 input, got " + shape_str(a.shape()));
  const std::int64_t rows = a.dim(0), cols = a.dim(1);
  detail::require(j >= 0 && j < cols, "select_column: column out of range");
  std::vector<T> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) out[r] = a.values()[r * cols + j];
  return detail::make_result<T>(Shape{rows}, std::move(out), {a.node()},
                                [rows, cols, j](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::int64_t r = 0; r < rows; ++r) g[r * cols + j] += self.grad[r];
                                });
}

// ---------------------------------------------------------------- softmax family

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  detail::require(axis < a.rank(), "softmax: axis out of range for shape " + shape_str(a.shape()));
  const auto& sh = a.shape();
  std::int64_t outer = 1, inner = 1;
  const std::int64_t len = sh[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  std::vector<T> out(a.values().size());
  const auto& x = a.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = T(0);
      for (std::int64_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return detail::make_result<T>(sh, std::move(out), {a.node()},
                                [outer, inner, len](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  const auto& y = self.data;
                                  for (std::int64_t o = 0; o < outer; ++o) {
                                    for (std::int64_t in = 0; in < inner; ++in) {
                                      const std::int64_t base = o * len * inner + in;
                                      T dot = T(0);
                                      for (std::int64_t k = 0; k < len; ++k) {
                                        dot += y[base + k * inner] * self.grad[base + k * inner];
                                      }
                                      for (std::int64_t k = 0; k < len; ++k) {
                                        const auto idx = base + k * inner;
                                        g[idx] += y[idx] * (self.grad[idx] - dot);
                                      }
                                    }
                                  }
                                });
}

// Mean negative log-likelihood of the true class under a row-wise softmax.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require(logits.rank() == 2, "cross_entropy: logits must be [B, K], got " +
                                          shape_str(logits.shape()));
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.empty()) throw ShapeError("cross_entropy: empty batch");
  detail::require(static_cast<std::int64_t>(labels.size()) == batch,
                  "cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                      std::to_string(batch));
  std::vector<T> probs(logits.values().size());
  const auto& x = logits.values();
  T loss = T(0);
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::int64_t b = 0; b < batch; ++b) {
    const int y = lab[b];
    if (y < 0 || y >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    const T* row = &x[b * classes];
    T mx = *std::max_element(row, row + classes);
    T z = T(0);
    for (std::int64_t k = 0; k < classes; ++k) {
      probs[b * classes + k] = std::exp(row[k] - mx);
      z += probs[b * classes + k];
    }
    for (std::int64_t k = 0; k < classes; ++k) probs[b * classes + k] /= z;
    loss -= (row[y] - mx) - std::log(z);
  }
  loss /= static_cast<T>(batch);
  return detail::make_result<T>(
      Shape{}, {loss}, {logits.node()},
      [probs = std::move(probs), lab = std::move(lab), batch, classes](detail::TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const T s = self.grad[0] / static_cast<T>(batch);
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t k = 0; k < classes; ++k) {
            const T target = k == lab[b] ? T(1) : T(0);
            g[b * classes + k] += s * (probs[b * classes + k] - target);
          }
        }
      });
}

// ---------------------------------------------------------------- dense layers

// y = x W^T + b with x [B, D], W [K, D], b [K].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  detail::require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
                  "linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                      shape_str(weight.shape()));
  const std::int64_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (bias.defined()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == out, "linear: bias shape " + shape_str(bias.shape()));
  }
  std::vector<T> y(static_cast<std::size_t>(batch * out));
  Eigen::Map<const Mat> X(x.values().data(), batch, in);
  Eigen::Map<const Mat> W(weight.values().data(), out, in);
  Eigen::Map<Mat> Y(y.data(), batch, out);
  Y.noalias() = X * W.transpose();
  if (bias.defined()) {
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t k = 0; k < out; ++k) y[b * out + k] += bias.values()[k];
  }
  std::vector<detail::NodePtr<T>> parents{x.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return detail::make_result<T>(
      Shape{batch, out}, std::move(y), std::move(parents),
      [batch, in, out](detail::TensorNode<T>& self) {
        Eigen::Map<const Mat> G(self.grad.data(), batch, out);
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        if (px->requires_grad) {
          Eigen::Map<Mat> GX(px->grad_buffer().data(), batch, in);
          Eigen::Map<const Mat> W(pw->data.data(), out, in);
          GX.noalias() += G * W;
        }
        if (pw->requires_grad) {
          Eigen::Map<Mat> GW(pw->grad_buffer().data(), out, in);
          Eigen::Map<const Mat> X(px->data.data(), batch, in);
          GW.noalias() += G.transpose() * X;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t k = 0; k < out; ++k) gb[k] += self.grad[b * out + k];
        }
      });
}

// [B, C, H, W] -> [B, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: expected [B, C, H, W], got " + shape_str(x.shape()));
  const std::int64_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(bc));
  for (std::int64_t i = 0; i < bc; ++i) {
    T s = T(0);
    for (std::int64_t k = 0; k < hw; ++k) s += x.values()[i * hw + k];
    out[i] = s / static_cast<T>(hw);
  }
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {x.node()},
                                [bc, hw](detail::TensorNode<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::int64_t i = 0; i < bc; ++i) {
                                    const T v = self.grad[i] / static_cast<T>(hw);
                                    for (std::int64_t k = 0; k < hw; ++k) g[i * hw + k] += v;
                                  }
                                });
}

// ---------------------------------------------------------------- convolution

struct Conv2dOptions {
  std::int64_t stride_h = 1, stride_w = 1;
  std::int64_t pad_h = 0, pad_w = 0;
  std::int64_t dilation_h = 1, dilation_w = 1;
  std::int64_t groups = 1;
};

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                    std::int64_t pad, std::int64_t dilation) {
  const std::int64_t span = dilation * (kernel - 1) + 1;
  const std::int64_t padded = in + 2 * pad;
  if (padded < span) return 0;
  return (padded - span) / stride + 1;
}

namespace detail {

struct PlaneGeometry {
  std::int64_t in_h, in_w, out_h, out_w;
  std::int64_t kernel_h, kernel_w;
  std::int64_t stride_h, stride_w, pad_h, pad_w, dil_h, dil_w;
};

// Output index range [lo, hi) whose tap k lands inside the input.
inline std::pair<std::int64_t, std::int64_t> tap_range(std::int64_t in, std::int64_t out,
                                                       std::int64_t offset, std::int64_t stride) {
  std::int64_t lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  const std::int64_t last = in - 1 - offset;
  std::int64_t hi = last < 0 ? 0 : last / stride + 1;
  lo = std::max<std::int64_t>(lo, 0);
  hi = std::min(hi, out);
  return {lo, std::max(lo, hi)};
}

enum class ConvPass { forward, grad_input, grad_weight };

// One (output plane, input plane, kernel) correlation.
//   forward:     out[o] += w[k] * in[i(o, k)]
//   grad_input:  in[i(o, k)] += w[k] * out[o]      (in/out hold gradients)
//   grad_weight: w[k] += out[o] * in[i(o, k)]      (out holds gradient)
template <ConvPass pass, typename T>
void conv_plane(T* out, T* in, T* w, const PlaneGeometry& g) {
  for (std::int64_t i = 0; i < g.kernel_h; ++i) {
    const std::int64_t off_h = i * g.dil_h - g.pad_h;
    const auto [oh0, oh1] = tap_range(g.in_h, g.out_h, off_h, g.stride_h);
    if (oh0 >= oh1) continue;
    for (std::int64_t j = 0; j < g.kernel_w; ++j) {
      const std::int64_t off_w = j * g.dil_w - g.pad_w;
      const auto [ow0, ow1] = tap_range(g.in_w, g.out_w, off_w, g.stride_w);
      if (ow0 >= ow1) continue;
      T& wk = w[i * g.kernel_w + j];
      const T wv = wk;
      T acc = T(0);
      const bool contiguous = g.stride_h == 1 && g.stride_w == 1 && off_w == 0 && ow0 == 0 &&
                              ow1 == g.out_w && g.out_w == g.in_w;
      if (contiguous) {
        const std::int64_t n = (oh1 - oh0) * g.out_w;
        T* o = out + oh0 * g.out_w;
        T* s = in + (oh0 + off_h) * g.in_w;
        if constexpr (pass == ConvPass::forward) {
          for (std::int64_t t = 0; t < n; ++t) o[t] += wv * s[t];
        } else if constexpr (pass == ConvPass::grad_input) {
          for (std::int64_t t = 0; t < n; ++t) s[t] += wv * o[t];
        } else {
          acc += static_cast<T>(dot_of(o, s, n));
        }
      } else {
        const std::int64_t n = ow1 - ow0;
        for (std::int64_t oh = oh0; oh < oh1; ++oh) {
          T* o = out + oh * g.out_w + ow0;
          T* s = in + (oh * g.stride_h + off_h) * g.in_w + ow0 * g.stride_w + off_w;
          const std::int64_t sw = g.stride_w;
          if constexpr (pass == ConvPass::forward) {
            for (std::int64_t t = 0; t < n; ++t) o[t] += wv * s[t * sw];
          } else if constexpr (pass == ConvPass::grad_input) {
            for (std::int64_t t = 0; t < n; ++t) s[t * sw] += wv * o[t];
          } else {
            for (std::int64_t t = 0; t < n; ++t) acc += o[t] * s[t * sw];
          }
        }
      }
      if constexpr (pass == ConvPass::grad_weight) wk += acc;
    }
  }
}

}  // namespace detail

// Cross-correlation of x [B, Cin, H, W] with weight [Cout, Cin/groups, kH, kW].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& opt) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  detail::require(x.rank() == 4, "conv2d: input must be [B, C, H, W], got " + shape_str(x.shape()));
  detail::require(weight.rank() == 4, "conv2d: weight must be [Cout, Cin/groups, kH, kW], got " +
                                          shape_str(weight.shape()));
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const std::int64_t groups = opt.groups;
  detail::require(groups >= 1 && cin % groups == 0 && cout % groups == 0,
                  "conv2d: channels (in " + std::to_string(cin) + ", out " + std::to_string(cout) +
                      ") not divisible by groups " + std::to_string(groups));
  const std::int64_t cin_g = cin / groups, cout_g = cout / groups;
  detail::require(weight.dim(1) == cin_g, "conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                              " input channels per group, input has " +
                                              std::to_string(cin_g));
  detail::require(opt.stride_h >= 1 && opt.stride_w >= 1 && opt.dilation_h >= 1 && opt.dilation_w >= 1 &&
                      opt.pad_h >= 0 && opt.pad_w >= 0,
                  "conv2d: invalid stride/dilation/padding");
  if (bias.defined()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == cout, "conv2d: bias must have " +
                                                                 std::to_string(cout) + " entries");
  }
  const std::int64_t ho = conv_out_extent(h, kh, opt.stride_h, opt.pad_h, opt.dilation_h);
  const std::int64_t wo = conv_out_extent(w, kw, opt.stride_w, opt.pad_w, opt.dilation_w);
  if (ho < 1 || wo < 1) {
    throw ShapeError("conv2d: zero-size output for input " + shape_str(x.shape()) + " and kernel " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
  const detail::PlaneGeometry geom{h,           w,           ho,        wo,        kh,
                                   kw,          opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w,
                                   opt.dilation_h, opt.dilation_w};
  const bool pointwise = groups == 1 && kh == 1 && kw == 1 && opt.stride_h == 1 && opt.stride_w == 1 &&
                         opt.pad_h == 0 && opt.pad_w == 0;
  const std::int64_t in_plane = h * w, out_plane = ho * wo, kplane = kh * kw;

  std::vector<T> y(static_cast<std::size_t>(batch * cout * out_plane), T(0));
  {
    T* xp = const_cast<T*>(x.values().data());
    T* wp = const_cast<T*>(weight.values().data());
    if (pointwise) {
      Eigen::Map<const Mat> W(wp, cout, cin);
      parallel_for(batch, [&](std::int64_t b) {
        Eigen::Map<const Mat> X(xp + b * cin * in_plane, cin, in_plane);
        Eigen::Map<Mat> Y(y.data() + b * cout * out_plane, cout, out_plane);
        Y.noalias() = W * X;
      });
    } else {
      parallel_for(batch * cout, [&](std::int64_t idx) {
        const std::int64_t b = idx / cout, oc = idx % cout, grp = oc / cout_g;
        T* out = y.data() + idx * out_plane;
        for (std::int64_t icl = 0; icl < cin_g; ++icl) {
          const std::int64_t ic = grp * cin_g + icl;
          detail::conv_plane<detail::ConvPass::forward>(out, xp + (b * cin + ic) * in_plane,
                                                        wp + (oc * cin_g + icl) * kplane, geom);
        }
      });
    }
    if (bias.defined()) {
      const auto& bv = bias.values();
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t oc = 0; oc < cout; ++oc) {
          T* out = y.data() + (b * cout + oc) * out_plane;
          for (std::int64_t t = 0; t < out_plane; ++t) out[t] += bv[oc];
        }
    }
  }

  std::vector<detail::NodePtr<T>> parents{x.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return detail::make_result<T>(
      Shape{batch, cout, ho, wo}, std::move(y), std::move(parents),
      [=](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        T* gy = self.grad.data();
        if (pointwise) {
          Eigen::Map<const Mat> W(pw->data.data(), cout, cin);
          if (px->requires_grad) {
            T* gx = px->grad_buffer().data();
            parallel_for(batch, [&](std::int64_t b) {
              Eigen::Map<Mat> GX(gx + b * cin * in_plane, cin, in_plane);
              Eigen::Map<const Mat> GY(gy + b * cout * out_plane, cout, out_plane);
              GX.noalias() += W.transpose() * GY;
            });
          }
          if (pw->requires_grad) {
            Eigen::Map<Mat> GW(pw->grad_buffer().data(), cout, cin);
            for (std::int64_t b = 0; b < batch; ++b) {
              Eigen::Map<const Mat> GY(gy + b * cout * out_plane, cout, out_plane);
              Eigen::Map<const Mat> X(px->data.data() + b * cin * in_plane, cin, in_plane);
              GW.noalias() += GY * X.transpose();
            }
          }
        } else {
          if (px->requires_grad) {
            T* gx = px->grad_buffer().data();
            T* wp = pw->data.data();
            parallel_for(batch * cin, [&](std::int64_t idx) {
              const std::int64_t b = idx / cin, ic = idx % cin, grp = ic / cin_g, icl = ic % cin_g;
              for (std::int64_t ocl = 0; ocl < cout_g; ++ocl) {
                const std::int64_t oc = grp * cout_g + ocl;
                detail::conv_plane<detail::ConvPass::grad_input>(gy + (b * cout + oc) * out_plane,
                                                                 gx + idx * in_plane,
                                                                 wp + (oc * cin_g + icl) * kplane, geom);
              }
            });
          }
          if (pw->requires_grad) {
            T* gw = pw->grad_buffer().data();
            T* xp = px->data.data();
            parallel_for(cout, [&](std::int64_t oc) {
              const std::int64_t grp = oc / cout_g;
              for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t icl = 0; icl < cin_g; ++icl) {
                  const std::int64_t ic = grp * cin_g + icl;
                  detail::conv_plane<detail::ConvPass::grad_weight>(
                      gy + (b * cout + oc) * out_plane, xp + (b * cin + ic) * in_plane,
                      gw + (oc * cin_g + icl) * kplane, geom);
                }
              }
            });
          }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t oc = 0; oc < cout; ++oc) {
              const T* g = gy + (b * cout + oc) * out_plane;
              T s = T(0);
              for (std::int64_t t = 0; t < out_plane; ++t) s += g[t];
              gb[oc] += s;
            }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Conv2dOptions& opt = {}) {
  return conv2d(x, weight, Tensor<T>{}, opt);
}

// ---------------------------------------------------------------- pooling

struct Pool2dOptions {
  std::int64_t kernel_h = 2, kernel_w = 2;
  std::int64_t stride_h = 1, stride_w = 1;
  std::int64_t pad_h = 0, pad_w = 0;
};

// Max over each window; padded positions never win. The gradient goes to the
// first maximal element in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const Pool2dOptions& opt) {
  detail::require(x.rank() == 4, "maxpool2d: input must be [B, C, H, W], got " + shape_str(x.shape()));
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (opt.kernel_h > h + 2 * opt.pad_h || opt.kernel_w > w + 2 * opt.pad_w) {
    throw ShapeError("maxpool2d: kernel " + std::to_string(opt.kernel_h) + "x" +
                     std::to_string(opt.kernel_w) + " larger than input " + shape_str(x.shape()));
  }
  detail::require(opt.pad_h < opt.kernel_h && opt.pad_w < opt.kernel_w,
                  "maxpool2d: padding must be smaller than the kernel");
  const std::int64_t ho = (h + 2 * opt.pad_h - opt.kernel_h) / opt.stride_h + 1;
  const std::int64_t wo = (w + 2 * opt.pad_w - opt.kernel_w) / opt.stride_w + 1;
  const std::int64_t in_plane = h * w, out_plane = ho * wo;
  std::vector<T> y(static_cast<std::size_t>(planes * out_plane));
  std::vector<std::int32_t> arg(y.size());
  const auto& xv = x.values();
  parallel_for(planes, [&](std::int64_t p) {
    const T* src = xv.data() + p * in_plane;
    for (std::int64_t oh = 0; oh < ho; ++oh) {
      T* best = y.data() + p * out_plane + oh * wo;
      std::int32_t* idx = arg.data() + p * out_plane + oh * wo;
      std::fill(best, best + wo, -std::numeric_limits<T>::infinity());
      std::fill(idx, idx + wo, -1);
      // Taps in row-major window order; strict > keeps the first maximum.
      for (std::int64_t i = 0; i < opt.kernel_h; ++i) {
        const std::int64_t ih = oh * opt.stride_h - opt.pad_h + i;
        if (ih < 0 || ih >= h) continue;
        for (std::int64_t j = 0; j < opt.kernel_w; ++j) {
          const auto [lo, hi] = detail::tap_range(w, wo, j - opt.pad_w, opt.stride_w);
          const T* row = src + ih * w + j - opt.pad_w;
          for (std::int64_t ow = lo; ow < hi; ++ow) {
            const T v = row[ow * opt.stride_w];
            if (idx[ow] < 0 || v > best[ow]) {
              best[ow] = v;
              idx[ow] = static_cast<std::int32_t>(ih * w + ow * opt.stride_w + j - opt.pad_w);
            }
          }
        }
      }
    }
  });
  return detail::make_result<T>(
      Shape{x.dim(0), x.dim(1), ho, wo}, std::move(y), {x.node()},
      [arg = std::move(arg), planes, in_plane, out_plane](detail::TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::int64_t p = 0; p < planes; ++p)
          for (std::int64_t t = 0; t < out_plane; ++t)
            g[p * in_plane + arg[p * out_plane + t]] += self.grad[p * out_plane + t];
      });
}

// ---------------------------------------------------------------- batch norm

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::int64_t channels = 1)
      : running_mean(Tensor<T>::zeros({channels})), running_var(Tensor<T>::full({channels}, T(1))) {}
};

// Per-channel normalization of x [B, C, H, W]. Train mode uses (biased) batch
// statistics and folds the unbiased variance into the running estimates.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode) {
  detail::require(x.rank() == 4, "batch_norm: input must be [B, C, H, W], got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(gamma.numel() == channels && beta.numel() == channels &&
                      state.running_mean.numel() == channels,
                  "batch_norm: affine parameters have " + std::to_string(gamma.numel()) +
                      " entries, input has " + std::to_string(channels) + " channels");
  const std::int64_t count = batch * plane;
  const auto& xv = x.values();
  std::vector<T> y(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> invstd(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c) {
    T mu, var;
    if (mode == Mode::train) {
      double s = 0.0, ss = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) s += detail::sum_of(xv.data() + (b * channels + c) * plane, plane);
      const double m = s / static_cast<double>(count);
      for (std::int64_t b = 0; b < batch; ++b) ss += detail::sq_dev_of(xv.data() + (b * channels + c) * plane, plane, m);
      mu = static_cast<T>(m);
      var = static_cast<T>(ss / static_cast<double>(count));
      const T unbiased = count > 1 ? static_cast<T>(ss / static_cast<double>(count - 1)) : var;
      auto rm = state.running_mean.data();
      auto rv = state.running_var.data();
      rm[c] = (T(1) - state.momentum) * rm[c] + state.momentum * mu;
      rv[c] = (T(1) - state.momentum) * rv[c] + state.momentum * unbiased;
    } else {
      mu = state.running_mean.values()[c];
      var = state.running_var.values()[c];
    }
    const T is = T(1) / std::sqrt(var + state.eps);
    invstd[c] = is;
    const T gm = gamma.values()[c], bt = beta.values()[c];
    for (std::int64_t b = 0; b < batch; ++b) {
      const std::int64_t off = (b * channels + c) * plane;
      for (std::int64_t t = 0; t < plane; ++t) {
        const T xh = (xv[off + t] - mu) * is;
        xhat[off + t] = xh;
        y[off + t] = gm * xh + bt;
      }
    }
  }
  const bool train = mode == Mode::train;
  return detail::make_result<T>(
      x.shape(), std::move(y), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), invstd = std::move(invstd), batch, channels, plane, count,
       train](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& gy = self.grad;
        for (std::int64_t c = 0; c < channels; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::int64_t b = 0; b < batch; ++b) {
            const std::int64_t off = (b * channels + c) * plane;
            sg += detail::sum_of(gy.data() + off, plane);
            sgx += detail::dot_of(gy.data() + off, xhat.data() + off, plane);
          }
          if (pg->requires_grad) pg->grad_buffer()[c] += static_cast<T>(sgx);
          if (pb->requires_grad) pb->grad_buffer()[c] += static_cast<T>(sg);
          if (!px->requires_grad) continue;
          auto& gx = px->grad_buffer();
          const T gm = pg->data[c];
          const T scale_c = gm * invstd[c];
          if (train) {
            const T mg = static_cast<T>(sg / static_cast<double>(count));
            const T mgx = static_cast<T>(sgx / static_cast<double>(count));
            for (std::int64_t b = 0; b < batch; ++b) {
              const std::int64_t off = (b * channels + c) * plane;
              for (std::int64_t t = 0; t < plane; ++t) {
                gx[off + t] += scale_c * (gy[off + t] - mg - xhat[off + t] * mgx);
              }
            }
          } else {
            for (std::int64_t b = 0; b < batch; ++b) {
              const std::int64_t off = (b * channels + c) * plane;
              for (std::int64_t t = 0; t < plane; ++t) gx[off + t] += scale_c * gy[off + t];
            }
          }
        }
      });
}

// ---------------------------------------------------------------- mixtures

// out = sum_o probs[row, o] * ys[o] for probs [R, O]. Undefined ys entries are
// zero maps (the 'none' operator or masked candidates) and are skipped.
template <typename T>
Tensor<T> mix(const Tensor<T>& probs, std::int64_t row, const std::vector<Tensor<T>>& ys) {
  detail::require(probs.rank() == 2 && row >= 0 && row < probs.dim(0) &&
                      probs.dim(1) == static_cast<std::int64_t>(ys.size()),
                  "mix: " + std::to_string(ys.size()) + " candidates for weights " +
                      shape_str(probs.shape()));
  const std::int64_t width = probs.dim(1);
  const Tensor<T>* first = nullptr;
  for (const auto& y : ys)
    if (y.defined()) {
      first = &y;
      break;
    }
  detail::require(first != nullptr, "mix: all candidates are zero maps");
  std::vector<T> out(first->values().size(), T(0));
  std::vector<detail::NodePtr<T>> parents{probs.node()};
  std::vector<std::int64_t> slots;
  for (std::int64_t o = 0; o < width; ++o) {
    const auto& y = ys[o];
    if (!y.defined()) continue;
    detail::require_same_shape(*first, y, "mix");
    const T p = probs.values()[row * width + o];
    const auto& v = y.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p * v[i];
    parents.push_back(y.node());
    slots.push_back(o);
  }
  return detail::make_result<T>(
      first->shape(), std::move(out), std::move(parents),
      [row, width, slots = std::move(slots)](detail::TensorNode<T>& self) {
        auto& pp = self.parents[0];
        const auto& g = self.grad;
        for (std::size_t k = 0; k < slots.size(); ++k) {
          auto& py = self.parents[k + 1];
          const std::int64_t o = slots[k];
          if (pp->requires_grad) {
            const auto dot = detail::dot_of(g.data(), py->data.data(), static_cast<std::int64_t>(g.size()));
            pp->grad_buffer()[row * width + o] += static_cast<T>(dot);
          }
          if (py->requires_grad) {
            const T p = pp->data[row * width + o];
            auto& gy = py->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gy[i] += p * g[i];
          }
        }
      });
}

}  // namespace ctnas
