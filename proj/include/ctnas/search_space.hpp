#pragma once

// Candidate operators for every searchable edge, their concrete sub-networks
// and the normalized resource costs used by the parameter-scale surrogate.
//
// Axis convention: feature maps are [B, C, H, W] with C = electrodes,
// H = sample points inside a slice (time) and W = slice index. A "k x 1"
// kernel therefore spans k time steps; "1 x k" spans k neighbouring slices.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctnas/nn/layers.hpp"

namespace ctnas {

enum class OpKind { none, skip, max_pool, sep_conv, dil_conv };

class SearchSpaceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct OperatorSpec {
  OpKind kind = OpKind::none;
  int kernel_h = 1;  // along time
  int kernel_w = 1;  // along slices
  int dilation = 1;

  bool operator==(const OperatorSpec&) const = default;

  bool has_parametric_core() const { return kind == OpKind::sep_conv || kind == OpKind::dil_conv; }

  // Extent along time covered by one application of the kernel.
  int time_extent() const { return dilation * (kernel_h - 1) + 1; }

  std::string name() const {
    const std::string shape = std::to_string(kernel_h) + "x" + std::to_string(kernel_w);
    switch (kind) {
      case OpKind::none: return "none";
      case OpKind::skip: return "skip";
      case OpKind::max_pool: return "maxpool " + shape;
      case OpKind::sep_conv: return "sep " + shape;
      case OpKind::dil_conv: return "dil " + shape;
    }
    throw SearchSpaceError("unknown operator kind");
  }

  static OperatorSpec parse(std::string_view text);
};

namespace detail {

struct KernelShape {
  int h, w;
};

inline const std::vector<KernelShape>& pool_kernels() {
  static const std::vector<KernelShape> k{{3, 3}, {3, 1}, {5, 1}, {1, 3}};
  return k;
}

inline const std::vector<KernelShape>& conv_kernels() {
  static const std::vector<KernelShape> k{{3, 1},  {5, 1}, {7, 1}, {11, 1}, {17, 1}, {3, 3},  {5, 5},
                                          {7, 7},  {33, 3}, {17, 3}, {1, 3}, {1, 5},  {1, 7}, {1, 11}};
  return k;
}

inline bool in_table(const std::vector<KernelShape>& table, int h, int w) {
  return std::any_of(table.begin(), table.end(), [&](const KernelShape& k) { return k.h == h && k.w == w; });
}

}  // namespace detail

inline OperatorSpec OperatorSpec::parse(std::string_view text) {
  if (text == "none") return {OpKind::none};
  if (text == "skip") return {OpKind::skip};
  const auto space = text.find(' ');
  if (space == std::string_view::npos) throw SearchSpaceError("unknown operator '" + std::string(text) + "'");
  const auto family = text.substr(0, space);
  const auto shape = text.substr(space + 1);
  const auto x = shape.find('x');
  int h = 0, w = 0;
  if (x == std::string_view::npos ||
      std::from_chars(shape.data(), shape.data() + x, h).ec != std::errc{} ||
      std::from_chars(shape.data() + x + 1, shape.data() + shape.size(), w).ec != std::errc{}) {
    throw SearchSpaceError("malformed kernel shape in operator '" + std::string(text) + "'");
  }
  OperatorSpec spec;
  spec.kernel_h = h;
  spec.kernel_w = w;
  if (family == "maxpool") {
    spec.kind = OpKind::max_pool;
    if (!detail::in_table(detail::pool_kernels(), h, w)) {
      throw SearchSpaceError("pooling kernel " + std::string(shape) + " is not in the operator table");
    }
  } else if (family == "sep" || family == "dil") {
    spec.kind = family == "sep" ? OpKind::sep_conv : OpKind::dil_conv;
    spec.dilation = family == "dil" ? 2 : 1;
    if (!detail::in_table(detail::conv_kernels(), h, w)) {
      throw SearchSpaceError("convolution kernel " + std::string(shape) + " is not in the operator table");
    }
  } else {
    throw SearchSpaceError("unknown operator family '" + std::string(family) + "'");
  }
  return spec;
}

struct SearchSpace {
  std::vector<OperatorSpec> operators;
  std::int64_t channel_count = 0;

  SearchSpace() = default;
  SearchSpace(std::vector<OperatorSpec> ops, std::int64_t channels)
      : operators(std::move(ops)), channel_count(channels) {
    validate();
  }

  std::size_t size() const { return operators.size(); }

  std::optional<std::size_t> find(OpKind kind) const {
    for (std::size_t i = 0; i < operators.size(); ++i)
      if (operators[i].kind == kind) return i;
    return std::nullopt;
  }

  std::size_t skip_index() const {
    auto i = find(OpKind::skip);
    if (!i) throw SearchSpaceError("search space has no skip operator");
    return *i;
  }

  std::size_t none_index() const {
    auto i = find(OpKind::none);
    if (!i) throw SearchSpaceError("search space has no none operator");
    return *i;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& op : operators) out.push_back(op.name());
    return out;
  }

  void validate() const {
    if (operators.empty()) throw SearchSpaceError("search space is empty");
    if (channel_count < 1) throw SearchSpaceError("channel count must be positive");
    const auto count = [&](OpKind k) {
      return std::count_if(operators.begin(), operators.end(), [&](const OperatorSpec& o) { return o.kind == k; });
    };
    if (count(OpKind::skip) != 1 || count(OpKind::none) != 1) {
      throw SearchSpaceError("search space needs exactly one skip and one none operator");
    }
    for (std::size_t i = 0; i < operators.size(); ++i)
      for (std::size_t j = i + 1; j < operators.size(); ++j)
        if (operators[i] == operators[j]) throw SearchSpaceError("duplicate operator " + operators[i].name());
  }

  static SearchSpace from_names(const std::vector<std::string>& names, std::int64_t channels) {
    std::vector<OperatorSpec> ops;
    for (const auto& n : names) ops.push_back(OperatorSpec::parse(n));
    return SearchSpace(std::move(ops), channels);
  }

  // The eight operators used for desk-scale runs.
  static SearchSpace desk(std::int64_t channels) {
    return from_names({"none", "skip", "maxpool 3x1", "maxpool 3x3", "sep 3x1", "sep 3x3", "dil 3x1", "dil 1x7"},
                      channels);
  }

  // Every operator of the detailed operator table.
  static SearchSpace full(std::int64_t channels) {
    std::vector<std::string> names{"none", "skip"};
    for (const auto& k : detail::pool_kernels())
      names.push_back("maxpool " + std::to_string(k.h) + "x" + std::to_string(k.w));
    for (const char* fam : {"sep", "dil"})
      for (const auto& k : detail::conv_kernels())
        names.push_back(std::string(fam) + " " + std::to_string(k.h) + "x" + std::to_string(k.w));
    return from_names(names, channels);
  }
};

// Learnable scalars of the block build_operator produces, BN affine included.
inline std::int64_t param_count(const OperatorSpec& spec, std::int64_t channels) {
  const std::int64_t c = channels;
  const std::int64_t kernel = static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w;
  switch (spec.kind) {
    case OpKind::none:
    case OpKind::skip: return 0;
    case OpKind::max_pool: return 2 * c;
    case OpKind::sep_conv: return 2 * (c * kernel + c * c + 2 * c);
    case OpKind::dil_conv: return c * kernel + c * c + 2 * c;
  }
  throw SearchSpaceError("unknown operator kind");
}

struct CostModel {
  std::vector<double> raw_params;
  std::vector<double> sigma;

  // sigma is raw / max(raw) over operators with a weighted core; operators
  // whose core has no weights (none, skip, pooling) cost 0.
  static CostModel from_raw(std::vector<double> raw, const std::vector<bool>& parametric) {
    if (raw.empty() || raw.size() != parametric.size()) throw SearchSpaceError("cost model: bad operator list");
    double top = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i)
      if (parametric[i]) top = std::max(top, raw[i]);
    CostModel m;
    m.sigma.resize(raw.size(), 0.0);
    if (top > 0.0)
      for (std::size_t i = 0; i < raw.size(); ++i)
        if (parametric[i]) m.sigma[i] = raw[i] / top;
    m.raw_params = std::move(raw);
    return m;
  }
};

inline CostModel normalized_costs(const SearchSpace& space, std::int64_t channels) {
  if (space.operators.empty()) throw SearchSpaceError("cost model of an empty space");
  std::vector<double> raw;
  std::vector<bool> parametric;
  for (const auto& op : space.operators) {
    raw.push_back(static_cast<double>(param_count(op, channels)));
    parametric.push_back(op.has_parametric_core());
  }
  return CostModel::from_raw(std::move(raw), parametric);
}

// ---------------------------------------------------------------- operator blocks

// The tensor arriving on an edge together with its ELU activation, computed
// once and shared by every candidate that starts with ELU.
template <typename T>
class EdgeInput {
 public:
  explicit EdgeInput(Tensor<T> x) : x_(std::move(x)) {}
  const Tensor<T>& raw() const { return x_; }
  const Tensor<T>& activated() {
    if (!act_.defined()) act_ = elu(x_);
    return act_;
  }

 private:
  Tensor<T> x_;
  Tensor<T> act_;
};

template <typename T>
class Operator {
 public:
  Operator(OperatorSpec spec, bool reduction) : spec_(spec), reduction_(reduction) {}
  virtual ~Operator() = default;

  const OperatorSpec& spec() const { return spec_; }
  bool reduces() const { return reduction_; }

  virtual Tensor<T> forward(EdgeInput<T>& in, Mode mode) = 0;
  virtual void collect(const std::string&, NamedTensors<T>&) const {}
  virtual void collect_buffers(const std::string&, NamedTensors<T>&) const {}
  // Multiply-accumulates of conv layers for one sample of shape in = [C, H, W].
  virtual std::int64_t macs(const Shape&) const { return 0; }

  Shape output_shape(const Shape& in) const {
    return {in[0], reduction_ ? (in[1] + 1) / 2 : in[1], in[2]};
  }

 protected:
  OperatorSpec spec_;
  bool reduction_;
};

namespace detail {

inline Conv2dOptions depthwise_options(int kh, int kw, int dilation, bool reduction, std::int64_t channels) {
  Conv2dOptions o;
  o.groups = channels;
  o.dilation_h = o.dilation_w = dilation;
  o.pad_h = dilation * (kh - 1) / 2;
  o.pad_w = dilation * (kw - 1) / 2;
  o.stride_h = reduction ? 2 : 1;
  return o;
}

}  // namespace detail

// ELU -> depthwise -> pointwise -> BN, applied twice.
template <typename T>
class SepConvOp final : public Operator<T> {
 public:
  SepConvOp(OperatorSpec spec, std::int64_t c, bool reduction, Rng& rng) : Operator<T>(spec, reduction) {
    const int kh = spec.kernel_h, kw = spec.kernel_w;
    dw1_ = Conv2dLayer<T>(c, c, kh, kw, detail::depthwise_options(kh, kw, 1, reduction, c), false, rng);
    pw1_ = Conv2dLayer<T>(c, c, 1, 1, {}, false, rng);
    bn1_ = BatchNormLayer<T>(c);
    dw2_ = Conv2dLayer<T>(c, c, kh, kw, detail::depthwise_options(kh, kw, 1, false, c), false, rng);
    pw2_ = Conv2dLayer<T>(c, c, 1, 1, {}, false, rng);
    bn2_ = BatchNormLayer<T>(c);
  }

  Tensor<T> forward(EdgeInput<T>& in, Mode mode) override {
    auto h = bn1_(pw1_(dw1_(in.activated())), mode);
    return bn2_(pw2_(dw2_(elu(h))), mode);
  }

  void collect(const std::string& p, NamedTensors<T>& out) const override {
    dw1_.collect(p + ".dw1", out);
    pw1_.collect(p + ".pw1", out);
    bn1_.collect(p + ".bn1", out);
    dw2_.collect(p + ".dw2", out);
    pw2_.collect(p + ".pw2", out);
    bn2_.collect(p + ".bn2", out);
  }
  void collect_buffers(const std::string& p, NamedTensors<T>& out) const override {
    bn1_.collect_buffers(p + ".bn1", out);
    bn2_.collect_buffers(p + ".bn2", out);
  }
  std::int64_t macs(const Shape& in) const override {
    const Shape mid = dw1_.output_shape(in);
    return dw1_.macs(mid) + pw1_.macs(mid) + dw2_.macs(mid) + pw2_.macs(mid);
  }

 private:
  Conv2dLayer<T> dw1_, pw1_, dw2_, pw2_;
  BatchNormLayer<T> bn1_, bn2_;
};

// ELU -> dilated depthwise -> pointwise -> BN.
template <typename T>
class DilConvOp final : public Operator<T> {
 public:
  DilConvOp(OperatorSpec spec, std::int64_t c, bool reduction, Rng& rng) : Operator<T>(spec, reduction) {
    const int kh = spec.kernel_h, kw = spec.kernel_w;
    dw_ = Conv2dLayer<T>(c, c, kh, kw, detail::depthwise_options(kh, kw, spec.dilation, reduction, c), false, rng);
    pw_ = Conv2dLayer<T>(c, c, 1, 1, {}, false, rng);
    bn_ = BatchNormLayer<T>(c);
  }

  Tensor<T> forward(EdgeInput<T>& in, Mode mode) override { return bn_(pw_(dw_(in.activated())), mode); }

  void collect(const std::string& p, NamedTensors<T>& out) const override {
    dw_.collect(p + ".dw", out);
    pw_.collect(p + ".pw", out);
    bn_.collect(p + ".bn", out);
  }
  void collect_buffers(const std::string& p, NamedTensors<T>& out) const override {
    bn_.collect_buffers(p + ".bn", out);
  }
  std::int64_t macs(const Shape& in) const override {
    const Shape mid = dw_.output_shape(in);
    return dw_.macs(mid) + pw_.macs(mid);
  }

 private:
  Conv2dLayer<T> dw_, pw_;
  BatchNormLayer<T> bn_;
};

// Max pooling -> BN.
template <typename T>
class MaxPoolOp final : public Operator<T> {
 public:
  MaxPoolOp(OperatorSpec spec, std::int64_t c, bool reduction) : Operator<T>(spec, reduction), bn_(c) {
    opt_.kernel_h = spec.kernel_h;
    opt_.kernel_w = spec.kernel_w;
    opt_.pad_h = (spec.kernel_h - 1) / 2;
    opt_.pad_w = (spec.kernel_w - 1) / 2;
    opt_.stride_h = reduction ? 2 : 1;
  }

  Tensor<T> forward(EdgeInput<T>& in, Mode mode) override { return bn_(maxpool2d(in.raw(), opt_), mode); }

  void collect(const std::string& p, NamedTensors<T>& out) const override { bn_.collect(p + ".bn", out); }
  void collect_buffers(const std::string& p, NamedTensors<T>& out) const override {
    bn_.collect_buffers(p + ".bn", out);
  }

 private:
  Pool2dOptions opt_;
  BatchNormLayer<T> bn_;
};

template <typename T>
class IdentityOp final : public Operator<T> {
 public:
  explicit IdentityOp(OperatorSpec spec) : Operator<T>(spec, false) {}
  Tensor<T> forward(EdgeInput<T>& in, Mode) override { return in.raw(); }
};

// ELU -> 1x1 conv with stride (2, 1) -> BN; halves the time axis.
template <typename T>
class FactorizedReduce final : public Operator<T> {
 public:
  FactorizedReduce(OperatorSpec spec, std::int64_t c, Rng& rng) : Operator<T>(spec, true), bn_(c) {
    Conv2dOptions o;
    o.stride_h = 2;
    conv_ = Conv2dLayer<T>(c, c, 1, 1, o, false, rng);
  }

  Tensor<T> forward(EdgeInput<T>& in, Mode mode) override { return bn_(conv_(in.activated()), mode); }

  void collect(const std::string& p, NamedTensors<T>& out) const override {
    conv_.collect(p + ".conv", out);
    bn_.collect(p + ".bn", out);
  }
  void collect_buffers(const std::string& p, NamedTensors<T>& out) const override {
    bn_.collect_buffers(p + ".bn", out);
  }
  std::int64_t macs(const Shape& in) const override { return conv_.macs(conv_.output_shape(in)); }

 private:
  Conv2dLayer<T> conv_;
  BatchNormLayer<T> bn_;
};

template <typename T>
class ZeroOp final : public Operator<T> {
 public:
  ZeroOp(OperatorSpec spec, bool reduction) : Operator<T>(spec, reduction) {}
  Tensor<T> forward(EdgeInput<T>& in, Mode) override {
    const auto& s = in.raw().shape();
    const Shape out = this->output_shape({s[1], s[2], s[3]});
    return Tensor<T>::zeros({s[0], out[0], out[1], out[2]});
  }
};

// Concrete sub-network for one candidate. With `reduction` the operator
// halves the time axis (stride (2, 1)).
template <typename T>
std::unique_ptr<Operator<T>> build_operator(const OperatorSpec& spec, std::int64_t channels, bool reduction,
                                            Rng& rng) {
  if (channels < 1) throw SearchSpaceError("operators need at least one channel");
  switch (spec.kind) {
    case OpKind::none: return std::make_unique<ZeroOp<T>>(spec, reduction);
    case OpKind::skip:
      if (reduction) return std::make_unique<FactorizedReduce<T>>(spec, channels, rng);
      return std::make_unique<IdentityOp<T>>(spec);
    case OpKind::max_pool: return std::make_unique<MaxPoolOp<T>>(spec, channels, reduction);
    case OpKind::sep_conv: return std::make_unique<SepConvOp<T>>(spec, channels, reduction, rng);
    case OpKind::dil_conv: return std::make_unique<DilConvOp<T>>(spec, channels, reduction, rng);
  }
  throw SearchSpaceError("unknown operator kind");
}

template <typename T>
std::int64_t count_elements(const NamedTensors<T>& tensors) {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

}  // namespace ctnas
