#pragma once

// In-memory labeled samples in network layout and minibatch assembly.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "ctnas/core/tensor.hpp"

namespace ctnas {

template <typename T>
struct Batch {
  Tensor<T> x;
  std::vector<int> y;
};

template <typename T>
struct Dataset {
  Shape sample_shape;  // [C, H, W]
  std::vector<T> values;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::int64_t sample_numel() const { return numel_of(sample_shape); }

  Batch<T> gather(std::span<const std::size_t> idx) const {
    if (idx.empty()) throw std::invalid_argument("empty batch");
    const auto n = static_cast<std::size_t>(sample_numel());
    std::vector<T> v(idx.size() * n);
    std::vector<int> y;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= size()) throw std::out_of_range("sample index out of range");
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(idx[k] * n), n,
                  v.begin() + static_cast<std::ptrdiff_t>(k * n));
      y.push_back(labels[idx[k]]);
    }
    Shape s{static_cast<std::int64_t>(idx.size())};
    s.insert(s.end(), sample_shape.begin(), sample_shape.end());
    return {Tensor<T>(s, std::move(v)), std::move(y)};
  }

  Batch<T> all() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0);
    return gather(idx);
  }
};

// Consecutive chunks of a seeded permutation; the last chunk may be short.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  if (batch == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  return out;
}

}  // namespace ctnas
