#pragma once

// Classification metrics and from-scratch training of a compiled genotype.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ctnas/dataset.hpp"
#include "ctnas/genotype.hpp"
#include "ctnas/optim.hpp"
#include "ctnas/search.hpp"

namespace ctnas {

inline std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<int>& pred,
                                                               const std::vector<int>& truth, int classes) {
  if (pred.size() != truth.size()) throw std::invalid_argument("prediction and label counts differ");
  std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(classes),
                                           std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= classes || truth[i] < 0 || truth[i] >= classes) {
      throw std::out_of_range("class id outside [0, " + std::to_string(classes) + ")");
    }
    ++m[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
  }
  return m;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("prediction and label counts differ");
  if (pred.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

// (p_o - p_e) / (1 - p_e); defined as 1 when both raters use a single identical class.
inline double cohen_kappa(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  const auto m = confusion_matrix(pred, truth, classes);
  const double n = static_cast<double>(pred.size());
  if (n == 0) return 0.0;
  double po = 0, pe = 0;
  for (int k = 0; k < classes; ++k) {
    double row = 0, col = 0;
    for (int j = 0; j < classes; ++j) {
      row += static_cast<double>(m[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]);
      col += static_cast<double>(m[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)]);
    }
    po += static_cast<double>(m[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)]);
    pe += row * col;
  }
  po /= n;
  pe /= n * n;
  if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const auto k = static_cast<std::size_t>(logits.dim(1));
  std::vector<int> out;
  for (std::int64_t b = 0; b < logits.dim(0); ++b) {
    const auto* row = logits.values().data() + static_cast<std::size_t>(b) * k;
    out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
  }
  return out;
}

template <typename T>
std::vector<int> predict(CompiledNet<T>& net, const Dataset<T>& data, std::size_t batch = 64) {
  std::vector<int> out;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); i += batch) {
    idx.clear();
    for (std::size_t j = i; j < std::min(data.size(), i + batch); ++j) idx.push_back(j);
    const auto p = argmax_rows(net.forward(data.gather(idx).x, Mode::eval));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 0.01;
  double lr_min = 1e-4;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("retrain epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("retrain batch_size must be >= 1");
    if (!(lr > 0) || lr_min < 0 || lr_min > lr) throw std::invalid_argument("need 0 <= lr_min <= lr");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("momentum must lie in [0, 1)");
  }
};

struct TrainEpoch {
  int epoch = 0;
  double loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double val_kappa = 0;
};

struct TrainResult {
  std::vector<TrainEpoch> history;
  std::vector<int> predictions;  // final model on the evaluation split
  double accuracy = 0;
  double kappa = 0;
  double best_accuracy = 0;
};

// Minibatch SGD with cosine learning rate; evaluates on `val` after every epoch.
template <typename T>
TrainResult train_compiled(CompiledNet<T>& net, const Dataset<T>& train, const Dataset<T>& val, const TrainConfig& cfg,
                           int classes, const std::function<void(const TrainEpoch&)>& on_epoch = {}) {
  cfg.validate();
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("training needs non-empty splits");
  std::vector<Tensor<T>> params;
  for (const auto& [name, t] : net.weights()) params.push_back(t);
  SGD<T> opt(params, {cfg.momentum, cfg.weight_decay, cfg.grad_clip});
  Rng rng(cfg.seed);
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
    TrainEpoch rec;
    rec.epoch = epoch;
    std::size_t correct = 0, seen = 0;
    const auto batches = shuffled_batches(train.size(), static_cast<std::size_t>(cfg.batch_size), rng);
    for (const auto& b : batches) {
      const auto batch = train.gather(b);
      const auto logits = net.forward(batch.x, Mode::train);
      const auto loss = cross_entropy(logits, std::span<const int>(batch.y));
      const double l = static_cast<double>(loss.item());
      if (!std::isfinite(l)) {
        throw DivergenceError("retrain diverged at epoch " + std::to_string(epoch) + ": loss " + std::to_string(l));
      }
      opt.zero_grad();
      loss.backward();
      opt.step(lr);
      rec.loss += l * static_cast<double>(b.size());
      correct += count_correct(logits, batch.y);
      seen += b.size();
    }
    rec.loss /= static_cast<double>(seen);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    result.predictions = predict(net, val);
    rec.val_acc = accuracy(result.predictions, val.labels);
    rec.val_kappa = cohen_kappa(result.predictions, val.labels, classes);
    result.best_accuracy = std::max(result.best_accuracy, rec.val_acc);
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.accuracy = result.history.back().val_acc;
  result.kappa = result.history.back().val_kappa;
  return result;
}

}  // namespace ctnas
