#pragma once

// First-order alternating bi-level search. Each step updates the network
// weights w on a training batch with theta frozen, then theta on a validation
// batch with w frozen, using the penalized objective from constraints.hpp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ctnas/constraints.hpp"
#include "ctnas/dataset.hpp"
#include "ctnas/genotype.hpp"
#include "ctnas/optim.hpp"

namespace ctnas {

struct SearchConfig {
  int epochs = 30;
  int batch_size = 32;
  int max_steps_per_epoch = 0;  // 0: as many as the data allows
  int stop_after_epochs = 0;    // 0: run all epochs; otherwise stop early while schedules still span `epochs`
  double lr_w = 0.01;
  double lr_w_min = 1e-4;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  double lr_theta = 0.01;
  double theta_beta1 = 0.5;
  double theta_beta2 = 0.99;
  std::vector<double> theta_milestones{0.5, 0.75};
  double theta_gamma = 0.5;
  double theta_init_std = 1e-3;
  int patience = 10;  // 0 disables early stopping
  std::uint64_t seed = 0;
  ConstraintConfig constraints;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_steps_per_epoch < 0) throw std::invalid_argument("max_steps_per_epoch must be >= 0");
    if (!(lr_w > 0) || !(lr_w_min >= 0) || lr_w_min > lr_w) throw std::invalid_argument("need 0 <= lr_w_min <= lr_w");
    if (!(lr_theta > 0)) throw std::invalid_argument("lr_theta must be > 0");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (theta_beta1 < 0 || theta_beta1 >= 1 || theta_beta2 < 0 || theta_beta2 >= 1) {
      throw std::invalid_argument("adaptive-moment betas must lie in [0, 1)");
    }
    if (patience < 0) throw std::invalid_argument("patience must be >= 0");
    if (stop_after_epochs < 0) throw std::invalid_argument("stop_after_epochs must be >= 0");
    constraints.validate();
  }
};

struct PenaltyRecord {
  int epoch = 0;
  long step = 0;
  double omega = 0, omega_raw = 0, phi = 0, floor = 0;
  bool lower_active = false, upper_active = false, skip_active = false;
};

struct LossRecord {
  int epoch = 0;
  long step = 0;
  double l_train = 0, l_val = 0, l_lag = 0;
};

template <typename T>
struct SearchState {
  int epoch = 0;
  long step = 0;
  SGD<T> w_opt;
  Adam<T> theta_opt;
  std::vector<PenaltyRecord> penalties;
  std::vector<LossRecord> losses;
};

struct StepResult {
  double l_train = 0, l_val = 0, l_lag = 0;
  std::size_t val_correct = 0, val_count = 0;
  PenaltyRecord penalty;
};

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, const std::vector<int>& y) {
  const auto k = static_cast<std::size_t>(logits.dim(1));
  std::size_t ok = 0;
  for (std::size_t b = 0; b < y.size(); ++b) {
    const auto* row = logits.values().data() + b * k;
    if (static_cast<int>(std::max_element(row, row + k) - row) == y[b]) ++ok;
  }
  return ok;
}

template <typename T>
class Searcher {
 public:
  Searcher(MetaNet<T>& net, ArchParams<T>& theta, SearchConfig cfg)
      : net_(net), theta_(theta), cfg_(std::move(cfg)), model_(ScaleModel::from_net(net)) {
    cfg_.validate();
    std::vector<Tensor<T>> w;
    for (const auto& [name, t] : net_.weights()) w.push_back(t);
    state_.w_opt = SGD<T>(std::move(w), {cfg_.momentum, cfg_.weight_decay, cfg_.grad_clip});
    state_.theta_opt = Adam<T>({theta_.normal, theta_.reduce}, {cfg_.theta_beta1, cfg_.theta_beta2, 1e-8, 0.0});
  }

  SearchState<T>& state() { return state_; }
  const SearchState<T>& state() const { return state_; }
  const ScaleModel& scale_model() const { return model_; }
  const SearchConfig& config() const { return cfg_; }

  double lr_w(double progress) const { return cosine_lr(cfg_.lr_w, cfg_.lr_w_min, std::floor(progress), cfg_.epochs); }
  double lr_theta(double progress) const {
    return multistep_lr(cfg_.lr_theta, std::floor(progress), cfg_.epochs, cfg_.theta_milestones, cfg_.theta_gamma);
  }

  // Updates w from the training batch; theta is not touched.
  double w_step(const Batch<T>& train, double progress) {
    theta_.set_requires_grad(false);
    net_.set_weights_trainable(true);
    auto loss = cross_entropy(net_.forward(train.x, theta_, Mode::train), train.y);
    const double l = static_cast<double>(loss.item());
    if (!std::isfinite(l)) diverged("training loss", l);
    loss.backward();
    state_.w_opt.step(lr_w(progress));
    state_.w_opt.zero_grad();
    return l;
  }

  // Updates theta from the validation batch; w is not touched.
  StepResult theta_step(const Batch<T>& val, double progress) {
    net_.set_weights_trainable(false);
    theta_.set_requires_grad(true);
    auto logits = net_.forward(val.x, theta_, Mode::train);
    auto l_val = cross_entropy(logits, val.y);
    const double t = floor_time(progress, cfg_.epochs, cfg_.constraints.time_scale);
    auto terms = lagrangian_loss(l_val, theta_, cfg_.constraints, t, model_);
    StepResult r;
    r.l_val = terms.l_val;
    r.l_lag = static_cast<double>(terms.loss.item());
    r.val_correct = count_correct(logits, val.y);
    r.val_count = val.y.size();
    r.penalty = {state_.epoch, state_.step,        terms.omega,        terms.omega_raw, terms.phi,
                 terms.floor,  terms.lower_active, terms.upper_active, terms.skip_active};
    if (!std::isfinite(r.l_lag)) diverged("architecture loss", r.l_lag);
    terms.loss.backward();
    state_.theta_opt.step(lr_theta(progress));
    state_.theta_opt.zero_grad();
    theta_.check_finite();
    net_.set_weights_trainable(true);
    return r;
  }

  // One 1:1 alternation; `progress` is the fractional epoch count.
  StepResult step(const Batch<T>& train, const Batch<T>& val, double progress) {
    const double l_train = w_step(train, progress);
    auto r = theta_step(val, progress);
    r.l_train = l_train;
    state_.penalties.push_back(r.penalty);
    state_.losses.push_back({state_.epoch, state_.step, r.l_train, r.l_val, r.l_lag});
    ++state_.step;
    return r;
  }

 private:
  [[noreturn]] void diverged(const std::string& what, double value) const {
    std::ostringstream os;
    os << "search diverged: " << what << " = " << value << " at epoch " << state_.epoch << ", step " << state_.step;
    if (!state_.penalties.empty()) {
      const auto& p = state_.penalties.back();
      os << "; last omega_raw = " << p.omega_raw << ", phi = " << p.phi << ", skip floor = " << p.floor;
    }
    if (!state_.losses.empty()) {
      const auto& l = state_.losses.back();
      os << "; last L_train = " << l.l_train << ", L_val = " << l.l_val << ", L_lag = " << l.l_lag;
    }
    double tmax = 0;
    for (const auto* t : {&theta_.normal, &theta_.reduce})
      for (T v : t->values()) tmax = std::max(tmax, std::abs(static_cast<double>(v)));
    os << "; max |theta| = " << tmax;
    throw DivergenceError(os.str());
  }

  MetaNet<T>& net_;
  ArchParams<T>& theta_;
  SearchConfig cfg_;
  ScaleModel model_;
  SearchState<T> state_;
};

struct EpochRecord {
  int epoch = 0;
  double l_train = 0, l_val = 0, l_lag = 0;
  double omega = 0, omega_raw = 0, phi = 0, skip_floor = 0;
  double penalty_lower = 0, penalty_upper = 0, penalty_skip = 0;  // weighted hinge values
  double val_acc = 0;
  std::vector<double> probs_normal;  // [edges * ops], end of epoch
  std::vector<double> probs_reduce;
  Genotype genotype;
};

template <typename T>
struct SearchResult {
  ArchParams<T> theta;
  SearchState<T> state;
  std::vector<EpochRecord> trajectory;
  Genotype genotype;
  bool converged = false;
};

// Operators that some cell had to drop because they outgrow its input.
template <typename T>
std::vector<bool> excluded_operators(const MetaNet<T>& net) {
  std::vector<bool> out(net.space().size(), false);
  for (const auto& cell : net.cells())
    for (std::size_t o = 0; o < out.size(); ++o)
      if (!cell.allowed[o]) out[o] = true;
  return out;
}

template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& theta) {
  const auto p = softmax(theta.detach(), 1);
  return {p.values().begin(), p.values().end()};
}

template <typename T>
Genotype derive_for(const MetaNet<T>& net, const ArchParams<T>& theta, const std::string& space_id) {
  auto g = derive(theta, net.space(), excluded_operators(net));
  g.meta.blocks = net.config().blocks;
  g.meta.classes = net.config().classes;
  g.meta.search_space = space_id;
  return g;
}

// Runs epochs until cfg.epochs or until the derived genotype has been
// unchanged for cfg.patience consecutive epochs.
template <typename T>
SearchResult<T> run_search(MetaNet<T>& net, const Dataset<T>& train, const Dataset<T>& val, const SearchConfig& cfg,
                           const std::string& space_id = "custom",
                           const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("search needs non-empty train and val splits");
  Rng init_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  auto theta = net.init_arch_params(init_rng, cfg.theta_init_std);
  Searcher<T> search(net, theta, cfg);
  SearchResult<T> result;
  Rng batch_rng(cfg.seed);
  int stable = 0;
  Genotype previous;
  const int last_epoch = cfg.stop_after_epochs > 0 ? std::min(cfg.epochs, cfg.stop_after_epochs) : cfg.epochs;
  for (int epoch = 0; epoch < last_epoch; ++epoch) {
    search.state().epoch = epoch;
    const auto tb = shuffled_batches(train.size(), static_cast<std::size_t>(cfg.batch_size), batch_rng);
    const auto vb = shuffled_batches(val.size(), static_cast<std::size_t>(cfg.batch_size), batch_rng);
    std::size_t steps = std::min(tb.size(), vb.size());
    if (cfg.max_steps_per_epoch > 0) steps = std::min(steps, static_cast<std::size_t>(cfg.max_steps_per_epoch));
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t correct = 0, seen = 0;
    StepResult last;
    for (std::size_t s = 0; s < steps; ++s) {
      const double progress = epoch + static_cast<double>(s) / static_cast<double>(steps);
      last = search.step(train.gather(tb[s]), val.gather(vb[s]), progress);
      rec.l_train += last.l_train;
      rec.l_val += last.l_val;
      rec.l_lag += last.l_lag;
      correct += last.val_correct;
      seen += last.val_count;
    }
    const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
    rec.l_train /= n;
    rec.l_val /= n;
    rec.l_lag /= n;
    rec.val_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    // Surrogates re-evaluated on the updated theta at the end of the epoch.
    const auto& model = search.scale_model();
    rec.omega = static_cast<double>(omega(theta, model).item());
    rec.omega_raw = static_cast<double>(omega_raw(theta, model).item());
    rec.phi = static_cast<double>(phi(theta, model, cfg.constraints.temperature, cfg.constraints.phi_mean).item());
    rec.skip_floor = skip_floor(floor_time(epoch + 1, cfg.epochs, cfg.constraints.time_scale),
                                cfg.constraints.resolved_beta(model.total_edges()));
    {
      const auto& c = cfg.constraints;
      const double measured = c.bounds_in_sigma ? rec.omega : rec.omega_raw;
      rec.penalty_lower = c.lambda1 * std::max(0.0, c.c_low - measured);
      rec.penalty_upper = c.lambda2 * std::max(0.0, measured - c.c_high);
      rec.penalty_skip = c.lambda3 * std::max(0.0, rec.skip_floor - rec.phi);
    }
    rec.probs_normal = softmax_rows(theta.normal);
    rec.probs_reduce = softmax_rows(theta.reduce);
    rec.genotype = derive_for(net, theta, space_id);
    stable = (epoch > 0 && same_structure(rec.genotype, previous)) ? stable + 1 : 0;
    previous = rec.genotype;
    result.trajectory.push_back(rec);
    if (on_epoch) on_epoch(result.trajectory.back());
    if (cfg.patience > 0 && stable >= cfg.patience) {
      result.converged = true;
      break;
    }
  }
  result.genotype = derive_for(net, theta, space_id);
  result.theta = theta;
  result.state = std::move(search.state());
  return result;
}

// One row per (epoch, cell type, edge, operator).
inline void write_trajectory_csv(std::ostream& os, const std::vector<EpochRecord>& trajectory,
                                 const std::vector<std::string>& op_names) {
  os << "epoch,cell_type,edge_id,operator_name,softmax_prob,omega_raw,phi,skip_floor,L_train,L_val,L_lag,val_acc\n";
  os.precision(9);
  const std::size_t ops = op_names.size();
  for (const auto& r : trajectory) {
    for (CellType t : {CellType::normal, CellType::reduce}) {
      const auto& p = t == CellType::normal ? r.probs_normal : r.probs_reduce;
      for (std::size_t i = 0; i < p.size(); ++i) {
        os << r.epoch << ',' << cell_type_name(t) << ',' << i / ops << ',' << op_names[i % ops] << ',' << p[i] << ','
           << r.omega_raw << ',' << r.phi << ',' << r.skip_floor << ',' << r.l_train << ',' << r.l_val << ','
           << r.l_lag << ',' << r.val_acc << '\n';
      }
    }
  }
}

}  // namespace ctnas
