#pragma once

// Mini-batch SGD with momentum, the epoch loop with MAD refresh and warm-up,
// early stopping on validation MPE, and k-fold splitting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "robreg/dataset.hpp"
#include "robreg/errors.hpp"
#include "robreg/metrics.hpp"
#include "robreg/network.hpp"
#include "robreg/numerics.hpp"
#include "robreg/robust_loss.hpp"

namespace robreg {

enum class MadCadence { PerEpoch, PerBatch };

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 230;
  std::size_t max_epochs = 100;
  std::size_t early_stop_patience = 10;
  MadCadence mad_cadence = MadCadence::PerEpoch;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("sgd: learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("sgd: batch_size must be positive");
    if (max_epochs == 0) throw ConfigError("sgd: max_epochs must be positive");
    if (early_stop_patience == 0) throw ConfigError("sgd: early_stop_patience must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_error = 0.0;
  /// Median over outputs of the MAD in effect at the epoch's first iteration
  /// (warm-up included). NaN for L2 runs.
  double effective_mad_median = std::numeric_limits<double>::quiet_NaN();
};

struct TrainState {
  NetworkParams params;
  NetworkParams velocity;
  std::int64_t global_iteration = 0;
  std::size_t epoch = 0;
  MadScale mad;
  double best_val_error = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;

  explicit TrainState(NetworkParams initial = {})
      : params(std::move(initial)), velocity(NetworkParams::zeros_like(params)) {}
};

/// Training produced NaN/Inf. Carries the last epoch that finished cleanly.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::size_t last_good_epoch)
      : NumericError(what), last_good_epoch_(last_good_epoch) {}
  std::size_t last_good_epoch() const noexcept { return last_good_epoch_; }

 private:
  std::size_t last_good_epoch_;
};

/// v <- momentum * v - lr * g;  theta <- theta + v;  ++global_iteration.
inline void sgd_step(TrainState& state, const NetworkParams& grads, const SgdConfig& cfg) {
  if (!grads.same_shapes(state.params) || !state.velocity.same_shapes(state.params))
    throw DimensionError("sgd_step: gradient shapes do not match parameters");
  for (std::size_t l = 0; l < state.params.layers.size(); ++l) {
    auto& p = state.params.layers[l];
    if (!p.has_params()) continue;
    auto& v = state.velocity.layers[l];
    const auto& g = grads.layers[l];
    auto update = [&](Tensor& theta, Tensor& vel, const Tensor& grad) {
      for (std::size_t k = 0; k < theta.size(); ++k) {
        vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * grad[k];
        theta[k] += vel[k];
      }
    };
    update(p.weight, v.weight, g.weight);
    update(p.bias, v.bias, g.bias);
  }
  ++state.global_iteration;
}

struct IterationEvent {
  std::int64_t iteration = 0;
  std::size_t epoch = 0;  // 0-based epoch being run
  std::vector<double> computed_mad;
  std::vector<double> effective_mad;
  double batch_loss = 0.0;
};

using ValidationMetric = std::function<double(const Tensor& pred, const Tensor& truth)>;

struct TrainHooks {
  std::function<void(const IterationEvent&)> on_iteration;
  /// Defaults to MPE over the validation set's frame (MAE for odd-width targets).
  ValidationMetric metric;
};

inline ValidationMetric default_metric(const Dataset& data) {
  if (data.output_dim % 2 == 0) {
    const Frame frame = data.frame;
    return [frame](const Tensor& p, const Tensor& t) { return mpe(p, t, frame); };
  }
  return [](const Tensor& p, const Tensor& t) { return mae(p, t); };
}

/// Runs SGD until max_epochs or until the validation error has not improved
/// for early_stop_patience epochs. The returned state holds the parameters of
/// the best validation epoch. An empty validation set falls back to the
/// training set.
inline TrainState train(const Dataset& train_set, const Dataset& val_set, const NetworkSpec& spec,
                        const LossSpec& loss, const SgdConfig& cfg, Rng& rng,
                        const TrainHooks& hooks = {}) {
  if (train_set.empty()) throw ArgumentError("train: empty training set");
  loss.validate();
  cfg.validate();
  if (spec.output_dim() != train_set.output_dim)
    throw ConfigError("train: network produces " + std::to_string(spec.output_dim()) +
                      " outputs, targets have " + std::to_string(train_set.output_dim));

  const Dataset& selection = val_set.empty() ? train_set : val_set;
  const ValidationMetric metric = hooks.metric ? hooks.metric : default_metric(selection);
  const Tensor train_x = train_set.all_inputs();
  const Tensor train_y = train_set.all_targets();
  const Tensor val_x = selection.all_inputs();
  const Tensor val_y = selection.all_targets();
  const bool tukey = loss.kind == LossKind::TukeyBiweight;

  TrainState state(init_params(spec, rng));
  NetworkParams best = state.params;
  std::size_t stale = 0;
  std::vector<std::size_t> order = train_set.all_indices();

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    state.epoch = epoch;
    if (tukey && cfg.mad_cadence == MadCadence::PerEpoch) {
      const Tensor pred = predict(state.params, spec, train_x);
      state.mad.mad = compute_mad(residuals(train_y, pred)).mad;
    }
    rng.shuffle(order);
    double loss_sum = 0.0;
    double mad_at_start = std::numeric_limits<double>::quiet_NaN();

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = train_set.inputs(idx);
      const Tensor y = train_set.targets(idx);

      ForwardResult fwd = forward(state.params, spec, x, Mode::Train, rng);
      if (tukey && cfg.mad_cadence == MadCadence::PerBatch)
        state.mad.mad = compute_mad(residuals(y, fwd.output)).mad;
      state.mad.iteration = state.global_iteration;

      const double batch_loss = objective(y, fwd.output, state.mad, loss);
      if (!std::isfinite(batch_loss))
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch + 1) +
                                   ", iteration " + std::to_string(state.global_iteration),
                               epoch);
      if (tukey && start == 0) mad_at_start = median(state.mad.effective_all(loss));
      if (hooks.on_iteration) {
        IterationEvent ev;
        ev.iteration = state.global_iteration;
        ev.epoch = epoch;
        ev.batch_loss = batch_loss;
        if (tukey) {
          ev.computed_mad = state.mad.mad;
          ev.effective_mad = state.mad.effective_all(loss);
        }
        hooks.on_iteration(ev);
      }
      loss_sum += batch_loss * static_cast<double>(idx.size());

      const Tensor grad_out = objective_grad(y, fwd.output, state.mad, loss);
      const NetworkParams grads = backward(state.params, spec, fwd.cache, grad_out);
      sgd_step(state, grads, cfg);
    }
    if (!state.params.all_finite())
      throw TrainingDiverged("parameters became non-finite during epoch " + std::to_string(epoch + 1),
                             epoch);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_error = metric(predict(state.params, spec, val_x), val_y);
    rec.effective_mad_median = mad_at_start;
    if (!std::isfinite(rec.val_error))
      throw TrainingDiverged("non-finite validation error at epoch " + std::to_string(epoch + 1),
                             epoch);
    state.history.push_back(rec);

    if (rec.val_error < state.best_val_error) {
      state.best_val_error = rec.val_error;
      state.best_epoch = rec.epoch;
      best = state.params;
      stale = 0;
    } else if (++stale >= cfg.early_stop_patience) {
      break;
    }
  }
  state.params = std::move(best);
  return state;
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Shuffled partition into k folds; the first n % k folds hold one extra sample.
inline std::vector<Fold> kfold_split(std::size_t n, std::size_t k, Rng& rng) {
  if (k < 2) throw ArgumentError("kfold_split: k must be >= 2");
  if (k > n) throw ArgumentError("kfold_split: k exceeds dataset size");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].validation.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                               order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t g = 0; g < k; ++g)
      if (g != f)
        folds[f].train.insert(folds[f].train.end(), folds[g].validation.begin(),
                              folds[g].validation.end());
    std::sort(folds[f].train.begin(), folds[f].train.end());
    std::sort(folds[f].validation.begin(), folds[f].validation.end());
  }
  return folds;
}

struct CrossValidationResult {
  std::vector<std::size_t> best_epochs;
  std::vector<double> best_errors;
  double mean_error = 0.0;
  /// Rounded mean of the per-fold early-stopping epochs.
  std::size_t suggested_epochs = 0;
};

/// k-fold cross-validation with early stopping inside each fold.
inline CrossValidationResult cross_validate(const Dataset& data, std::size_t k,
                                            const NetworkSpec& spec, const LossSpec& loss,
                                            const SgdConfig& cfg, Rng& rng) {
  CrossValidationResult out;
  double epoch_sum = 0.0;
  for (const Fold& fold : kfold_split(data.size(), k, rng)) {
    const TrainState st =
        train(data.subset(fold.train), data.subset(fold.validation), spec, loss, cfg, rng);
    out.best_epochs.push_back(st.best_epoch);
    out.best_errors.push_back(st.best_val_error);
    out.mean_error += st.best_val_error / static_cast<double>(k);
    epoch_sum += static_cast<double>(st.best_epoch);
  }
  out.suggested_epochs = static_cast<std::size_t>(std::llround(epoch_sum / static_cast<double>(k)));
  return out;
}

}  // namespace robreg
