#pragma once

// Tukey's biweight M-estimator on MAD-scaled residuals, and the plain L2
// baseline it is compared against.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robreg/errors.hpp"
#include "robreg/numerics.hpp"

namespace robreg {

/// Tuning constant giving ~95% asymptotic efficiency under unit-variance normal residuals.
inline constexpr double kTukeyC = 4.6851;
/// Makes MAD a consistent estimator of the standard deviation for normal data.
inline constexpr double kMadConsistency = 1.4826;
inline constexpr double kDefaultMadFloor = 1e-8;

enum class LossKind { L2, TukeyBiweight };

inline const char* to_string(LossKind k) { return k == LossKind::L2 ? "l2" : "tukey"; }

struct LossSpec {
  LossKind kind = LossKind::TukeyBiweight;
  double c = kTukeyC;
  /// MAD is multiplied by this for the first `warmup_iters` global iterations.
  double warmup_factor = 7.0;
  std::int64_t warmup_iters = 50;

  void validate() const {
    if (!(c > 0.0)) throw ConfigError("loss: tuning constant c must be positive");
    if (!(warmup_factor >= 1.0)) throw ConfigError("loss: warmup_factor must be >= 1");
    if (warmup_iters < 0) throw ConfigError("loss: warmup_iters must be non-negative");
  }

  double warmup_multiplier(std::int64_t iteration) const {
    return iteration < warmup_iters ? warmup_factor : 1.0;
  }
};

/// Per-output robust scale plus the global iteration it is being applied at.
struct MadScale {
  std::vector<double> mad;
  double epsilon_floor = kDefaultMadFloor;
  std::int64_t iteration = 0;

  std::size_t size() const noexcept { return mad.size(); }

  /// max(MAD_i, floor), times the warm-up multiplier when it is active.
  double effective(std::size_t i, const LossSpec& spec) const {
    return std::max(mad[i], epsilon_floor) * spec.warmup_multiplier(iteration);
  }

  std::vector<double> effective_all(const LossSpec& spec) const {
    std::vector<double> out(mad.size());
    for (std::size_t i = 0; i < mad.size(); ++i) out[i] = effective(i, spec);
    return out;
  }
};

/// S x N matrix of y - y_hat.
struct ResidualBatch {
  Tensor values;

  std::size_t samples() const { return values.dim(0); }
  std::size_t outputs() const { return values.dim(1); }
};

namespace detail {

inline void require_same_batch(const Tensor& targets, const Tensor& predictions) {
  if (targets.rank() != 2 || targets.shape() != predictions.shape())
    throw DimensionError("targets " + shape_str(targets.shape()) + " and predictions " +
                         shape_str(predictions.shape()) + " must be equal S x N matrices");
}

inline void require_mad(const MadScale& mad, std::size_t n) {
  if (mad.size() != n)
    throw DimensionError("MAD has " + std::to_string(mad.size()) + " entries, expected " +
                         std::to_string(n));
}

}  // namespace detail

inline ResidualBatch residuals(const Tensor& targets, const Tensor& predictions) {
  detail::require_same_batch(targets, predictions);
  Tensor r = Tensor::zeros_like(targets);
  for (std::size_t k = 0; k < r.size(); ++k) r[k] = targets[k] - predictions[k];
  return {std::move(r)};
}

inline double tukey_rho(double r, double c) {
  const double saturated = c * c / 6.0;
  if (std::abs(r) > c) return saturated;
  // 1 - (1 - x)^3 expanded, which stays accurate for tiny x.
  const double x = (r / c) * (r / c);
  return saturated * x * (3.0 - 3.0 * x + x * x);
}

/// d rho / d r. Redescends to exactly zero at and beyond |r| = c.
inline double tukey_psi(double r, double c) {
  if (std::abs(r) >= c) return 0.0;
  const double u = 1.0 - (r / c) * (r / c);
  return r * u * u;
}

/// Median of a copy of `values`; an even count averages the two middle order statistics.
inline double median(std::vector<double> values) {
  if (values.empty()) throw ArgumentError("median of an empty sequence");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

/// Column-wise median absolute deviation from the column median.
inline MadScale compute_mad(const ResidualBatch& batch) {
  if (batch.values.rank() != 2 || batch.values.empty())
    throw ArgumentError("compute_mad: residual batch is empty");
  const std::size_t s_count = batch.samples();
  const std::size_t n = batch.outputs();
  MadScale out;
  out.mad.resize(n);
  std::vector<double> column(s_count);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < s_count; ++s) column[s] = batch.values.at(s, i);
    const double med = median(column);
    for (double& v : column) v = std::abs(v - med);
    out.mad[i] = median(column);
  }
  return out;
}

/// 1.4826 * max(mad, floor) * w, with w the warm-up multiplier at `iteration`.
inline double residual_scale(double mad_i, const LossSpec& spec, std::int64_t iteration,
                             double epsilon_floor = kDefaultMadFloor) {
  return kMadConsistency * std::max(mad_i, epsilon_floor) * spec.warmup_multiplier(iteration);
}

inline double scale_residual(double r, double mad_i, const LossSpec& spec,
                             std::int64_t iteration, double epsilon_floor = kDefaultMadFloor) {
  return r / residual_scale(mad_i, spec, iteration, epsilon_floor);
}

/// Mean over samples of the summed per-output loss.
inline double objective(const Tensor& targets, const Tensor& predictions, const MadScale& mad,
                        const LossSpec& spec) {
  detail::require_same_batch(targets, predictions);
  const std::size_t s_count = targets.dim(0), n = targets.dim(1);
  double total = 0.0;
  if (spec.kind == LossKind::L2) {
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const double r = targets[k] - predictions[k];
      total += 0.5 * r * r;
    }
    return total / static_cast<double>(s_count);
  }
  detail::require_mad(mad, n);
  for (std::size_t s = 0; s < s_count; ++s)
    for (std::size_t i = 0; i < n; ++i) {
      const double r = targets.at(s, i) - predictions.at(s, i);
      total += tukey_rho(
          scale_residual(r, mad.mad[i], spec, mad.iteration, mad.epsilon_floor), spec.c);
    }
  return total / static_cast<double>(s_count);
}

/// dE / d y_hat, with MAD held constant.
inline Tensor objective_grad(const Tensor& targets, const Tensor& predictions,
                             const MadScale& mad, const LossSpec& spec) {
  detail::require_same_batch(targets, predictions);
  const std::size_t s_count = targets.dim(0), n = targets.dim(1);
  const double inv_s = 1.0 / static_cast<double>(s_count);
  Tensor grad = Tensor::zeros_like(targets);
  if (spec.kind == LossKind::L2) {
    for (std::size_t k = 0; k < targets.size(); ++k)
      grad[k] = -inv_s * (targets[k] - predictions[k]);
    return grad;
  }
  detail::require_mad(mad, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double scale = residual_scale(mad.mad[i], spec, mad.iteration, mad.epsilon_floor);
    for (std::size_t s = 0; s < s_count; ++s) {
      const double r = targets.at(s, i) - predictions.at(s, i);
      grad.at(s, i) = -inv_s * tukey_psi(r / scale, spec.c) / scale;
    }
  }
  return grad;
}

}  // namespace robreg
