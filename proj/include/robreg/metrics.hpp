#pragma once

// Keypoint evaluation: mean pixel error, mean absolute error, strict/loose
// PCP, and the "epochs to reach the L2 reference error" comparison.

#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robreg/dataset.hpp"
#include "robreg/errors.hpp"
#include "robreg/numerics.hpp"

namespace robreg {

namespace detail {
inline void require_keypoint_batch(const Tensor& pred, const Tensor& truth) {
  if (pred.rank() != 2 || pred.shape() != truth.shape())
    throw DimensionError("prediction " + shape_str(pred.shape()) + " and truth " +
                         shape_str(truth.shape()) + " must be equal S x N matrices");
}

inline double joint_error_px(const Tensor& pred, const Tensor& truth, std::size_t s,
                             std::size_t joint, Frame frame) {
  const double dx = (pred.at(s, 2 * joint) - truth.at(s, 2 * joint)) * frame.width;
  const double dy = (pred.at(s, 2 * joint + 1) - truth.at(s, 2 * joint + 1)) * frame.height;
  return std::sqrt(dx * dx + dy * dy);
}
}  // namespace detail

/// Mean Euclidean pixel distance over samples and joints. Targets are
/// normalised (x, y) pairs; pass Frame{1, 1} for pixel coordinates.
inline double mpe(const Tensor& pred, const Tensor& truth, Frame frame) {
  detail::require_keypoint_batch(pred, truth);
  if (truth.dim(1) % 2 != 0) throw DimensionError("mpe: keypoint vectors need an even length");
  const std::size_t joints = truth.dim(1) / 2;
  double total = 0.0;
  for (std::size_t s = 0; s < truth.dim(0); ++s)
    for (std::size_t j = 0; j < joints; ++j) total += detail::joint_error_px(pred, truth, s, j, frame);
  return total / static_cast<double>(truth.dim(0) * joints);
}

inline double mae(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw DimensionError("mae: shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(truth.shape()) + " differ");
  double total = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) total += std::abs(pred[k] - truth[k]);
  return total / static_cast<double>(pred.size());
}

struct SkeletonDef {
  std::vector<Limb> limbs;

  void validate(std::size_t joints) const {
    for (const auto& l : limbs)
      if (l[0] >= joints || l[1] >= joints || l[0] == l[1])
        throw ArgumentError("skeleton: limb " + std::to_string(l[0]) + "-" + std::to_string(l[1]) +
                            " is invalid for " + std::to_string(joints) + " joints");
  }

  static std::string limb_key(const Limb& l) {
    return std::to_string(l[0]) + "-" + std::to_string(l[1]);
  }
};

enum class PcpVariant { Strict, Loose };

struct PcpResult {
  /// Keyed by "a-b"; limbs that were zero-length in every sample are absent.
  std::map<std::string, double> per_limb;
  double full = 0.0;
  /// (sample, limb) pairs skipped because the ground-truth limb had zero length.
  std::size_t excluded = 0;
};

/// Percentage of correct parts. A limb is correct when both endpoint errors
/// (Strict) or their mean (Loose) are <= threshold * true limb length.
inline PcpResult pcp(const Tensor& pred, const Tensor& truth, const SkeletonDef& skeleton,
                     PcpVariant variant, double threshold = 0.5, Frame frame = {1.0, 1.0}) {
  detail::require_keypoint_batch(pred, truth);
  if (!(threshold > 0.0)) throw ArgumentError("pcp: threshold must be positive");
  const std::size_t joints = truth.dim(1) / 2;
  skeleton.validate(joints);
  PcpResult out;
  double sum = 0.0;
  for (const auto& limb : skeleton.limbs) {
    std::size_t correct = 0, counted = 0;
    for (std::size_t s = 0; s < truth.dim(0); ++s) {
      const double dx = (truth.at(s, 2 * limb[0]) - truth.at(s, 2 * limb[1])) * frame.width;
      const double dy = (truth.at(s, 2 * limb[0] + 1) - truth.at(s, 2 * limb[1] + 1)) * frame.height;
      const double length = std::sqrt(dx * dx + dy * dy);
      if (length == 0.0) {
        ++out.excluded;
        continue;
      }
      const double ea = detail::joint_error_px(pred, truth, s, limb[0], frame);
      const double eb = detail::joint_error_px(pred, truth, s, limb[1], frame);
      const double bound = threshold * length;
      const bool ok = variant == PcpVariant::Strict ? (ea <= bound && eb <= bound)
                                                    : (0.5 * (ea + eb) <= bound);
      correct += ok ? 1 : 0;
      ++counted;
    }
    if (counted == 0) continue;
    const double rate = static_cast<double>(correct) / static_cast<double>(counted);
    out.per_limb[SkeletonDef::limb_key(limb)] = rate;
    sum += rate;
  }
  out.full = out.per_limb.empty() ? 0.0 : sum / static_cast<double>(out.per_limb.size());
  return out;
}

struct MetricReport {
  double mpe = 0.0;
  double mae = 0.0;
  std::optional<PcpResult> pcp_strict;
  std::optional<PcpResult> pcp_loose;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mpe"] = mpe;
    j["mae"] = mae;
    if (pcp_strict && pcp_loose) {
      j["pcp_strict"] = pcp_strict->full;
      j["pcp_loose"] = pcp_loose->full;
      nlohmann::json limbs = nlohmann::json::object();
      for (const auto& [key, rate] : pcp_strict->per_limb)
        limbs[key] = {{"strict", rate}, {"loose", pcp_loose->per_limb.at(key)}};
      j["per_limb"] = limbs;
      j["excluded_limbs"] = pcp_strict->excluded;
    } else {
      j["pcp_strict"] = nullptr;
      j["pcp_loose"] = nullptr;
      j["per_limb"] = nlohmann::json::object();
      j["excluded_limbs"] = 0;
    }
    return j;
  }
};

/// MPE and MAE, plus both PCP variants when a skeleton is supplied.
inline MetricReport evaluate(const Tensor& pred, const Tensor& truth, Frame frame,
                             const SkeletonDef* skeleton = nullptr, double threshold = 0.5) {
  MetricReport r;
  r.mpe = mpe(pred, truth, frame);
  r.mae = mae(pred, truth);
  if (skeleton && !skeleton->limbs.empty()) {
    r.pcp_strict = pcp(pred, truth, *skeleton, PcpVariant::Strict, threshold, frame);
    r.pcp_loose = pcp(pred, truth, *skeleton, PcpVariant::Loose, threshold, frame);
  }
  return r;
}

struct ReachResult {
  double reference_error = 0.0;
  /// 1-based epoch at which history_a attains its minimum.
  std::size_t epoch_a = 0;
  /// 1-based first epoch of history_b at or below the reference, or, when
  /// never reached, the epoch whose error is closest from above.
  std::size_t epoch_b = 0;
  bool reached = false;
};

/// Reference = min(history_a); finds how early history_b matches it.
inline ReachResult epochs_to_reach(std::span<const double> history_a,
                                   std::span<const double> history_b) {
  if (history_a.empty() || history_b.empty())
    throw ArgumentError("epochs_to_reach: empty history");
  ReachResult r;
  r.reference_error = history_a[0];
  r.epoch_a = 1;
  for (std::size_t e = 1; e < history_a.size(); ++e)
    if (history_a[e] < r.reference_error) {
      r.reference_error = history_a[e];
      r.epoch_a = e + 1;
    }
  double closest = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < history_b.size(); ++e) {
    if (history_b[e] <= r.reference_error) {
      r.epoch_b = e + 1;
      r.reached = true;
      return r;
    }
    if (history_b[e] < closest) {
      closest = history_b[e];
      r.epoch_b = e + 1;
    }
  }
  return r;
}

}  // namespace robreg
