#pragma once

// Synthetic regression tasks with controllable outlier contamination, plus
// augmentation (rotation, flip, target noise) and mean-input normalisation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "robreg/dataset.hpp"
#include "robreg/errors.hpp"
#include "robreg/image.hpp"
#include "robreg/numerics.hpp"

namespace robreg {

// ----------------------------------------------------------------------------
// Linear task
// ----------------------------------------------------------------------------

/// y = offset + A x. Rows of A have L1 norm `spread`, so for x in [-1, 1]^d
/// every target stays inside [offset - spread, offset + spread].
struct LinearMap {
  Tensor weights;  // [N, d]
  std::vector<double> offset;

  std::size_t input_dim() const { return weights.dim(1); }
  std::size_t output_dim() const { return weights.dim(0); }

  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> y(offset);
    for (std::size_t i = 0; i < output_dim(); ++i)
      for (std::size_t j = 0; j < input_dim(); ++j) y[i] += weights.at(i, j) * x[j];
    return y;
  }
};

inline LinearMap gen_linear_map(std::size_t input_dim, std::size_t output_dim, Rng& rng,
                                double spread = 0.4) {
  if (input_dim == 0 || output_dim == 0) throw ArgumentError("linear map needs positive dims");
  LinearMap map{Tensor({output_dim, input_dim}), std::vector<double>(output_dim, 0.5)};
  for (std::size_t i = 0; i < output_dim; ++i) {
    double l1 = 0.0;
    for (std::size_t j = 0; j < input_dim; ++j) {
      map.weights.at(i, j) = rng.uniform(-1.0, 1.0);
      l1 += std::abs(map.weights.at(i, j));
    }
    for (std::size_t j = 0; j < input_dim; ++j) map.weights.at(i, j) *= spread / l1;
  }
  return map;
}

/// S samples with inputs uniform in [-1, 1]^d and targets map(x) + N(0, noise^2), clamped to [0, 1].
inline Dataset sample_linear_task(const LinearMap& map, std::size_t count, double noise_sigma,
                                  Rng& rng, Frame frame = {100.0, 100.0}) {
  if (count == 0) throw ArgumentError("sample_linear_task: S must be >= 1");
  Dataset data;
  data.input_shape = {map.input_dim()};
  data.output_dim = map.output_dim();
  data.frame = frame;
  data.samples.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    Sample sample;
    sample.input = Tensor({map.input_dim()});
    for (double& v : sample.input.data()) v = rng.uniform(-1.0, 1.0);
    sample.target = map.apply(sample.input.data());
    if (noise_sigma > 0.0)
      for (double& t : sample.target) t = std::clamp(t + noise_sigma * rng.normal(), 0.0, 1.0);
    data.samples.push_back(std::move(sample));
  }
  return data;
}

struct LinearTask {
  Dataset data;
  LinearMap map;
};

inline LinearTask gen_linear_task(std::size_t count, std::size_t input_dim, std::size_t output_dim,
                                  double noise_sigma, Rng& rng) {
  LinearMap map = gen_linear_map(input_dim, output_dim, rng);
  Dataset data = sample_linear_task(map, count, noise_sigma, rng);
  return {std::move(data), std::move(map)};
}

// ----------------------------------------------------------------------------
// Articulated stick figures
// ----------------------------------------------------------------------------

struct ArticulatedFigureSpec {
  std::size_t joints = 6;
  /// parents[j] is the parent joint of j, or -1 for the root. Empty means the default tree.
  std::vector<int> parents;
  double bone_min = 8.0;
  double bone_max = 16.0;
  /// Maximum bend of a bone relative to its parent's direction.
  double max_bend = 2.0 * std::numbers::pi / 3.0;
  std::size_t render_size = 64;
  double thickness = 1.5;
  /// Keypoints are kept at least this far (pixels) from the border.
  double border = 2.0;

  /// Default topology: pelvis(0) -> neck(1) -> {head(2), hand(3)}, pelvis -> {foot(4), foot(5)}.
  /// Other joint counts fall back to a chain.
  std::vector<int> resolved_parents() const {
    if (!parents.empty()) return parents;
    if (joints == 6) return {-1, 0, 1, 1, 0, 0};
    std::vector<int> p(joints);
    for (std::size_t j = 0; j < joints; ++j) p[j] = static_cast<int>(j) - 1;
    return p;
  }

  std::vector<Limb> limbs() const {
    std::vector<Limb> out;
    const auto p = resolved_parents();
    for (std::size_t j = 0; j < p.size(); ++j)
      if (p[j] >= 0) out.push_back({static_cast<std::size_t>(p[j]), j});
    return out;
  }

  void validate() const {
    const auto p = resolved_parents();
    if (joints == 0 || p.size() != joints) throw ConfigError("figure: parents must list every joint");
    for (std::size_t j = 0; j < joints; ++j)
      if (p[j] >= static_cast<int>(j) || (j == 0) != (p[j] < 0))
        throw ConfigError("figure: joint 0 must be the only root and parents must precede children");
    if (bone_min < 0.0 || bone_max < bone_min) throw ConfigError("figure: bad bone length range");
    if (render_size < 8 || thickness <= 0.0) throw ConfigError("figure: bad render settings");
    if (2.0 * border >= static_cast<double>(render_size)) throw ConfigError("figure: border too wide");
  }
};

/// Distance from point p to the segment ab.
inline double point_segment_distance(double px, double py, double ax, double ay, double bx,
                                     double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

/// Grey level of the bone ending at joint j (1 .. J-1). Distinct levels keep
/// joints identifiable when the skeleton topology is symmetric.
inline double bone_shade(std::size_t j, std::size_t joints) {
  if (joints <= 2) return 1.0;
  return 1.0 - 0.6 * static_cast<double>(j - 1) / static_cast<double>(joints - 2);
}

/// Anti-aliased line drawing of the skeleton; joint positions in pixels. Each
/// pixel takes the brightest bone covering it.
inline Tensor render_figure(const std::vector<double>& joints_px, const std::vector<int>& parents,
                            std::size_t size, double thickness) {
  Tensor img({1, size, size});
  const double half = thickness / 2.0;
  const std::size_t joints = parents.size();
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      const double px = static_cast<double>(c) + 0.5, py = static_cast<double>(r) + 0.5;
      double value = 0.0;
      for (std::size_t j = 0; j < joints; ++j) {
        const std::size_t a = parents[j] >= 0 ? static_cast<std::size_t>(parents[j]) : j;
        const double d = point_segment_distance(px, py, joints_px[2 * a], joints_px[2 * a + 1],
                                                joints_px[2 * j], joints_px[2 * j + 1]);
        const double shade = parents[j] >= 0 ? bone_shade(j, joints) : 1.0;
        value = std::max(value, shade * std::clamp(half + 0.5 - d, 0.0, 1.0));
      }
      img[r * size + c] = value;
    }
  return img;
}

namespace detail {

inline std::vector<double> random_pose(const ArticulatedFigureSpec& spec,
                                       const std::vector<int>& parents, Rng& rng) {
  const double size = static_cast<double>(spec.render_size);
  std::vector<double> px(2 * spec.joints, 0.0);
  std::vector<double> angle(spec.joints, 0.0);
  const double up = -std::numbers::pi / 2.0;
  for (std::size_t j = 1; j < spec.joints; ++j) {
    const auto p = static_cast<std::size_t>(parents[j]);
    const double base = p == 0 ? up + rng.uniform(-std::numbers::pi, std::numbers::pi)
                               : angle[p] + rng.uniform(-spec.max_bend, spec.max_bend);
    angle[j] = base;
    const double len = rng.uniform(spec.bone_min, spec.bone_max);
    px[2 * j] = px[2 * p] + len * std::cos(base);
    px[2 * j + 1] = px[2 * p + 1] + len * std::sin(base);
  }
  // Fit the figure inside the usable area: shrink if needed, then place at random.
  double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
  for (std::size_t j = 0; j < spec.joints; ++j) {
    min_x = std::min(min_x, px[2 * j]);
    max_x = std::max(max_x, px[2 * j]);
    min_y = std::min(min_y, px[2 * j + 1]);
    max_y = std::max(max_y, px[2 * j + 1]);
  }
  const double usable = size - 2.0 * spec.border;
  const double extent = std::max(max_x - min_x, max_y - min_y);
  const double shrink = extent > usable ? usable / extent : 1.0;
  const double w = (max_x - min_x) * shrink, h = (max_y - min_y) * shrink;
  const double ox = spec.border + rng.uniform(0.0, usable - w);
  const double oy = spec.border + rng.uniform(0.0, usable - h);
  for (std::size_t j = 0; j < spec.joints; ++j) {
    px[2 * j] = ox + (px[2 * j] - min_x) * shrink;
    px[2 * j + 1] = oy + (px[2 * j + 1] - min_y) * shrink;
  }
  return px;
}

}  // namespace detail

/// Random skeletons rendered at render_size^2; targets are joint coordinates / render_size.
inline Dataset gen_figure_task(const ArticulatedFigureSpec& spec, std::size_t count, Rng& rng) {
  spec.validate();
  const auto parents = spec.resolved_parents();
  const double size = static_cast<double>(spec.render_size);
  Dataset data;
  data.input_shape = {1, spec.render_size, spec.render_size};
  data.output_dim = 2 * spec.joints;
  data.frame = {size, size};
  data.limbs = spec.limbs();
  data.samples.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const auto px = detail::random_pose(spec, parents, rng);
    Sample sample;
    sample.input = render_figure(px, parents, spec.render_size, spec.thickness);
    sample.target.resize(px.size());
    for (std::size_t k = 0; k < px.size(); ++k) sample.target[k] = std::clamp(px[k] / size, 0.0, 1.0);
    data.samples.push_back(std::move(sample));
  }
  return data;
}

// ----------------------------------------------------------------------------
// Outliers
// ----------------------------------------------------------------------------

enum class OutlierMechanism { TargetCorruption, AnnotationJitter };

struct OutlierConfig {
  double fraction = 0.0;
  OutlierMechanism mechanism = OutlierMechanism::TargetCorruption;
  std::uint64_t seed = 0;
  /// Cauchy scale for AnnotationJitter, in normalised target units.
  double jitter_scale = 0.1;
};

/// Corrupts exactly round(fraction * S) samples, chosen uniformly without replacement.
inline Dataset inject_outliers(Dataset data, const OutlierConfig& cfg) {
  if (!(cfg.fraction >= 0.0 && cfg.fraction < 1.0))
    throw ArgumentError("inject_outliers: fraction must lie in [0, 1)");
  const auto count = static_cast<std::size_t>(
      std::llround(cfg.fraction * static_cast<double>(data.size())));
  if (count == 0) return data;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order = data.all_indices();
  // partial Fisher-Yates: the first `count` entries are the chosen samples
  for (std::size_t i = 0; i < count; ++i)
    std::swap(order[i], order[i + rng.below(order.size() - i)]);
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  for (std::size_t k = 0; k < count; ++k) {
    Sample& s = data.samples[order[k]];
    s.is_outlier = true;
    for (double& t : s.target) {
      if (cfg.mechanism == OutlierMechanism::TargetCorruption) {
        t = rng.uniform();
      } else {
        const double cauchy = std::tan(std::numbers::pi * (rng.uniform() - 0.5));
        t = std::clamp(t + cfg.jitter_scale * cauchy, 0.0, 1.0);
      }
    }
  }
  return data;
}

// ----------------------------------------------------------------------------
// Augmentation
// ----------------------------------------------------------------------------

/// Rotates keypoint pairs about the frame centre, matching rotate_image().
inline std::vector<double> rotate_keypoints(std::span<const double> target, double radians,
                                            Frame frame) {
  const double cx = frame.width / 2.0, cy = frame.height / 2.0;
  const double cs = std::cos(radians), sn = std::sin(radians);
  std::vector<double> out(target.begin(), target.end());
  for (std::size_t k = 0; k + 1 < out.size(); k += 2) {
    const double dx = target[k] * frame.width - cx, dy = target[k + 1] * frame.height - cy;
    out[k] = (cx + cs * dx - sn * dy) / frame.width;
    out[k + 1] = (cy + sn * dx + cs * dy) / frame.height;
  }
  return out;
}

inline std::vector<double> flip_keypoints(std::span<const double> target) {
  std::vector<double> out(target.begin(), target.end());
  for (std::size_t k = 0; k + 1 < out.size(); k += 2) out[k] = 1.0 - out[k];
  return out;
}

struct AugmentOptions {
  double max_rotation_deg = 30.0;
  double flip_probability = 0.5;
};

/// Originals followed by `copies` random variants of each sample. Image inputs
/// are rotated/flipped together with their keypoints; every variant's targets
/// get N(0, noise^2) added and are clamped to [0, 1].
inline Dataset augment(const Dataset& data, std::size_t copies, double noise_sigma, Rng& rng,
                       const AugmentOptions& opts = {}) {
  if (copies == 0) return data;
  const bool geometric = opts.max_rotation_deg > 0.0 || opts.flip_probability > 0.0;
  if (geometric && !is_image_shape(data.input_shape))
    throw ConfigError("augment: rotation/flip requested for non-image inputs");
  Dataset out = data;
  out.samples.reserve(data.size() * (copies + 1));
  const double max_rad = opts.max_rotation_deg * std::numbers::pi / 180.0;
  for (const Sample& s : data.samples)
    for (std::size_t c = 0; c < copies; ++c) {
      Sample v = s;
      if (geometric) {
        const double angle = rng.uniform(-max_rad, max_rad);
        if (angle != 0.0) {
          v.input = rotate_image(v.input, angle);
          v.target = rotate_keypoints(v.target, angle, data.frame);
        }
        if (rng.bernoulli(opts.flip_probability)) {
          v.input = flip_image_horizontal(v.input);
          v.target = flip_keypoints(v.target);
        }
      }
      for (double& t : v.target) t = std::clamp(t + noise_sigma * rng.normal(), 0.0, 1.0);
      out.samples.push_back(std::move(v));
    }
  return out;
}

// ----------------------------------------------------------------------------
// Normalisation
// ----------------------------------------------------------------------------

struct InputMean {
  Tensor mean;

  void apply(Dataset& data) const {
    for (auto& s : data.samples) {
      if (s.input.shape() != mean.shape()) throw DimensionError("input mean shape mismatch");
      for (std::size_t k = 0; k < s.input.size(); ++k) s.input[k] -= mean[k];
    }
  }
};

struct NormalizedDataset {
  Dataset data;
  InputMean mean;
};

/// Subtracts the training-set mean input; reuse `mean.apply` on held-out data.
inline NormalizedDataset normalize_inputs(Dataset data) {
  if (data.empty()) throw ArgumentError("normalize_inputs: empty dataset");
  Tensor mean(data.input_shape);
  for (const auto& s : data.samples)
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += s.input[k];
  for (double& m : mean.data()) m /= static_cast<double>(data.size());
  InputMean record{std::move(mean)};
  record.apply(data);
  return {std::move(data), std::move(record)};
}

}  // namespace robreg
