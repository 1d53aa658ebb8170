#pragma once

// Coarse-to-fine cascade: a stage-1 network predicts every output from a
// downsampled image; C refiners each predict an output subset from a crop
// placed around the stage-1 keypoints; overlapping refinements are averaged
// with weights 1 / z_i, where z_i counts the subsets containing output i.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "robreg/datagen.hpp"
#include "robreg/dataset.hpp"
#include "robreg/errors.hpp"
#include "robreg/image.hpp"
#include "robreg/metrics.hpp"
#include "robreg/network.hpp"
#include "robreg/optimizer.hpp"
#include "robreg/robust_loss.hpp"

namespace robreg {

/// Axis-aligned crop in source-image pixel units.
struct CropBox {
  double x0 = 0.0, y0 = 0.0, w = 0.0, h = 0.0;
};

/// Maps normalised image coordinates to crop-local [0, 1] coordinates:
/// local = scale * global + offset, separately for x and y.
struct CropTransform {
  double sx = 1.0, ox = 0.0, sy = 1.0, oy = 0.0;

  static CropTransform from_box(const CropBox& box, Frame frame) {
    return {frame.width / box.w, -box.x0 / box.w, frame.height / box.h, -box.y0 / box.h};
  }

  bool is_identity() const { return sx == 1.0 && ox == 0.0 && sy == 1.0 && oy == 0.0; }

  /// Output element `index` is an x coordinate when even, y when odd.
  double to_local(std::size_t index, double v) const {
    return index % 2 == 0 ? sx * v + ox : sy * v + oy;
  }
  double to_global(std::size_t index, double v) const {
    return index % 2 == 0 ? (v - ox) / sx : (v - oy) / sy;
  }
};

struct RegionSpec;

/// Maps a stage-1 prediction to an unclamped crop box for one region.
using CropRule = std::function<CropBox(std::span<const double> yhat, std::size_t region,
                                       const RegionSpec& spec, Frame frame)>;

struct RegionSpec {
  /// l^c: output indices refined by region c.
  std::vector<std::vector<std::size_t>> subsets;
  /// Fraction of the keypoint bounding box added on each side.
  double margin = 0.25;
  /// Smallest crop side, in source pixels, before clamping.
  double min_extent = 8.0;
  std::size_t input_h = 24, input_w = 24;
  /// Empty means bbox_crop_rule.
  CropRule crop_rule;

  std::size_t regions() const noexcept { return subsets.size(); }

  /// z_i = number of subsets containing i.
  std::vector<std::size_t> multiplicity(std::size_t n) const {
    std::vector<std::size_t> z(n, 0);
    for (const auto& subset : subsets)
      for (auto i : subset) {
        if (i >= n) throw ConfigError("cascade: subset index " + std::to_string(i) + " >= N");
        ++z[i];
      }
    return z;
  }

  /// Every subset non-empty and duplicate-free, and every output covered.
  void validate(std::size_t n) const {
    if (subsets.empty()) throw ConfigError("cascade: no regions defined");
    for (std::size_t c = 0; c < subsets.size(); ++c) {
      if (subsets[c].empty()) throw ConfigError("cascade: subset " + std::to_string(c) + " is empty");
      std::set<std::size_t> uniq(subsets[c].begin(), subsets[c].end());
      if (uniq.size() != subsets[c].size())
        throw ConfigError("cascade: subset " + std::to_string(c) + " repeats an index");
    }
    const auto z = multiplicity(n);
    for (std::size_t i = 0; i < n; ++i)
      if (z[i] == 0) throw ConfigError("cascade: output " + std::to_string(i) + " is in no subset");
    if (!(margin >= 0.0) || input_h == 0 || input_w == 0)
      throw ConfigError("cascade: bad margin or refiner input size");
  }
};

/// Bounding box of the region's predicted keypoints grown by `margin` on each
/// side and to at least `min_extent`. Not yet clamped.
inline CropBox bbox_crop_rule(std::span<const double> yhat, std::size_t region,
                              const RegionSpec& spec, Frame frame) {
  std::set<std::size_t> joints;
  for (auto i : spec.subsets.at(region)) joints.insert(i / 2);
  double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
  for (auto j : joints) {
    if (2 * j + 1 >= yhat.size()) throw DimensionError("crop rule: subset exceeds prediction");
    const double x = yhat[2 * j] * frame.width, y = yhat[2 * j + 1] * frame.height;
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  double w = max_x - min_x, h = max_y - min_y;
  double x0 = min_x - spec.margin * w, y0 = min_y - spec.margin * h;
  w *= 1.0 + 2.0 * spec.margin;
  h *= 1.0 + 2.0 * spec.margin;
  if (w < spec.min_extent) {
    x0 -= (spec.min_extent - w) / 2.0;
    w = spec.min_extent;
  }
  if (h < spec.min_extent) {
    y0 -= (spec.min_extent - h) / 2.0;
    h = spec.min_extent;
  }
  return {x0, y0, w, h};
}

/// Always the whole image.
inline CropBox full_image_crop_rule(std::span<const double>, std::size_t, const RegionSpec&,
                                    Frame frame) {
  return {0.0, 0.0, frame.width, frame.height};
}

inline CropBox clamp_box(const CropBox& box, Frame frame) {
  const double x0 = std::clamp(box.x0, 0.0, frame.width);
  const double y0 = std::clamp(box.y0, 0.0, frame.height);
  const double x1 = std::clamp(box.x0 + box.w, 0.0, frame.width);
  const double y1 = std::clamp(box.y0 + box.h, 0.0, frame.height);
  return {x0, y0, x1 - x0, y1 - y0};
}

struct RegionCrop {
  Tensor image;
  CropBox box;
  CropTransform transform;
  /// The clamped box had zero area; the whole image was used instead.
  bool fallback = false;
};

inline Frame image_frame(const Tensor& image) {
  return {static_cast<double>(image_width(image)), static_cast<double>(image_height(image))};
}

/// Crops region `region` of `image` around the stage-1 prediction and resamples
/// it to the refiner input size.
inline RegionCrop extract_region(const Tensor& image, std::span<const double> yhat,
                                 std::size_t region, const RegionSpec& spec) {
  if (!is_image_shape(image.shape())) throw DimensionError("extract_region: expected a [1,H,W] image");
  const Frame frame = image_frame(image);
  const CropBox raw = spec.crop_rule ? spec.crop_rule(yhat, region, spec, frame)
                                     : bbox_crop_rule(yhat, region, spec, frame);
  RegionCrop out;
  out.box = clamp_box(raw, frame);
  if (!(out.box.w > 0.0 && out.box.h > 0.0)) {
    out.box = {0.0, 0.0, frame.width, frame.height};
    out.fallback = true;
  }
  out.transform = CropTransform::from_box(out.box, frame);
  out.image = resample_box(image, out.box.x0, out.box.y0, out.box.w, out.box.h, spec.input_h,
                           spec.input_w);
  return out;
}

/// Targets of `subset` expressed in the crop's local coordinates (not clamped).
inline std::vector<double> local_targets(std::span<const double> target,
                                         std::span<const std::size_t> subset,
                                         const CropTransform& t) {
  std::vector<double> out(subset.size());
  for (std::size_t k = 0; k < subset.size(); ++k) out[k] = t.to_local(subset[k], target[subset[k]]);
  return out;
}

/// diag(z)^-1 * sum_c outputs[c], where each outputs[c] is length N and zero
/// outside its subset.
inline std::vector<double> merge_refinements(const std::vector<std::vector<double>>& outputs,
                                             std::span<const std::size_t> z) {
  std::vector<double> merged(z.size(), 0.0);
  for (const auto& o : outputs) {
    if (o.size() != z.size()) throw DimensionError("merge_refinements: output length mismatch");
    for (std::size_t i = 0; i < z.size(); ++i) merged[i] += o[i];
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i] == 0) throw ConfigError("merge_refinements: output " + std::to_string(i) + " uncovered");
    merged[i] /= static_cast<double>(z[i]);
  }
  return merged;
}

struct TrainedNetwork {
  NetworkSpec spec;
  NetworkParams params;
  std::optional<InputMean> mean;
  bool trained = false;

  /// Infer-mode predictions for a batch of already-shaped inputs.
  Tensor run(std::vector<Tensor> inputs) const {
    if (!trained) throw StateError("network has not been trained");
    if (inputs.empty()) return Tensor();
    Shape shape{inputs.size()};
    shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
    Tensor x(shape);
    const std::size_t stride = shape_size(spec.input_shape);
    for (std::size_t b = 0; b < inputs.size(); ++b) {
      if (inputs[b].size() != stride) throw DimensionError("network input size mismatch");
      for (std::size_t k = 0; k < stride; ++k)
        x[b * stride + k] = inputs[b][k] - (mean ? mean->mean[k] : 0.0);
    }
    return predict(params, spec, x);
  }
};

struct CascadeModel {
  TrainedNetwork stage1;
  std::vector<TrainedNetwork> refiners;
  RegionSpec regions;
};

struct CascadeOutput {
  Tensor stage1;   // [S, N]
  Tensor refined;  // [S, N]
  std::size_t fallbacks = 0;
};

/// Stage-1 input view of a full-resolution image.
inline Tensor stage1_view(const Tensor& image, const NetworkSpec& spec) {
  if (image.shape() == spec.input_shape) return image;
  if (!is_image_shape(spec.input_shape))
    throw DimensionError("stage-1 network does not take images");
  return resize_image(image, spec.input_shape[1], spec.input_shape[2]);
}

/// Runs stage 1 and every refiner over `images`, merging refinements per output.
inline CascadeOutput refine(std::span<const Tensor> images, const CascadeModel& model) {
  if (!model.stage1.trained) throw StateError("cascade: stage-1 network is untrained");
  if (model.refiners.size() != model.regions.regions())
    throw StateError("cascade: expected " + std::to_string(model.regions.regions()) +
                     " refiners, have " + std::to_string(model.refiners.size()));
  for (std::size_t c = 0; c < model.refiners.size(); ++c)
    if (!model.refiners[c].trained)
      throw StateError("cascade: refiner " + std::to_string(c) + " is untrained");
  const std::size_t n = model.stage1.spec.output_dim();
  model.regions.validate(n);
  const auto z = model.regions.multiplicity(n);

  CascadeOutput out;
  std::vector<Tensor> views;
  views.reserve(images.size());
  for (const auto& img : images) views.push_back(stage1_view(img, model.stage1.spec));
  out.stage1 = model.stage1.run(std::move(views));
  out.refined = Tensor({images.size(), n});

  std::vector<std::vector<std::vector<double>>> per_region(
      images.size(), std::vector<std::vector<double>>(model.regions.regions(), std::vector<double>(n, 0.0)));
  for (std::size_t c = 0; c < model.regions.regions(); ++c) {
    const auto& subset = model.regions.subsets[c];
    std::vector<Tensor> crops;
    std::vector<CropTransform> transforms;
    for (std::size_t s = 0; s < images.size(); ++s) {
      RegionCrop crop = extract_region(images[s], out.stage1.row(s), c, model.regions);
      out.fallbacks += crop.fallback ? 1 : 0;
      crops.push_back(std::move(crop.image));
      transforms.push_back(crop.transform);
    }
    const Tensor local = model.refiners[c].run(std::move(crops));
    for (std::size_t s = 0; s < images.size(); ++s)
      for (std::size_t k = 0; k < subset.size(); ++k)
        per_region[s][c][subset[k]] = transforms[s].to_global(subset[k], local.at(s, k));
  }
  for (std::size_t s = 0; s < images.size(); ++s) {
    const auto merged = merge_refinements(per_region[s], z);
    std::copy(merged.begin(), merged.end(), out.refined.row(s).begin());
  }
  return out;
}

inline std::vector<Tensor> images_of(const Dataset& data) {
  std::vector<Tensor> imgs;
  imgs.reserve(data.size());
  for (const auto& s : data.samples) imgs.push_back(s.input);
  return imgs;
}

struct CascadeConfig {
  /// Stage-1 network; its input_shape fixes the downsampled resolution.
  NetworkSpec stage1;
  /// Refiner network family; input shape and output width are filled in per region.
  NetworkSpec refiner;
  RegionSpec regions;
  bool normalize_inputs = true;
};

struct CascadeTrainResult {
  CascadeModel model;
  TrainState stage1_state;
  std::vector<TrainState> refiner_states;
};

namespace detail {

/// True when the subset is made of whole (x, y) pairs in ascending order.
inline bool is_joint_paired(const std::vector<std::size_t>& subset) {
  if (subset.size() % 2 != 0) return false;
  for (std::size_t k = 0; k < subset.size(); k += 2)
    if (subset[k] % 2 != 0 || subset[k + 1] != subset[k] + 1 || (k > 0 && subset[k] <= subset[k - 1]))
      return false;
  return true;
}

inline TrainedNetwork fit(const Dataset& train_set, const Dataset& val_set, const NetworkSpec& spec,
                          bool normalize, const LossSpec& loss, const SgdConfig& sgd, Rng& rng,
                          TrainState& state_out, const TrainHooks& hooks = {}) {
  TrainedNetwork net;
  net.spec = spec;
  Dataset tr = train_set, va = val_set;
  if (normalize) {
    auto norm = normalize_inputs(std::move(tr));
    tr = std::move(norm.data);
    norm.mean.apply(va);
    net.mean = std::move(norm.mean);
  }
  state_out = train(tr, va, spec, loss, sgd, rng, hooks);
  net.params = state_out.params;
  net.trained = true;
  return net;
}

inline Dataset stage1_dataset(const Dataset& full, const NetworkSpec& spec) {
  Dataset d = full.like();
  d.input_shape = spec.input_shape;
  d.samples.reserve(full.size());
  for (const auto& s : full.samples) d.samples.push_back({stage1_view(s.input, spec), s.target, s.is_outlier});
  return d;
}

inline Dataset region_dataset(const Dataset& full, const Tensor& stage1_pred, std::size_t region,
                              const RegionSpec& regions) {
  const auto& subset = regions.subsets[region];
  Dataset d;
  d.input_shape = {1, regions.input_h, regions.input_w};
  d.output_dim = subset.size();
  d.frame = {static_cast<double>(regions.input_w), static_cast<double>(regions.input_h)};
  d.samples.reserve(full.size());
  for (std::size_t s = 0; s < full.size(); ++s) {
    RegionCrop crop = extract_region(full.samples[s].input, stage1_pred.row(s), region, regions);
    d.samples.push_back({std::move(crop.image),
                         local_targets(full.samples[s].target, subset, crop.transform),
                         full.samples[s].is_outlier});
  }
  return d;
}

}  // namespace detail

/// Trains stage 1 on full outputs, then each refiner on crops cut around the
/// stage-1 predictions of the same training data, with the same loss.
inline CascadeTrainResult train_cascade(const Dataset& train_full, const Dataset& val_full,
                                        const CascadeConfig& cfg, const LossSpec& loss,
                                        const SgdConfig& sgd, Rng& rng) {
  if (!is_image_shape(train_full.input_shape)) throw ConfigError("cascade: needs image inputs");
  cfg.regions.validate(train_full.output_dim);
  CascadeTrainResult out;
  out.model.regions = cfg.regions;

  const Dataset s1_train = detail::stage1_dataset(train_full, cfg.stage1);
  const Dataset s1_val = detail::stage1_dataset(val_full, cfg.stage1);
  out.model.stage1 =
      detail::fit(s1_train, s1_val, cfg.stage1, cfg.normalize_inputs, loss, sgd, rng, out.stage1_state);

  const Tensor pred_train = out.model.stage1.run(images_of(s1_train));
  const Tensor pred_val = val_full.empty() ? Tensor() : out.model.stage1.run(images_of(s1_val));

  for (std::size_t c = 0; c < cfg.regions.regions(); ++c) {
    const auto& subset = cfg.regions.subsets[c];
    NetworkSpec spec = cfg.refiner;
    spec.input_shape = {1, cfg.regions.input_h, cfg.regions.input_w};
    spec = chain_widths(with_output_dim(std::move(spec), subset.size()));

    const Dataset r_train = detail::region_dataset(train_full, pred_train, c, cfg.regions);
    const Dataset r_val = val_full.empty() ? r_train.like()
                                           : detail::region_dataset(val_full, pred_val, c, cfg.regions);
    TrainHooks hooks;
    if (!detail::is_joint_paired(subset))
      hooks.metric = [](const Tensor& p, const Tensor& t) { return mae(p, t); };
    TrainState state;
    TrainedNetwork net =
        detail::fit(r_train, r_val, spec, cfg.normalize_inputs, loss, sgd, rng, state, hooks);
    out.model.refiners.push_back(std::move(net));
    out.refiner_states.push_back(std::move(state));
  }
  return out;
}

}  // namespace robreg
