#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "robreg/datagen.hpp"
#include "robreg/errors.hpp"

using namespace robreg;

namespace {

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t s = 0; s < a.size(); ++s)
    if (!(a.samples[s].input == b.samples[s].input) || a.samples[s].target != b.samples[s].target ||
        a.samples[s].is_outlier != b.samples[s].is_outlier)
      return false;
  return true;
}

// Brightest pixel whose centre lies within `radius` pixels of (x, y).
double peak_near(const Tensor& img, double x, double y, double radius) {
  const auto h = static_cast<long>(img.dim(1)), w = static_cast<long>(img.dim(2));
  double best = 0.0;
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      const double dx = c + 0.5 - x, dy = r + 0.5 - y;
      if (dx * dx + dy * dy <= radius * radius) best = std::max(best, img[r * w + c]);
    }
  return best;
}

}  // namespace

TEST(LinearTask, NoiselessTargetsLieOnTheMap) {
  Rng rng(1);
  const LinearTask task = gen_linear_task(200, 6, 4, 0.0, rng);
  for (const auto& s : task.data.samples) {
    const auto y = task.map.apply(s.input.data());
    EXPECT_EQ(s.target, y);
    for (double v : s.input.data()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
    for (double t : s.target) {
      EXPECT_GE(t, 0.0);
      EXPECT_LE(t, 1.0);
    }
  }
}

TEST(LinearTask, EqualSeedsGiveIdenticalData) {
  Rng a(5), b(5);
  EXPECT_TRUE(datasets_equal(gen_linear_task(50, 3, 2, 0.1, a).data, gen_linear_task(50, 3, 2, 0.1, b).data));
}

TEST(LinearTask, InputCovarianceMatchesUniform) {
  Rng rng(2);
  const std::size_t d = 3, n = 100000;
  const LinearTask task = gen_linear_task(n, d, 2, 0.0, rng);
  std::vector<double> mean(d, 0.0);
  for (const auto& s : task.data.samples)
    for (std::size_t j = 0; j < d; ++j) mean[j] += s.input[j] / n;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double cov = 0.0;
      for (const auto& s : task.data.samples) cov += (s.input[i] - mean[i]) * (s.input[j] - mean[j]);
      cov /= static_cast<double>(n - 1);
      if (i == j)
        EXPECT_NEAR(cov, 1.0 / 3.0, 0.05 / 3.0);  // Var U(-1,1) = 1/3, within 5%
      else
        EXPECT_NEAR(cov, 0.0, 0.05 / 3.0);
    }
}

TEST(Outliers, ZeroFractionLeavesDataUnchanged) {
  Rng rng(3);
  const Dataset d = gen_linear_task(100, 3, 2, 0.0, rng).data;
  EXPECT_TRUE(datasets_equal(inject_outliers(d, OutlierConfig{.fraction = 0.0, .seed = 1}), d));
}

TEST(Outliers, ExactCountAndUntouchedInliers) {
  Rng rng(4);
  const Dataset d = gen_linear_task(100, 3, 2, 0.0, rng).data;
  const Dataset o = inject_outliers(d, OutlierConfig{.fraction = 0.3, .seed = 9});
  EXPECT_EQ(o.outlier_count(), 30u);
  for (std::size_t s = 0; s < d.size(); ++s) {
    if (!o.samples[s].is_outlier) {
      EXPECT_EQ(o.samples[s].target, d.samples[s].target);
    }
    EXPECT_EQ(o.samples[s].input, d.samples[s].input);
  }
  for (double f : {0.0, 0.004, 0.005, 0.126, 0.5, 0.99})
    EXPECT_EQ(inject_outliers(gen_linear_task(200, 2, 2, 0.0, rng).data, OutlierConfig{.fraction = f})
                  .outlier_count(),
              static_cast<std::size_t>(std::llround(f * 200)));
  EXPECT_THROW(inject_outliers(d, OutlierConfig{.fraction = 1.0}), ArgumentError);
}

TEST(Outliers, TagsAreDeterministicPerSeed) {
  Rng rng(5);
  const Dataset d = gen_linear_task(100, 3, 2, 0.0, rng).data;
  EXPECT_TRUE(datasets_equal(inject_outliers(d, {.fraction = 0.2, .seed = 3}),
                             inject_outliers(d, {.fraction = 0.2, .seed = 3})));
  EXPECT_FALSE(datasets_equal(inject_outliers(d, {.fraction = 0.2, .seed = 3}),
                              inject_outliers(d, {.fraction = 0.2, .seed = 4})));
}

TEST(Outliers, CorruptedTargetsAreUniformAndIndependentOfInputs) {
  Rng rng(6);
  const Dataset d = gen_linear_task(20000, 2, 2, 0.0, rng).data;
  const Dataset o = inject_outliers(d, {.fraction = 0.5, .seed = 11});
  std::vector<double> values, first_input;
  for (const auto& s : o.samples)
    if (s.is_outlier) {
      values.push_back(s.target[0]);
      values.push_back(s.target[1]);
      first_input.push_back(s.input[0]);
    }
  // Kolmogorov-Smirnov distance against U(0,1); 1.63/sqrt(n) is the 1% critical value.
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  double ks = 0.0;
  const double n = static_cast<double>(sorted.size());
  for (std::size_t k = 0; k < sorted.size(); ++k)
    ks = std::max({ks, std::abs((k + 1) / n - sorted[k]), std::abs(sorted[k] - k / n)});
  EXPECT_LT(ks, 1.63 / std::sqrt(n));
  // Correlation of corrupted target with the input it came with.
  double mx = 0, my = 0;
  const std::size_t m = first_input.size();
  for (std::size_t k = 0; k < m; ++k) {
    mx += first_input[k] / m;
    my += values[2 * k] / m;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < m; ++k) {
    sxy += (first_input[k] - mx) * (values[2 * k] - my);
    sxx += (first_input[k] - mx) * (first_input[k] - mx);
    syy += (values[2 * k] - my) * (values[2 * k] - my);
  }
  EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 4.0 / std::sqrt(static_cast<double>(m)));
}

TEST(Outliers, AnnotationJitterStaysInUnitRange) {
  Rng rng(7);
  const Dataset d = gen_linear_task(500, 2, 4, 0.0, rng).data;
  const Dataset o = inject_outliers(d, {.fraction = 0.4, .mechanism = OutlierMechanism::AnnotationJitter, .seed = 2});
  EXPECT_EQ(o.outlier_count(), 200u);
  std::size_t moved = 0;
  for (std::size_t s = 0; s < o.size(); ++s)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GE(o.samples[s].target[i], 0.0);
      EXPECT_LE(o.samples[s].target[i], 1.0);
      moved += o.samples[s].target[i] != d.samples[s].target[i];
    }
  EXPECT_GT(moved, 700u);
}

TEST(Figures, TargetsInRangeAndDeterministic) {
  ArticulatedFigureSpec spec;
  Rng a(8), b(8);
  const Dataset d = gen_figure_task(spec, 40, a);
  EXPECT_TRUE(datasets_equal(d, gen_figure_task(spec, 40, b)));
  EXPECT_EQ(d.output_dim, 12u);
  EXPECT_EQ(d.input_shape, (Shape{1, 64, 64}));
  EXPECT_EQ(d.limbs.size(), 5u);
  for (const auto& s : d.samples)
    for (double t : s.target) {
      EXPECT_GE(t, 2.0 / 64.0);
      EXPECT_LE(t, 62.0 / 64.0);
    }
}

TEST(Figures, ZeroLengthBonesCollapseToRoot) {
  ArticulatedFigureSpec spec;
  spec.bone_min = spec.bone_max = 0.0;
  Rng rng(9);
  for (const auto& s : gen_figure_task(spec, 10, rng).samples)
    for (std::size_t j = 1; j < 6; ++j) {
      EXPECT_EQ(s.target[2 * j], s.target[0]);
      EXPECT_EQ(s.target[2 * j + 1], s.target[1]);
    }
}

TEST(Figures, KeypointsLandOnLitPixels) {
  ArticulatedFigureSpec spec;
  Rng rng(10);
  const Dataset d = gen_figure_task(spec, 50, rng);
  for (const auto& s : d.samples)
    for (std::size_t j = 0; j < 6; ++j) {
      const double x = s.target[2 * j] * 64.0, y = s.target[2 * j + 1] * 64.0;
      const double shade = j == 0 ? 1.0 : bone_shade(j, 6);
      EXPECT_GT(peak_near(s.input, x, y, spec.thickness), 0.5 * shade) << "joint " << j;
    }
}

TEST(Figures, InvalidSpecIsConfigError) {
  Rng rng(0);
  ArticulatedFigureSpec spec;
  spec.parents = {-1, 0, 5};
  spec.joints = 3;
  EXPECT_THROW(gen_figure_task(spec, 1, rng), ConfigError);
  ArticulatedFigureSpec bad_bones;
  bad_bones.bone_min = 10;
  bad_bones.bone_max = 5;
  EXPECT_THROW(gen_figure_task(bad_bones, 1, rng), ConfigError);
}

TEST(Augment, ZeroCopiesReturnsOriginal) {
  Rng rng(11);
  const Dataset d = gen_figure_task({}, 5, rng);
  EXPECT_TRUE(datasets_equal(augment(d, 0, 0.01, rng), d));
}

TEST(Augment, FlipReflectsX) {
  const std::vector<double> t{0.2, 0.3, 0.75, 0.5};
  EXPECT_EQ(flip_keypoints(t), (std::vector<double>{0.8, 0.3, 0.25, 0.5}));
}

TEST(Augment, RotationRoundTrip) {
  Rng rng(12);
  const Frame frame{64, 48};
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> t(8);
    for (double& v : t) v = rng.uniform();
    const auto back = rotate_keypoints(rotate_keypoints(t, std::numbers::pi / 2, frame), -std::numbers::pi / 2, frame);
    for (std::size_t k = 0; k < t.size(); ++k) EXPECT_NEAR(back[k], t[k], 1e-9);
  }
  // Quarter turn in x-right, y-down pixel space: (cx + 10, cy) -> (cx, cy + 10).
  const auto q = rotate_keypoints(std::vector<double>{42.0 / 64, 24.0 / 48}, std::numbers::pi / 2, frame);
  EXPECT_NEAR(q[0] * 64, 32.0, 1e-12);
  EXPECT_NEAR(q[1] * 48, 34.0, 1e-12);
}

TEST(Augment, VariantsStayGeometricallyConsistent) {
  ArticulatedFigureSpec spec;
  spec.border = 14.0;  // keeps rotated figures inside the frame
  Rng rng(13);
  const Dataset d = gen_figure_task(spec, 20, rng);
  const Dataset aug = augment(d, 3, 0.0, rng);
  ASSERT_EQ(aug.size(), 80u);
  for (std::size_t s = 0; s < d.size(); ++s) EXPECT_EQ(aug.samples[s].target, d.samples[s].target);
  for (std::size_t s = d.size(); s < aug.size(); ++s)
    for (std::size_t j = 0; j < 6; ++j) {
      const double x = aug.samples[s].target[2 * j] * 64.0, y = aug.samples[s].target[2 * j + 1] * 64.0;
      const double shade = j == 0 ? 1.0 : bone_shade(j, 6);
      EXPECT_GT(peak_near(aug.samples[s].input, x, y, 1.0 + spec.thickness), 0.5 * shade)
          << "sample " << s << " joint " << j;
    }
}

TEST(Augment, TargetNoiseAndClamping) {
  Rng rng(14);
  const Dataset d = gen_figure_task({}, 30, rng);
  const Dataset aug = augment(d, 4, 0.5, rng);
  bool any_changed = false;
  for (const auto& s : aug.samples)
    for (double t : s.target) {
      EXPECT_GE(t, 0.0);
      EXPECT_LE(t, 1.0);
    }
  for (std::size_t s = d.size(); s < aug.size(); ++s)
    any_changed = any_changed || aug.samples[s].target != d.samples[(s - d.size()) / 4].target;
  EXPECT_TRUE(any_changed);
}

TEST(Augment, GeometricAugmentationNeedsImages) {
  Rng rng(15);
  const Dataset d = gen_linear_task(10, 3, 2, 0.0, rng).data;
  EXPECT_THROW(augment(d, 2, 0.01, rng), ConfigError);
  const Dataset noisy = augment(d, 2, 0.01, rng, AugmentOptions{.max_rotation_deg = 0, .flip_probability = 0});
  EXPECT_EQ(noisy.size(), 30u);
}

TEST(Normalize, TrainingMeanBecomesZero) {
  Rng rng(16);
  const Dataset d = gen_figure_task({}, 25, rng);
  const NormalizedDataset n = normalize_inputs(d);
  for (std::size_t k = 0; k < n.mean.mean.size(); ++k) {
    double m = 0.0;
    for (const auto& s : n.data.samples) m += s.input[k];
    EXPECT_NEAR(m / 25.0, 0.0, 1e-12);
  }
}

TEST(Normalize, ConstantDatasetBecomesZero) {
  Dataset d;
  d.input_shape = {3};
  d.output_dim = 1;
  for (int i = 0; i < 4; ++i) d.samples.push_back({Tensor({3}, {1.5, -2.0, 7.0}), {0.5}});
  for (const auto& s : normalize_inputs(d).data.samples)
    for (double v : s.input.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(normalize_inputs(d.like()), ArgumentError);
}

TEST(Normalize, ValidationUsesTrainingMean) {
  Dataset train, val;
  train.input_shape = val.input_shape = {1};
  train.output_dim = val.output_dim = 1;
  for (double v : {1.0, 2.0, 3.0}) train.samples.push_back({Tensor({1}, {v}), {0.0}});
  for (double v : {10.0, 20.0}) val.samples.push_back({Tensor({1}, {v}), {0.0}});
  const NormalizedDataset n = normalize_inputs(train);
  EXPECT_EQ(n.mean.mean[0], 2.0);
  n.mean.apply(val);
  EXPECT_EQ(val.samples[0].input[0], 8.0);
  EXPECT_EQ(val.samples[1].input[0], 18.0);
}
