#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "robreg/errors.hpp"
#include "robreg/network.hpp"
#include "robreg/robust_loss.hpp"

using namespace robreg;

namespace {

NetworkSpec small_conv_net() {
  NetworkSpec spec;
  spec.input_shape = {1, 6, 6};
  spec.layers = {Conv2D{1, 2, 3, 3}, ReLU{}, MaxPool{2, 2}, Dense{8, 5}, ReLU{}, LinearOutput{5, 3}};
  return spec;
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Larger weights than the default init so ReLUs are active and gradients are not tiny.
NetworkParams lively_params(const NetworkSpec& spec, Rng& rng) {
  NetworkParams p = init_params(spec, rng, 0.5);
  p.for_each_tensor([&](Tensor& t) {
    if (t.rank() == 1)
      for (double& v : t.data()) v = rng.uniform(-0.1, 0.1);
  });
  return p;
}

}  // namespace

TEST(NetworkSpec, ShapeChain) {
  const auto shapes = small_conv_net().shapes();
  ASSERT_EQ(shapes.size(), 7u);
  EXPECT_EQ(shapes[1], (Shape{2, 4, 4}));
  EXPECT_EQ(shapes[3], (Shape{2, 2, 2}));
  EXPECT_EQ(shapes[6], (Shape{3}));
}

TEST(NetworkSpec, InconsistentChainIsConfigError) {
  NetworkSpec spec;
  spec.input_shape = {4};
  spec.layers = {Dense{3, 2}};
  EXPECT_THROW(spec.shapes(), ConfigError);
  spec.layers = {Dense{4, 2}, Dropout{1.0}};
  EXPECT_THROW(spec.shapes(), ConfigError);
  spec.input_shape = {1, 4, 4};
  spec.layers = {Conv2D{1, 1, 2, 2}};
  EXPECT_THROW(spec.shapes(), ConfigError);  // ends in a feature map
  Rng rng(1);
  EXPECT_THROW(init_params(spec, rng), ConfigError);
}

TEST(NetworkSpec, ChainWidthsFillsInputs) {
  NetworkSpec spec;
  spec.input_shape = {1, 10, 10};
  spec.layers = {Conv2D{0, 4, 3, 3}, ReLU{}, MaxPool{2, 2}, Dense{0, 7}, LinearOutput{0, 2}};
  spec = chain_widths(spec);
  EXPECT_EQ(std::get<Conv2D>(spec.layers[0]).in_ch, 1u);
  EXPECT_EQ(std::get<Dense>(spec.layers[3]).in, 64u);
  EXPECT_EQ(std::get<LinearOutput>(spec.layers[4]).in, 7u);
}

TEST(InitParams, ShapesAndZeroBias) {
  NetworkSpec spec;
  spec.input_shape = {2};
  spec.layers = {Dense{2, 3}};
  Rng rng(1);
  const NetworkParams p = init_params(spec, rng);
  EXPECT_EQ(p.layers[0].weight.shape(), (Shape{2, 3}));
  EXPECT_EQ(p.layers[0].bias.shape(), (Shape{3}));
  for (double b : p.layers[0].bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(InitParams, WeightStdAndDeterminism) {
  NetworkSpec spec;
  spec.input_shape = {1000};
  spec.layers = {Dense{1000, 100}};
  Rng a(77), b(77);
  const NetworkParams p = init_params(spec, a);
  EXPECT_EQ(p, init_params(spec, b));
  const auto& w = p.layers[0].weight;
  double mean = 0.0, var = 0.0;
  for (double v : w.data()) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(w.size() - 1));
  EXPECT_GE(sd, 0.0098);
  EXPECT_LE(sd, 0.0102);
}

TEST(Forward, DenseIsAffineMap) {
  NetworkSpec spec;
  spec.input_shape = {2};
  spec.layers = {LinearOutput{2, 2}};
  Rng rng(0);
  NetworkParams p = init_params(spec, rng);
  p.layers[0].weight = Tensor({2, 2}, {1, 0, 0, 1});
  const Tensor x({3, 2}, {1, 2, -3, 4, 0.5, 0.25});
  EXPECT_EQ(forward(p, spec, x, Mode::Infer, rng).output, x);
  p.layers[0].weight = Tensor({2, 2}, {2, 1, 0, 3});
  const Tensor y = forward(p, spec, x, Mode::Infer, rng).output;
  EXPECT_EQ(y, matmul(x, p.layers[0].weight));
}

TEST(Forward, ReluClipsNegatives) {
  NetworkSpec spec;
  spec.input_shape = {2};
  spec.layers = {ReLU{}};
  Rng rng(0);
  const NetworkParams p = init_params(spec, rng);
  const Tensor y = forward(p, spec, Tensor({1, 2}, {-1, 2}), Mode::Infer, rng).output;
  EXPECT_EQ(y, Tensor({1, 2}, {0, 2}));
}

TEST(Forward, MaxPoolPicksMaximum) {
  NetworkSpec spec;
  spec.input_shape = {1, 2, 2};
  spec.layers = {MaxPool{2, 2}, Dense{1, 1}};
  Rng rng(0);
  NetworkParams p = init_params(spec, rng);
  p.layers[1].weight = Tensor({1, 1}, {1.0});
  const Tensor y = forward(p, spec, Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), Mode::Infer, rng).output;
  EXPECT_EQ(y[0], 4.0);
}

TEST(Forward, ConvMatchesDirectSum) {
  NetworkSpec spec;
  spec.input_shape = {2, 5, 4};
  spec.layers = {Conv2D{2, 3, 3, 2}, Dense{3 * 3 * 3, 1}};
  Rng rng(4);
  const NetworkParams p = lively_params(spec, rng);
  const Tensor x = random_tensor(rng, {2, 2, 5, 4});
  ForwardResult r = forward(p, spec, x, Mode::Train, rng);
  const Tensor& fmap = r.cache.inputs[1];  // conv output feeds layer 1
  const auto& w = p.layers[0].weight;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double acc = p.layers[0].bias[o];
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t u = 0; u < 3; ++u)
              for (std::size_t v = 0; v < 2; ++v)
                acc += w[((o * 2 + c) * 3 + u) * 2 + v] * x[((b * 2 + c) * 5 + i + u) * 4 + j + v];
          EXPECT_NEAR(fmap[((b * 3 + o) * 3 + i) * 3 + j], acc, 1e-14);
        }
}

TEST(Forward, ShapeMismatchThrows) {
  const NetworkSpec spec = small_conv_net();
  Rng rng(0);
  const NetworkParams p = init_params(spec, rng);
  EXPECT_THROW(forward(p, spec, Tensor({1, 1, 5, 6}), Mode::Infer, rng), DimensionError);
}

TEST(Forward, InferIsDeterministicAndIgnoresRng) {
  NetworkSpec spec = small_conv_net();
  spec.layers.insert(spec.layers.begin() + 4, Dropout{0.5});
  Rng rng(3);
  const NetworkParams p = lively_params(spec, rng);
  const Tensor x = random_tensor(rng, {4, 1, 6, 6});
  Rng r1(1), r2(999);
  const Tensor a = forward(p, spec, x, Mode::Infer, r1).output;
  EXPECT_EQ(a, forward(p, spec, x, Mode::Infer, r2).output);
  EXPECT_TRUE(forward(p, spec, x, Mode::Infer, r1).cache.empty());
  EXPECT_EQ(a, predict(p, spec, x, 3));
}

TEST(Forward, TrainWithZeroDropoutEqualsInfer) {
  NetworkSpec spec = small_conv_net();
  spec.layers.insert(spec.layers.begin() + 4, Dropout{0.0});
  Rng rng(5);
  const NetworkParams p = lively_params(spec, rng);
  const Tensor x = random_tensor(rng, {3, 1, 6, 6});
  EXPECT_EQ(forward(p, spec, x, Mode::Train, rng).output, forward(p, spec, x, Mode::Infer, rng).output);
}

TEST(Forward, InvertedDropoutScalesKeptUnits) {
  NetworkSpec spec;
  spec.input_shape = {10000};
  spec.layers = {Dropout{0.25}, LinearOutput{10000, 1}};
  Rng rng(6);
  NetworkParams p = init_params(spec, rng);
  for (double& v : p.layers[1].weight.data()) v = 1.0;
  const ForwardResult r = forward(p, spec, Tensor({1, 10000}, 1.0), Mode::Train, rng);
  std::size_t kept = 0;
  for (double m : r.cache.masks[0].data()) {
    ASSERT_TRUE(m == 0.0 || m == 1.0 / 0.75);
    kept += m != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 10000.0, 0.75, 0.02);
  EXPECT_NEAR(r.output[0], static_cast<double>(kept) / 0.75, 1e-9);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const NetworkSpec spec = small_conv_net();
  Rng rng(7);
  const NetworkParams p = lively_params(spec, rng);
  const ForwardResult r = forward(p, spec, random_tensor(rng, {2, 1, 6, 6}), Mode::Train, rng);
  const NetworkParams g = backward(p, spec, r.cache, Tensor({2, 3}));
  for (double v : g.flatten()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, MissingCacheIsStateError) {
  const NetworkSpec spec = small_conv_net();
  Rng rng(7);
  const NetworkParams p = init_params(spec, rng);
  EXPECT_THROW(backward(p, spec, ForwardCache{}, Tensor({1, 3})), StateError);
  const ForwardResult inferred = forward(p, spec, Tensor({1, 1, 6, 6}), Mode::Infer, rng);
  EXPECT_THROW(backward(p, spec, inferred.cache, Tensor({1, 3})), StateError);
}

TEST(Backward, TwoLayerDenseMatchesFiniteDifferences) {
  NetworkSpec spec;
  spec.input_shape = {4};
  spec.layers = {Dense{4, 6}, ReLU{}, LinearOutput{6, 2}};
  Rng rng(8);
  const NetworkParams p = lively_params(spec, rng);
  const Tensor x = random_tensor(rng, {3, 4});
  const Tensor y = random_tensor(rng, {3, 2}, 0, 1);
  const LossSpec l2{.kind = LossKind::L2};

  const ForwardResult r = forward(p, spec, x, Mode::Train, rng);
  const NetworkParams g = backward(p, spec, r.cache, objective_grad(y, r.output, {}, l2));
  auto f = [&](const std::vector<double>& flat) {
    NetworkParams q = p;
    q.assign_flat(flat);
    return objective(y, forward(q, spec, x, Mode::Infer, rng).output, {}, l2);
  };
  const auto fd = oracle::central_diff_all(f, p.flatten(), 1e-6);
  const auto an = g.flatten();
  for (std::size_t k = 0; k < an.size(); ++k)
    EXPECT_TRUE(oracle::close(an[k], fd[k], 1e-5, 1e-9)) << "param " << k << ": " << an[k] << " vs " << fd[k];
}

TEST(Backward, ConvNetMatchesFiniteDifferencesUnderTukey) {
  const NetworkSpec spec = small_conv_net();
  Rng rng(9);
  const NetworkParams p = lively_params(spec, rng);
  const Tensor x = random_tensor(rng, {2, 1, 6, 6});
  const Tensor y = random_tensor(rng, {2, 3}, 0, 1);
  MadScale mad{{0.2, 0.3, 0.25}};
  mad.iteration = 100;
  const LossSpec tukey{};

  const ForwardResult r = forward(p, spec, x, Mode::Train, rng);
  const NetworkParams g = backward(p, spec, r.cache, objective_grad(y, r.output, mad, tukey));
  auto f = [&](const std::vector<double>& flat) {
    NetworkParams q = p;
    q.assign_flat(flat);
    return objective(y, forward(q, spec, x, Mode::Infer, rng).output, mad, tukey);
  };
  const auto fd = oracle::central_diff_all(f, p.flatten(), 1e-6);
  const auto an = g.flatten();
  for (std::size_t k = 0; k < an.size(); ++k)
    EXPECT_TRUE(oracle::close(an[k], fd[k], 1e-5, 1e-9)) << "param " << k << ": " << an[k] << " vs " << fd[k];
}

TEST(Backward, MaxPoolRoutesGradientToArgmaxOnly) {
  // A 1x1 identity conv in front exposes the pool's input gradient through its weight gradient.
  NetworkSpec wrapped;
  wrapped.input_shape = {1, 4, 4};
  wrapped.layers = {Conv2D{1, 1, 1, 1}, MaxPool{2, 2}, LinearOutput{4, 1}};
  Rng rng(10);
  NetworkParams p = init_params(wrapped, rng);
  p.layers[0].weight = Tensor({1, 1, 1, 1}, {1.0});
  p.layers[2].weight = Tensor({4, 1}, {1.0, 2.0, 3.0, 4.0});
  // Window (0,0) has a tie between positions 0 and 5; the first in row-major order wins.
  const Tensor x({1, 1, 4, 4}, {9, 1, 2, 3,
                                4, 9, 8, 0,
                                1, 2, 0, 0,
                                7, 3, 0, 5});
  const ForwardResult r = forward(p, wrapped, x, Mode::Train, rng);
  EXPECT_EQ(r.output[0], 9 * 1.0 + 8 * 2.0 + 7 * 3.0 + 5 * 4.0);
  const NetworkParams g = backward(p, wrapped, r.cache, Tensor({1, 1}, {1.0}));
  // Gradient of the 1x1 conv weight = sum over pooled positions of x * downstream weight.
  // Brute force: route each window's upstream gradient to its first maximal element.
  double expect = 0.0;
  const double down[4] = {1, 2, 3, 4};
  for (std::size_t wy = 0; wy < 2; ++wy)
    for (std::size_t wx = 0; wx < 2; ++wx) {
      double best = -1e300;
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) best = std::max(best, x[(2 * wy + dy) * 4 + 2 * wx + dx]);
      expect += best * down[wy * 2 + wx];
    }
  EXPECT_EQ(g.layers[0].weight[0], expect);
  EXPECT_EQ(g.layers[0].bias[0], 10.0);
  // Positional check on the cached argmax.
  const auto& arg = r.cache.argmax[1];
  EXPECT_EQ(arg, (std::vector<std::size_t>{0, 6, 12, 15}));
}

TEST(ModelFile, RoundTripIsBitExact) {
  NetworkSpec spec = small_conv_net();
  spec.layers.insert(spec.layers.begin() + 4, Dropout{0.3});
  Rng rng(11);
  ModelFile m{spec, lively_params(spec, rng), random_tensor(rng, {1, 6, 6})};
  m.params.layers[0].weight[0] = 1.0 / 3.0;
  m.params.layers[0].weight[1] = -0.0;
  m.params.layers[0].weight[2] = 5e-320;
  std::stringstream ss;
  write_model(ss, m);
  const ModelFile back = read_model(ss);
  EXPECT_EQ(back.params, m.params);
  ASSERT_TRUE(back.input_mean.has_value());
  EXPECT_EQ(*back.input_mean, *m.input_mean);
  EXPECT_EQ(back.spec.input_shape, spec.input_shape);
  ASSERT_EQ(back.spec.layers.size(), spec.layers.size());
  EXPECT_EQ(std::get<Dropout>(back.spec.layers[4]).rate, 0.3);
  EXPECT_TRUE(std::signbit(back.params.layers[0].weight[1]));

  std::stringstream again;
  write_model(again, back);
  std::stringstream first;
  write_model(first, m);
  EXPECT_EQ(again.str(), first.str());
}

TEST(ModelFile, RejectsCorruptInput) {
  std::stringstream bad1("robreg-model 2\n");
  EXPECT_THROW(read_model(bad1), ConfigError);
  std::stringstream bad2("robreg-model 1\ninput 1 2\nlayers 1\ndense 2 1\ntensor layer.0.weight 2 2 1\n0x1p+0\n");
  EXPECT_THROW(read_model(bad2), ConfigError);
  std::stringstream bad3(
      "robreg-model 1\ninput 1 2\nlayers 1\ndense 2 1\ntensor layer.0.weight 2 3 1\n1 2 3\n"
      "tensor layer.0.bias 1 1\n0\nend\n");
  EXPECT_THROW(read_model(bad3), ConfigError);
}
