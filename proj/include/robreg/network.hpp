#pragma once

// Feed-forward regression network: dense and valid-padding conv layers,
// ReLU, non-overlapping max-pool, inverted dropout and a linear output.
// Forward and backward passes operate on a batch tensor [B, ...].

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "robreg/errors.hpp"
#include "robreg/numerics.hpp"

namespace robreg {

struct Dense {
  std::size_t in = 0, out = 0;
};
struct Conv2D {
  std::size_t in_ch = 0, out_ch = 0, kh = 0, kw = 0;
};
struct MaxPool {
  std::size_t kh = 2, kw = 2;
};
struct ReLU {};
struct Dropout {
  double rate = 0.5;
};
struct LinearOutput {
  std::size_t in = 0, out = 0;
};

using LayerSpec = std::variant<Dense, Conv2D, MaxPool, ReLU, Dropout, LinearOutput>;

inline const char* layer_name(const LayerSpec& layer) {
  static constexpr const char* names[] = {"dense", "conv2d", "maxpool", "relu", "dropout",
                                          "linear_output"};
  return names[layer.index()];
}

/// Per-sample input shape ([d] or [C, H, W]) plus the layer chain.
struct NetworkSpec {
  Shape input_shape;
  std::vector<LayerSpec> layers;

  /// Per-sample shape entering each layer, followed by the final output shape.
  /// Throws ConfigError when the chain is inconsistent.
  std::vector<Shape> shapes() const {
    if (input_shape.empty() || shape_size(input_shape) == 0)
      throw ConfigError("network: input shape must be non-empty");
    if (layers.empty()) throw ConfigError("network: no layers");
    std::vector<Shape> out{input_shape};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Shape& in = out.back();
      const std::string where = "network layer " + std::to_string(l) + " (" +
                                layer_name(layers[l]) + "): ";
      out.push_back(std::visit(
          [&](const auto& layer) -> Shape {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, LinearOutput>) {
              if (layer.in == 0 || layer.out == 0) throw ConfigError(where + "zero width");
              if (shape_size(in) != layer.in)
                throw ConfigError(where + "expects " + std::to_string(layer.in) +
                                  " inputs, chain provides " + shape_str(in));
              return {layer.out};
            } else if constexpr (std::is_same_v<T, Conv2D>) {
              if (in.size() != 3) throw ConfigError(where + "needs [C,H,W] input, got " + shape_str(in));
              if (in[0] != layer.in_ch)
                throw ConfigError(where + "expects " + std::to_string(layer.in_ch) +
                                  " channels, chain provides " + std::to_string(in[0]));
              if (layer.out_ch == 0 || layer.kh == 0 || layer.kw == 0 || layer.kh > in[1] ||
                  layer.kw > in[2])
                throw ConfigError(where + "kernel does not fit input " + shape_str(in));
              return {layer.out_ch, in[1] - layer.kh + 1, in[2] - layer.kw + 1};
            } else if constexpr (std::is_same_v<T, MaxPool>) {
              if (in.size() != 3) throw ConfigError(where + "needs [C,H,W] input, got " + shape_str(in));
              if (layer.kh == 0 || layer.kw == 0 || layer.kh > in[1] || layer.kw > in[2])
                throw ConfigError(where + "window does not fit input " + shape_str(in));
              return {in[0], in[1] / layer.kh, in[2] / layer.kw};
            } else if constexpr (std::is_same_v<T, Dropout>) {
              if (!(layer.rate >= 0.0 && layer.rate < 1.0))
                throw ConfigError(where + "rate must lie in [0, 1)");
              return in;
            } else {
              return in;
            }
          },
          layers[l]));
    }
    if (out.back().size() != 1)
      throw ConfigError("network: final layer must produce a flat vector, got " +
                        shape_str(out.back()));
    return out;
  }

  std::size_t output_dim() const { return shapes().back()[0]; }
};

struct LayerParams {
  Tensor weight;
  Tensor bias;

  bool has_params() const noexcept { return !weight.empty(); }
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct NetworkParams {
  std::vector<LayerParams> layers;

  static NetworkParams zeros_like(const NetworkParams& other) {
    NetworkParams z;
    z.layers.reserve(other.layers.size());
    for (const auto& l : other.layers) {
      LayerParams p;
      if (l.has_params()) {
        p.weight = Tensor::zeros_like(l.weight);
        p.bias = Tensor::zeros_like(l.bias);
      }
      z.layers.push_back(std::move(p));
    }
    return z;
  }

  /// Visits every weight/bias tensor in a fixed order.
  template <class F>
  void for_each_tensor(F&& f) {
    for (auto& l : layers)
      if (l.has_params()) {
        f(l.weight);
        f(l.bias);
      }
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    for (const auto& l : layers)
      if (l.has_params()) {
        f(l.weight);
        f(l.bias);
      }
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each_tensor([&](const Tensor& t) { n += t.size(); });
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(count());
    for_each_tensor([&](const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
    return out;
  }

  void assign_flat(std::span<const double> flat) {
    if (flat.size() != count()) throw DimensionError("assign_flat: parameter count mismatch");
    std::size_t k = 0;
    for_each_tensor([&](Tensor& t) {
      for (double& v : t.data()) v = flat[k++];
    });
  }

  bool same_shapes(const NetworkParams& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l)
      if (layers[l].weight.shape() != other.layers[l].weight.shape() ||
          layers[l].bias.shape() != other.layers[l].bias.shape())
        return false;
    return true;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const Tensor& t) { ok = ok && t.all_finite(); });
    return ok;
  }

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

enum class Mode { Train, Infer };

/// Layer inputs, dropout masks and pooling argmax from a Train-mode pass.
struct ForwardCache {
  std::vector<Tensor> inputs;
  std::vector<Tensor> masks;
  std::vector<std::vector<std::size_t>> argmax;

  bool empty() const noexcept { return inputs.empty(); }
};

struct ForwardResult {
  Tensor output;
  ForwardCache cache;
};

inline constexpr double kInitSigma = 0.01;

/// Weights ~ N(0, sigma^2), biases zero.
inline NetworkParams init_params(const NetworkSpec& spec, Rng& rng, double sigma = kInitSigma) {
  spec.shapes();
  NetworkParams params;
  for (const auto& layer : spec.layers) {
    LayerParams p;
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, LinearOutput>) {
            p.weight = gauss_sample(rng, {l.in, l.out}, sigma);
            p.bias = Tensor({l.out});
          } else if constexpr (std::is_same_v<T, Conv2D>) {
            p.weight = gauss_sample(rng, {l.out_ch, l.in_ch, l.kh, l.kw}, sigma);
            p.bias = Tensor({l.out_ch});
          }
        },
        layer);
    params.layers.push_back(std::move(p));
  }
  return params;
}

namespace detail {

inline Shape batched(std::size_t batch, const Shape& per_sample) {
  Shape s{batch};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

inline Tensor affine_forward(const Tensor& x, const LayerParams& p, std::size_t in,
                             std::size_t out) {
  const std::size_t batch = x.dim(0);
  Tensor y({batch, out});
  const double* w = p.weight.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data().data() + b * in;
    double* yb = y.data().data() + b * out;
    std::copy(p.bias.data().begin(), p.bias.data().end(), yb);
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xb[i];
      if (xi == 0.0) continue;
      const double* wi = w + i * out;
      for (std::size_t j = 0; j < out; ++j) yb[j] += xi * wi[j];
    }
  }
  return y;
}

inline Tensor affine_backward(const Tensor& x, const Tensor& dy, const LayerParams& p,
                              LayerParams& g, std::size_t in, std::size_t out, bool need_dx) {
  const std::size_t batch = x.dim(0);
  double* gw = g.weight.data().data();
  double* gb = g.bias.data().data();
  const double* w = p.weight.data().data();
  Tensor dx = need_dx ? Tensor(x.shape()) : Tensor();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data().data() + b * in;
    const double* db = dy.data().data() + b * out;
    for (std::size_t j = 0; j < out; ++j) gb[j] += db[j];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xb[i];
      double* gwi = gw + i * out;
      const double* wi = w + i * out;
      if (xi != 0.0)
        for (std::size_t j = 0; j < out; ++j) gwi[j] += xi * db[j];
      if (need_dx) {
        double acc = 0.0;
        for (std::size_t j = 0; j < out; ++j) acc += wi[j] * db[j];
        dx[b * in + i] = acc;
      }
    }
  }
  return dx;
}

inline Tensor conv_forward(const Tensor& x, const LayerParams& p, const Conv2D& l) {
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h - l.kh + 1, ow = w - l.kw + 1;
  Tensor y({batch, l.out_ch, oh, ow});
  const double* in = x.data().data();
  const double* wt = p.weight.data().data();
  double* out = y.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < l.out_ch; ++o) {
      double* plane = out + ((b * l.out_ch + o) * oh) * ow;
      std::fill(plane, plane + oh * ow, p.bias[o]);
      for (std::size_t c = 0; c < l.in_ch; ++c) {
        const double* src = in + ((b * l.in_ch + c) * h) * w;
        for (std::size_t ky = 0; ky < l.kh; ++ky)
          for (std::size_t kx = 0; kx < l.kw; ++kx) {
            const double k = wt[((o * l.in_ch + c) * l.kh + ky) * l.kw + kx];
            for (std::size_t y0 = 0; y0 < oh; ++y0) {
              const double* s = src + (y0 + ky) * w + kx;
              double* d = plane + y0 * ow;
              for (std::size_t x0 = 0; x0 < ow; ++x0) d[x0] += k * s[x0];
            }
          }
      }
    }
  return y;
}

inline Tensor conv_backward(const Tensor& x, const Tensor& dy, const LayerParams& p,
                            LayerParams& g, const Conv2D& l, bool need_dx) {
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h - l.kh + 1, ow = w - l.kw + 1;
  Tensor dx = need_dx ? Tensor(x.shape()) : Tensor();
  const double* in = x.data().data();
  const double* wt = p.weight.data().data();
  const double* grad_out = dy.data().data();
  double* gw = g.weight.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < l.out_ch; ++o) {
      const double* dplane = grad_out + ((b * l.out_ch + o) * oh) * ow;
      double bsum = 0.0;
      for (std::size_t k = 0; k < oh * ow; ++k) bsum += dplane[k];
      g.bias[o] += bsum;
      for (std::size_t c = 0; c < l.in_ch; ++c) {
        const double* src = in + ((b * l.in_ch + c) * h) * w;
        double* dsrc = need_dx ? dx.data().data() + ((b * l.in_ch + c) * h) * w : nullptr;
        for (std::size_t ky = 0; ky < l.kh; ++ky)
          for (std::size_t kx = 0; kx < l.kw; ++kx) {
            const std::size_t widx = ((o * l.in_ch + c) * l.kh + ky) * l.kw + kx;
            const double k = wt[widx];
            double acc = 0.0;
            for (std::size_t y0 = 0; y0 < oh; ++y0) {
              const double* s = src + (y0 + ky) * w + kx;
              const double* d = dplane + y0 * ow;
              for (std::size_t x0 = 0; x0 < ow; ++x0) acc += d[x0] * s[x0];
              if (dsrc) {
                double* ds = dsrc + (y0 + ky) * w + kx;
                for (std::size_t x0 = 0; x0 < ow; ++x0) ds[x0] += k * d[x0];
              }
            }
            gw[widx] += acc;
          }
      }
    }
  return dx;
}

/// Non-overlapping windows; ties resolve to the first position in row-major order.
inline Tensor maxpool_forward(const Tensor& x, const MaxPool& l, std::vector<std::size_t>* argmax) {
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / l.kh, ow = w / l.kw;
  Tensor y({batch, ch, oh, ow});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t k = 0;
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    const std::size_t base = bc * h * w;
    for (std::size_t y0 = 0; y0 < oh; ++y0)
      for (std::size_t x0 = 0; x0 < ow; ++x0, ++k) {
        std::size_t best = base + (y0 * l.kh) * w + x0 * l.kw;
        for (std::size_t dy = 0; dy < l.kh; ++dy)
          for (std::size_t dx = 0; dx < l.kw; ++dx) {
            const std::size_t idx = base + (y0 * l.kh + dy) * w + x0 * l.kw + dx;
            if (x[idx] > x[best]) best = idx;
          }
        y[k] = x[best];
        if (argmax) (*argmax)[k] = best;
      }
  }
  return y;
}

}  // namespace detail

/// Runs the network on a batch x of shape [B, input_shape...] and returns [B, N].
/// Train mode applies inverted dropout and fills the cache needed by backward().
inline ForwardResult forward(const NetworkParams& params, const NetworkSpec& spec, const Tensor& x,
                             Mode mode, Rng& rng) {
  const auto shapes = spec.shapes();
  if (params.layers.size() != spec.layers.size())
    throw DimensionError("forward: parameter/spec layer count mismatch");
  if (x.rank() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), x.shape().begin() + 1))
    throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match [B]+" +
                         shape_str(spec.input_shape));
  const std::size_t batch = x.dim(0);
  const bool train = mode == Mode::Train;

  ForwardResult result;
  if (train) {
    result.cache.inputs.resize(spec.layers.size());
    result.cache.masks.resize(spec.layers.size());
    result.cache.argmax.resize(spec.layers.size());
  }
  Tensor act = x;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerParams& p = params.layers[l];
    Tensor next = std::visit(
        [&](const auto& layer) -> Tensor {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, LinearOutput>) {
            return detail::affine_forward(act, p, layer.in, layer.out);
          } else if constexpr (std::is_same_v<T, Conv2D>) {
            return detail::conv_forward(act, p, layer);
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            return detail::maxpool_forward(act, layer, train ? &result.cache.argmax[l] : nullptr);
          } else if constexpr (std::is_same_v<T, ReLU>) {
            Tensor y = act;
            for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
            return y;
          } else {
            if (!train) return act;
            Tensor mask(act.shape());
            const double keep = 1.0 / (1.0 - layer.rate);
            for (double& m : mask.data()) m = rng.uniform() >= layer.rate ? keep : 0.0;
            Tensor y = act;
            for (std::size_t k = 0; k < y.size(); ++k) y[k] *= mask[k];
            result.cache.masks[l] = std::move(mask);
            return y;
          }
        },
        spec.layers[l]);
    if (train) result.cache.inputs[l] = std::move(act);
    act = std::move(next).reshaped(detail::batched(batch, shapes[l + 1]));
  }
  result.output = std::move(act);
  return result;
}

/// Convenience Infer-mode pass over many samples, processed in chunks.
inline Tensor predict(const NetworkParams& params, const NetworkSpec& spec, const Tensor& x,
                      std::size_t chunk = 256) {
  Rng unused(0);
  const std::size_t batch = x.dim(0);
  const std::size_t in_stride = x.size() / batch;
  const std::size_t n = spec.output_dim();
  Tensor out({batch, n});
  for (std::size_t start = 0; start < batch; start += chunk) {
    const std::size_t count = std::min(chunk, batch - start);
    std::vector<double> slice(x.data().begin() + start * in_stride,
                              x.data().begin() + (start + count) * in_stride);
    Tensor part(detail::batched(count, spec.input_shape), std::move(slice));
    Tensor y = forward(params, spec, part, Mode::Infer, unused).output;
    std::copy(y.data().begin(), y.data().end(), out.data().begin() + start * n);
  }
  return out;
}

/// Gradients of a scalar objective w.r.t. every parameter, given dE/dy_hat.
inline NetworkParams backward(const NetworkParams& params, const NetworkSpec& spec,
                              const ForwardCache& cache, const Tensor& grad_output) {
  if (cache.empty() || cache.inputs.size() != spec.layers.size())
    throw StateError("backward: no Train-mode forward cache available");
  const auto shapes = spec.shapes();
  const std::size_t batch = cache.inputs.front().dim(0);
  if (grad_output.shape() != detail::batched(batch, shapes.back()))
    throw DimensionError("backward: upstream gradient " + shape_str(grad_output.shape()) +
                         " does not match network output");
  NetworkParams grads = NetworkParams::zeros_like(params);
  Tensor delta = grad_output;
  for (std::size_t l = spec.layers.size(); l-- > 0;) {
    const Tensor& x = cache.inputs[l];
    const bool need_dx = l > 0;
    const LayerParams& p = params.layers[l];
    LayerParams& g = grads.layers[l];
    Tensor dx = std::visit(
        [&](const auto& layer) -> Tensor {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, LinearOutput>) {
            return detail::affine_backward(x, delta, p, g, layer.in, layer.out, need_dx);
          } else if constexpr (std::is_same_v<T, Conv2D>) {
            return detail::conv_backward(x, delta, p, g, layer, need_dx);
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            Tensor d(x.shape());
            const auto& arg = cache.argmax[l];
            for (std::size_t k = 0; k < arg.size(); ++k) d[arg[k]] += delta[k];
            return d;
          } else if constexpr (std::is_same_v<T, ReLU>) {
            Tensor d = delta.reshaped(x.shape());
            for (std::size_t k = 0; k < d.size(); ++k)
              if (!(x[k] > 0.0)) d[k] = 0.0;
            return d;
          } else {
            Tensor d = delta.reshaped(x.shape());
            const Tensor& mask = cache.masks[l];
            for (std::size_t k = 0; k < d.size(); ++k) d[k] *= mask[k];
            return d;
          }
        },
        spec.layers[l]);
    if (!need_dx) break;
    delta = std::move(dx);
  }
  return grads;
}

/// Output layer replaced by one with `n` outputs.
inline NetworkSpec with_output_dim(NetworkSpec spec, std::size_t n) {
  if (spec.layers.empty()) throw ConfigError("network: no layers");
  std::visit(
      [&](auto& layer) {
        using T = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, LinearOutput>)
          layer.out = n;
        else
          throw ConfigError("network: last layer must be dense or linear_output");
      },
      spec.layers.back());
  return spec;
}

/// Fills in Dense/LinearOutput input widths and Conv2D input channels so the
/// chain lines up with `spec.input_shape`.
inline NetworkSpec chain_widths(NetworkSpec spec) {
  Shape cur = spec.input_shape;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    std::visit(
        [&](auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, LinearOutput>) {
            layer.in = shape_size(cur);
            cur = {layer.out};
          } else if constexpr (std::is_same_v<T, Conv2D> || std::is_same_v<T, MaxPool>) {
            if (cur.size() != 3 || cur[1] < layer.kh || cur[2] < layer.kw)
              throw ConfigError("network layer " + std::to_string(l) + ": spatial layer cannot take input " +
                                shape_str(cur));
            if constexpr (std::is_same_v<T, Conv2D>) {
              layer.in_ch = cur[0];
              cur = {layer.out_ch, cur[1] - layer.kh + 1, cur[2] - layer.kw + 1};
            } else {
              cur = {cur[0], cur[1] / layer.kh, cur[2] / layer.kw};
            }
          }
        },
        spec.layers[l]);
  }
  spec.shapes();
  return spec;
}

// ---------------------------------------------------------------------------
// Model files
//
//   robreg-model 1
//   input <rank> <d0> ...
//   layers <L>
//   <one line per layer: dense in out | conv2d in_ch out_ch kh kw |
//    maxpool kh kw | relu | dropout <rate> | linear_output in out>
//   tensor <name> <rank> <d0> ...
//   <values as C99 hex floats, whitespace separated>
//   ...
//   end
//
// Tensor names are layer.<l>.weight, layer.<l>.bias and, optionally,
// input_mean. Hex floats make the round trip bit-exact.
// ---------------------------------------------------------------------------

struct ModelFile {
  NetworkSpec spec;
  NetworkParams params;
  std::optional<Tensor> input_mean;
};

namespace detail {

inline std::string hexfloat(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_double(const std::string& tok) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') throw ConfigError("model file: bad number '" + tok + "'");
  return v;
}

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  os << "tensor " << name << ' ' << t.rank();
  for (auto d : t.shape()) os << ' ' << d;
  os << '\n';
  for (std::size_t k = 0; k < t.size(); ++k)
    os << hexfloat(t[k]) << ((k + 1) % 8 == 0 || k + 1 == t.size() ? '\n' : ' ');
}

inline Tensor read_tensor_body(std::istream& is, const Shape& shape) {
  std::vector<double> data(shape_size(shape));
  std::string tok;
  for (double& v : data) {
    if (!(is >> tok)) throw ConfigError("model file: truncated tensor data");
    v = parse_double(tok);
  }
  return Tensor(shape, std::move(data));
}

inline Shape read_shape(std::istream& is) {
  std::size_t rank = 0;
  if (!(is >> rank) || rank == 0) throw ConfigError("model file: bad tensor rank");
  Shape s(rank);
  for (auto& d : s)
    if (!(is >> d)) throw ConfigError("model file: bad tensor shape");
  return s;
}

}  // namespace detail

inline void write_model(std::ostream& os, const ModelFile& model) {
  os << "robreg-model 1\n";
  os << "input " << model.spec.input_shape.size();
  for (auto d : model.spec.input_shape) os << ' ' << d;
  os << "\nlayers " << model.spec.layers.size() << '\n';
  for (const auto& layer : model.spec.layers) {
    os << layer_name(layer);
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, LinearOutput>)
            os << ' ' << l.in << ' ' << l.out;
          else if constexpr (std::is_same_v<T, Conv2D>)
            os << ' ' << l.in_ch << ' ' << l.out_ch << ' ' << l.kh << ' ' << l.kw;
          else if constexpr (std::is_same_v<T, MaxPool>)
            os << ' ' << l.kh << ' ' << l.kw;
          else if constexpr (std::is_same_v<T, Dropout>)
            os << ' ' << detail::hexfloat(l.rate);
        },
        layer);
    os << '\n';
  }
  for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
    const auto& p = model.params.layers[l];
    if (!p.has_params()) continue;
    detail::write_tensor(os, "layer." + std::to_string(l) + ".weight", p.weight);
    detail::write_tensor(os, "layer." + std::to_string(l) + ".bias", p.bias);
  }
  if (model.input_mean) detail::write_tensor(os, "input_mean", *model.input_mean);
  os << "end\n";
}

inline ModelFile read_model(std::istream& is) {
  std::string tok;
  int version = 0;
  if (!(is >> tok >> version) || tok != "robreg-model")
    throw ConfigError("model file: missing 'robreg-model' header");
  if (version != 1) throw ConfigError("model file: unsupported version " + std::to_string(version));
  ModelFile model;
  if (!(is >> tok) || tok != "input") throw ConfigError("model file: expected 'input'");
  model.spec.input_shape = detail::read_shape(is);
  std::size_t count = 0;
  if (!(is >> tok >> count) || tok != "layers") throw ConfigError("model file: expected 'layers'");
  for (std::size_t l = 0; l < count; ++l) {
    if (!(is >> tok)) throw ConfigError("model file: truncated layer list");
    std::size_t a = 0, b = 0, c = 0, d = 0;
    if (tok == "dense" && (is >> a >> b)) model.spec.layers.emplace_back(Dense{a, b});
    else if (tok == "linear_output" && (is >> a >> b)) model.spec.layers.emplace_back(LinearOutput{a, b});
    else if (tok == "conv2d" && (is >> a >> b >> c >> d)) model.spec.layers.emplace_back(Conv2D{a, b, c, d});
    else if (tok == "maxpool" && (is >> a >> b)) model.spec.layers.emplace_back(MaxPool{a, b});
    else if (tok == "relu") model.spec.layers.emplace_back(ReLU{});
    else if (tok == "dropout") {
      std::string rate;
      if (!(is >> rate)) throw ConfigError("model file: dropout without rate");
      model.spec.layers.emplace_back(Dropout{detail::parse_double(rate)});
    } else {
      throw ConfigError("model file: bad layer entry '" + tok + "'");
    }
  }
  model.spec.shapes();
  model.params.layers.resize(count);
  while (is >> tok && tok != "end") {
    if (tok != "tensor") throw ConfigError("model file: expected 'tensor', got '" + tok + "'");
    std::string name;
    is >> name;
    Shape shape = detail::read_shape(is);
    Tensor t = detail::read_tensor_body(is, shape);
    if (name == "input_mean") {
      model.input_mean = std::move(t);
      continue;
    }
    std::size_t l = 0;
    char field[16] = {};
    if (std::sscanf(name.c_str(), "layer.%zu.%15s", &l, field) != 2 || l >= count)
      throw ConfigError("model file: bad tensor name '" + name + "'");
    if (std::string(field) == "weight") model.params.layers[l].weight = std::move(t);
    else if (std::string(field) == "bias") model.params.layers[l].bias = std::move(t);
    else throw ConfigError("model file: bad tensor name '" + name + "'");
  }
  if (tok != "end") throw ConfigError("model file: missing 'end'");
  Rng probe(0);
  const NetworkParams expected = init_params(model.spec, probe, 0.0);
  if (!model.params.same_shapes(expected))
    throw ConfigError("model file: parameter shapes do not match the layer list");
  return model;
}

}  // namespace robreg
