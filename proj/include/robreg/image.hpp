#pragma once

// Single-channel images stored as Tensor [1, H, W]. Continuous pixel
// coordinates put the centre of pixel (c, r) at (c + 0.5, r + 0.5), so a
// normalised coordinate u maps to u * W pixels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "robreg/errors.hpp"
#include "robreg/numerics.hpp"

namespace robreg {

inline bool is_image_shape(const Shape& s) { return s.size() == 3 && s[0] == 1; }

inline std::size_t image_height(const Tensor& img) { return img.dim(1); }
inline std::size_t image_width(const Tensor& img) { return img.dim(2); }

/// Bilinear interpolation at continuous coordinate (px, py); zero outside the image.
inline double sample_bilinear(const Tensor& img, double px, double py) {
  const auto h = static_cast<long>(image_height(img));
  const auto w = static_cast<long>(image_width(img));
  const double fx = px - 0.5, fy = py - 0.5;
  const long x0 = static_cast<long>(std::floor(fx));
  const long y0 = static_cast<long>(std::floor(fy));
  const double ax = fx - static_cast<double>(x0);
  const double ay = fy - static_cast<double>(y0);
  auto pixel = [&](long x, long y) -> double {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
    return img[static_cast<std::size_t>(y * w + x)];
  };
  return (1 - ay) * ((1 - ax) * pixel(x0, y0) + ax * pixel(x0 + 1, y0)) +
         ay * ((1 - ax) * pixel(x0, y0 + 1) + ax * pixel(x0 + 1, y0 + 1));
}

/// Axis-aligned box (pixel units) resampled to out_h x out_w.
/// Resamples the source window [x0, x0+w) x [y0, y0+h) onto out_h x out_w
/// pixels. When shrinking, each output pixel averages ceil(scale)^2 bilinear
/// samples spread over its footprint, so thin strokes are not lost.
inline Tensor resample_box(const Tensor& img, double x0, double y0, double w, double h,
                           std::size_t out_h, std::size_t out_w) {
  Tensor out({1, out_h, out_w});
  const double sx = w / static_cast<double>(out_w);
  const double sy = h / static_cast<double>(out_h);
  const auto nx = static_cast<std::size_t>(std::max(1.0, std::ceil(sx - 1e-9)));
  const auto ny = static_cast<std::size_t>(std::max(1.0, std::ceil(sy - 1e-9)));
  const double norm = 1.0 / static_cast<double>(nx * ny);
  for (std::size_t r = 0; r < out_h; ++r)
    for (std::size_t c = 0; c < out_w; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < ny; ++j)
        for (std::size_t i = 0; i < nx; ++i)
          acc += sample_bilinear(
              img, x0 + (static_cast<double>(c) + (static_cast<double>(i) + 0.5) / nx) * sx,
              y0 + (static_cast<double>(r) + (static_cast<double>(j) + 0.5) / ny) * sy);
      out[r * out_w + c] = acc * norm;
    }
  return out;
}

inline Tensor resize_image(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  if (image_height(img) == out_h && image_width(img) == out_w) return img;
  return resample_box(img, 0.0, 0.0, static_cast<double>(image_width(img)),
                      static_cast<double>(image_height(img)), out_h, out_w);
}

/// Rotation by `radians` about the image centre (counter-clockwise in x-right, y-down).
inline Tensor rotate_image(const Tensor& img, double radians) {
  const std::size_t h = image_height(img), w = image_width(img);
  const double cx = static_cast<double>(w) / 2.0, cy = static_cast<double>(h) / 2.0;
  const double cs = std::cos(radians), sn = std::sin(radians);
  Tensor out(img.shape());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double qx = static_cast<double>(c) + 0.5 - cx;
      const double qy = static_cast<double>(r) + 0.5 - cy;
      // inverse rotation of the destination point
      out[r * w + c] = sample_bilinear(img, cs * qx + sn * qy + cx, -sn * qx + cs * qy + cy);
    }
  return out;
}

inline Tensor flip_image_horizontal(const Tensor& img) {
  const std::size_t h = image_height(img), w = image_width(img);
  Tensor out(img.shape());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = img[r * w + (w - 1 - c)];
  return out;
}

/// Binary 16-bit PGM; values are clamped to [0, 1].
inline void write_pgm(const std::string& path, const Tensor& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write image '" + path + "'");
  const std::size_t h = image_height(img), w = image_width(img);
  os << "P5\n" << w << ' ' << h << "\n65535\n";
  for (double v : img.data()) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    const char bytes[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xFF)};
    os.write(bytes, 2);
  }
}

/// Reads P5 (8- or 16-bit) and P2 PGM files into [1, H, W] scaled to [0, 1].
inline Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read image '" + path + "'");
  std::string magic;
  is >> magic;
  auto next_int = [&]() {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string skip;
      std::getline(is, skip);
      is >> std::ws;
    }
    long v = -1;
    is >> v;
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if ((magic != "P5" && magic != "P2") || w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
    throw ConfigError("'" + path + "' is not a supported PGM file");
  Tensor img({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const double scale = 1.0 / static_cast<double>(maxval);
  if (magic == "P2") {
    for (double& v : img.data()) v = static_cast<double>(next_int()) * scale;
  } else {
    is.get();
    for (double& v : img.data()) {
      unsigned value = static_cast<unsigned char>(is.get());
      if (maxval > 255) value = (value << 8) | static_cast<unsigned char>(is.get());
      v = static_cast<double>(value) * scale;
    }
  }
  if (!is) throw ConfigError("'" + path + "' is truncated");
  return img;
}

}  // namespace robreg
