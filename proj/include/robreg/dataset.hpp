#pragma once

#include <array>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "robreg/errors.hpp"
#include "robreg/image.hpp"
#include "robreg/numerics.hpp"

namespace robreg {

/// Pixel extent that normalised keypoint coordinates refer to.
struct Frame {
  double width = 1.0;
  double height = 1.0;
};

struct Sample {
  Tensor input;
  std::vector<double> target;
  /// Ground-truth provenance only; never consulted by training.
  bool is_outlier = false;
};

using Limb = std::array<std::size_t, 2>;

/// Samples sharing one input shape and target width. Keypoint targets are
/// laid out as (x_0, y_0, x_1, y_1, ...) in [0, 1] relative to `frame`.
struct Dataset {
  Shape input_shape;
  std::size_t output_dim = 0;
  Frame frame;
  std::vector<Limb> limbs;
  std::vector<Sample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  /// Same metadata, no samples.
  Dataset like() const {
    Dataset d;
    d.input_shape = input_shape;
    d.output_dim = output_dim;
    d.frame = frame;
    d.limbs = limbs;
    return d;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d = like();
    d.samples.reserve(idx.size());
    for (auto i : idx) d.samples.push_back(samples.at(i));
    return d;
  }

  Tensor inputs(std::span<const std::size_t> idx) const {
    Shape shape{idx.size()};
    shape.insert(shape.end(), input_shape.begin(), input_shape.end());
    Tensor x(shape);
    const std::size_t stride = shape_size(input_shape);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& in = samples[idx[b]].input;
      std::copy(in.data().begin(), in.data().end(), x.data().begin() + b * stride);
    }
    return x;
  }

  Tensor targets(std::span<const std::size_t> idx) const {
    Tensor y({idx.size(), output_dim});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& t = samples[idx[b]].target;
      std::copy(t.begin(), t.end(), y.data().begin() + b * output_dim);
    }
    return y;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }

  Tensor all_inputs() const { return inputs(all_indices()); }
  Tensor all_targets() const { return targets(all_indices()); }

  std::size_t outlier_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.is_outlier ? 1 : 0;
    return n;
  }
};

// ---------------------------------------------------------------------------
// CSV exchange format
//
//   # robreg-dataset frame=<W>x<H> input_shape=<d0>x<d1>... output_dim=<N> limbs=<a>-<b>,...
//   id,is_outlier,<input_0..input_{D-1} | image>,target_0,...,target_{N-1}
//   0,0,...
//
// Vector inputs are written inline; image inputs ([1,H,W]) are written as
// 16-bit PGM files next to the CSV and referenced by relative path.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace detail

inline void write_dataset_csv(const std::filesystem::path& csv_path, const Dataset& data) {
  namespace fs = std::filesystem;
  const bool images = is_image_shape(data.input_shape);
  const fs::path image_dir = csv_path.parent_path() / (csv_path.stem().string() + "_images");
  if (images) fs::create_directories(image_dir);
  std::ofstream os(csv_path);
  if (!os) throw ConfigError("cannot write dataset '" + csv_path.string() + "'");
  os << "# robreg-dataset frame=" << detail::fmt_g17(data.frame.width) << 'x'
     << detail::fmt_g17(data.frame.height) << " input_shape=" << detail::join_shape(data.input_shape)
     << " output_dim=" << data.output_dim << " limbs=";
  for (std::size_t l = 0; l < data.limbs.size(); ++l)
    os << (l ? "," : "") << data.limbs[l][0] << '-' << data.limbs[l][1];
  os << "\nid,is_outlier";
  if (images) {
    os << ",image";
  } else {
    for (std::size_t i = 0; i < shape_size(data.input_shape); ++i) os << ",input_" << i;
  }
  for (std::size_t i = 0; i < data.output_dim; ++i) os << ",target_" << i;
  os << '\n';
  for (std::size_t s = 0; s < data.size(); ++s) {
    const Sample& sample = data.samples[s];
    os << s << ',' << (sample.is_outlier ? 1 : 0);
    if (images) {
      char name[32];
      std::snprintf(name, sizeof name, "%06zu.pgm", s);
      write_pgm((image_dir / name).string(), sample.input);
      os << ',' << (fs::path(image_dir.filename()) / name).generic_string();
    } else {
      for (double v : sample.input.data()) os << ',' << detail::fmt_g17(v);
    }
    for (double v : sample.target) os << ',' << detail::fmt_g17(v);
    os << '\n';
  }
}

inline Dataset read_dataset_csv(const std::filesystem::path& csv_path) {
  std::ifstream is(csv_path);
  if (!is) throw ConfigError("cannot read dataset '" + csv_path.string() + "'");
  Dataset data;
  std::string line;
  std::getline(is, line);
  if (line.rfind("# robreg-dataset", 0) != 0)
    throw ConfigError(csv_path.string() + ":1: missing '# robreg-dataset' header");
  std::istringstream meta(line.substr(16));
  std::string kv;
  while (meta >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    if (key == "frame") {
      const auto parts = detail::split(value, 'x');
      if (parts.size() != 2) throw ConfigError(csv_path.string() + ":1: bad frame");
      data.frame = {std::stod(parts[0]), std::stod(parts[1])};
    } else if (key == "input_shape") {
      for (const auto& d : detail::split(value, 'x')) data.input_shape.push_back(std::stoul(d));
    } else if (key == "output_dim") {
      data.output_dim = std::stoul(value);
    } else if (key == "limbs" && !value.empty()) {
      for (const auto& limb : detail::split(value, ',')) {
        const auto ab = detail::split(limb, '-');
        if (ab.size() != 2) throw ConfigError(csv_path.string() + ":1: bad limb '" + limb + "'");
        data.limbs.push_back({std::stoul(ab[0]), std::stoul(ab[1])});
      }
    }
  }
  if (data.input_shape.empty() || data.output_dim == 0)
    throw ConfigError(csv_path.string() + ":1: header lacks input_shape/output_dim");
  const bool images = is_image_shape(data.input_shape);
  const std::size_t in_cols = images ? 1 : shape_size(data.input_shape);
  std::getline(is, line);  // column names
  std::size_t line_no = 2;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split(line, ',');
    if (cells.size() != 2 + in_cols + data.output_dim)
      throw ConfigError(csv_path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(2 + in_cols + data.output_dim) + " columns, got " +
                        std::to_string(cells.size()));
    Sample s;
    s.is_outlier = cells[1] == "1";
    if (images) {
      s.input = read_pgm((csv_path.parent_path() / cells[2]).string());
      if (s.input.shape() != data.input_shape)
        throw ConfigError(csv_path.string() + ":" + std::to_string(line_no) +
                          ": image shape differs from header");
    } else {
      std::vector<double> v(in_cols);
      for (std::size_t i = 0; i < in_cols; ++i) v[i] = std::stod(cells[2 + i]);
      s.input = Tensor(data.input_shape, std::move(v));
    }
    for (std::size_t i = 0; i < data.output_dim; ++i)
      s.target.push_back(std::stod(cells[2 + in_cols + i]));
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace robreg
