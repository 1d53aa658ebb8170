#pragma once

// Experiment configuration in a flat text format:
//
//   # comment
//   task = figure
//   [sgd]                  (optional section; prefixes the keys below it, [] ends it)
//   learning_rate = 0.01
//   loss.kind = tukey      (dotted keys work anywhere)
//
// Every key has a default, so an empty file is a valid config. Errors name
// the file and line the offending value came from.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "robreg/errors.hpp"
#include "robreg/network.hpp"

namespace robreg {

enum class ValueKind { Count, Real, Flag, Choice, Text };

struct KeyInfo {
  const char* key;
  ValueKind kind;
  const char* fallback;
  /// Space-separated allowed values for Choice keys.
  const char* choices = "";
};

inline const std::vector<KeyInfo>& config_keys() {
  static const std::vector<KeyInfo> keys = {
      {"task", ValueKind::Choice, "linear", "linear figure"},
      {"seed", ValueKind::Count, "1"},
      {"out", ValueKind::Text, "out"},
      {"data.train_size", ValueKind::Count, "2000"},
      {"data.val_size", ValueKind::Count, "500"},
      {"data.test_size", ValueKind::Count, "500"},
      {"linear.input_dim", ValueKind::Count, "10"},
      {"linear.output_dim", ValueKind::Count, "8"},
      {"linear.noise", ValueKind::Real, "0.05"},
      {"linear.frame", ValueKind::Real, "100"},
      {"figure.joints", ValueKind::Count, "6"},
      {"figure.render_size", ValueKind::Count, "64"},
      {"figure.bone_min", ValueKind::Real, "8"},
      {"figure.bone_max", ValueKind::Real, "16"},
      {"figure.thickness", ValueKind::Real, "1.5"},
      {"figure.border", ValueKind::Real, "2"},
      {"figure.max_bend_deg", ValueKind::Real, "120"},
      {"outliers.fraction", ValueKind::Real, "0"},
      {"outliers.mechanism", ValueKind::Choice, "target_corruption",
       "target_corruption annotation_jitter"},
      {"outliers.jitter_scale", ValueKind::Real, "0.1"},
      {"augment.copies", ValueKind::Count, "0"},
      {"augment.noise", ValueKind::Real, "0"},
      {"augment.max_rotation_deg", ValueKind::Real, "30"},
      {"augment.flip_probability", ValueKind::Real, "0.5"},
      {"network.layers", ValueKind::Text, "linear_output"},
      {"network.input_size", ValueKind::Count, "20"},
      {"network.normalize_inputs", ValueKind::Flag, "true"},
      {"loss.kind", ValueKind::Choice, "tukey", "tukey l2"},
      {"loss.c", ValueKind::Real, "4.6851"},
      {"loss.warmup_factor", ValueKind::Real, "7"},
      {"loss.warmup_iterations", ValueKind::Count, "50"},
      {"sgd.learning_rate", ValueKind::Real, "0.01"},
      {"sgd.momentum", ValueKind::Real, "0.9"},
      {"sgd.batch_size", ValueKind::Count, "230"},
      {"sgd.max_epochs", ValueKind::Count, "100"},
      {"sgd.patience", ValueKind::Count, "10"},
      {"sgd.mad_cadence", ValueKind::Choice, "epoch", "epoch batch"},
      {"cascade.subsets", ValueKind::Text, ""},
      {"cascade.margin", ValueKind::Real, "0.25"},
      {"cascade.min_extent", ValueKind::Real, "8"},
      {"cascade.input_size", ValueKind::Count, "24"},
      {"cascade.crop", ValueKind::Choice, "bbox", "bbox full"},
      {"cascade.refiner_layers", ValueKind::Text, ""},
  };
  return keys;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string collapse_spaces(std::string_view s) {
  std::istringstream is{std::string(s)};
  std::string word, out;
  while (is >> word) out += (out.empty() ? "" : " ") + word;
  return out;
}

/// Shortest text that parses back to the same double.
inline std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline const KeyInfo* find_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (key == k.key) return &k;
  return nullptr;
}

inline std::vector<std::string> words(std::string_view s) {
  std::istringstream is{std::string(s)};
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline bool parse_count(const std::string& s, std::size_t& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline bool parse_real(const std::string& s, double& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace detail

class ExperimentConfig {
 public:
  ExperimentConfig() {
    for (const auto& k : config_keys()) entries_[k.key] = {canonical_value(k, k.fallback), "unset (default)"};
  }

  /// `source` names the text in error messages (usually the file path).
  static ExperimentConfig parse(std::string_view text, const std::string& source) {
    ExperimentConfig cfg;
    std::map<std::string, std::size_t> seen;
    std::string section;
    std::size_t line_no = 0;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
      ++line_no;
      const std::string where = source + ":" + std::to_string(line_no);
      const auto hash = line.find('#');
      const std::string body = detail::trim(std::string_view(line).substr(0, hash));
      if (body.empty()) continue;
      if (body.front() == '[') {
        if (body.back() != ']') throw ConfigError(where + ": unterminated section header");
        section = detail::trim(std::string_view(body).substr(1, body.size() - 2));
        continue;
      }
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      std::string key = detail::trim(std::string_view(body).substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": missing key before '='");
      if (!section.empty()) key = section + "." + key;
      if (auto it = seen.find(key); it != seen.end())
        throw ConfigError(where + ": '" + key + "' already set on line " + std::to_string(it->second));
      seen[key] = line_no;
      cfg.set(key, body.substr(eq + 1), where);
    }
    return cfg;
  }

  /// Validates and stores one value. `origin` is used in later error messages.
  void set(const std::string& key, const std::string& value, const std::string& origin) {
    const KeyInfo* info = detail::find_key(key);
    if (!info) throw ConfigError(origin + ": unknown key '" + key + "'");
    try {
      entries_[key] = {canonical_value(*info, value), origin};
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + key + ": " + e.what());
    }
  }

  /// "key=value" from the command line.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--override '" + assignment + "': expected key=value");
    set(detail::trim(std::string_view(assignment).substr(0, eq)), assignment.substr(eq + 1),
        "--override " + assignment);
  }

  const std::string& raw(const std::string& key) const { return entry(key).value; }
  const std::string& origin(const std::string& key) const { return entry(key).origin; }

  std::size_t count(const std::string& key) const {
    std::size_t v = 0;
    detail::parse_count(raw(key), v);
    return v;
  }
  double real(const std::string& key) const {
    double v = 0.0;
    detail::parse_real(raw(key), v);
    return v;
  }
  bool flag(const std::string& key) const { return raw(key) == "true"; }

  /// ConfigError prefixed with the origin of `key`.
  [[noreturn]] void fail(const std::string& key, const std::string& message) const {
    throw ConfigError(origin(key) + ": " + key + ": " + message);
  }

  /// One "key = value" line per key in sorted order; the output directory is
  /// left out because it does not affect results.
  std::string canonical() const {
    std::string out;
    for (const auto& [key, e] : entries_) {
      if (key == "out") continue;
      out += key + " = " + e.value + "\n";
    }
    return out;
  }

  /// 64-bit FNV-1a of canonical().
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }

 private:
  struct Entry {
    std::string value;
    std::string origin;
  };

  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  static std::string canonical_value(const KeyInfo& info, const std::string& raw_value) {
    const std::string v = detail::trim(raw_value);
    switch (info.kind) {
      case ValueKind::Count: {
        std::size_t n = 0;
        if (!detail::parse_count(v, n)) throw ConfigError("expected a non-negative integer, got '" + v + "'");
        return std::to_string(n);
      }
      case ValueKind::Real: {
        double x = 0.0;
        if (!detail::parse_real(v, x)) throw ConfigError("expected a number, got '" + v + "'");
        return detail::shortest(x);
      }
      case ValueKind::Flag:
        if (v == "true" || v == "1" || v == "yes") return "true";
        if (v == "false" || v == "0" || v == "no") return "false";
        throw ConfigError("expected true or false, got '" + v + "'");
      case ValueKind::Choice:
        for (const auto& c : detail::words(info.choices))
          if (v == c) return v;
        throw ConfigError("expected one of {" + std::string(info.choices) + "}, got '" + v + "'");
      case ValueKind::Text:
        return detail::collapse_spaces(v);
    }
    return v;
  }

  std::map<std::string, Entry> entries_;
};

/// Parses "conv2d 8 5 5, relu, maxpool 2, dense 64, dropout 0.5, linear_output".
/// Input widths and the output width are left for chain_widths / with_output_dim.
inline std::vector<LayerSpec> parse_layers(const std::string& text) {
  std::vector<LayerSpec> layers;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = std::min(text.find(',', start), text.size());
    const auto w = detail::words(std::string_view(text).substr(start, comma - start));
    start = comma + 1;
    if (w.empty()) throw ConfigError("empty layer entry");
    std::vector<std::size_t> n;
    for (std::size_t k = 1; k < w.size(); ++k) {
      std::size_t v = 0;
      if (w[0] != "dropout" && !detail::parse_count(w[k], v))
        throw ConfigError("bad number '" + w[k] + "' in layer '" + w[0] + "'");
      n.push_back(v);
    }
    const std::string& name = w[0];
    if (name == "conv2d" && (n.size() == 2 || n.size() == 3)) {
      layers.emplace_back(Conv2D{0, n[0], n[1], n.size() == 3 ? n[2] : n[1]});
    } else if (name == "maxpool" && (n.size() == 1 || n.size() == 2)) {
      layers.emplace_back(MaxPool{n[0], n.size() == 2 ? n[1] : n[0]});
    } else if (name == "dense" && n.size() == 1) {
      layers.emplace_back(Dense{0, n[0]});
    } else if (name == "relu" && n.empty()) {
      layers.emplace_back(ReLU{});
    } else if (name == "dropout" && w.size() <= 2) {
      double rate = 0.5;
      if (w.size() == 2 && !detail::parse_real(w[1], rate))
        throw ConfigError("bad dropout rate '" + w[1] + "'");
      layers.emplace_back(Dropout{rate});
    } else if (name == "linear_output" && n.empty()) {
      layers.emplace_back(LinearOutput{0, 1});
    } else {
      throw ConfigError("cannot read layer '" + name + "' with " + std::to_string(w.size() - 1) +
                        " argument(s)");
    }
  }
  return layers;
}

/// Parses "0 1 2 3; 2 3 4 5" into output-index subsets.
inline std::vector<std::vector<std::size_t>> parse_subsets(const std::string& text) {
  std::vector<std::vector<std::size_t>> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto semi = std::min(text.find(';', start), text.size());
    std::vector<std::size_t> subset;
    for (const auto& w : detail::words(std::string_view(text).substr(start, semi - start))) {
      std::size_t v = 0;
      if (!detail::parse_count(w, v)) throw ConfigError("bad output index '" + w + "'");
      subset.push_back(v);
    }
    out.push_back(std::move(subset));
    start = semi + 1;
  }
  return out;
}

}  // namespace robreg
