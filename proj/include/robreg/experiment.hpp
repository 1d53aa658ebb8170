#pragma once

// Builds datasets and networks from an ExperimentConfig and runs the single,
// L2-vs-Tukey and cascade experiments. Also holds the writers for the files
// these runs produce.
//
// Seeding: data come from Rng(seed); outliers from Rng(seed * 7919); every
// training run starts from its own Rng(seed * 31), so the L2 and Tukey twins
// of a comparison see identical data, initial weights and batch order.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robreg/cascade.hpp"
#include "robreg/config.hpp"
#include "robreg/datagen.hpp"
#include "robreg/metrics.hpp"
#include "robreg/network.hpp"
#include "robreg/optimizer.hpp"

namespace robreg {

struct TaskData {
  Dataset train, val, test;
};

inline std::uint64_t outlier_seed(std::uint64_t seed) { return seed * 7919; }
inline std::uint64_t training_seed(std::uint64_t seed) { return seed * 31; }

inline ArticulatedFigureSpec figure_spec(const ExperimentConfig& cfg) {
  ArticulatedFigureSpec fs;
  fs.joints = cfg.count("figure.joints");
  fs.render_size = cfg.count("figure.render_size");
  fs.bone_min = cfg.real("figure.bone_min");
  fs.bone_max = cfg.real("figure.bone_max");
  fs.thickness = cfg.real("figure.thickness");
  fs.border = cfg.real("figure.border");
  fs.max_bend = cfg.real("figure.max_bend_deg") * std::numbers::pi / 180.0;
  try {
    fs.validate();
  } catch (const ConfigError& e) {
    cfg.fail("figure.joints", e.what());
  }
  return fs;
}

/// Training split (with outliers and augmentation), clean validation split and
/// clean test split.
inline TaskData make_task_data(const ExperimentConfig& cfg) {
  const std::uint64_t seed = cfg.count("seed");
  for (const char* key : {"data.train_size", "data.val_size", "data.test_size"})
    if (cfg.count(key) == 0) cfg.fail(key, "must be positive");
  Rng rng(seed);
  TaskData d;
  if (cfg.raw("task") == "linear") {
    const std::size_t in = cfg.count("linear.input_dim"), out = cfg.count("linear.output_dim");
    if (in == 0) cfg.fail("linear.input_dim", "must be positive");
    if (out == 0) cfg.fail("linear.output_dim", "must be positive");
    if (!(cfg.real("linear.frame") > 0.0)) cfg.fail("linear.frame", "must be positive");
    const Frame frame{cfg.real("linear.frame"), cfg.real("linear.frame")};
    const LinearMap map = gen_linear_map(in, out, rng);
    d.train = sample_linear_task(map, cfg.count("data.train_size"), cfg.real("linear.noise"), rng, frame);
    d.val = sample_linear_task(map, cfg.count("data.val_size"), 0.0, rng, frame);
    d.test = sample_linear_task(map, cfg.count("data.test_size"), 0.0, rng, frame);
  } else {
    const ArticulatedFigureSpec fs = figure_spec(cfg);
    d.train = gen_figure_task(fs, cfg.count("data.train_size"), rng);
    d.val = gen_figure_task(fs, cfg.count("data.val_size"), rng);
    d.test = gen_figure_task(fs, cfg.count("data.test_size"), rng);
  }

  OutlierConfig oc;
  oc.fraction = cfg.real("outliers.fraction");
  oc.mechanism = cfg.raw("outliers.mechanism") == "annotation_jitter" ? OutlierMechanism::AnnotationJitter
                                                                      : OutlierMechanism::TargetCorruption;
  oc.jitter_scale = cfg.real("outliers.jitter_scale");
  oc.seed = outlier_seed(seed);
  if (!(oc.fraction >= 0.0 && oc.fraction < 1.0)) cfg.fail("outliers.fraction", "must lie in [0, 1)");
  d.train = inject_outliers(std::move(d.train), oc);

  if (const std::size_t copies = cfg.count("augment.copies"); copies > 0) {
    AugmentOptions opts;
    opts.max_rotation_deg = cfg.real("augment.max_rotation_deg");
    opts.flip_probability = cfg.real("augment.flip_probability");
    if (cfg.raw("task") == "linear") opts.max_rotation_deg = opts.flip_probability = 0.0;
    d.train = augment(d.train, copies, cfg.real("augment.noise"), rng, opts);
  }
  return d;
}

inline LossSpec loss_spec(const ExperimentConfig& cfg, LossKind kind) {
  LossSpec l;
  l.kind = kind;
  l.c = cfg.real("loss.c");
  l.warmup_factor = cfg.real("loss.warmup_factor");
  l.warmup_iters = static_cast<std::int64_t>(cfg.count("loss.warmup_iterations"));
  try {
    l.validate();
  } catch (const ConfigError& e) {
    cfg.fail("loss.c", e.what());
  }
  return l;
}

inline LossKind configured_loss(const ExperimentConfig& cfg) {
  return cfg.raw("loss.kind") == "l2" ? LossKind::L2 : LossKind::TukeyBiweight;
}

inline SgdConfig sgd_config(const ExperimentConfig& cfg) {
  SgdConfig s;
  s.learning_rate = cfg.real("sgd.learning_rate");
  s.momentum = cfg.real("sgd.momentum");
  s.batch_size = cfg.count("sgd.batch_size");
  s.max_epochs = cfg.count("sgd.max_epochs");
  s.early_stop_patience = cfg.count("sgd.patience");
  s.mad_cadence = cfg.raw("sgd.mad_cadence") == "batch" ? MadCadence::PerBatch : MadCadence::PerEpoch;
  try {
    s.validate();
  } catch (const ConfigError& e) {
    cfg.fail("sgd.learning_rate", e.what());
  }
  return s;
}

/// Network from a layer list, wired to `input_shape` and `outputs`.
inline NetworkSpec build_network(const ExperimentConfig& cfg, const std::string& key,
                                 const Shape& input_shape, std::size_t outputs) {
  try {
    NetworkSpec spec;
    spec.input_shape = input_shape;
    spec.layers = parse_layers(cfg.raw(key));
    return chain_widths(with_output_dim(std::move(spec), outputs));
  } catch (const ConfigError& e) {
    cfg.fail(key, e.what());
  }
}

/// Per-sample shape the primary network sees: vectors unchanged, images
/// downsampled to network.input_size squared.
inline Shape network_input_shape(const ExperimentConfig& cfg, const Dataset& data) {
  if (!is_image_shape(data.input_shape)) return data.input_shape;
  const std::size_t s = cfg.count("network.input_size");
  if (s == 0) cfg.fail("network.input_size", "must be positive");
  return {1, s, s};
}

inline Dataset network_view(const Dataset& data, const Shape& input_shape) {
  if (data.input_shape == input_shape) return data;
  NetworkSpec probe;
  probe.input_shape = input_shape;
  return detail::stage1_dataset(data, probe);
}

inline SkeletonDef skeleton_of(const Dataset& data) { return {data.limbs}; }

inline MetricReport evaluate_on(const Tensor& pred, const Dataset& data) {
  const SkeletonDef sk = skeleton_of(data);
  return evaluate(pred, data.all_targets(), data.frame, sk.limbs.empty() ? nullptr : &sk);
}

struct SingleRun {
  LossKind loss = LossKind::TukeyBiweight;
  TrainState state;
  TrainedNetwork network;
  MetricReport val_report;
  MetricReport test_report;
};

inline SingleRun run_single(const ExperimentConfig& cfg, const TaskData& data, LossKind kind) {
  const Shape in_shape = network_input_shape(cfg, data.train);
  const NetworkSpec spec = build_network(cfg, "network.layers", in_shape, data.train.output_dim);
  const Dataset tr = network_view(data.train, in_shape);
  const Dataset va = network_view(data.val, in_shape);
  const Dataset te = network_view(data.test, in_shape);
  Rng rng(training_seed(cfg.count("seed")));
  SingleRun run;
  run.loss = kind;
  run.network = detail::fit(tr, va, spec, cfg.flag("network.normalize_inputs"), loss_spec(cfg, kind),
                            sgd_config(cfg), rng, run.state);
  run.val_report = evaluate_on(run.network.run(images_of(va)), va);
  run.test_report = evaluate_on(run.network.run(images_of(te)), te);
  return run;
}

struct Comparison {
  SingleRun l2, tukey;
  ReachResult reach;
};

inline std::vector<double> val_history(const TrainState& st) {
  std::vector<double> h;
  for (const auto& r : st.history) h.push_back(r.val_error);
  return h;
}

inline Comparison run_compare(const ExperimentConfig& cfg, const TaskData& data) {
  Comparison c;
  c.l2 = run_single(cfg, data, LossKind::L2);
  c.tukey = run_single(cfg, data, LossKind::TukeyBiweight);
  c.reach = epochs_to_reach(val_history(c.l2.state), val_history(c.tukey.state));
  return c;
}

inline CascadeConfig cascade_config(const ExperimentConfig& cfg, const Dataset& data) {
  if (!is_image_shape(data.input_shape)) cfg.fail("task", "the cascade needs an image task");
  if (cfg.raw("cascade.subsets").empty()) cfg.fail("cascade.subsets", "no regions defined");
  CascadeConfig cc;
  const Shape in_shape = network_input_shape(cfg, data);
  cc.stage1 = build_network(cfg, "network.layers", in_shape, data.output_dim);
  try {
    cc.regions.subsets = parse_subsets(cfg.raw("cascade.subsets"));
    cc.regions.margin = cfg.real("cascade.margin");
    cc.regions.min_extent = cfg.real("cascade.min_extent");
    cc.regions.input_h = cc.regions.input_w = cfg.count("cascade.input_size");
    if (cfg.raw("cascade.crop") == "full") cc.regions.crop_rule = full_image_crop_rule;
    cc.regions.validate(data.output_dim);
  } catch (const ConfigError& e) {
    cfg.fail("cascade.subsets", e.what());
  }
  const std::string refiner_key = cfg.raw("cascade.refiner_layers").empty() ? "network.layers"
                                                                            : "cascade.refiner_layers";
  // Validate the refiner family once against the first region's shape.
  const Shape r_shape{1, cc.regions.input_h, cc.regions.input_w};
  cc.refiner = build_network(cfg, refiner_key, r_shape, cc.regions.subsets.front().size());
  cc.normalize_inputs = cfg.flag("network.normalize_inputs");
  return cc;
}

struct CascadeSplitReport {
  MetricReport stage1, refined;
  std::size_t fallbacks = 0;
};

struct CascadeRun {
  CascadeTrainResult result;
  CascadeSplitReport val, test;
};

inline CascadeSplitReport evaluate_cascade(const CascadeModel& model, const Dataset& data) {
  const CascadeOutput out = refine(images_of(data), model);
  return {evaluate_on(out.stage1, data), evaluate_on(out.refined, data), out.fallbacks};
}

inline CascadeRun run_cascade(const ExperimentConfig& cfg, const TaskData& data) {
  const CascadeConfig cc = cascade_config(cfg, data.train);
  Rng rng(training_seed(cfg.count("seed")));
  CascadeRun run;
  run.result = train_cascade(data.train, data.val, cc, loss_spec(cfg, configured_loss(cfg)),
                             sgd_config(cfg), rng);
  run.val = evaluate_cascade(run.result.model, data.val);
  run.test = evaluate_cascade(run.result.model, data.test);
  return run;
}

// ---------------------------------------------------------------------------
// Output files. Every file starts with the config hash and seed.
// ---------------------------------------------------------------------------

inline std::string provenance_line(const ExperimentConfig& cfg) {
  return "# config_hash=" + cfg.hash_hex() + " seed=" + cfg.raw("seed");
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "NA";
  return detail::shortest(v);
}

/// Columns: epoch, train_loss, val_mpe, effective_mad_median ("NA" for L2).
inline std::string history_csv(const ExperimentConfig& cfg, const TrainState& st, LossKind kind) {
  std::string out = provenance_line(cfg) + " loss=" + to_string(kind) + "\n";
  out += "epoch,train_loss,val_mpe,effective_mad_median\n";
  for (const auto& r : st.history)
    out += std::to_string(r.epoch) + "," + format_number(r.train_loss) + "," + format_number(r.val_error) +
           "," + format_number(r.effective_mad_median) + "\n";
  return out;
}

/// epoch, l2_val_mpe, tukey_val_mpe; empty cell once a run has stopped.
inline std::string comparison_csv(const ExperimentConfig& cfg, const Comparison& c) {
  const auto a = val_history(c.l2.state), b = val_history(c.tukey.state);
  std::string out = provenance_line(cfg) + "\nepoch,l2_val_mpe,tukey_val_mpe\n";
  for (std::size_t e = 0; e < std::max(a.size(), b.size()); ++e)
    out += std::to_string(e + 1) + "," + (e < a.size() ? format_number(a[e]) : "") + "," +
           (e < b.size() ? format_number(b[e]) : "") + "\n";
  return out;
}

inline nlohmann::ordered_json provenance_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["config_hash"] = cfg.hash_hex();
  j["seed"] = cfg.count("seed");
  return j;
}

inline nlohmann::ordered_json single_report_json(const ExperimentConfig& cfg, const SingleRun& run) {
  auto j = provenance_json(cfg);
  j["loss"] = to_string(run.loss);
  j["best_epoch"] = run.state.best_epoch;
  j["epochs_run"] = run.state.history.size();
  j["validation"] = run.val_report.to_json();
  j["test"] = run.test_report.to_json();
  return j;
}

inline nlohmann::ordered_json comparison_json(const ExperimentConfig& cfg, const Comparison& c) {
  auto j = provenance_json(cfg);
  j["l2_best"] = c.l2.state.best_val_error;
  j["tukey_best"] = c.tukey.state.best_val_error;
  j["reference_error"] = c.reach.reference_error;
  j["epochs_l2"] = c.reach.epoch_a;
  j["epochs_tukey"] = c.reach.epoch_b;
  j["tukey_reached_reference"] = c.reach.reached;
  j["l2_test"] = c.l2.test_report.to_json();
  j["tukey_test"] = c.tukey.test_report.to_json();
  return j;
}

inline nlohmann::ordered_json cascade_json(const ExperimentConfig& cfg, const CascadeRun& run) {
  auto j = provenance_json(cfg);
  auto split = [](const CascadeSplitReport& r) {
    nlohmann::ordered_json s;
    s["stage1"] = r.stage1.to_json();
    s["refined"] = r.refined.to_json();
    s["crop_fallbacks"] = r.fallbacks;
    return s;
  };
  j["loss"] = to_string(configured_loss(cfg));
  j["validation"] = split(run.val);
  j["test"] = split(run.test);
  return j;
}

inline ModelFile model_file(const TrainedNetwork& net) {
  ModelFile m{net.spec, net.params, std::nullopt};
  if (net.mean) m.input_mean = net.mean->mean;
  return m;
}

inline TrainedNetwork network_from(const ModelFile& m) {
  TrainedNetwork net;
  net.spec = m.spec;
  net.params = m.params;
  if (m.input_mean) net.mean = InputMean{*m.input_mean};
  net.trained = true;
  return net;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArgumentError("cannot write '" + path.string() + "'");
  os << text;
}

inline void write_model_file(const std::filesystem::path& path, const TrainedNetwork& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArgumentError("cannot write '" + path.string() + "'");
  write_model(os, model_file(net));
}

/// Predictions of a stored model on a dataset, resizing images to the model's
/// input resolution when they differ.
inline MetricReport evaluate_model(const ModelFile& m, const Dataset& data) {
  const TrainedNetwork net = network_from(m);
  if (data.input_shape != m.spec.input_shape && !(is_image_shape(data.input_shape) &&
                                                  is_image_shape(m.spec.input_shape)))
    throw DimensionError("model takes " + shape_str(m.spec.input_shape) + " inputs, dataset has " +
                         shape_str(data.input_shape));
  if (m.spec.output_dim() != data.output_dim)
    throw DimensionError("model predicts " + std::to_string(m.spec.output_dim()) +
                         " values, dataset has " + std::to_string(data.output_dim));
  const Dataset view = network_view(data, m.spec.input_shape);
  return evaluate_on(net.run(images_of(view)), view);
}

}  // namespace robreg
