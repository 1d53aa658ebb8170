// robreg: train, compare, cascade and eval commands.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "robreg/experiment.hpp"

namespace fs = std::filesystem;
using namespace robreg;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  long long seed = -1;
  std::string out;
};

ExperimentConfig load_config(const CommonOptions& opt) {
  std::ifstream is(opt.config_path);
  if (!is) throw ConfigError(opt.config_path + ": cannot open config");
  std::stringstream text;
  text << is.rdbuf();
  ExperimentConfig cfg = ExperimentConfig::parse(text.str(), opt.config_path);
  for (const auto& o : opt.overrides) cfg.apply_override(o);
  if (opt.seed >= 0) cfg.set("seed", std::to_string(opt.seed), "--seed");
  if (!opt.out.empty()) cfg.set("out", opt.out, "--out");
  return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.raw("out");
  if (dir.empty()) cfg.fail("out", "empty output directory");
  fs::create_directories(dir);
  write_text(dir / "config.conf", provenance_line(cfg) + "\n" + cfg.canonical());
  return dir;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

int cmd_train(const CommonOptions& opt) {
  const ExperimentConfig cfg = load_config(opt);
  const TaskData data = make_task_data(cfg);
  const fs::path dir = prepare_out(cfg);
  const SingleRun run = run_single(cfg, data, configured_loss(cfg));
  write_text(dir / "history.csv", history_csv(cfg, run.state, run.loss));
  write_model_file(dir / "model.txt", run.network);
  write_json(dir / "report.json", single_report_json(cfg, run));
  std::cout << "best validation MPE " << run.state.best_val_error << " at epoch " << run.state.best_epoch
            << "; test MPE " << run.test_report.mpe << "\noutputs in " << dir.string() << "\n";
  return 0;
}

int cmd_compare(const CommonOptions& opt) {
  const ExperimentConfig cfg = load_config(opt);
  const TaskData data = make_task_data(cfg);
  const fs::path dir = prepare_out(cfg);
  const Comparison c = run_compare(cfg, data);
  write_text(dir / "history_l2.csv", history_csv(cfg, c.l2.state, LossKind::L2));
  write_text(dir / "history_tukey.csv", history_csv(cfg, c.tukey.state, LossKind::TukeyBiweight));
  write_text(dir / "comparison.csv", comparison_csv(cfg, c));
  write_model_file(dir / "model_l2.txt", c.l2.network);
  write_model_file(dir / "model_tukey.txt", c.tukey.network);
  write_json(dir / "compare.json", comparison_json(cfg, c));
  std::cout << "l2 best " << c.l2.state.best_val_error << " (epoch " << c.reach.epoch_a << "), tukey best "
            << c.tukey.state.best_val_error << "; tukey "
            << (c.reach.reached ? "reached" : "came closest to") << " the l2 best at epoch "
            << c.reach.epoch_b << "\noutputs in " << dir.string() << "\n";
  return 0;
}

int cmd_cascade(const CommonOptions& opt) {
  const ExperimentConfig cfg = load_config(opt);
  const TaskData data = make_task_data(cfg);
  cascade_config(cfg, data.train);  // fail on config errors before creating outputs
  const fs::path dir = prepare_out(cfg);
  const CascadeRun run = run_cascade(cfg, data);
  const LossKind kind = configured_loss(cfg);
  write_text(dir / "history_stage1.csv", history_csv(cfg, run.result.stage1_state, kind));
  write_model_file(dir / "stage1.txt", run.result.model.stage1);
  for (std::size_t c = 0; c < run.result.model.refiners.size(); ++c) {
    write_text(dir / ("history_refiner" + std::to_string(c) + ".csv"),
               history_csv(cfg, run.result.refiner_states[c], kind));
    write_model_file(dir / ("refiner" + std::to_string(c) + ".txt"), run.result.model.refiners[c]);
  }
  write_json(dir / "cascade.json", cascade_json(cfg, run));
  std::cout << "validation MPE: stage 1 " << run.val.stage1.mpe << ", refined " << run.val.refined.mpe
            << "\noutputs in " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& dataset_path, const std::string& out) {
  std::ifstream is(model_path);
  if (!is) throw ArgumentError("cannot open model '" + model_path + "'");
  const ModelFile m = read_model(is);
  const Dataset data = read_dataset_csv(dataset_path);
  nlohmann::ordered_json j;
  j["model"] = model_path;
  j["dataset"] = dataset_path;
  j["samples"] = data.size();
  j["report"] = evaluate_model(m, data).to_json();
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    fs::create_directories(out);
    write_json(fs::path(out) / "eval.json", j);
    std::cout << "wrote " << (fs::path(out) / "eval.json").string() << "\n";
  }
  return 0;
}

void add_common(CLI::App* sub, CommonOptions& opt) {
  sub->add_option("config", opt.config_path, "Experiment config file")->required();
  sub->add_option("--override", opt.overrides, "Replace a config value: key=value (repeatable)");
  sub->add_option("--seed", opt.seed, "Replace the config seed");
  sub->add_option("--out", opt.out, "Output directory (default from config)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust keypoint regression with Tukey's biweight loss"};
  app.require_subcommand(1);
  CommonOptions opt;
  auto* train = app.add_subcommand("train", "Train one network with the configured loss");
  auto* compare = app.add_subcommand("compare", "Train L2 and Tukey twins and compare convergence");
  auto* cascade = app.add_subcommand("cascade", "Train a stage-1 network and region refiners");
  add_common(train, opt);
  add_common(compare, opt);
  add_common(cascade, opt);
  std::string model_path, dataset_path, eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a saved model on a dataset CSV");
  eval->add_option("params", model_path, "Model file")->required();
  eval->add_option("dataset", dataset_path, "Dataset CSV")->required();
  eval->add_option("--out", eval_out, "Directory for eval.json (default: print)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(opt);
    if (*compare) return cmd_compare(opt);
    if (*cascade) return cmd_cascade(opt);
    return cmd_eval(model_path, dataset_path, eval_out);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: training diverged: " << e.what() << "; last good epoch " << e.last_good_epoch()
              << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
