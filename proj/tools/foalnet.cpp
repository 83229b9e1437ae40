// foalnet: synthetic data generation, training, evaluation, leave-one-group-out
// cross-validation with ablations, and the gradient self-check.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "foal/data.hpp"
#include "foal/errors.hpp"
#include "foal/gradcheck_suite.hpp"
#include "foal/model.hpp"
#include "foal/run_config.hpp"
#include "foal/trainer.hpp"

namespace fs = std::filesystem;
using namespace foal;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::string format_metrics(const Metrics& m, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << "UA " << m.ua << "  WA " << m.wa << "  (n=" << m.count << ")\n";
  os << "confusion (rows = truth, cols = prediction)\n";
  os << std::setw(10) << "";
  for (const auto& n : names) os << std::setw(9) << n.substr(0, 8);
  os << '\n';
  for (std::size_t r = 0; r < m.confusion.size(); ++r) {
    os << std::setw(10) << names[r].substr(0, 9);
    for (auto v : m.confusion[r]) os << std::setw(9) << v;
    os << '\n';
  }
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

struct TrainSplit {
  Dataset train;
  Dataset val;
};

TrainSplit split_for_training(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("config key 'data' is required");
  Dataset data = load_dataset(cfg.data);
  if (!cfg.val_data.empty()) return {std::move(data), load_dataset(cfg.val_data)};
  std::set<std::uint32_t> groups;
  for (const auto& s : data.samples) groups.insert(s.group);
  if (groups.size() < 2) throw DataError("need val_data or at least two groups to hold one out");
  const std::uint32_t held = cfg.val_group < 0 ? *groups.rbegin() : static_cast<std::uint32_t>(cfg.val_group);
  if (!groups.contains(held)) throw ConfigError("val_group " + std::to_string(held) + " not present in the dataset");
  const std::uint32_t g[] = {held};
  return {subset_by_group(data, g, false), subset_by_group(data, g, true)};
}

int cmd_gen_data(const SyntheticSpec& spec, const std::string& out) {
  const Dataset ds = generate_synthetic(spec);
  save_dataset(out, ds);
  const auto& h = ds.header;
  std::cout << "wrote " << out << ": " << h.sample_count << " samples, " << h.classes << " classes, " << spec.groups
            << " groups, scheme " << to_string(spec.scheme) << ", audio " << h.audio_frames << "x" << h.audio_dim
            << ", video " << h.video_frames << "x" << h.video_dim << '\n';
  return 0;
}

int cmd_train(const std::string& config_path) {
  const RunConfig cfg = load_run_config(config_path);
  const TrainSplit split = split_for_training(cfg);
  const FoalNetConfig mc = resolved_model_config(cfg, split.train.header);
  const OptimConfig oc = resolved_optim_config(cfg);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  write_text(out / "config.resolved", to_text(cfg));

  std::ofstream log_file(out / "metrics.ndjson");
  MetricsLog log(&log_file);
  FoalNet model(mc);
  const TrainResult result = train(model, split.train, split.val, oc, {"train", 0, &log, false});
  save_checkpoint(out / "best.ckpt", model);

  const Metrics best = result.best_epoch == 0 ? evaluate(model, split.val, oc.batch_size) : result.best_metrics;
  std::ostringstream summary;
  summary << "best epoch " << result.best_epoch << " of " << oc.epochs << '\n'
          << format_metrics(best, split.val.header.label_names);
  write_text(out / "summary.txt", summary.str());
  std::cout << summary.str();
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, std::string config_path) {
  if (config_path.empty()) config_path = (fs::path(checkpoint).parent_path() / "config.resolved").string();
  const RunConfig cfg = load_run_config(config_path);
  const Dataset data = load_dataset(data_path);
  FoalNet model(resolved_model_config(cfg, data.header));
  load_checkpoint(checkpoint, model);
  const Metrics m = evaluate(model, data, cfg.optim.batch_size);
  std::cout << std::setprecision(17) << "ua " << m.ua << "\nwa " << m.wa << '\n'
            << format_metrics(m, data.header.label_names);
  return 0;
}

int cmd_xval(const std::string& config_path, bool ablation_flag, std::size_t jobs_flag) {
  RunConfig cfg = load_run_config(config_path);
  if (ablation_flag) cfg.ablation = true;
  if (jobs_flag > 0) cfg.jobs = jobs_flag;
  if (cfg.data.empty()) throw ConfigError("config key 'data' is required");
  const Dataset data = load_dataset(cfg.data);
  const FoalNetConfig mc = resolved_model_config(cfg, data.header);
  const OptimConfig oc = resolved_optim_config(cfg);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  write_text(out / "config.resolved", to_text(cfg));
  std::ofstream log_file(out / "metrics.ndjson");
  MetricsLog log(&log_file);

  std::vector<CrossValidationResult> results;
  if (cfg.ablation) {
    results = ablation_grid(data, mc, oc, &log, cfg.jobs);
  } else {
    std::string name = "Baseline";
    for (const auto& cell : ablation_cells()) {
      if (cell.enable_avel == mc.enable_avel && cell.enable_mem == mc.enable_mem) name = cell.name;
    }
    results.push_back(cross_validate(data, mc, oc, name, &log, cfg.jobs));
  }
  const std::string summary = format_summary(results);
  write_text(out / "summary.txt", summary);
  std::cout << summary;
  return 0;
}

int cmd_gradcheck() {
  bool ok = true;
  double worst = 0.0;
  for (const auto& e : run_gradcheck_suite()) {
    std::cout << std::left << std::setw(40) << e.name << std::right << std::scientific << std::setprecision(2)
              << e.max_relative_error << "  (tol " << e.tolerance << ")  " << (e.passed() ? "PASS" : "FAIL") << '\n';
    ok = ok && e.passed();
    worst = std::max(worst, e.max_relative_error);
  }
  std::cout << "max relative error " << std::scientific << std::setprecision(2) << worst
            << (ok ? " <= 1e-4: PASS" : ": FAIL") << '\n';
  return ok ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Alignment-before-fusion multitask classifier over audio/video embeddings"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string scheme = "complementary";
  std::string gen_out = "synthetic.foal";
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic embedding dataset");
  gen->add_option("--out,-o", gen_out, "Output dataset path")->capture_default_str();
  gen->add_option("--classes", spec.classes)->capture_default_str();
  gen->add_option("--groups", spec.groups)->capture_default_str();
  gen->add_option("--per-class", spec.per_class, "Samples per class per group")->capture_default_str();
  gen->add_option("--audio-dim", spec.audio_dim)->capture_default_str();
  gen->add_option("--video-dim", spec.video_dim)->capture_default_str();
  gen->add_option("--audio-frames", spec.audio_frames)->capture_default_str();
  gen->add_option("--video-frames", spec.video_frames)->capture_default_str();
  gen->add_option("--separation", spec.separation)->capture_default_str();
  gen->add_option("--noise", spec.noise)->capture_default_str();
  gen->add_option("--scheme", scheme, "complementary or redundant")->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "Train one model and keep the best checkpoint");
  train_cmd->add_option("--config,-c", config_path, "Run config (key = value)")->required();

  std::string checkpoint, eval_data, eval_config;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--config", eval_config, "Defaults to config.resolved next to the checkpoint");

  bool ablation = false;
  std::size_t jobs = 0;
  auto* xval_cmd = app.add_subcommand("xval", "Leave-one-group-out cross-validation");
  xval_cmd->add_option("--config,-c", config_path)->required();
  xval_cmd->add_flag("--ablation", ablation, "Run Baseline, +AVEL, +MEM and +AVEL+MEM");
  xval_cmd->add_option("--jobs", jobs, "Parallel fold workers (overrides config)");

  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every primitive, layer and loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) {
      spec.scheme = parse_scheme(scheme);
      return cmd_gen_data(spec, gen_out);
    }
    if (train_cmd->parsed()) return cmd_train(config_path);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint, eval_data, eval_config);
    if (xval_cmd->parsed()) return cmd_xval(config_path, ablation, jobs);
    if (gc_cmd->parsed()) return cmd_gradcheck();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return 1;
}
