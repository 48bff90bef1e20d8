#include "coarseseg/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "coarseseg/datasets.hpp"
#include "coarseseg/error.hpp"
#include "coarseseg/eval.hpp"
#include "coarseseg/io.hpp"
#include "coarseseg/loss.hpp"
#include "coarseseg/noise_synth.hpp"
#include "coarseseg/panels.hpp"
#include "coarseseg/sweep.hpp"
#include "coarseseg/train.hpp"

namespace coarseseg::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

fs::path output_path(const fs::path& p) {
  const char* root = std::getenv("COARSESEG_OUTPUT_ROOT");
  if (root && *root && p.is_relative()) return fs::path(root) / p;
  return p;
}

namespace {

std::shared_ptr<spdlog::logger> logger() {
  static auto log = [] {
    auto l = spdlog::stderr_color_st("coarseseg");
    l->set_pattern("[%H:%M:%S] [%^%l%$] %v");
    return l;
  }();
  return log;
}

void refuse_existing(const fs::path& p, bool force) {
  if (!fs::exists(p)) return;
  if (fs::is_directory(p) && fs::is_empty(p)) return;
  if (!force) {
    throw ValidationError(p.string() + " already exists (use --force to overwrite)", "E_EXISTS");
  }
  fs::remove_all(p);
}

void write_invocation(const fs::path& path, const std::string& command, const json& flags) {
  io::write_text_atomic(path, json{{"command", command}, {"flags", flags}}.dump(2) + "\n");
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      if constexpr (std::is_same_v<T, int>) {
        out.push_back(std::stoi(item));
      } else if constexpr (std::is_same_v<T, double>) {
        out.push_back(std::stod(item));
      } else {
        out.push_back(item);
      }
    } catch (const std::logic_error&) {
      throw ValidationError(std::string(what) + ": cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError(std::string(what) + ": empty list");
  return out;
}

TrainConfig load_config(const fs::path& file, const std::vector<std::string>& overrides) {
  json j;
  try {
    j = json::parse(io::read_text(file));
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + file.string() + ": " + e.what(), "E_CONFIG");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return TrainConfig::from_json(j, fs::absolute(file).parent_path());
}

struct Options {
  // dataset build
  std::string source, mode = "binary", out, split_tag = "train";
  std::size_t offset = 0, limit = 0;
  float threshold = 0.5f;
  // dataset split
  std::string data, fractions = "0.8,0.2", names;
  std::uint64_t seed = 0;
  // noise synth
  int level = 2, target_class = -1;
  // train / ablate / sweep
  std::string config, resume, levels = "1,2,3,4,5";
  std::vector<std::string> overrides;
  // eval / panels
  std::string checkpoint, report, sample;
  bool identity_cm = false;
  int scale = 4;
  // gradcheck
  std::string dtype = "float64";
  double grad_threshold = 1e-4, eps = 1e-5;
  std::size_t samples = 0;
  int classes = 3;
  bool break_trace = false;
  bool force = false;
  std::string log_level = "info";
};

int cmd_dataset_build(const Options& o) {
  const fs::path out = output_path(o.out);
  refuse_existing(out, o.force);
  auto raw = read_mnist(o.source, o.offset, o.limit ? o.limit : SIZE_MAX);
  SegDataset ds = build_mnist_seg(raw, mnist_mode_from_string(o.mode), o.threshold);
  ds.split_tag = split_tag_from_string(o.split_tag);
  save_dataset(ds, out);
  write_invocation(out / "config.resolved.json", "dataset build",
                   {{"source", o.source}, {"mode", o.mode}, {"offset", o.offset},
                    {"limit", o.limit}, {"threshold", o.threshold}, {"split", o.split_tag}});
  logger()->info("wrote {} samples to {}", ds.samples.size(), out.string());
  return kExitOk;
}

int cmd_dataset_split(const Options& o) {
  const auto fr = parse_list<double>(o.fractions, "--fractions");
  std::vector<std::string> names;
  if (o.names.empty()) {
    for (std::size_t i = 0; i < fr.size(); ++i) names.push_back("part" + std::to_string(i));
  } else {
    names = parse_list<std::string>(o.names, "--names");
  }
  if (names.size() != fr.size()) throw ValidationError("--names must match --fractions in length");
  const fs::path out = output_path(o.out);
  for (const auto& n : names) refuse_existing(out / n, o.force);
  const SegDataset ds = load_dataset(o.data);
  auto parts = split(ds, fr, o.seed);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (names[i] == "train" || names[i] == "val" || names[i] == "test") {
      parts[i].split_tag = split_tag_from_string(names[i]);
    }
    save_dataset(parts[i], out / names[i]);
    write_invocation(out / names[i] / "config.resolved.json", "dataset split",
                     {{"data", o.data}, {"fractions", fr}, {"seed", o.seed}, {"part", names[i]}});
    logger()->info("{}: {} samples", (out / names[i]).string(), parts[i].samples.size());
  }
  return kExitOk;
}

int cmd_noise_synth(const Options& o) {
  const fs::path out = output_path(o.out);
  refuse_existing(out, o.force);
  SegDataset ds = load_dataset(o.data);
  noise::synthesize_dataset(ds, o.level, o.seed, o.target_class);
  save_dataset(ds, out);
  write_invocation(out / "config.resolved.json", "noise synth",
                   {{"data", o.data}, {"level", o.level}, {"seed", o.seed},
                    {"target_class", o.target_class}});
  logger()->info("synthesized level-{} coarse labels for {} samples into {}", o.level,
                 ds.samples.size(), out.string());
  return kExitOk;
}

int cmd_train(const Options& o) {
  const TrainConfig cfg = load_config(o.config, o.overrides);
  const RunArtifacts a = o.resume.empty() ? train(cfg, o.force) : resume(o.resume, cfg);
  logger()->info("run directory {}", a.dir.string());
  if (!a.best_checkpoint.empty()) logger()->info("best checkpoint {}", a.best_checkpoint.string());
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  const TrainConfig cfg = load_config(o.config, o.overrides);
  const json table = ablation_suite(cfg, o.force);
  for (const auto& r : table.at("rows")) {
    logger()->info("{:>16}: mIoU {:.4f} +- {:.4f}", r.at("arm").get<std::string>(),
                   r.at("miou_mean").get<double>(), r.at("miou_std").get<double>());
  }
  return kExitOk;
}

int cmd_sweep(const Options& o) {
  const TrainConfig cfg = load_config(o.config, o.overrides);
  const auto levels = parse_list<int>(o.levels, "--levels");
  const json table = sensitivity_sweep(cfg, levels, o.force);
  for (const auto& r : table.at("rows")) {
    logger()->info("level {}: mIoU {:.4f} +- {:.4f}", r.at("level").get<int>(),
                   r.at("miou_mean").get<double>(), r.at("miou_std").get<double>());
  }
  return kExitOk;
}

int cmd_eval(const Options& o) {
  const fs::path report = output_path(o.report);
  if (fs::exists(report) && !o.force) {
    throw ValidationError(report.string() + " already exists (use --force to overwrite)", "E_EXISTS");
  }
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SegDataset ds = load_dataset(o.data);
  const EvalReport r = evaluate(ck.model, ds, o.data, o.checkpoint);
  if (!report.parent_path().empty()) fs::create_directories(report.parent_path());
  io::write_text_atomic(report, r.to_json().dump(2) + "\n");
  write_invocation(fs::path(report.string() + ".config.json"), "eval",
                   {{"checkpoint", o.checkpoint}, {"data", o.data}});
  logger()->info("mIoU {:.4f} over {} images", r.miou, r.per_image_miou.size());
  return kExitOk;
}

int cmd_panels(const Options& o) {
  const fs::path out = output_path(o.out);
  if (fs::exists(out) && !o.force) {
    throw ValidationError(out.string() + " already exists (use --force to overwrite)", "E_EXISTS");
  }
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SegDataset ds = load_dataset(o.data);
  const SegSample* sample = nullptr;
  for (const auto& s : ds.samples)
    if (s.id == o.sample) sample = &s;
  if (!sample) throw ValidationError("sample '" + o.sample + "' not in " + o.data, "E_NO_SAMPLE");
  TransitionMode mode = TransitionMode::uniform;
  Eigen::MatrixXd values;
  if (!o.config.empty()) {
    const TrainConfig cfg = load_config(o.config, o.overrides);
    mode = cfg.transition;
    values = cfg.transition_values;
  }
  const TransitionMatrix m = build_transition_matrix(ck.model.arch.num_classes, mode, values);
  const PanelLayout lay = export_panels(ck.model, m, *sample, out, o.identity_cm, o.scale);
  write_invocation(fs::path(out.string() + ".config.json"), "panels",
                   {{"checkpoint", o.checkpoint}, {"data", o.data}, {"sample", o.sample},
                    {"identity_cm", o.identity_cm}, {"scale", o.scale}});
  logger()->info("wrote {}x{} panel grid to {}", lay.width, lay.height, out.string());
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  ToyGradCheckOptions g;
  if (o.dtype == "float64") {
    g.dtype = Dtype::float64;
  } else if (o.dtype == "float32") {
    g.dtype = Dtype::float32;
  } else {
    throw ValidationError("--dtype must be float32 or float64");
  }
  g.seed = o.seed;
  g.eps = o.eps;
  g.samples = o.samples;
  g.classes = o.classes;
  g.break_trace_gradient = o.break_trace;
  const GradCheckResult r = grad_check_toy(g);
  std::cout << "max_rel_err=" << r.max_rel_err << " (" << o.dtype << ", " << r.checked
            << " inputs checked)\n";
  const bool pass = r.max_rel_err < o.grad_threshold;
  std::cout << "max_rel_err " << (pass ? "< " : ">= ") << o.grad_threshold << "\n";
  return pass ? kExitOk : kExitValidation;
}

spdlog::level::level_enum parse_level(const std::string& s) {
  const auto l = spdlog::level::from_str(s);
  if (l == spdlog::level::off && s != "off") throw ValidationError("unknown --log-level '" + s + "'");
  return l;
}

}  // namespace

int run(int argc, const char* const* argv) {
  Options o;
  CLI::App app{"coarseseg: segmentation from noisy positive and negative coarse labels", "coarseseg"};
  app.require_subcommand(1);
  app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error or off");

  auto* dataset = app.add_subcommand("dataset", "Build or split datasets");
  dataset->require_subcommand(1);
  auto* build = dataset->add_subcommand("build", "Build a segmentation dataset from MNIST digits");
  build->add_option("--source", o.source, "MNIST CSV (optionally .gz) or IDX directory")->required();
  build->add_option("--mode", o.mode, "binary or multiclass");
  build->add_option("--out", o.out, "Output dataset directory")->required();
  build->add_option("--offset", o.offset, "First digit to use");
  build->add_option("--limit", o.limit, "Number of digits (0 = all)");
  build->add_option("--threshold", o.threshold, "Foreground threshold on intensity");
  build->add_option("--split", o.split_tag, "Split tag: train, val or test");
  build->add_flag("--force", o.force, "Overwrite existing output");

  auto* splitc = dataset->add_subcommand("split", "Partition a dataset by fractions");
  splitc->add_option("--data", o.data, "Dataset directory")->required();
  splitc->add_option("--fractions", o.fractions, "Comma-separated fractions summing to 1");
  splitc->add_option("--names", o.names, "Comma-separated part names");
  splitc->add_option("--seed", o.seed, "Shuffle seed");
  splitc->add_option("--out", o.out, "Parent directory for the parts")->required();
  splitc->add_flag("--force", o.force, "Overwrite existing output");

  auto* noise = app.add_subcommand("noise", "Coarse-label synthesis");
  noise->require_subcommand(1);
  auto* synth = noise->add_subcommand("synth", "Synthesize positive and negative coarse labels");
  synth->add_option("--data", o.data, "Dataset directory")->required();
  synth->add_option("--level", o.level, "Noise level 1..5")->required();
  synth->add_option("--seed", o.seed, "Synthesis seed");
  synth->add_option("--target-class", o.target_class, "Class named by negative maps (-1: dominant)");
  synth->add_option("--out", o.out, "Output dataset directory")->required();
  synth->add_flag("--force", o.force, "Overwrite existing output");

  auto* trainc = app.add_subcommand("train", "Train a model");
  trainc->add_option("--config", o.config, "Config JSON")->required()->check(CLI::ExistingFile);
  trainc->add_option("--resume", o.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  trainc->add_option("--set", o.overrides, "Override a config field, key.path=value");
  trainc->add_flag("--force", o.force, "Overwrite existing output");

  auto* ablate = app.add_subcommand("ablate", "Run the full / without-negative / naive ablation");
  ablate->add_option("--config", o.config, "Config JSON")->required()->check(CLI::ExistingFile);
  ablate->add_option("--set", o.overrides, "Override a config field, key.path=value");
  ablate->add_flag("--force", o.force, "Overwrite existing output");

  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint");
  evalc->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  evalc->add_option("--data", o.data, "Dataset directory")->required();
  evalc->add_option("--report", o.report, "Report JSON path")->required();
  evalc->add_flag("--force", o.force, "Overwrite existing output");

  auto* sweep = app.add_subcommand("sweep", "Annotation-quality sensitivity sweep");
  sweep->add_option("--config", o.config, "Config JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--levels", o.levels, "Comma-separated levels");
  sweep->add_option("--set", o.overrides, "Override a config field, key.path=value");
  sweep->add_flag("--force", o.force, "Overwrite existing output");

  auto* panels = app.add_subcommand("panels", "Export diagnostic panels for one sample");
  panels->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  panels->add_option("--data", o.data, "Dataset directory")->required();
  panels->add_option("--sample", o.sample, "Sample id")->required();
  panels->add_option("--out", o.out, "Output PNG")->required();
  panels->add_option("--config", o.config, "Config JSON supplying the transition matrix");
  panels->add_flag("--identity-cm", o.identity_cm, "Use identity confusion matrices");
  panels->add_option("--scale", o.scale, "Pixel magnification");
  panels->add_flag("--force", o.force, "Overwrite existing output");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradient");
  grad->add_option("--dtype", o.dtype, "float64 or float32");
  grad->add_option("--threshold", o.grad_threshold, "Pass when max relative error is below this");
  grad->add_option("--seed", o.seed, "Toy batch seed");
  grad->add_option("--eps", o.eps, "Finite-difference step");
  grad->add_option("--samples", o.samples, "Inputs to check (0 = all)");
  grad->add_option("--classes", o.classes, "Number of classes L");
  grad->add_flag("--break-trace-gradient", o.break_trace, "Drop the trace term from the gradient");

  if (argc <= 1) {
    std::cout << app.help();
    return kExitValidation;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << (e.get_name() == "CallForAllHelp" ? app.help("", CLI::AppFormatMode::All)
                                                     : app.help());
      return kExitOk;
    }
    std::cerr << "error[E_USAGE]: " << e.what() << "\n" << app.help();
    return kExitValidation;
  }

  try {
    logger()->set_level(parse_level(o.log_level));
    if (*build) return cmd_dataset_build(o);
    if (*splitc) return cmd_dataset_split(o);
    if (*synth) return cmd_noise_synth(o);
    if (*trainc) return cmd_train(o);
    if (*ablate) return cmd_ablate(o);
    if (*evalc) return cmd_eval(o);
    if (*sweep) return cmd_sweep(o);
    if (*panels) return cmd_panels(o);
    if (*grad) return cmd_gradcheck(o);
    std::cerr << app.help();
    return kExitValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error[" << e.code() << "]: " << e.what() << "\n";
    return kExitValidation;
  } catch (const Error& e) {
    std::cerr << "error[" << e.code() << "]: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error[E_CONFIG]: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error[E_RUNTIME]: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace coarseseg::cli
