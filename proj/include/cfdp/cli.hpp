// Copyright 2026 The cfdp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

// `cfdp` command-line driver.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant violation.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfdp/error.hpp"
#include "cfdp/micronet.hpp"
#include "cfdp/pipeline.hpp"
#include "cfdp/planner.hpp"
#include "cfdp/saliency.hpp"
#include "cfdp/tensors.hpp"

namespace cfdp::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kInvariant = 3 };

inline int exit_code_for(ErrorKind kind) {
  if (is_data_error(kind)) return kData;
  if (is_usage_error(kind)) return kUsage;
  return kInvariant;
}

namespace detail {

namespace fs = std::filesystem;

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error(ErrorKind::IoFailure, "error writing '" + path.string() + "'");
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create '" + dir.string() + "'");
}

/// `layer_<i>.cfd` files of a capture directory, ordered by layer index.
inline std::vector<fs::path> feature_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw Error(ErrorKind::IoFailure, "'" + dir.string() + "' is not a directory");
  }
  static const std::regex pattern(R"(layer_(\d+)\.cfd)");
  std::vector<std::pair<unsigned long, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) found.emplace_back(std::stoul(m[1]), entry.path());
  }
  if (found.empty()) {
    throw Error(ErrorKind::IoFailure, "no layer_<i>.cfd files in '" + dir.string() + "'");
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(std::move(f.second));
  return out;
}

/// Parses `i=r,j=s,...` into per-layer ratios.
inline std::map<std::uint32_t, double> parse_ratios(const std::string& text) {
  std::map<std::uint32_t, double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    std::size_t used_i = 0, used_r = 0;
    try {
      if (eq == std::string::npos) throw std::invalid_argument(item);
      const auto layer = std::stoul(item.substr(0, eq), &used_i);
      const double ratio = std::stod(item.substr(eq + 1), &used_r);
      if (used_i != eq || used_r != item.size() - eq - 1) throw std::invalid_argument(item);
      if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument(item);
      out[static_cast<std::uint32_t>(layer)] = ratio;
    } catch (const std::exception&) {
      throw CLI::ValidationError("--ratios", "entry '" + item + "' is not <layer>=<ratio in [0,1)>");
    }
  }
  return out;
}

const auto kOddSize = CLI::Validator(
    [](const std::string& v) -> std::string {
      try {
        const long n = std::stol(v);
        if (n >= 1 && n % 2 == 1) return {};
      } catch (const std::exception&) {
      }
      return "value " + v + " is not an odd integer >= 1";
    },
    "ODD");

const auto kUnitRatio = CLI::Validator(
    [](const std::string& v) -> std::string {
      try {
        const double r = std::stod(v);
        if (r >= 0.0 && r < 1.0) return {};
      } catch (const std::exception&) {
      }
      return "value " + v + " is not in [0, 1)";
    },
    "RATIO");

struct ScoreFlags {
  double lambda = 0.03;
  std::size_t block_size = 4;
  double sigma = 1.0;
  std::size_t kernel_size = 3;
  bool no_smoothing = false;
  bool no_dist = false;
  bool freq_only = false;
  bool spatial_only = false;

  ScoreConfig to_config() const {
    ScoreConfig c;
    c.lambda = lambda;
    c.frequency.block_size = block_size;
    if (no_smoothing) {
      c.frequency.smoothing.reset();
    } else {
      c.frequency.smoothing = GaussianSmoothing{sigma, kernel_size};
    }
    c.use_dist = !no_dist;
    c.use_freq = !spatial_only;
    c.use_spatial = !freq_only;
    return c;
  }
};

inline void add_score_flags(CLI::App* app, ScoreFlags& f) {
  app->add_option("--lambda", f.lambda, "Spatial regularizer weight")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  app->add_option("--block-size", f.block_size, "DCT block size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--sigma", f.sigma, "Gaussian prefilter sigma")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--kernel-size", f.kernel_size, "Gaussian prefilter size (odd)")
      ->check(kOddSize)
      ->capture_default_str();
  app->add_flag("--no-smoothing", f.no_smoothing, "Disable the Gaussian prefilter");
  app->add_flag("--no-dist", f.no_dist, "Drop the frequency-spread factor");
  auto* fo = app->add_flag("--freq-only", f.freq_only, "Score with the frequency term only");
  auto* so = app->add_flag("--spatial-only", f.spatial_only, "Score with the spatial term only");
  fo->excludes(so);
}

inline CapturePoint parse_capture(const std::string& s) {
  return s == "post" ? CapturePoint::PostActivation : CapturePoint::PreActivation;
}

inline std::string json_number(double v) { return nlohmann::json(v).dump(); }

}  // namespace detail

/// Runs one subcommand. Output files go under --out-dir.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  using namespace detail;

  CLI::App app{"Frequency-domain channel saliency and structured pruning toolkit", "cfdp"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML-style key=value configuration file");
  app.allow_config_extras(false);

  std::uint64_t seed = 0;
  std::string out_dir = ".";
  app.add_option("--seed", seed, "Random seed")->capture_default_str();
  app.add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  PipelineConfig pcfg;
  auto add_data_flags = [&](CLI::App* sub) {
    sub->add_option("--train-size", pcfg.train_size, "Generated training images")
        ->check(CLI::Range(4ul, 1000000ul))
        ->capture_default_str();
    sub->add_option("--test-size", pcfg.test_size, "Generated test images")
        ->check(CLI::Range(4ul, 1000000ul))
        ->capture_default_str();
  };

  // capture
  auto* capture = app.add_subcommand("capture", "Train the micro-net and dump conv feature maps");
  std::string capture_point = "pre";
  capture->add_option("--epochs", pcfg.epochs, "Training epochs (0 = untrained)")
      ->capture_default_str();
  capture->add_option("--capture", capture_point, "Capture point relative to the ReLU")
      ->check(CLI::IsMember({"pre", "post"}))
      ->capture_default_str();
  capture->add_option("--capture-size", pcfg.capture_size, "Images in the captured batch")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_data_flags(capture);

  // score
  auto* score = app.add_subcommand("score", "Score channels from captured feature maps");
  std::string features_dir;
  ScoreFlags score_flags;
  score->add_option("--features", features_dir, "Directory of layer_<i>.cfd dumps")->required();
  add_score_flags(score, score_flags);

  // plan
  auto* plan = app.add_subcommand("plan", "Build a pruning plan from scores");
  std::string scores_path;
  double ratio = 0.5;
  std::string ratios_text;
  bool random_baseline = false;
  std::string created_from = "trained";
  plan->add_option("--scores", scores_path, "scores.json")->required();
  auto* ratio_opt = plan->add_option("--ratio", ratio, "Prune ratio for every layer")
                        ->check(kUnitRatio)
                        ->capture_default_str();
  plan->add_option("--ratios", ratios_text, "Per-layer ratios i=r,...")->excludes(ratio_opt);
  plan->add_flag("--random", random_baseline, "Random-ranking baseline plan");
  plan->add_option("--created-from", created_from, "Weights the scores came from")
      ->check(CLI::IsMember({"trained", "untrained"}))
      ->capture_default_str();

  // apply
  auto* apply = app.add_subcommand("apply", "Apply a plan to a weight store");
  std::string weights_dir;
  std::string plan_path;
  apply->add_option("--weights", weights_dir, "Weight store directory")->required();
  apply->add_option("--plan", plan_path, "plan.json")->required();

  // train
  auto* trainc = app.add_subcommand("train", "Fine-tune a (pruned) weight store");
  std::size_t finetune_epochs = 10;
  trainc->add_option("--weights", weights_dir, "Weight store directory")->required();
  trainc->add_option("--epochs", finetune_epochs, "Fine-tuning epochs")->capture_default_str();
  add_data_flags(trainc);

  // eval
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy on the generated test split");
  std::string attack = "none";
  double epsilon = 0.0;
  eval->add_option("--weights", weights_dir, "Weight store directory")->required();
  eval->add_option("--attack", attack, "Adversarial attack")
      ->check(CLI::IsMember({"none", "fgsm", "pgd"}))
      ->capture_default_str();
  eval->add_option("--epsilon", epsilon, "Attack radius (L-inf)")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  add_data_flags(eval);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep over several seeds");
  std::string kind = "lambda";
  std::size_t seed_count = 3;
  ablate->add_option("--kind", kind, "Sweep")
      ->check(CLI::IsMember({"lambda", "block-size", "components", "init", "attack"}))
      ->capture_default_str();
  ablate->add_option("--seeds", seed_count, "Number of seeds (seed, seed+1, ...)")
      ->check(CLI::Range(1ul, 1000ul))
      ->capture_default_str();
  ablate->add_option("--epochs", pcfg.epochs, "Base training epochs")->capture_default_str();
  ablate->add_option("--finetune-epochs", pcfg.finetune_epochs, "Fine-tuning epochs")
      ->capture_default_str();
  ablate->add_option("--ratio", pcfg.prune.ratio, "Prune ratio for every conv layer")
      ->check(kUnitRatio)
      ->capture_default_str();
  ablate->add_option("--capture-size", pcfg.capture_size, "Images in the scoring batch")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_score_flags(ablate, score_flags);
  add_data_flags(ablate);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    pcfg.seed = seed;
    const fs::path out_path(out_dir);
    ensure_dir(out_path);

    if (*capture) {
      pcfg.capture = parse_capture(capture_point);
      const Dataset train_set = train_split(pcfg);
      MicroNet net = fresh_micro_net(seed);
      const auto log = cfdp::train(net, train_set, make_train_config(pcfg, pcfg.epochs, seed));
      save_weights(net, out_path / "weights");
      write_text(out_path / "train_log.csv", loss_curve_csv(log));
      ensure_dir(out_path / "features");
      for (const auto& dump : capture_features(net, head(train_set, pcfg.capture_size), pcfg.capture)) {
        save_feature_dump(dump, out_path / "features" / feature_dump_name(dump.layer_index()));
      }
      out << "captured " << net.conv_positions().size() << " layers into "
          << (out_path / "features").string() << "\n";
    } else if (*score) {
      ScoreReport report;
      report.config = score_flags.to_config();
      report.config.validate();
      for (const auto& file : feature_files(features_dir)) {
        report.layers.push_back(batch_scores(load_feature_dump(file), report.config));
      }
      write_text(out_path / "scores.json", serialize_scores(report));
      out << "scored " << report.layers.size() << " layers\n";
    } else if (*plan) {
      const auto report = parse_scores(read_text(scores_path));
      PruneSpec spec;
      spec.ratio = ratio;
      if (!ratios_text.empty()) {
        spec.ratio = 0.0;
        spec.layer_ratios = parse_ratios(ratios_text);
      }
      std::vector<std::string> warnings;
      ModelPlan model_plan;
      if (random_baseline) {
        std::vector<std::pair<std::uint32_t, std::size_t>> channels;
        for (const auto& l : report.layers) channels.emplace_back(l.layer_index, l.scores.size());
        model_plan = make_random_model_plan(channels, spec, seed, &warnings);
        model_plan.config = report.config;
      } else {
        model_plan = make_model_plan(report.layers, spec, report.config,
                                     plan_source_from_string(created_from), &warnings);
      }
      for (const auto& w : warnings) err << "warning: " << w << "\n";
      write_text(out_path / "plan.json", serialize_plan(model_plan));
      out << "planned " << model_plan.layers.size() << " layers\n";
    } else if (*apply) {
      const MicroNet net = load_weights(weights_dir);
      const auto model_plan = parse_plan(read_text(plan_path));
      const MicroNet pruned = apply_plan(net, model_plan);
      save_weights(pruned, out_path / "weights");
      out << "parameters " << net.parameter_count() << " -> " << pruned.parameter_count() << "\n";
    } else if (*trainc) {
      MicroNet net = load_weights(weights_dir);
      const Dataset train_set = train_split(pcfg);
      const Dataset test_set = test_split(pcfg);
      const auto log = cfdp::train(net, train_set,
                                   make_train_config(pcfg, finetune_epochs, mix_seed(seed, 0x66696e65)),
                                   &test_set);
      save_weights(net, out_path / "weights");
      write_text(out_path / "train_log.csv", loss_curve_csv(log));
      out << "test accuracy " << evaluate(net, test_set) << "\n";
    } else if (*eval) {
      const MicroNet net = load_weights(weights_dir);
      Dataset test_set = test_split(pcfg);
      if (attack != "none") {
        test_set = attack_dataset(net, test_set, attack == "fgsm" ? Attack::Fgsm : Attack::Pgd,
                                  epsilon);
      }
      const double acc = evaluate(net, test_set);
      nlohmann::ordered_json j;
      j["accuracy"] = acc;
      j["attack"] = attack;
      j["epsilon"] = epsilon;
      j["test_size"] = pcfg.test_size;
      j["parameters"] = net.parameter_count();
      write_text(out_path / "eval.json", j.dump(2) + "\n");
      out << "accuracy " << json_number(acc) << "\n";
    } else if (*ablate) {
      pcfg.score = score_flags.to_config();
      pcfg.score.validate();
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < seed_count; ++i) seeds.push_back(seed + i);
      const std::map<std::string, AblationKind> kinds = {
          {"lambda", AblationKind::Lambda},         {"block-size", AblationKind::BlockSize},
          {"components", AblationKind::Components}, {"init", AblationKind::Init},
          {"attack", AblationKind::Attack}};
      const auto report = run_ablation(kinds.at(kind), pcfg, seeds);
      write_text(out_path / ("ablate_" + kind + ".csv"), ablation_csv(report));
      write_text(out_path / ("ablate_" + kind + ".json"), ablation_json(report));
      out << ablation_csv(report);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace cfdp::cli
