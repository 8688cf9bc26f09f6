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

// End-to-end pruning runs on the micro-net: train, capture, score, plan,
// surgery, fine-tune, evaluate; plus the ablation sweeps built on them.

#include <algorithm>
#include <cmath>
#include <iterator>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cfdp/micronet.hpp"
#include "cfdp/planner.hpp"
#include "cfdp/saliency.hpp"
#include "json.hpp"

namespace cfdp {

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::size_t train_size = 400;
  std::size_t test_size = 400;
  std::size_t capture_size = 64;
  std::size_t epochs = 30;
  std::size_t finetune_epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.005;
  double lr_decay_factor = 0.1;
  CapturePoint capture = CapturePoint::PreActivation;
  ScoreConfig score;
  PruneSpec prune{0.5, {}, {}};
};

/// Step decays at 50% and 75% of the run.
inline TrainConfig make_train_config(const PipelineConfig& cfg, std::size_t epochs,
                                     std::uint64_t seed) {
  TrainConfig t;
  t.learning_rate = cfg.learning_rate;
  t.momentum = cfg.momentum;
  t.weight_decay = cfg.weight_decay;
  t.lr_decay_factor = cfg.lr_decay_factor;
  t.epochs = epochs;
  t.batch_size = cfg.batch_size;
  t.seed = seed;
  if (epochs >= 4) t.decay_epochs = {epochs / 2, (3 * epochs) / 4};
  return t;
}

inline Dataset train_split(const PipelineConfig& cfg) {
  return gen_dataset(cfg.seed, cfg.train_size);
}

inline Dataset test_split(const PipelineConfig& cfg) {
  return gen_dataset(mix_seed(cfg.seed, 0x74657374), cfg.test_size);
}

inline MicroNet fresh_micro_net(std::uint64_t seed) {
  MicroNet net(kMicroInput, default_micro_specs());
  net.init_kaiming(mix_seed(seed, 0x696e6974));
  return net;
}

/// Scores every conv layer of `net` on the first capture_size training images.
inline std::vector<LayerScores> score_network(const MicroNet& net, const Dataset& train_set,
                                              const PipelineConfig& cfg,
                                              const ScoreConfig& score) {
  const auto dumps = capture_features(net, head(train_set, cfg.capture_size), cfg.capture);
  std::vector<LayerScores> out;
  for (const auto& d : dumps) out.push_back(batch_scores(d, score));
  return out;
}

inline std::vector<std::pair<std::uint32_t, std::size_t>> conv_channels(const MicroNet& net) {
  std::vector<std::pair<std::uint32_t, std::size_t>> out;
  const auto convs = net.conv_positions();
  for (std::size_t k = 0; k < convs.size(); ++k) {
    out.emplace_back(static_cast<std::uint32_t>(k), net.layers()[convs[k]].out.c);
  }
  return out;
}

inline ModelPlan plan_network(const MicroNet& net, const Dataset& train_set,
                              const PipelineConfig& cfg, const ScoreConfig& score,
                              PlanSource source = PlanSource::Trained) {
  return make_model_plan(score_network(net, train_set, cfg, score), cfg.prune, score, source);
}

inline ModelPlan random_plan(const MicroNet& net, const PipelineConfig& cfg,
                             std::uint64_t seed) {
  auto plan = make_random_model_plan(conv_channels(net), cfg.prune, seed);
  plan.config = cfg.score;
  return plan;
}

/// Applies `plan`, trains the pruned net for `epochs`, returns its test accuracy.
inline double prune_and_finetune(const MicroNet& net, const ModelPlan& plan,
                                 const Dataset& train_set, const Dataset& test_set,
                                 const PipelineConfig& cfg, std::size_t epochs,
                                 MicroNet* pruned_out = nullptr) {
  MicroNet pruned = apply_plan(net, plan);
  cfdp::train(pruned, train_set, make_train_config(cfg, epochs, mix_seed(cfg.seed, 0x66696e65)));
  const double acc = evaluate(pruned, test_set);
  if (pruned_out) *pruned_out = std::move(pruned);
  return acc;
}

struct TrainedBase {
  MicroNet net;
  std::vector<EpochLog> log;
  std::map<std::size_t, MicroNet> checkpoints;  // epochs completed -> weights
};

/// Trains a fresh micro-net; `checkpoint_epochs` lists completed-epoch
/// counts whose weights are kept (0 = the initialization).
inline TrainedBase train_base(const PipelineConfig& cfg, const Dataset& train_set,
                              const std::vector<std::size_t>& checkpoint_epochs = {}) {
  TrainedBase base{fresh_micro_net(cfg.seed), {}, {}};
  auto wanted = [&](std::size_t e) {
    return std::find(checkpoint_epochs.begin(), checkpoint_epochs.end(), e) !=
           checkpoint_epochs.end();
  };
  if (wanted(0)) base.checkpoints.emplace(0, base.net);
  base.log = cfdp::train(base.net, train_set, make_train_config(cfg, cfg.epochs, cfg.seed), nullptr,
                         [&](const EpochLog& e, const MicroNet& net) {
                           if (wanted(e.epoch + 1)) base.checkpoints.emplace(e.epoch + 1, net);
                         });
  return base;
}

// ---------------------------------------------------------------------------
// Single-seed experiment: unpruned vs. saliency plan vs. random plan
// ---------------------------------------------------------------------------

struct PruneExperiment {
  double base_train_acc = 0.0;
  double base_test_acc = 0.0;
  double cfdp_test_acc = 0.0;
  double random_test_acc = 0.0;
  std::size_t base_params = 0;
  std::size_t pruned_params = 0;
  ModelPlan plan;
};

inline PruneExperiment run_prune_experiment(const PipelineConfig& cfg) {
  const Dataset train_set = train_split(cfg);
  const Dataset test_set = test_split(cfg);
  PruneExperiment r;
  const auto base = train_base(cfg, train_set);
  r.base_train_acc = evaluate(base.net, train_set);
  r.base_test_acc = evaluate(base.net, test_set);
  r.base_params = base.net.parameter_count();
  r.plan = plan_network(base.net, train_set, cfg, cfg.score);
  MicroNet pruned;
  r.cfdp_test_acc = prune_and_finetune(base.net, r.plan, train_set, test_set, cfg,
                                       cfg.finetune_epochs, &pruned);
  r.pruned_params = pruned.parameter_count();
  r.random_test_acc = prune_and_finetune(base.net, random_plan(base.net, cfg, mix_seed(cfg.seed, 0x72616e64)),
                                         train_set, test_set, cfg, cfg.finetune_epochs);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation reports
// ---------------------------------------------------------------------------

enum class AblationKind { Lambda, BlockSize, Components, Init, Attack };

inline std::string to_string(AblationKind k) {
  switch (k) {
    case AblationKind::Lambda: return "lambda";
    case AblationKind::BlockSize: return "block-size";
    case AblationKind::Components: return "components";
    case AblationKind::Init: return "init";
    case AblationKind::Attack: return "attack";
  }
  return "lambda";
}

inline const std::vector<double>& lambda_grid() {
  static const std::vector<double> grid = {0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0};
  return grid;
}

inline const std::vector<std::size_t>& block_size_grid() {
  static const std::vector<std::size_t> grid = {1, 2, 4, 8};
  return grid;
}

inline const std::vector<double>& epsilon_grid() {
  static const std::vector<double> grid = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  return grid;
}

struct AblationRow {
  std::string setting;
  std::vector<double> accuracies;  // one per seed, seed order

  double mean() const {
    if (accuracies.empty()) return 0.0;
    return std::accumulate(accuracies.begin(), accuracies.end(), 0.0) /
           static_cast<double>(accuracies.size());
  }

  /// Sample standard deviation (0 for a single seed).
  double stddev() const {
    if (accuracies.size() < 2) return 0.0;
    const double m = mean();
    double ss = 0.0;
    for (double a : accuracies) ss += (a - m) * (a - m);
    return std::sqrt(ss / static_cast<double>(accuracies.size() - 1));
  }
};

struct AblationReport {
  AblationKind kind = AblationKind::Lambda;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  AblationRow& row(const std::string& setting) {
    for (auto& r : rows) {
      if (r.setting == setting) return r;
    }
    rows.push_back({setting, {}});
    return rows.back();
  }

  const AblationRow* find(const std::string& setting) const {
    for (const auto& r : rows) {
      if (r.setting == setting) return &r;
    }
    return nullptr;
  }
};

inline std::string format_number(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

inline std::string ablation_csv(const AblationReport& report) {
  std::ostringstream out;
  out << "kind,setting,mean,std";
  for (auto s : report.seeds) out << ",seed_" << s;
  out << "\n";
  for (const auto& r : report.rows) {
    out << to_string(report.kind) << ',' << r.setting << ',' << format_number(r.mean())
        << ',' << format_number(r.stddev());
    for (double a : r.accuracies) out << ',' << format_number(a);
    out << "\n";
  }
  return out.str();
}

inline std::string ablation_json(const AblationReport& report) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(report.kind);
  j["seeds"] = report.seeds;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    nlohmann::ordered_json e;
    e["setting"] = r.setting;
    e["mean"] = r.mean();
    e["std"] = r.stddev();
    e["accuracies"] = r.accuracies;
    rows.push_back(std::move(e));
  }
  j["rows"] = std::move(rows);
  j["extra"] = report.extra;
  return j.dump(2) + "\n";
}

/// Number of channels whose saved/pruned membership differs between plans.
inline std::size_t plan_difference(const ModelPlan& a, const ModelPlan& b) {
  std::size_t diff = 0;
  for (const auto& la : a.layers) {
    const auto* lb = b.find(la.layer_index);
    if (!lb) {
      diff += la.pruned.size();
      continue;
    }
    std::vector<std::size_t> sym;
    std::set_symmetric_difference(la.pruned.begin(), la.pruned.end(), lb->pruned.begin(),
                                  lb->pruned.end(), std::back_inserter(sym));
    diff += sym.size() / 2 + sym.size() % 2;
  }
  return diff;
}

namespace detail {

inline std::string setting_label(double v) { return format_number(v); }

inline ScoreConfig component_config(const ScoreConfig& base, const std::string& name) {
  ScoreConfig c = base;
  c.use_dist = true;
  c.use_freq = true;
  c.use_spatial = true;
  if (name == "Fq") {
    c.use_spatial = false;
  } else if (name == "Fq w/o Dist") {
    c.use_spatial = false;
    c.use_dist = false;
  } else if (name == "Sp") {
    c.use_freq = false;
  }
  return c;
}

}  // namespace detail

inline const std::vector<std::string>& component_grid() {
  static const std::vector<std::string> grid = {"Fq", "Fq w/o Dist", "Sp", "Fq+lambda*Sp"};
  return grid;
}

/// Completed-epoch checkpoints for the init sweep: 0, 25%, 50%, 75%, 100%.
inline std::vector<std::pair<std::string, std::size_t>> init_grid(std::size_t epochs) {
  return {{"untrained", 0},
          {"partial-25", epochs / 4},
          {"partial-50", epochs / 2},
          {"partial-75", (3 * epochs) / 4},
          {"fully-trained", epochs}};
}

/// Runs one ablation sweep across `seeds`. Report rows follow grid order.
inline AblationReport run_ablation(AblationKind kind, const PipelineConfig& base_cfg,
                                   const std::vector<std::uint64_t>& seeds) {
  AblationReport report;
  report.kind = kind;
  report.seeds = seeds;
  nlohmann::ordered_json per_seed = nlohmann::ordered_json::array();

  for (auto seed : seeds) {
    PipelineConfig cfg = base_cfg;
    cfg.seed = seed;
    const Dataset train_set = train_split(cfg);
    const Dataset test_set = test_split(cfg);
    nlohmann::ordered_json seed_extra;
    seed_extra["seed"] = seed;

    switch (kind) {
      case AblationKind::Lambda: {
        const auto base = train_base(cfg, train_set);
        for (double lambda : lambda_grid()) {
          ScoreConfig sc = cfg.score;
          sc.lambda = lambda;
          const auto plan = plan_network(base.net, train_set, cfg, sc);
          report.row(detail::setting_label(lambda))
              .accuracies.push_back(
                  prune_and_finetune(base.net, plan, train_set, test_set, cfg, cfg.finetune_epochs));
        }
        break;
      }
      case AblationKind::BlockSize: {
        const auto base = train_base(cfg, train_set);
        for (std::size_t bs : block_size_grid()) {
          ScoreConfig sc = cfg.score;
          sc.frequency.block_size = bs;
          const auto plan = plan_network(base.net, train_set, cfg, sc);
          report.row(std::to_string(bs))
              .accuracies.push_back(
                  prune_and_finetune(base.net, plan, train_set, test_set, cfg, cfg.finetune_epochs));
        }
        break;
      }
      case AblationKind::Components: {
        const auto base = train_base(cfg, train_set);
        std::map<std::string, ModelPlan> plans;
        for (const auto& name : component_grid()) {
          const auto plan =
              plan_network(base.net, train_set, cfg, detail::component_config(cfg.score, name));
          plans[name] = plan;
          report.row(name).accuracies.push_back(
              prune_and_finetune(base.net, plan, train_set, test_set, cfg, cfg.finetune_epochs));
        }
        seed_extra["combined_vs_spatial_plan_difference"] =
            plan_difference(plans.at("Fq+lambda*Sp"), plans.at("Sp"));
        break;
      }
      case AblationKind::Init: {
        const auto grid = init_grid(cfg.epochs);
        std::vector<std::size_t> marks;
        for (const auto& [name, e] : grid) marks.push_back(e);
        const auto base = train_base(cfg, train_set, marks);
        for (const auto& [name, completed] : grid) {
          const MicroNet& weights = base.checkpoints.at(completed);
          const auto source = completed == 0 ? PlanSource::Untrained : PlanSource::Trained;
          const auto plan = plan_network(weights, train_set, cfg, cfg.score, source);
          const std::size_t epochs = std::max(cfg.finetune_epochs, cfg.epochs - completed);
          report.row(name).accuracies.push_back(
              prune_and_finetune(weights, plan, train_set, test_set, cfg, epochs));
        }
        const auto rplan = random_plan(base.net, cfg, mix_seed(seed, 0x72616e64));
        report.row("random-plan").accuracies.push_back(
            prune_and_finetune(base.net, rplan, train_set, test_set, cfg, cfg.finetune_epochs));
        break;
      }
      case AblationKind::Attack: {
        const auto base = train_base(cfg, train_set);
        const auto plan = plan_network(base.net, train_set, cfg, cfg.score);
        MicroNet pruned;
        prune_and_finetune(base.net, plan, train_set, test_set, cfg, cfg.finetune_epochs, &pruned);
        for (auto attack : {Attack::Fgsm, Attack::Pgd}) {
          const std::string aname = attack == Attack::Fgsm ? "fgsm" : "pgd";
          for (const auto* which : {"original", "pruned"}) {
            const MicroNet& net = std::string(which) == "original" ? base.net : pruned;
            for (double eps : epsilon_grid()) {
              const auto adv = attack_dataset(net, test_set, attack, eps);
              report.row(aname + "/" + which + "/eps=" + format_number(eps))
                  .accuracies.push_back(evaluate(net, adv));
            }
          }
        }
        break;
      }
    }
    per_seed.push_back(std::move(seed_extra));
  }
  report.extra["per_seed"] = std::move(per_seed);
  return report;
}

}  // namespace cfdp
