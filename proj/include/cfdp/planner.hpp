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

// Saved/pruned channel sets per layer and the serialized model-wide plan.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cfdp/error.hpp"
#include "cfdp/random.hpp"
#include "cfdp/saliency.hpp"
#include "json.hpp"

namespace cfdp {

struct LayerPlan {
  std::uint32_t layer_index = 0;
  std::size_t channels = 0;
  std::size_t threshold = 0;
  std::vector<std::size_t> saved;   // ascending
  std::vector<std::size_t> pruned;  // ascending

  bool operator==(const LayerPlan&) const = default;
};

enum class PlanSource { Trained, Untrained, RandomBaseline };

inline std::string to_string(PlanSource s) {
  switch (s) {
    case PlanSource::Trained: return "trained";
    case PlanSource::Untrained: return "untrained";
    case PlanSource::RandomBaseline: return "random-baseline";
  }
  return "trained";
}

inline PlanSource plan_source_from_string(const std::string& s) {
  if (s == "trained") return PlanSource::Trained;
  if (s == "untrained") return PlanSource::Untrained;
  if (s == "random-baseline") return PlanSource::RandomBaseline;
  throw Error(ErrorKind::MalformedPlan, "unknown created_from '" + s + "'");
}

struct ModelPlan {
  std::vector<LayerPlan> layers;
  ScoreConfig config;
  PlanSource created_from = PlanSource::Trained;

  const LayerPlan* find(std::uint32_t layer_index) const {
    for (const auto& l : layers) {
      if (l.layer_index == layer_index) return &l;
    }
    return nullptr;
  }

  bool operator==(const ModelPlan&) const = default;
};

/// How many channels to prune per layer: a default ratio, per-layer ratio
/// overrides, or explicit per-layer keep counts (highest precedence).
struct PruneSpec {
  double ratio = 0.0;
  std::map<std::uint32_t, double> layer_ratios;
  std::map<std::uint32_t, std::size_t> keep_counts;

  /// T_i for a layer of `channels` channels. Ratios round half away from
  /// zero and clamp so one channel survives; the clamp appends a warning.
  std::size_t threshold_for(std::uint32_t layer_index, std::size_t channels,
                            std::vector<std::string>* warnings = nullptr) const {
    if (auto it = keep_counts.find(layer_index); it != keep_counts.end()) {
      if (it->second == 0 || it->second > channels) {
        throw Error(ErrorKind::DegeneratePlan,
                    "layer " + std::to_string(layer_index) + ": keep count " +
                        std::to_string(it->second) + " invalid for " +
                        std::to_string(channels) + " channels");
      }
      return channels - it->second;
    }
    double r = ratio;
    if (auto it = layer_ratios.find(layer_index); it != layer_ratios.end()) {
      r = it->second;
    }
    if (!(r >= 0.0 && r < 1.0)) {
      throw Error(ErrorKind::InvalidArgument,
                  "prune ratio must lie in [0, 1), got " + std::to_string(r));
    }
    auto t = static_cast<std::size_t>(std::lround(static_cast<double>(channels) * r));
    if (t >= channels) {
      if (warnings) {
        warnings->push_back("layer " + std::to_string(layer_index) +
                            ": ratio " + std::to_string(r) +
                            " clamped so one channel survives");
      }
      t = channels - 1;
    }
    return t;
  }
};

/// Channel indices by combined score, descending; ties by ascending index.
inline std::vector<std::size_t> rank_channels(const LayerScores& scores) {
  if (scores.scores.empty()) {
    throw Error(ErrorKind::InvalidArgument, "cannot rank an empty layer");
  }
  std::vector<std::size_t> order(scores.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.scores[a].combined > scores.scores[b].combined;
  });
  return order;
}

namespace detail {

inline LayerPlan plan_from_pruned(std::uint32_t layer_index,
                                  std::size_t channels,
                                  std::vector<std::size_t> pruned) {
  LayerPlan plan;
  plan.layer_index = layer_index;
  plan.channels = channels;
  plan.threshold = pruned.size();
  std::sort(pruned.begin(), pruned.end());
  std::vector<bool> is_pruned(channels, false);
  for (auto c : pruned) is_pruned[c] = true;
  for (std::size_t c = 0; c < channels; ++c) {
    if (!is_pruned[c]) plan.saved.push_back(c);
  }
  plan.pruned = std::move(pruned);
  return plan;
}

}  // namespace detail

/// Prunes the `threshold` lowest-ranked channels.
inline LayerPlan make_layer_plan(const LayerScores& scores, std::size_t threshold) {
  const std::size_t channels = scores.scores.size();
  if (threshold >= channels) {
    throw Error(ErrorKind::DegeneratePlan,
                "layer " + std::to_string(scores.layer_index) + ": pruning " +
                    std::to_string(threshold) + " of " + std::to_string(channels) +
                    " channels leaves none");
  }
  auto order = rank_channels(scores);
  std::vector<std::size_t> pruned(order.end() - static_cast<std::ptrdiff_t>(threshold),
                                  order.end());
  return detail::plan_from_pruned(scores.layer_index, channels, std::move(pruned));
}

inline LayerPlan make_layer_plan(const LayerScores& scores, const PruneSpec& spec,
                                 std::vector<std::string>* warnings = nullptr) {
  return make_layer_plan(
      scores, spec.threshold_for(scores.layer_index, scores.scores.size(), warnings));
}

inline ModelPlan make_model_plan(const std::vector<LayerScores>& all_scores,
                                 const PruneSpec& spec, const ScoreConfig& config,
                                 PlanSource source = PlanSource::Trained,
                                 std::vector<std::string>* warnings = nullptr) {
  ModelPlan plan;
  plan.config = config;
  plan.created_from = source;
  for (const auto& layer : all_scores) {
    if (!plan.layers.empty() && layer.layer_index <= plan.layers.back().layer_index) {
      throw Error(ErrorKind::InvariantViolation,
                  "layer indices must be strictly increasing");
    }
    plan.layers.push_back(make_layer_plan(layer, spec, warnings));
  }
  return plan;
}

/// Baseline that prunes uniformly random channels at the same thresholds.
inline ModelPlan make_random_model_plan(
    const std::vector<std::pair<std::uint32_t, std::size_t>>& layer_channels,
    const PruneSpec& spec, std::uint64_t seed,
    std::vector<std::string>* warnings = nullptr) {
  ModelPlan plan;
  plan.created_from = PlanSource::RandomBaseline;
  Rng rng(seed);
  for (const auto& [index, channels] : layer_channels) {
    const std::size_t t = spec.threshold_for(index, channels, warnings);
    std::vector<std::size_t> order(channels);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(t);
    plan.layers.push_back(detail::plan_from_pruned(index, channels, std::move(order)));
  }
  return plan;
}

inline void validate_layer_plan(const LayerPlan& l) {
  auto fail = [&](const std::string& what) {
    throw Error(ErrorKind::InvariantViolation,
                "layer " + std::to_string(l.layer_index) + ": " + what);
  };
  if (l.pruned.size() != l.threshold) fail("|pruned| != threshold");
  if (l.saved.size() + l.pruned.size() != l.channels) {
    fail("|saved| + |pruned| != channels");
  }
  if (l.saved.empty()) fail("saved set is empty");
  if (!std::is_sorted(l.saved.begin(), l.saved.end()) ||
      !std::is_sorted(l.pruned.begin(), l.pruned.end())) {
    fail("channel lists must be sorted ascending");
  }
  std::vector<int> seen(l.channels, 0);
  for (const auto* list : {&l.saved, &l.pruned}) {
    for (auto c : *list) {
      if (c >= l.channels) fail("channel " + std::to_string(c) + " out of range");
      if (seen[c]++) fail("channel " + std::to_string(c) + " listed twice");
    }
  }
}

inline void validate_plan(const ModelPlan& plan) {
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    if (i > 0 && plan.layers[i].layer_index <= plan.layers[i - 1].layer_index) {
      throw Error(ErrorKind::InvariantViolation,
                  "layer indices must be strictly increasing");
    }
    validate_layer_plan(plan.layers[i]);
  }
}

inline constexpr int kPlanVersion = 1;

inline std::string serialize_plan(const ModelPlan& plan) {
  validate_plan(plan);
  nlohmann::ordered_json j;
  j["version"] = kPlanVersion;
  j["created_from"] = to_string(plan.created_from);
  j["config"] = config_to_json(plan.config);
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : plan.layers) {
    nlohmann::ordered_json e;
    e["layer_index"] = l.layer_index;
    e["channels"] = l.channels;
    e["threshold"] = l.threshold;
    e["saved"] = l.saved;
    e["pruned"] = l.pruned;
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

inline ModelPlan parse_plan(const std::string& text) {
  ModelPlan plan;
  try {
    auto j = nlohmann::ordered_json::parse(text);
    if (j.at("version").get<int>() != kPlanVersion) {
      throw Error(ErrorKind::MalformedPlan, "unsupported plan version");
    }
    plan.created_from = plan_source_from_string(j.at("created_from").get<std::string>());
    plan.config = config_from_json(j.at("config"));
    for (const auto& e : j.at("layers")) {
      LayerPlan l;
      l.layer_index = e.at("layer_index").get<std::uint32_t>();
      l.channels = e.at("channels").get<std::size_t>();
      l.threshold = e.at("threshold").get<std::size_t>();
      l.saved = e.at("saved").get<std::vector<std::size_t>>();
      l.pruned = e.at("pruned").get<std::vector<std::size_t>>();
      plan.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedPlan, std::string("malformed plan: ") + e.what());
  }
  validate_plan(plan);
  return plan;
}

}  // namespace cfdp
