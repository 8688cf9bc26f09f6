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

// Per-channel saliency scores: spectral energy, frequency spread, the
// frequency-domain score, the spatial regularizer, and their combination,
// averaged over a captured batch.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cfdp/error.hpp"
#include "cfdp/frequency.hpp"
#include "cfdp/tensors.hpp"
#include "json.hpp"

namespace cfdp {

struct ScoreConfig {
  double lambda = 0.03;
  bool use_dist = true;
  bool use_freq = true;
  bool use_spatial = true;
  FrequencyConfig frequency;

  void validate() const {
    if (!std::isfinite(lambda) || lambda < 0.0) {
      throw Error(ErrorKind::InvalidArgument,
                  "lambda must be finite and non-negative");
    }
    if (!use_freq && !use_spatial) {
      throw Error(ErrorKind::InvalidArgument,
                  "at least one of the frequency and spatial terms must be on");
    }
    frequency.validate();
  }

  bool operator==(const ScoreConfig&) const = default;
};

struct ChannelScore {
  std::size_t channel = 0;
  double spectral = 0.0;
  double dist = 1.0;
  double l_fq = 0.0;
  double l_sp = 0.0;
  double combined = 0.0;

  bool operator==(const ChannelScore&) const = default;
};

struct LayerScores {
  std::uint32_t layer_index = 0;
  std::size_t batch_size = 0;
  std::vector<ChannelScore> scores;

  bool operator==(const LayerScores&) const = default;
};

/// Frobenius norm of the coefficient grid, row-major accumulation.
template <class T>
double spectral_energy(const Grid<T>& freq) {
  double sum = 0.0;
  for (T v : freq.values()) sum += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sum);
}

/// Fraction of coefficients whose magnitude reaches the mean magnitude.
///
/// The comparison admits a relative slack of 1e-12 so that a grid of equal
/// magnitudes counts every entry despite rounding in the mean.
template <class T>
double freq_distribution(const Grid<T>& freq) {
  const auto values = freq.values();
  double total = 0.0;
  for (T v : values) total += std::abs(static_cast<double>(v));
  const double n = static_cast<double>(values.size());
  const double mean = total / n;
  const double cutoff = mean - mean * 1e-12;
  std::size_t count = 0;
  for (T v : values) {
    if (std::abs(static_cast<double>(v)) >= cutoff) ++count;
  }
  return static_cast<double>(count) / n;
}

template <class T>
double l_fq(const Grid<T>& freq, const ScoreConfig& cfg) {
  const double spectral = spectral_energy(freq);
  return cfg.use_dist ? spectral * freq_distribution(freq) : spectral;
}

/// Frobenius norm of the raw spatial map.
template <class T>
double l_sp(const Grid<T>& map) {
  return spectral_energy(map);
}

/// Combined score from precomputed terms, honoring the ablation flags.
inline double combine_terms(double fq, double sp, const ScoreConfig& cfg) {
  if (!cfg.use_freq) return sp;
  if (!cfg.use_spatial) return fq;
  return fq + cfg.lambda * sp;
}

inline ChannelScore channel_score(const Map2D& map, const ScoreConfig& cfg,
                                  std::size_t channel = 0) {
  const FrequencyMap freq = to_frequency(map, cfg.frequency);
  ChannelScore s;
  s.channel = channel;
  s.spectral = spectral_energy(freq);
  s.dist = freq_distribution(freq);
  s.l_fq = cfg.use_dist ? s.spectral * s.dist : s.spectral;
  s.l_sp = l_sp(map);
  s.combined = combine_terms(s.l_fq, s.l_sp, cfg);
  return s;
}

/// Scores every channel of every image and averages each field over the
/// batch in ascending image order.
inline LayerScores batch_scores(const FeatureMapBatch& batch,
                                const ScoreConfig& cfg) {
  cfg.validate();
  LayerScores out;
  out.layer_index = batch.layer_index();
  out.batch_size = batch.batch_size();
  out.scores.resize(batch.channels());
  const double n = static_cast<double>(batch.batch_size());
  for (std::size_t c = 0; c < batch.channels(); ++c) {
    ChannelScore sum;
    sum.dist = 0.0;
    for (std::size_t b = 0; b < batch.batch_size(); ++b) {
      const ChannelScore s = channel_score(batch.channel_slice(b, c), cfg, c);
      sum.spectral += s.spectral;
      sum.dist += s.dist;
      sum.l_fq += s.l_fq;
      sum.l_sp += s.l_sp;
      sum.combined += s.combined;
    }
    ChannelScore& mean = out.scores[c];
    mean.channel = c;
    mean.spectral = sum.spectral / n;
    mean.dist = sum.dist / n;
    mean.l_fq = sum.l_fq / n;
    mean.l_sp = sum.l_sp / n;
    mean.combined = sum.combined / n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON report
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json config_to_json(const ScoreConfig& cfg) {
  nlohmann::ordered_json j;
  j["lambda"] = cfg.lambda;
  j["block_size"] = cfg.frequency.block_size;
  j["sigma"] = cfg.frequency.smoothing ? cfg.frequency.smoothing->sigma : 0.0;
  j["kernel_size"] =
      cfg.frequency.smoothing ? cfg.frequency.smoothing->kernel_size : 0;
  j["smoothing"] = cfg.frequency.smoothing.has_value();
  j["use_dist"] = cfg.use_dist;
  j["use_freq"] = cfg.use_freq;
  j["use_spatial"] = cfg.use_spatial;
  return j;
}

/// Inverse of config_to_json. Missing optional keys fall back to defaults.
inline ScoreConfig config_from_json(const nlohmann::ordered_json& j) {
  ScoreConfig cfg;
  cfg.lambda = j.at("lambda").get<double>();
  cfg.frequency.block_size = j.at("block_size").get<std::size_t>();
  const bool smoothing = j.value("smoothing", true);
  if (smoothing) {
    GaussianSmoothing g;
    g.sigma = j.value("sigma", g.sigma);
    g.kernel_size = j.value("kernel_size", g.kernel_size);
    cfg.frequency.smoothing = g;
  } else {
    cfg.frequency.smoothing.reset();
  }
  cfg.use_dist = j.value("use_dist", true);
  cfg.use_freq = j.value("use_freq", true);
  cfg.use_spatial = j.value("use_spatial", true);
  return cfg;
}

inline nlohmann::ordered_json layer_scores_to_json(const LayerScores& layer,
                                                   const ScoreConfig& cfg) {
  nlohmann::ordered_json j;
  j["layer_index"] = layer.layer_index;
  j["batch_size"] = layer.batch_size;
  j["lambda"] = cfg.lambda;
  j["block_size"] = cfg.frequency.block_size;
  auto scores = nlohmann::ordered_json::array();
  for (const auto& s : layer.scores) {
    nlohmann::ordered_json e;
    e["channel"] = s.channel;
    e["spectral"] = s.spectral;
    e["dist"] = s.dist;
    e["l_fq"] = s.l_fq;
    e["l_sp"] = s.l_sp;
    e["combined"] = s.combined;
    scores.push_back(std::move(e));
  }
  j["scores"] = std::move(scores);
  return j;
}

inline LayerScores layer_scores_from_json(const nlohmann::ordered_json& j) {
  LayerScores layer;
  layer.layer_index = j.at("layer_index").get<std::uint32_t>();
  layer.batch_size = j.at("batch_size").get<std::size_t>();
  for (const auto& e : j.at("scores")) {
    ChannelScore s;
    s.channel = e.at("channel").get<std::size_t>();
    s.spectral = e.at("spectral").get<double>();
    s.dist = e.at("dist").get<double>();
    s.l_fq = e.at("l_fq").get<double>();
    s.l_sp = e.at("l_sp").get<double>();
    s.combined = e.at("combined").get<double>();
    if (s.channel != layer.scores.size()) {
      throw Error(ErrorKind::MalformedPlan,
                  "score entries must be index-aligned with channels");
    }
    layer.scores.push_back(s);
  }
  return layer;
}

/// A scores document: the config used and one entry per scored layer.
struct ScoreReport {
  ScoreConfig config;
  std::vector<LayerScores> layers;
};

inline std::string serialize_scores(const ScoreReport& report) {
  nlohmann::ordered_json j;
  j["config"] = config_to_json(report.config);
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : report.layers) {
    layers.push_back(layer_scores_to_json(l, report.config));
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

inline ScoreReport parse_scores(const std::string& text) {
  try {
    auto j = nlohmann::ordered_json::parse(text);
    ScoreReport report;
    report.config = config_from_json(j.at("config"));
    for (const auto& l : j.at("layers")) {
      report.layers.push_back(layer_scores_from_json(l));
    }
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedPlan,
                std::string("malformed scores document: ") + e.what());
  }
}

}  // namespace cfdp
