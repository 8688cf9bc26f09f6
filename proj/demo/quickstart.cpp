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

// Scores the channels of a freshly trained micro-net, prunes half of them and
// fine-tunes the result.

#include <iostream>

#include "cfdp/cfdp.hpp"

int main() {
  cfdp::PipelineConfig cfg;
  cfg.seed = 7;
  cfg.epochs = 10;
  cfg.finetune_epochs = 3;

  const auto train_set = cfdp::train_split(cfg);
  const auto test_set = cfdp::test_split(cfg);
  const auto base = cfdp::train_base(cfg, train_set);
  std::cout << "unpruned test accuracy: " << cfdp::evaluate(base.net, test_set) << "\n";

  const auto scores = cfdp::score_network(base.net, train_set, cfg, cfg.score);
  for (const auto& layer : scores) {
    const auto order = cfdp::rank_channels(layer);
    std::cout << "conv " << layer.layer_index << " top channel " << order.front()
              << " (score " << layer.scores[order.front()].combined << ")\n";
  }

  const auto plan = cfdp::make_model_plan(scores, cfg.prune, cfg.score);
  cfdp::MicroNet pruned;
  const double acc = cfdp::prune_and_finetune(base.net, plan, train_set, test_set, cfg,
                                              cfg.finetune_epochs, &pruned);
  std::cout << "parameters " << base.net.parameter_count() << " -> " << pruned.parameter_count()
            << ", pruned test accuracy: " << acc << "\n";
  std::cout << cfdp::serialize_plan(plan);
}
