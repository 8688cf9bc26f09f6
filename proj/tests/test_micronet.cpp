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

#include <gtest/gtest.h>

#include <cmath>

#include "cfdp/micronet.hpp"
#include "cfdp/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace cfdp {
namespace {

using testing::TempDir;

std::vector<double> random_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

void randomize(BasicMicroNet<double>& net, Rng& rng) {
  for (auto& l : net.layers()) {
    for (auto& w : l.weight) w = rng.uniform(-0.5, 0.5);
    for (auto& b : l.bias) b = rng.uniform(-0.2, 0.2);
  }
}

TEST(MicroNet, DefaultArchitecture) {
  MicroNet net(kMicroInput, default_micro_specs());
  EXPECT_EQ(net.parameter_count(), 16u * 9 + 16 + 32 * 16 * 9 + 32 + 4 * 32 * 16 + 4);
  EXPECT_EQ(net.classes(), 4u);
  EXPECT_EQ(net.conv_positions(), (std::vector<std::size_t>{0, 3}));
  EXPECT_THROW(MicroNet(kMicroInput, {LayerSpec::conv(4, 2)}), Error);
  EXPECT_THROW(MicroNet(kMicroInput, {LayerSpec::linear(4)}), Error);
}

TEST(MicroNet, IdentityConvPassesInputThrough) {
  BasicMicroNet<double> net({1, 5, 5}, {LayerSpec::conv(1, 1)});
  net.layers()[0].weight[0] = 1.0;
  Rng rng(3);
  const auto img = random_values(rng, 25);
  const auto trace = forward(net, std::span<const double>(img));
  EXPECT_EQ(trace.acts.back(), img);
}

TEST(MicroNet, ConvMatchesNaiveOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    BasicMicroNet<double> net({3, 8, 8}, {LayerSpec::conv(5, 3)});
    randomize(net, rng);
    const auto img = random_values(rng, 3 * 64);
    const auto got = forward(net, std::span<const double>(img)).acts.back();
    const auto& l = net.layers()[0];
    const auto want = oracle::naive_conv(img, 3, 8, 8, l.weight, l.bias, 5, 3);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(MicroNet, MaxPoolPicksFirstMaximum) {
  BasicMicroNet<double> net({1, 2, 2}, {LayerSpec::maxpool()});
  const std::vector<double> img = {1.0, 3.0, 3.0, 2.0};
  const auto trace = forward(net, std::span<const double>(img));
  EXPECT_EQ(trace.acts.back(), std::vector<double>{3.0});
  const std::vector<double> g = {1.0};
  const auto gin = backward(net, trace, std::span<const double>(g),
                            static_cast<Gradients<double>*>(nullptr));
  EXPECT_EQ(gin, (std::vector<double>{0.0, 1.0, 0.0, 0.0}));
}

TEST(MicroNet, ZeroWeightsGiveBiasLogitsAndChanceAccuracy) {
  MicroNet net(kMicroInput, default_micro_specs());
  auto& lin = net.layers().back();
  lin.bias = {0.5f, -1.0f, 2.0f, 0.0f};
  const auto data = gen_dataset(1, 20);
  const auto img = detail::image_as<float>(data, 0);
  const auto trace = forward(net, std::span<const float>(img));
  EXPECT_EQ(trace.acts.back(), lin.bias);

  MicroNet zero(kMicroInput, default_micro_specs());
  EXPECT_DOUBLE_EQ(evaluate(zero, gen_dataset(2, 400)), 0.25);
}

TEST(MicroNet, SoftmaxCrossEntropy) {
  const std::vector<double> logits = {0.0, 0.0, 0.0, 0.0};
  std::vector<double> g(4);
  EXPECT_NEAR(softmax_cross_entropy(std::span<const double>(logits), 2, std::span<double>(g)),
              std::log(4.0), 1e-15);
  EXPECT_NEAR(g[2], -0.75, 1e-15);
  EXPECT_NEAR(g[0], 0.25, 1e-15);
  const std::vector<double> big = {1000.0, 0.0};
  EXPECT_NEAR(softmax_cross_entropy(std::span<const double>(big), 0), 0.0, 1e-12);
  EXPECT_EQ(argmax(std::span<const double>(std::vector<double>{1, 3, 3})), 1u);
}

double loss_of(const BasicMicroNet<double>& net, const std::vector<double>& img,
               std::size_t label) {
  const auto t = forward(net, std::span<const double>(img));
  return softmax_cross_entropy(t.logits(), label);
}

TEST(MicroNet, GradientsMatchFiniteDifferences) {
  Rng rng(2024);
  BasicMicroNet<double> net({1, 4, 4}, {LayerSpec::conv(2, 3), LayerSpec::relu(),
                                        LayerSpec::maxpool(), LayerSpec::flatten(),
                                        LayerSpec::linear(4)});
  randomize(net, rng);
  const auto img = random_values(rng, 16, 0.0, 1.0);
  const std::size_t label = 1;
  auto grads = net.zero_gradients();
  const auto trace = forward(net, std::span<const double>(img));
  std::vector<double> gl(4);
  softmax_cross_entropy(trace.logits(), label, std::span<double>(gl));
  const auto gin = backward(net, trace, std::span<const double>(gl), &grads);

  const double h = 1e-3;
  std::size_t checked = 0;
  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + h;
    const double up = loss_of(net, img, label);
    param = saved - h;
    const double down = loss_of(net, img, label);
    param = saved;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(numeric - analytic) /
                       std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    EXPECT_LT(rel, 1e-2) << "numeric " << numeric << " analytic " << analytic;
    ++checked;
  };
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    auto& l = net.layers()[i];
    for (std::size_t j = 0; j < l.weight.size(); ++j) check(l.weight[j], grads.weight[i][j]);
    for (std::size_t j = 0; j < l.bias.size(); ++j) check(l.bias[j], grads.bias[i][j]);
  }
  EXPECT_EQ(checked, 56u);

  auto x = img;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double saved = x[j];
    x[j] = saved + h;
    const double up = loss_of(net, x, label);
    x[j] = saved - h;
    const double down = loss_of(net, x, label);
    x[j] = saved;
    const double numeric = (up - down) / (2 * h);
    EXPECT_LT(std::abs(numeric - gin[j]) / std::max({std::abs(numeric), std::abs(gin[j]), 1e-6}),
              1e-2);
  }
}

TEST(Dataset, DeterministicAndBalanced) {
  const auto a = gen_dataset(9, 400);
  const auto b = gen_dataset(9, 400);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(gen_dataset(10, 400).images, a.images);
  std::array<std::size_t, 4> counts{};
  for (auto l : a.labels) ++counts[l];
  for (auto c : counts) EXPECT_EQ(c, 100u);
  for (float v : a.images) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Dataset, NoiseFreeImagesAreTemplates) {
  const auto d = gen_dataset(4, 8, 4, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto img = d.image(i);
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        EXPECT_EQ(img[y * 16 + x], class_template(d.labels[i], y, x));
      }
    }
  }
  EXPECT_EQ(head(d, 3).size(), 3u);
}

TEST(Training, ZeroLearningRateLeavesWeights) {
  auto net = fresh_micro_net(1);
  const auto before = net;
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.weight_decay = 0.0;
  cfg.epochs = 1;
  const auto log = train(net, gen_dataset(1, 64), cfg);
  EXPECT_EQ(net, before);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_TRUE(std::isfinite(log[0].loss));
}

TEST(Training, ValidatesConfig) {
  TrainConfig cfg;
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Training, DivergenceIsReported) {
  auto net = fresh_micro_net(1);
  TrainConfig cfg;
  cfg.learning_rate = 1e30;
  cfg.epochs = 3;
  try {
    train(net, gen_dataset(1, 64), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DivergedLoss);
  }
}

TEST(Training, LearnsSyntheticTask) {
  PipelineConfig cfg;
  cfg.seed = 7;
  const auto train_set = train_split(cfg);
  const auto test_set = test_split(cfg);
  auto net = fresh_micro_net(cfg.seed);
  const auto log = train(net, train_set, make_train_config(cfg, 30, cfg.seed), &test_set);
  EXPECT_LT(log.back().loss, log.front().loss);
  EXPECT_GE(evaluate(net, test_set), 0.95);
  const auto csv = loss_curve_csv(log);
  EXPECT_EQ(csv.rfind("epoch,loss,train_acc,test_acc\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 31);
}

ModelPlan plan_from(std::vector<std::vector<std::size_t>> saved,
                    std::vector<std::size_t> channels) {
  ModelPlan plan;
  for (std::size_t l = 0; l < saved.size(); ++l) {
    LayerPlan lp;
    lp.layer_index = static_cast<std::uint32_t>(l);
    lp.channels = channels[l];
    lp.saved = saved[l];
    for (std::size_t c = 0; c < channels[l]; ++c) {
      if (!std::binary_search(saved[l].begin(), saved[l].end(), c)) lp.pruned.push_back(c);
    }
    lp.threshold = lp.pruned.size();
    plan.layers.push_back(lp);
  }
  return plan;
}

std::vector<std::size_t> iota_n(std::size_t n, std::size_t step = 1, std::size_t from = 0) {
  std::vector<std::size_t> v;
  for (std::size_t i = from; i < n; i += step) v.push_back(i);
  return v;
}

TEST(ApplyPlan, IdentityPlanKeepsNetwork) {
  auto net = fresh_micro_net(5);
  const auto out = apply_plan(net, plan_from({iota_n(16), iota_n(32)}, {16, 32}));
  EXPECT_EQ(out, net);
}

TEST(ApplyPlan, ParameterCountAfterHalving) {
  auto net = fresh_micro_net(5);
  const auto out = apply_plan(net, plan_from({iota_n(16, 2), iota_n(32, 2)}, {16, 32}));
  // conv 8x1x3x3 + 8, conv 16x8x3x3 + 16, linear 4x(16*4*4) + 4
  EXPECT_EQ(out.parameter_count(), 80u + 1168u + 1028u);
}

TEST(ApplyPlan, SurvivingWeightsAreBitExact) {
  auto net = fresh_micro_net(8);
  const std::vector<std::size_t> s0 = {1, 4, 9}, s1 = {0, 31};
  const auto out = apply_plan(net, plan_from({s0, s1}, {16, 32}));
  const auto& a0 = net.layers()[0];
  const auto& b0 = out.layers()[0];
  for (std::size_t o = 0; o < s0.size(); ++o) {
    for (std::size_t j = 0; j < 9; ++j) EXPECT_EQ(b0.weight[o * 9 + j], a0.weight[s0[o] * 9 + j]);
  }
  const auto& a1 = net.layers()[3];
  const auto& b1 = out.layers()[3];
  for (std::size_t o = 0; o < s1.size(); ++o) {
    for (std::size_t c = 0; c < s0.size(); ++c) {
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_EQ(b1.weight[(o * 3 + c) * 9 + j], a1.weight[(s1[o] * 16 + s0[c]) * 9 + j]);
      }
    }
  }
  const auto& al = net.layers().back();
  const auto& bl = out.layers().back();
  EXPECT_EQ(bl.weight[0 * 32 + 16], al.weight[0 * 512 + 31 * 16]);
  EXPECT_EQ(bl.weight[3 * 32 + 5], al.weight[3 * 512 + 5]);
}

TEST(ApplyPlan, PruningDeadChannelKeepsOutputs) {
  auto net = fresh_micro_net(12);
  // Channel 6 of the second conv feeds nothing downstream.
  auto& lin = net.layers().back();
  for (std::size_t o = 0; o < 4; ++o) {
    for (std::size_t j = 0; j < 16; ++j) lin.weight[o * 512 + 6 * 16 + j] = 0.0f;
  }
  // Channel 3 of the first conv feeds nothing into the second.
  auto& c1 = net.layers()[3];
  for (std::size_t o = 0; o < 32; ++o) {
    for (std::size_t j = 0; j < 9; ++j) c1.weight[(o * 16 + 3) * 9 + j] = 0.0f;
  }
  auto keep0 = iota_n(16);
  keep0.erase(keep0.begin() + 3);
  auto keep1 = iota_n(32);
  keep1.erase(keep1.begin() + 6);
  const auto pruned = apply_plan(net, plan_from({keep0, keep1}, {16, 32}));
  const auto data = gen_dataset(3, 16);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto img = detail::image_as<float>(data, i);
    const auto a = forward(net, std::span<const float>(img)).acts.back();
    const auto b = forward(pruned, std::span<const float>(img)).acts.back();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a[k], b[k], 1e-5);
  }
}

TEST(ApplyPlan, RejectsMismatchedPlans) {
  auto net = fresh_micro_net(5);
  auto expect_kind = [&](const ModelPlan& p, ErrorKind kind) {
    try {
      apply_plan(net, p);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), kind);
    }
  };
  expect_kind(plan_from({iota_n(8)}, {8}), ErrorKind::PlanMismatch);
  expect_kind(plan_from({iota_n(16), iota_n(32), iota_n(2)}, {16, 32, 2}),
              ErrorKind::PlanMismatch);
  expect_kind(plan_from({{}}, {16}), ErrorKind::EmptySavedSet);
}

TEST(Attacks, EpsilonZeroIsIdentity) {
  auto net = fresh_micro_net(3);
  const auto data = gen_dataset(3, 8);
  const auto img = detail::image_as<float>(data, 0);
  EXPECT_EQ(fgsm(net, std::span<const float>(img), data.labels[0], 0.0), img);
  EXPECT_EQ(pgd(net, std::span<const float>(img), data.labels[0], 0.0), img);
  EXPECT_EQ(attack_dataset(net, data, Attack::Fgsm, 0.0).images, data.images);
}

TEST(Attacks, StayInBallAndRange) {
  auto net = fresh_micro_net(3);
  const auto data = gen_dataset(4, 16);
  for (double eps : {0.01, 0.1, 0.3}) {
    for (auto attack : {Attack::Fgsm, Attack::Pgd}) {
      const auto adv = attack_dataset(net, data, attack, eps);
      bool moved = false;
      for (std::size_t j = 0; j < adv.images.size(); ++j) {
        const double d = std::abs(static_cast<double>(adv.images[j]) - data.images[j]);
        ASSERT_LE(d, eps);
        ASSERT_GE(adv.images[j], 0.0f);
        ASSERT_LE(adv.images[j], 1.0f);
        moved = moved || d > 0;
      }
      EXPECT_TRUE(moved);
    }
  }
}

TEST(Attacks, FgsmIncreasesLoss) {
  Rng rng(5);
  BasicMicroNet<double> net({1, 4, 4}, {LayerSpec::conv(2, 3), LayerSpec::relu(),
                                        LayerSpec::maxpool(), LayerSpec::flatten(),
                                        LayerSpec::linear(4)});
  randomize(net, rng);
  const auto img = random_values(rng, 16, 0.3, 0.7);
  const auto adv = fgsm(net, std::span<const double>(img), 2, 1e-4);
  EXPECT_GT(loss_of(net, adv, 2), loss_of(net, img, 2));
}

TEST(WeightStore, Roundtrip) {
  TempDir dir;
  auto net = fresh_micro_net(21);
  net.layers()[0].bias[3] = 0.125f;
  save_weights(net, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "model.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "weight_2.cfd"));
  EXPECT_EQ(load_weights(dir.path()), net);

  const auto pruned = apply_plan(net, plan_from({iota_n(16, 3), iota_n(32, 5)}, {16, 32}));
  TempDir dir2;
  save_weights(pruned, dir2.path());
  EXPECT_EQ(load_weights(dir2.path()), pruned);
  const auto w1 = read_record(dir2 / "weight_1.cfd");
  EXPECT_EQ(w1.header.dims, (std::array<std::uint32_t, 4>{7, 6, 3, 3}));
}

TEST(WeightStore, RejectsShapeDisagreement) {
  TempDir a, b;
  save_weights(fresh_micro_net(1), a.path());
  save_weights(apply_plan(fresh_micro_net(1), plan_from({iota_n(16, 2)}, {16})), b.path());
  std::filesystem::copy_file(b / "weight_0.cfd", a / "weight_0.cfd",
                             std::filesystem::copy_options::overwrite_existing);
  try {
    load_weights(a.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(Capture, PreAndPostActivation) {
  auto net = fresh_micro_net(2);
  const auto data = gen_dataset(2, 5);
  const auto pre = capture_features(net, data, CapturePoint::PreActivation);
  const auto post = capture_features(net, data, CapturePoint::PostActivation);
  ASSERT_EQ(pre.size(), 2u);
  EXPECT_EQ(pre[0].batch_size(), 5u);
  EXPECT_EQ(pre[0].channels(), 16u);
  EXPECT_EQ(pre[0].height(), 16u);
  EXPECT_EQ(pre[1].channels(), 32u);
  EXPECT_EQ(pre[1].height(), 8u);
  EXPECT_EQ(pre[1].layer_index(), 1u);
  bool saw_negative = false;
  for (std::size_t i = 0; i < pre[0].data().size(); ++i) {
    EXPECT_EQ(post[0].data()[i], std::max(pre[0].data()[i], 0.0f));
    saw_negative = saw_negative || pre[0].data()[i] < 0;
  }
  EXPECT_TRUE(saw_negative);
}

}  // namespace
}  // namespace cfdp
