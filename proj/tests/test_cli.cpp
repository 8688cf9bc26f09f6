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

#include <sstream>

#include "cfdp/cli.hpp"
#include "test_util.hpp"

namespace cfdp {
namespace {

using testing::TempDir;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  const auto b = testing::file_bytes(p);
  return {b.begin(), b.end()};
}

void write_features(const std::filesystem::path& dir) {
  Rng rng(4);
  std::filesystem::create_directories(dir);
  save_feature_dump(testing::random_batch(rng, 0, 3, 4, 8, 8), dir / "layer_0.cfd");
  save_feature_dump(testing::random_batch(rng, 1, 3, 6, 4, 4), dir / "layer_1.cfd");
}

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 1);
  const auto unknown = run_cli({"score", "--features", ".", "--bogus"});
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.err.find("--bogus"), std::string::npos);
}

TEST(Cli, BlockSizeZeroIsUsageError) {
  TempDir dir;
  write_features(dir / "f");
  const auto r = run_cli({"--out-dir", dir.path().string(), "score", "--features",
                          (dir / "f").string(), "--block-size", "0"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--block-size"), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "scores.json"));
}

TEST(Cli, OtherFlagValidation) {
  TempDir dir;
  write_features(dir / "f");
  const auto f = (dir / "f").string();
  EXPECT_EQ(run_cli({"score", "--features", f, "--kernel-size", "4"}).code, 1);
  EXPECT_EQ(run_cli({"score", "--features", f, "--freq-only", "--spatial-only"}).code, 1);
  EXPECT_EQ(run_cli({"score", "--features", f, "--sigma", "-1", "--out-dir",
                     dir.path().string()}).code,
            1);
  EXPECT_EQ(run_cli({"plan", "--scores", "x.json", "--ratio", "1.0"}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--weights", "w", "--attack", "cw"}).code, 1);
}

TEST(Cli, MalformedDumpIsDataError) {
  TempDir dir;
  std::filesystem::create_directories(dir / "f");
  testing::write_bytes(dir / "f" / "layer_0.cfd", {'N', 'O', 'P', 'E', 1, 0, 0, 0});
  const auto r = run_cli({"--out-dir", dir.path().string(), "score", "--features",
                          (dir / "f").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("BadMagic"), std::string::npos) << r.err;
}

TEST(Cli, PlanFromScoresIsDeterministic) {
  TempDir dir;
  write_features(dir / "f");
  const auto out = dir.path().string();
  ASSERT_EQ(run_cli({"--out-dir", out, "score", "--features", (dir / "f").string()}).code, 0);
  const auto scores = (dir / "scores.json").string();
  ASSERT_EQ(run_cli({"--out-dir", out + "/a", "plan", "--scores", scores}).code, 0);
  ASSERT_EQ(run_cli({"--out-dir", out + "/b", "plan", "--scores", scores}).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "plan.json"), slurp(dir / "b" / "plan.json"));
  const auto plan = parse_plan(slurp(dir / "a" / "plan.json"));
  EXPECT_EQ(plan.layers[0].pruned.size(), 2u);
  EXPECT_EQ(plan.layers[1].pruned.size(), 3u);

  ASSERT_EQ(run_cli({"--out-dir", out + "/c", "plan", "--scores", scores, "--ratios",
                     "0=0.25,1=0.5"}).code,
            0);
  const auto per_layer = parse_plan(slurp(dir / "c" / "plan.json"));
  EXPECT_EQ(per_layer.layers[0].pruned.size(), 1u);
  EXPECT_EQ(per_layer.layers[1].pruned.size(), 3u);

  ASSERT_EQ(run_cli({"--out-dir", out + "/r", "plan", "--scores", scores, "--random"}).code, 0);
  EXPECT_EQ(parse_plan(slurp(dir / "r" / "plan.json")).created_from, PlanSource::RandomBaseline);
}

TEST(Cli, ClampWarningGoesToStderr) {
  TempDir dir;
  write_features(dir / "f");
  const auto out = dir.path().string();
  ASSERT_EQ(run_cli({"--out-dir", out, "score", "--features", (dir / "f").string()}).code, 0);
  const auto r = run_cli({"--out-dir", out, "plan", "--scores", (dir / "scores.json").string(),
                          "--ratio", "0.99"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
}

TEST(Cli, BadPlanExitCodes) {
  TempDir dir;
  save_weights(MicroNet(kMicroInput, default_micro_specs()), dir / "w");
  const auto w = (dir / "w").string();
  std::ofstream(dir / "overlap.json")
      << R"({"version":1,"created_from":"trained","config":{"lambda":0.03,"block_size":4,)"
         R"("sigma":1.0,"kernel_size":3,"smoothing":true,"use_dist":true,"use_freq":true,)"
         R"("use_spatial":true},"layers":[{"layer_index":0,"channels":16,"threshold":1,)"
         R"("saved":[0,1,2,3,4,5,6,7,8,9,10,11,12,13,14],"pruned":[0]}]})";
  std::ofstream(dir / "truncated.json") << R"({"version":1,"layers":[{"layer_)";
  const auto a = run_cli({"--out-dir", (dir / "o").string(), "apply", "--weights", w, "--plan",
                          (dir / "overlap.json").string()});
  EXPECT_EQ(a.code, 3) << a.err;
  const auto b = run_cli({"--out-dir", (dir / "o").string(), "apply", "--weights", w, "--plan",
                          (dir / "truncated.json").string()});
  EXPECT_EQ(b.code, 2) << b.err;
  const auto c = run_cli({"--out-dir", (dir / "o").string(), "apply", "--weights",
                          (dir / "missing").string(), "--plan", (dir / "overlap.json").string()});
  EXPECT_EQ(c.code, 2) << c.err;
}

TEST(Cli, EndToEndPipeline) {
  TempDir dir;
  const auto d = [&](const char* s) { return (dir / s).string(); };
  const std::vector<std::string> data = {"--train-size", "64", "--test-size", "32"};
  auto with = [&](std::vector<std::string> v, bool data_flags) {
    if (data_flags) v.insert(v.end(), data.begin(), data.end());
    return run_cli(v);
  };
  ASSERT_EQ(with({"--seed", "3", "--out-dir", d("cap"), "capture", "--epochs", "2",
                  "--capture-size", "8"},
                 true)
                .code,
            0);
  EXPECT_TRUE(std::filesystem::exists(dir / "cap" / "features" / "layer_1.cfd"));
  EXPECT_TRUE(std::filesystem::exists(dir / "cap" / "train_log.csv"));
  EXPECT_EQ(load_feature_dump(dir / "cap" / "features" / "layer_0.cfd").batch_size(), 8u);
  ASSERT_EQ(run_cli({"--out-dir", d("sc"), "score", "--features", d("cap/features")}).code, 0);
  ASSERT_EQ(run_cli({"--out-dir", d("pl"), "plan", "--scores", d("sc/scores.json"), "--ratio",
                     "0.5"})
                .code,
            0);
  const auto applied = run_cli({"--out-dir", d("ap"), "apply", "--weights", d("cap/weights"),
                                "--plan", d("pl/plan.json")});
  ASSERT_EQ(applied.code, 0) << applied.err;
  EXPECT_NE(applied.out.find("6852 -> 2276"), std::string::npos) << applied.out;
  ASSERT_EQ(with({"--out-dir", d("ft"), "train", "--weights", d("ap/weights"), "--epochs", "1"},
                 true)
                .code,
            0);
  ASSERT_EQ(with({"--out-dir", d("ev"), "eval", "--weights", d("ft/weights"), "--attack", "fgsm",
                  "--epsilon", "0.1"},
                 true)
                .code,
            0);
  const auto j = nlohmann::json::parse(slurp(dir / "ev" / "eval.json"));
  EXPECT_EQ(j["attack"], "fgsm");
  EXPECT_EQ(j["parameters"], 2276);
  EXPECT_GE(j["accuracy"].get<double>(), 0.0);
}

TEST(Cli, ConfigFileAndCommandLinePrecedence) {
  TempDir dir;
  write_features(dir / "f");
  std::ofstream(dir / "cfg.toml") << "out-dir = \"" << (dir / "fromcfg").string() << "\"\n"
                                  << "[score]\nlambda = 0.5\nblock-size = 2\n";
  ASSERT_EQ(run_cli({"--config", (dir / "cfg.toml").string(), "score", "--features",
                     (dir / "f").string()})
                .code,
            0);
  auto report = parse_scores(slurp(dir / "fromcfg" / "scores.json"));
  EXPECT_EQ(report.config.lambda, 0.5);
  EXPECT_EQ(report.config.frequency.block_size, 2u);

  ASSERT_EQ(run_cli({"--config", (dir / "cfg.toml").string(), "score", "--features",
                     (dir / "f").string(), "--lambda", "0.1"})
                .code,
            0);
  report = parse_scores(slurp(dir / "fromcfg" / "scores.json"));
  EXPECT_EQ(report.config.lambda, 0.1);
  EXPECT_EQ(report.config.frequency.block_size, 2u);

  std::ofstream(dir / "bad.toml") << "[score]\nlamda = 0.5\n";
  EXPECT_EQ(run_cli({"--config", (dir / "bad.toml").string(), "score", "--features",
                     (dir / "f").string()})
                .code,
            1);
}

}  // namespace
}  // namespace cfdp
