/*
 * Copyright (c) 2026 The srcnet Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Drives the srcnet_cli binary end to end through the shell.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string output;  // stdout and stderr interleaved
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(SRCNET_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int raw = ::pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string hash_line(const std::string& out) {
  const auto pos = out.find("hash ");
  return pos == std::string::npos ? std::string() : out.substr(pos, 21);
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("srcnet_cli_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string str(const std::string& leaf = "") const { return (path_ / leaf).string(); }

 private:
  fs::path path_;
};

// A small model keeps the round-trip well under a second per epoch.
void write_small_config(const std::string& path) {
  std::ofstream out(path);
  out << "model.c = 8\nmodel.n1 = 1\nmodel.n2 = 1\nmodel.k = 4\nmodel.m = 2\n"
         "train.batch_size = 4\ntrain.epochs = 2\n";
}

}  // namespace

TEST(Cli, SynthHashIsReproducible) {
  const auto a = run_cli("synth --n 64 --seed 7 --size 32");
  const auto b = run_cli("synth --n 64 --seed 7 --size 32");
  ASSERT_EQ(a.status, 0) << a.output;
  ASSERT_EQ(b.status, 0) << b.output;
  EXPECT_FALSE(hash_line(a.output).empty());
  EXPECT_EQ(hash_line(a.output), hash_line(b.output));
  EXPECT_NE(a.output.find("pairs 64"), std::string::npos);

  const auto c = run_cli("synth --n 64 --seed 8 --size 32");
  EXPECT_NE(hash_line(a.output), hash_line(c.output));
}

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run_cli("synth --no-such-flag").status, 2);
  EXPECT_EQ(run_cli("frobnicate").status, 2);
  EXPECT_EQ(run_cli("").status, 2);
  EXPECT_EQ(run_cli("train --variant delta").status, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run_cli("--help");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.output.find("train"), std::string::npos);
}

TEST(Cli, GradcheckTinyPasses) {
  const auto r = run_cli("gradcheck --tiny");
  EXPECT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("all checks passed"), std::string::npos);
}

TEST(Cli, TrainEvalRoundTrip) {
  TempDir tmp;
  const auto cfg = tmp.str("small.cfg");
  write_small_config(cfg);
  const auto data = tmp.str("synth");
  ASSERT_EQ(run_cli("synth --n 8 --n-val 4 --size 16 --seed 3 --out " + data).status, 0);
  ASSERT_TRUE(fs::exists(data + "/tiles.txt"));

  const auto out = tmp.str("run");
  const auto tr = run_cli("train --config " + cfg + " --data " + data + " --out " + out);
  ASSERT_EQ(tr.status, 0) << tr.output;
  EXPECT_NE(tr.output.find("train 8 pairs, val 4 pairs"), std::string::npos) << tr.output;
  ASSERT_TRUE(fs::exists(out + "/best.ckpt"));
  ASSERT_TRUE(fs::exists(out + "/state.ckpt"));

  std::ifstream csv(out + "/metrics.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "model,dataset,precision,recall,f1,oa,iou,params");
  EXPECT_EQ(row.rfind("srcnet_full,synth,", 0), 0u) << row;

  // Evaluating the best checkpoint on the validation split reproduces the row.
  const auto ev = run_cli("eval --checkpoint " + out + "/best.ckpt --data " + data + " --split val");
  ASSERT_EQ(ev.status, 0) << ev.output;
  EXPECT_NE(ev.output.find(row), std::string::npos) << ev.output << "\nexpected " << row;

  // Resuming to a later epoch picks up the saved state. Epochs are numbered
  // from zero, so only epoch 2 runs.
  const auto res = run_cli("train --config " + cfg + " --data " + data + " --out " + out + " --epochs 3 --resume " +
                           out + "/state.ckpt");
  ASSERT_EQ(res.status, 0) << res.output;
  EXPECT_NE(res.output.find("resumed from"), std::string::npos);
  EXPECT_NE(res.output.find("epoch   2 "), std::string::npos) << res.output;
  EXPECT_EQ(res.output.find("epoch   1 "), std::string::npos) << res.output;
  EXPECT_EQ(res.output.find("epoch   3 "), std::string::npos) << res.output;

  // Inference writes a mask PNG.
  const auto mask = tmp.str("mask.png");
  const auto inf = run_cli("infer --checkpoint " + out + "/best.ckpt --img1 " + data + "/A/synth_0.png --img2 " +
                           data + "/B/synth_0.png --out " + mask);
  EXPECT_EQ(inf.status, 0) << inf.output;
  EXPECT_TRUE(fs::exists(mask));
}

TEST(Cli, EvalWithMismatchedConfigReportsTheDifference) {
  TempDir tmp;
  const auto cfg = tmp.str("small.cfg");
  write_small_config(cfg);
  const auto data = tmp.str("synth");
  ASSERT_EQ(run_cli("synth --n 4 --n-val 2 --size 16 --seed 4 --out " + data).status, 0);
  const auto out = tmp.str("run");
  ASSERT_EQ(run_cli("train --config " + cfg + " --data " + data + " --out " + out + " --epochs 1").status, 0);

  const auto ev = run_cli("eval --checkpoint " + out + "/best.ckpt --data " + data + " --variant alpha");
  EXPECT_EQ(ev.status, 1);
  EXPECT_NE(ev.output.find("model.variant"), std::string::npos) << ev.output;
}

TEST(Cli, MissingDataIsAnError) {
  const auto r = run_cli("train --epochs 1");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("--data"), std::string::npos);
}
