// Copyright 2026 The prefixchat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "prefixchat/cli.hpp"

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "prefixchat/config.hpp"

namespace prefixchat {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "prefixchat");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("prefixchat_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) files.insert(fs::relative(e.path(), dir).string());
  return files;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// metrics.csv without the wall-clock column.
std::vector<std::string> metrics_without_speed(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    cells.erase(cells.begin() + 3);
    std::string joined;
    for (const auto& c : cells) joined += c + ",";
    rows.push_back(joined);
  }
  return rows;
}

std::string data(const std::string& name) { return std::string(PREFIXCHAT_DATA_DIR) + "/" + name; }

TEST(Cli, HelpAndUsageErrors) {
  const Result help = run({"--help"});
  EXPECT_EQ(help.code, kExitOk);
  EXPECT_NE(help.out.find("corpus"), std::string::npos);
  EXPECT_NE(help.out.find("chat"), std::string::npos);

  const Result unknown = run({"frobnicate"});
  EXPECT_EQ(unknown.code, kExitUsage);
  EXPECT_NE(unknown.err.find("Usage"), std::string::npos);

  const Result none = run({});
  EXPECT_EQ(none.code, kExitUsage);

  const Result sub_help = run({"train", "--help"});
  EXPECT_EQ(sub_help.code, kExitOk);
  EXPECT_NE(sub_help.out.find("--vocab"), std::string::npos);
}

TEST(Cli, BinaryExitCodes) {
  const std::string cli = PREFIXCHAT_CLI_PATH;
  EXPECT_EQ(WEXITSTATUS(std::system((cli + " --help > /dev/null").c_str())), 0);
  EXPECT_EQ(WEXITSTATUS(std::system((cli + " bogus 2> /dev/null").c_str())), 1);
  EXPECT_EQ(WEXITSTATUS(std::system((cli + " eval --model /nonexistent --corpus /nonexistent 2> /dev/null").c_str())), 2);
}

TEST(Cli, MissingVocabNamesTheFlag) {
  const fs::path dir = fresh_dir("missing");
  const Result r = run({"train", "--corpus", data("toy_comments.jsonl"), "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--vocab"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "run"));
  fs::remove_all(dir);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  const Result r = run({"eval", "--model", "/nonexistent/model.ckpt", "--corpus", data("toy_comments.jsonl")});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_NE(r.err.find("nonexistent"), std::string::npos);
}

TEST(Cli, ConfigRejectsUnknownKeys) {
  const fs::path dir = fresh_dir("config");
  std::ofstream(dir / "bad.json") << R"({"n_layers": 2, "learning_rate": 0.1})";
  const Result r = run({"train", "--config", (dir / "bad.json").string(), "--corpus", "x", "--vocab", "y",
                        "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos) << r.err;
  EXPECT_THROW(AppConfig::from_json(nlohmann::json{{"d_model", "wide"}}), std::invalid_argument);
  EXPECT_THROW(AppConfig::from_json(nlohmann::json{{"steps", nlohmann::json::array()}}), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(Cli, EndToEndOnBundledData) {
  const fs::path dir = fresh_dir("e2e");
  const std::string samples = (dir / "samples.jsonl").string();
  const std::string vocab = (dir / "vocab.txt").string();

  Result r = run({"corpus", "build", "--in", data("toy_comments.jsonl"), "--out", samples, "--min-len", "2",
                  "--role-cap", "8", "--stats", (dir / "stats.json").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto stats = nlohmann::json::parse(read_file(dir / "stats.json"));
  EXPECT_EQ(stats.at("samples_kept").get<int>(), 32);

  r = run({"tokenizer", "train", "--in", samples, "--size", "256", "--out", vocab});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  r = run({"tokenizer", "encode", "--vocab", vocab, "--text", "the mat and the log"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::string ids = r.out;
  ids.pop_back();
  r = run({"tokenizer", "decode", "--vocab", vocab, "--ids", ids});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.out, "the mat and the log\n");

  r = run({"batch", "build", "--corpus", samples, "--vocab", vocab, "--out", (dir / "batches.bin").string(),
           "--budget", "512"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  r = run({"batch", "inspect", "--in", (dir / "batches.bin").string(), "--batch", "0"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("batch 0"), std::string::npos);

  const fs::path run_dir = dir / "run";
  const auto before = listing(dir);
  r = run({"train", "--corpus", samples, "--vocab", vocab, "--steps", "50", "--seed", "3", "--lr", "3e-3",
           "--out", run_dir.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const auto& f : listing(dir)) {
    if (!before.count(f)) EXPECT_EQ(f.rfind("run", 0), 0u) << "wrote outside --out: " << f;
  }
  EXPECT_TRUE(fs::exists(run_dir / "final.ckpt"));
  EXPECT_TRUE(fs::exists(run_dir / "effective_config.json"));
  EXPECT_EQ(metrics_without_speed(run_dir / "metrics.csv").size(), 51u);

  // The echoed config alone reproduces the run.
  const fs::path rerun_dir = dir / "rerun";
  r = run({"train", "--config", (run_dir / "effective_config.json").string(), "--out", rerun_dir.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(metrics_without_speed(rerun_dir / "metrics.csv"), metrics_without_speed(run_dir / "metrics.csv"));

  r = run({"eval", "--model", (run_dir / "final.ckpt").string(), "--corpus", samples});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto ppl = nlohmann::json::parse(r.out);
  EXPECT_GT(ppl.at("ppl").get<double>(), 1.0);

  const std::string transcript = (dir / "run" / "chat.jsonl").string();
  r = run({"chat", "--model", (run_dir / "final.ckpt").string(), "--topic", "the new bakery on main street",
           "--rounds", "5", "--strategy", "top_p", "--p", "0.9", "--seed", "4", "--out", transcript});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::ifstream in(transcript);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    EXPECT_TRUE(nlohmann::json::parse(line).contains("decode_config_digest"));
  }
  EXPECT_EQ(lines, 11u);

  r = run({"chat", "--model", (run_dir / "final.ckpt").string(), "--topic", "hi", "--p", "1.5"});
  EXPECT_EQ(r.code, kExitUsage);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace prefixchat
