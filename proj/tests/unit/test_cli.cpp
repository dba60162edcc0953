#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string("\"") + MVL_CLI_PATH + "\" " + args + " 2>&1";
  Outcome o;
  std::FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) o.output.append(buf.data(), n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("mvl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  std::string path(const std::string& name) const { return "\"" + (dir_ / name).string() + "\""; }
  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  std::filesystem::path dir_;
};

TEST_F(Cli, InspectParamsPrintsTheTable) {
  const Outcome o = run("inspect-params");
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.output.find("GRU/optical"), std::string::npos);
  EXPECT_NE(o.output.find("43904"), std::string::npos);
  EXPECT_NE(o.output.find("20802"), std::string::npos);
}

TEST_F(Cli, MissingSubcommandIsAUsageError) { EXPECT_EQ(run("").code, 1); }

TEST_F(Cli, UnknownFlagIsAUsageError) { EXPECT_EQ(run("inspect-params --frobnicate").code, 1); }

TEST_F(Cli, SynthThenEntropy) {
  Outcome o = run("synth --kind redundant --train 20 --test 8 --seed 3 --out " + path("d.mvds"));
  ASSERT_EQ(o.code, 0) << o.output;
  o = run("entropy " + path("d.mvds") + " --out " + path("e.csv"));
  EXPECT_EQ(o.code, 0) << o.output;
  EXPECT_TRUE(std::filesystem::exists(dir_ / "e.csv"));
  EXPECT_NE(o.output.find("optical"), std::string::npos);
}

TEST_F(Cli, BadSynthKindIsAValidationError) {
  EXPECT_EQ(run("synth --kind xor --out " + path("d.mvds")).code, 1);
}

TEST_F(Cli, TrainRunsAndReportRebuilds) {
  write("c.json", R"({"synthetic": {"kind": "complementary", "train_samples": 24, "test_samples": 12},
    "encoder": "ltae", "strategy": "feature", "repetitions": 1,
    "encoder_settings": {"model_dim": 8, "heads": 2, "key_dim": 4, "embedding_dim": 8},
    "train": {"max_epochs": 1, "batch_size": 8}})");
  Outcome o = run("train --quiet --config " + path("c.json") + " --seed 5 --out " + path("run"));
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_NE(o.output.find("ltae-feature-none"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir_ / "run" / "records.csv"));
  std::filesystem::remove_all(dir_ / "run" / "reports");
  o = run("report --out " + path("run"));
  EXPECT_EQ(o.code, 0) << o.output;
  EXPECT_TRUE(std::filesystem::exists(dir_ / "run" / "reports" / "overall.md"));
}

TEST_F(Cli, InvalidConfigExitsWithOne) {
  write("c.json", R"({"synthetic": {"kind": "complementary"}, "strategy": "input", "component": "gfusion"})");
  EXPECT_EQ(run("train --config " + path("c.json")).code, 1);
  write("u.json", R"({"synthetic": {"kind": "complementary"}, "bogus": 1})");
  const Outcome o = run("grid --config " + path("u.json"));
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("bogus"), std::string::npos);
}

TEST_F(Cli, RuntimeFailureExitsWithTwo) {
  write("not.mvds", "definitely not a dataset");
  EXPECT_EQ(run("entropy " + path("not.mvds")).code, 2);
  write("c.json", R"({"dataset": ")" + (dir_ / "missing.mvds").string() + R"(", "encoder": "gru"})");
  EXPECT_EQ(run("train --quiet --config " + path("c.json")).code, 2);
}

}  // namespace
