#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "metamix/harness.hpp"

#ifndef METAMIX_CLI_PATH
#error "METAMIX_CLI_PATH must point at the metamix binary"
#endif

using namespace metamix;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int status = -1;
  std::string out;  // stdout and stderr together
};

CliRun run_cli(const std::string& args) {
  std::string cmd = std::string("METAMIX_LOG=warn '") + METAMIX_CLI_PATH + "' " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() / "metamix_cli_tests" / info->name();
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kSmall =
    "--set hidden=[8] --set schedule=polynomial:20,sinusoid:20 --set penalty=0 --set eval_every=10 "
    "--set bank_episodes=3 --set optimizer=adam";

}  // namespace

TEST(Cli, ZeroIterationsWritesInitialCheckpoint) {
  fs::path dir = scratch_dir();
  CliRun r = run_cli("train --set iterations=0 --out '" + dir.string() + "'");
  EXPECT_EQ(r.status, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir / "checkpoint.json"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(dir / "manifest.yaml"));
  Checkpoint ck = load_checkpoint((dir / "checkpoint").string());
  EXPECT_EQ(ck.state.iteration, 0u);
}

TEST(Cli, InfoOnFreshCheckpoint) {
  fs::path dir = scratch_dir();
  ASSERT_EQ(run_cli("train --set iterations=0 --out '" + dir.string() + "'").status, 0);
  CliRun r = run_cli("info '" + dir.string() + "'");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("active_clusters: 1\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("param_norm: "), std::string::npos);
  EXPECT_NE(r.out.find("spawns: []"), std::string::npos);
}

TEST(Cli, EvalReproducesLastRecord) {
  fs::path dir = scratch_dir();
  ASSERT_EQ(run_cli("train " + kSmall + " --out '" + dir.string() + "'").status, 0);
  CliRun r = run_cli("eval '" + (dir / "checkpoint.json").string() + "' --out '" + (dir / "eval.csv").string() + "'");
  ASSERT_EQ(r.status, 0) << r.out;
  std::vector<MetricsRecord> all = read_metrics_csv((dir / "metrics.csv").string());
  std::vector<MetricsRecord> replay = read_metrics_csv((dir / "eval.csv").string());
  ASSERT_EQ(replay.size(), 2u);
  for (std::size_t f = 0; f < 2; ++f) {
    const MetricsRecord& last = all[all.size() - 2 + f];
    EXPECT_EQ(replay[f].iteration, last.iteration);
    EXPECT_EQ(replay[f].family, last.family);
    EXPECT_NEAR(replay[f].loss, last.loss, 1e-9);
    for (std::size_t k = 0; k < last.gamma.size(); ++k) EXPECT_NEAR(replay[f].gamma[k], last.gamma[k], 1e-9);
    EXPECT_EQ(replay[f].active_clusters, last.active_clusters);
  }
}

TEST(Cli, ThreadsAndManifestReproduceBytes) {
  fs::path dir = scratch_dir();
  ASSERT_EQ(run_cli("train " + kSmall + " --seed 5 --threads 1 --out '" + (dir / "a").string() + "'").status, 0);
  ASSERT_EQ(run_cli("train " + kSmall + " --seed 5 --threads 3 --out '" + (dir / "b").string() + "'").status, 0);
  ASSERT_EQ(run_cli("train --config '" + (dir / "a" / "manifest.yaml").string() + "' --out '" + (dir / "c").string() + "'")
                .status,
            0);
  for (const char* f : {"metrics.csv", "spawns.csv", "manifest.yaml", "checkpoint.json", "checkpoint.bin"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "c" / f)) << f;
  }
}

TEST(Cli, SeedFlagChangesOutputs) {
  fs::path dir = scratch_dir();
  ASSERT_EQ(run_cli("train " + kSmall + " --seed 1 --out '" + (dir / "a").string() + "'").status, 0);
  ASSERT_EQ(run_cli("train " + kSmall + " --seed 2 --out '" + (dir / "b").string() + "'").status, 0);
  EXPECT_NE(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
}

TEST(Cli, ConfigErrorsAreStructured) {
  CliRun r = run_cli("train --set zeta=-1 --set iterations=0");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.out.find("metamix: error: config 'zeta'"), std::string::npos) << r.out;
  r = run_cli("train --set bogus=1");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.out.find("'bogus'"), std::string::npos) << r.out;
}

TEST(Cli, BadInvocationsFail) {
  EXPECT_NE(run_cli("").status, 0);
  EXPECT_NE(run_cli("frobnicate").status, 0);
  CliRun r = run_cli("info /nonexistent/run");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.out.find("metamix: error: "), std::string::npos);
  EXPECT_NE(run_cli("train --config /nonexistent.yaml").status, 0);
}
