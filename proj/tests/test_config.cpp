#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "metamix/config.hpp"

using namespace metamix;

namespace {

std::string error_key(const std::string& text, std::vector<std::string> overrides = {}) {
  try {
    parse_config_text(text, overrides);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

}  // namespace

TEST(Config, EmptyIsDefaults) {
  RunConfig c = parse_config(std::nullopt);
  RunConfig d;
  EXPECT_EQ(dump_config(c), dump_config(d));
  EXPECT_EQ(c.mixture.model.hidden, (std::vector<std::size_t>{40, 40}));
  EXPECT_EQ(c.mixture.meta_batch, 10u);
  EXPECT_EQ(c.mixture.support, 5u);
  EXPECT_EQ(c.mixture.tau, 1.0);
  EXPECT_EQ(c.total_iterations(), 2000u);
  EXPECT_EQ(c.harness.eval_every, 50u);
  EXPECT_EQ(c.harness.bank_episodes, 100u);
  EXPECT_EQ(c.crp.capacity, 16u);
}

TEST(Config, TauOverride) {
  const std::vector<std::string> o{"tau=2.0"};
  EXPECT_EQ(parse_config(std::nullopt, o).mixture.tau, 2.0);
}

TEST(Config, NegativeZetaNamesKey) { EXPECT_EQ(error_key("", {"zeta=-1"}), "zeta"); }

TEST(Config, UnknownKeysRejected) {
  EXPECT_EQ(error_key("learning_rate: 3\n"), "learning_rate");
  EXPECT_EQ(error_key("crp:\n  zetta: 3\n"), "crp.zetta");
  EXPECT_EQ(error_key("", {"nope=1"}), "nope");
  EXPECT_EQ(error_key("", {"crp.tau=1"}), "crp.tau");
}

TEST(Config, RangeAndTypeErrorsNameKeys) {
  EXPECT_EQ(error_key("mixture:\n  beta: 0\n"), "beta");
  EXPECT_EQ(error_key("mixture:\n  meta_batch: -2\n"), "meta_batch");
  EXPECT_EQ(error_key("crp:\n  cooldown_mode: sometimes\n"), "cooldown_mode");
  EXPECT_EQ(error_key("seed: abc\n"), "seed");
  EXPECT_EQ(error_key("schedule: \"sinusoid\"\n"), "schedule");
  EXPECT_EQ(error_key("iterations: 5000\n"), "iterations");
  EXPECT_EQ(error_key("method: bayes\n"), "method");
  EXPECT_EQ(error_key("crp: 3\n"), "crp");
  EXPECT_EQ(error_key("", {"tau"}), "tau");
}

TEST(Config, OverridesBeatFile) {
  std::filesystem::path p = std::filesystem::temp_directory_path() / "metamix_cfg_override.yaml";
  std::ofstream(p) << "seed: 4\nmixture:\n  tau: 0.5\n  beta: 0.01\n";
  const std::vector<std::string> o{"mixture.tau=3", "seed=9"};
  RunConfig c = parse_config(p.string(), o);
  EXPECT_EQ(c.mixture.tau, 3.0);
  EXPECT_EQ(c.mixture.beta, 0.01);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_THROW(parse_config(std::string("/nonexistent/cfg.yaml")), Error);
}

TEST(Config, ShortAndDottedKeysAgree) {
  const std::vector<std::string> a{"warmup=7"}, b{"crp.warmup=7"};
  EXPECT_EQ(dump_config(parse_config(std::nullopt, a)), dump_config(parse_config(std::nullopt, b)));
}

TEST(Config, DumpParsesBackEqual) {
  const std::vector<std::string> o{"method=finite-uniform", "seed=18446744073709551615", "schedule=sinusoid:30,sawtooth:20",
                                   "iterations=40", "hidden=[3, 7]", "alpha=0.0123456789012345", "first_order=true",
                                   "optimizer=adam", "cooldown_mode=task-aware", "prior_weighting=uniform",
                                   "spawn_stddev=0.1", "bank_seed=5"};
  RunConfig c = parse_config(std::nullopt, o);
  std::string text = dump_config(c);
  RunConfig back = parse_config_text(text);
  EXPECT_EQ(dump_config(back), text);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.seed, 18446744073709551615ull);
  EXPECT_EQ(back.mixture.adapt.alpha, 0.0123456789012345);
  EXPECT_EQ(back.mixture.model.hidden, (std::vector<std::size_t>{3, 7}));
  EXPECT_EQ(back.method, Method::FiniteUniform);
  EXPECT_EQ(back.crp.cooldown_mode, CooldownMode::TaskAware);
  EXPECT_EQ(back.bank_seed(), 5u);
}

TEST(Config, HashSeesEveryChange) {
  RunConfig a;
  RunConfig b = a;
  b.crp.zeta = 10.5;
  EXPECT_NE(config_hash(a), config_hash(b));
  b = a;
  b.harness.eval_every = 51;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, BlobsNeedMatchingModel) {
  EXPECT_EQ(error_key("schedule: blobs:10\n"), "loss");
  RunConfig c = parse_config_text(
      "schedule: blobs:10,blobs@0.5:10\nmodel:\n  input_dim: 2\n  output_dim: 5\nmixture:\n  loss: cross_entropy\n");
  EXPECT_EQ(c.mixture.blob_classes, 5u);
  EXPECT_EQ(error_key("schedule: blobs:10,sinusoid:10\n"), "schedule");
}
