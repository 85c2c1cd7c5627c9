// metamix: train / eval / info for mixture meta-learning runs.

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "metamix/harness.hpp"

namespace fs = std::filesystem;
using namespace metamix;

namespace {

enum class Level { Error = 0, Warn, Info, Debug };

Level log_level() {
  const char* env = std::getenv("METAMIX_LOG");
  if (!env) return Level::Info;
  std::string s(env);
  if (s == "error") return Level::Error;
  if (s == "warn") return Level::Warn;
  if (s == "debug") return Level::Debug;
  if (s != "info") std::cerr << "metamix: warn: METAMIX_LOG='" << s << "' not recognized, using info\n";
  return Level::Info;
}

const Level kLevel = log_level();

void log(Level at, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (at <= kLevel) std::cerr << "metamix: " << names[static_cast<int>(at)] << ": " << msg << "\n";
}

/// Accepts `dir`, `dir/checkpoint`, or either file of the pair.
std::string checkpoint_base(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "checkpoint";
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p.string();
}

void print_records(std::ostream& os, const std::vector<MetricsRecord>& recs, std::size_t capacity) {
  write_metrics_header(os, capacity);
  for (const MetricsRecord& r : recs) write_metrics_row(os, r);
}

int cmd_train(const std::optional<std::string>& config, const std::vector<std::string>& sets,
              std::optional<std::uint64_t> seed, const std::string& out, std::size_t threads) {
  std::vector<std::string> overrides = sets;
  if (seed) overrides.push_back("seed=" + std::to_string(*seed));
  RunConfig cfg = parse_config(config, overrides);
  const std::string dir = out.empty() ? "runs/" + std::string(method_name(cfg.method)) + "-" + std::to_string(cfg.seed) : out;
  log(Level::Info, "training " + std::string(method_name(cfg.method)) + " seed " + std::to_string(cfg.seed) + " for " +
                       std::to_string(cfg.total_iterations()) + " iterations into " + dir);

  ExperimentOptions opts;
  opts.threads = threads;
  opts.on_iteration = [&](const IterationStats& st) {
    if (st.spawned)
      log(Level::Info, "iteration " + std::to_string(st.iteration) + ": spawned cluster " +
                           std::to_string(st.active_clusters) + " (candidate mass " + format_double(st.candidate_mass) + ")");
    if (kLevel >= Level::Debug)
      log(Level::Debug, "iteration " + std::to_string(st.iteration) + " support " + format_double(st.support_loss) +
                            " query " + format_double(st.query_loss) + " clusters " + std::to_string(st.active_clusters));
    else if ((st.iteration + 1) % 100 == 0)
      log(Level::Info, "iteration " + std::to_string(st.iteration + 1) + " query " + format_double(st.query_loss));
  };
  ExperimentResult r = run_experiment(cfg, dir, opts);
  log(Level::Info, "done: " + std::to_string(r.state.clusters.size()) + " clusters, " + std::to_string(r.spawns.size()) +
                       " spawns");
  return 0;
}

int cmd_eval(const std::string& checkpoint, std::optional<std::uint64_t> bank_seed, const std::string& out,
             std::size_t threads) {
  Checkpoint ck = load_checkpoint(checkpoint_base(checkpoint));
  if (ck.status != "complete") log(Level::Warn, "checkpoint status is '" + ck.status + "'");
  std::vector<MetricsRecord> recs = evaluate_checkpoint(ck, bank_seed, threads);
  if (out.empty()) {
    print_records(std::cout, recs, ck.state.capacity);
  } else {
    std::ofstream os(out);
    if (!os) throw Error("cannot write " + out);
    print_records(os, recs, ck.state.capacity);
  }
  return 0;
}

int cmd_info(const std::string& checkpoint) {
  Checkpoint ck = load_checkpoint(checkpoint_base(checkpoint));
  const MixtureState& s = ck.state;
  std::cout << "method: " << method_name(ck.config.method) << "\n"
            << "seed: " << ck.config.seed << "\n"
            << "iteration: " << s.iteration << "\n"
            << "status: " << ck.status << "\n"
            << "active_clusters: " << s.clusters.size() << "\n"
            << "clusters:\n";
  for (const Cluster& c : s.clusters)
    std::cout << "  - id: " << c.id() << "  spawned_at: " << c.spawn_iteration
              << "  param_norm: " << format_double(c.theta.norm()) << "\n";
  std::cout << "spawns:";
  if (s.spawns.empty()) std::cout << " []";
  std::cout << "\n";
  for (const SpawnEvent& e : s.spawns)
    std::cout << "  - iteration: " << e.iteration << "  cluster: " << e.new_cluster_id
              << "  candidate_mass: " << format_double(e.candidate_mass) << "  epsilon: " << format_double(e.epsilon)
              << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-initializations meta-learning experiments"};
  app.require_subcommand(1);

  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed, bank_seed;
  std::string out, checkpoint;
  std::size_t threads = 0;

  CLI::App* train = app.add_subcommand("train", "Run an experiment and write metrics, spawns, manifest, checkpoint");
  train->add_option("--config", config, "YAML config file")->check(CLI::ExistingFile);
  train->add_option("--set", sets, "KEY=VALUE override (repeatable)");
  train->add_option("--seed", seed, "Master seed");
  train->add_option("--out", out, "Output directory");
  train->add_option("--threads", threads, "Worker threads (0 = all cores)");

  CLI::App* eval = app.add_subcommand("eval", "Replay evaluation on a checkpoint, print metrics CSV");
  eval->add_option("checkpoint", checkpoint, "Run directory or checkpoint path")->required();
  eval->add_option("--bank-seed", bank_seed, "Episode bank seed (default: the run's)");
  eval->add_option("--out", out, "Write CSV here instead of stdout");
  eval->add_option("--threads", threads, "Worker threads (0 = all cores)");

  CLI::App* info = app.add_subcommand("info", "Summarize a checkpoint");
  info->add_option("checkpoint", checkpoint, "Run directory or checkpoint path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config, sets, seed, out, threads);
    if (*eval) return cmd_eval(checkpoint, bank_seed, out, threads);
    if (*info) return cmd_info(checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "metamix: error: " << e.what() << "\n";
    return 2;
  } catch (const NonFiniteError& e) {
    std::cerr << "metamix: error: non-finite: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "metamix: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
