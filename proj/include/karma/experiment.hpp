#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "karma/fp_dqn.hpp"
#include "karma/io.hpp"
#include "karma/newcomer.hpp"

namespace karma {

enum class ExperimentKind { NewcomerMf, NewcomerPop, FpDqn };

ExperimentKind parse_experiment_kind(const std::string& s);
std::string to_string(ExperimentKind k);

/// One sweep over buffer sizes (newcomer-mf) or population sizes
/// (newcomer-pop, fp-dqn), repeated over seeds.
struct ExperimentPlan {
  ExperimentKind kind = ExperimentKind::NewcomerMf;
  /// Equilibrium to compare against. When empty, `game_path` is solved and
  /// the result written to <out_dir>/sne.json.
  std::string sne_path;
  std::string game_path;
  std::vector<long long> sweep;
  std::vector<std::uint64_t> seeds;
  std::string out_dir = "runs";

  long long total_steps = 1'000'000;
  long long eval_period = 10'000;
  int eval_episodes = 10;
  int episode_length = 1000;
  std::size_t buffer_size = 1'000'000;  // fixed buffer for newcomer-pop and fp-dqn
  DqnConfig dqn;                        // remaining learner settings
  FpConfig fp;                          // fp-dqn only
  /// Worker cap; 0 means hardware concurrency (KARMA_MFG_THREADS still applies).
  int max_workers = 0;

  void validate() const;
};

ExperimentPlan plan_from_json(const nlohmann::json& j);
nlohmann::json plan_to_json(const ExperimentPlan& p);
/// Relative sne/game paths are taken relative to the plan file.
ExperimentPlan load_plan(const std::string& path);

struct RunRecord {
  long long sweep_value = 0;
  std::uint64_t seed = 0;
  std::string csv_path;
  bool ok = false;
  std::string error;
  long long conservation_warnings = 0;
  double seconds = 0.0;
  /// Metric name -> series over the index column.
  std::vector<long long> index;
  std::map<std::string, std::vector<double>> series;
};

struct AggregateRow {
  long long sweep_value = 0;
  long long index = 0;
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int runs = 0;
};

struct ExperimentResult {
  std::vector<RunRecord> runs;
  std::string index_name;  // "step" or "iteration"
  std::map<std::string, std::vector<AggregateRow>> aggregates;

  /// Aggregate rows of one metric at one sweep value, in index order.
  std::vector<AggregateRow> curve(const std::string& metric, long long sweep_value) const;
};

/// Worker budget: min(requested or hardware concurrency, KARMA_MFG_THREADS).
int worker_budget(int requested);

/// Runs every (sweep value, seed) pair in parallel, writes one CSV per run,
/// one aggregate CSV per metric and a manifest.json under out_dir. A failing
/// run is recorded in the manifest and left out of the aggregates.
ExperimentResult run_experiment(const ExperimentPlan& plan);

/// Seed-wise mean and normal 95% interval at every index of every metric.
std::map<std::string, std::vector<AggregateRow>> aggregate_runs(const std::vector<RunRecord>& runs);

}  // namespace karma
