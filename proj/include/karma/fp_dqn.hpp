#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "karma/game.hpp"
#include "karma/io.hpp"
#include "karma/qnet.hpp"

namespace karma {

struct FpConfig {
  int outer_iters = 100;
  int episodes_per_iter = 100;
  int population_size = 1000;
  int episode_length = 1000;
  DqnConfig dqn;
  std::uint64_t seed = 0;
  /// Clear the replay buffer together with the weights at each outer iteration.
  bool fresh_buffer = true;
  /// Start from stationary urgency x karma point mass at the average karma
  /// instead of the uniform state distribution.
  bool init_mu_mean_karma = false;
  /// Average the population histogram over the ends of this many final
  /// episodes; 1 is the end of the last episode only.
  int average_last_episodes = 1;
  /// Also compute the exploitability of every averaged mean field.
  bool exploitability_of_avg = false;
  /// Add a wall-clock column (makes the CSV non-reproducible).
  bool record_wall_time = false;

  void validate() const;
};

/// Reads the fp.json keys; the DQN block defaults to one outer iteration's
/// worth of steps for total_steps and the exploration horizon.
FpConfig fp_config_from_json(const nlohmann::json& j);
nlohmann::json fp_config_to_json(const FpConfig& c);

struct FpRow {
  int iteration = 0;
  double w1_mu = 0.0;
  double w_pi = 0.0;
  double exploitability = 0.0;
  double wall_time = 0.0;
};

struct FpState {
  StateDistribution avg_mu;
  Policy avg_pi;
  int iteration = 0;
  std::vector<StateDistribution> mu_history;  // mu_{i,E}
  std::vector<Policy> pi_history;             // pi_{i,E}
  std::vector<FpRow> rows;                    // row i describes the average before iteration i
  long long conservation_warnings = 0;
};

/// Running mean x_{i+1} = i/(i+1) x_i + 1/(i+1) x_new.
std::vector<double> fp_average(std::span<const double> avg, std::span<const double> value, int i);
Policy fp_average(const Policy& avg, const Policy& value, int i);

/// Fictitious play with a fresh Double-DQN best responder per outer
/// iteration, trained in a population frozen at the running average. Metric
/// columns are filled only when a reference equilibrium is given.
/// `on_iteration` (optional) sees the state after every outer iteration.
FpState run_fp_dqn(const GameConfig& g, const FpConfig& fp, const MeanField* reference = nullptr,
                   const std::function<void(const FpState&)>& on_iteration = {});

CsvTable fp_table(const FpState& state, const FpConfig& fp);

}  // namespace karma
