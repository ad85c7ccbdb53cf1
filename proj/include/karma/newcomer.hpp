#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "karma/env.hpp"
#include "karma/game.hpp"
#include "karma/io.hpp"
#include "karma/qnet.hpp"

namespace karma {

struct EvalConfig {
  int episodes = 10;
  int episode_length = 1000;
};

/// Undiscounted return of one episode in mean-field mode. The start state is
/// drawn from init_mu with the environment stream; bids are drawn from `pi`
/// with a separate action stream, so two policies evaluated under the same
/// seed share every random number.
double episode_return(MeanFieldEnv& env, const Policy& pi, std::span<const double> init_mu, int length,
                      std::uint64_t seed);

struct ValueGap {
  double gap = 0.0;
  double ci = 0.0;  // 95% half width over episodes
};

/// Mean over episodes of G(pi_star) - G(learned) against the frozen mean
/// field, with common random numbers per episode pair.
ValueGap value_gap(const Policy& learned, const MeanField& equilibrium, const GameConfig& g, const EvalConfig& eval,
                   std::uint64_t seed);

enum class NewcomerMode { MeanField, Population };

NewcomerMode parse_newcomer_mode(const std::string& s);
std::string to_string(NewcomerMode m);

struct NewcomerConfig {
  NewcomerMode mode = NewcomerMode::MeanField;
  int population_size = 1000;
  int episode_length = 1000;
  DqnConfig dqn;
  EvalConfig eval;
  std::uint64_t seed = 0;
  /// Per-step CSV (step, urgency, karma, bid, reward) when non-empty.
  std::string trace_path;

  void validate() const;
};

struct NewcomerRow {
  long long step = 0;
  double w_pi = 0.0;
  double value_gap = 0.0;
  double value_gap_ci = 0.0;
};

struct NewcomerResult {
  std::vector<NewcomerRow> rows;
  QNetwork network;
  long long conservation_warnings = 0;
};

/// Trains one Double-DQN newcomer against the equilibrium, either in the
/// mean-field environment or inside a finite population playing it. The
/// first row is the untrained network at step 0, then one row every
/// eval_period environment steps.
NewcomerResult train_newcomer(const GameConfig& g, const MeanField& equilibrium, const NewcomerConfig& cfg);

CsvTable newcomer_table(const std::vector<NewcomerRow>& rows);

}  // namespace karma
