#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "karma/game.hpp"
#include "karma/qnet.hpp"

namespace karma {

struct StepResult {
  double reward = 0.0;
  AgentState next;
};

/// Independent stream seed for (master, stream) via splitmix64 mixing.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

/// Draws an index from a discrete distribution by inverse CDF on one uniform.
int sample_index(std::span<const double> probs, Rng& rng);
AgentState sample_state(const GameConfig& g, std::span<const double> mu, Rng& rng);

/// A single learner facing a frozen mean field. Rewards are the expected
/// competition payoff r[u, a](mu, pi); next states are sampled from p.
class MeanFieldEnv {
 public:
  MeanFieldEnv(const GameConfig& g, const MeanField& mf, std::uint64_t seed);

  StepResult step(int bid);
  AgentState reset(std::span<const double> init_mu);
  AgentState reset(std::span<const double> init_mu, Rng& rng);

  void reseed(std::uint64_t seed) { rng_.seed(seed); }
  void set_state(AgentState s) { state_ = s; }
  AgentState state() const { return state_; }
  long long step_count() const { return steps_; }
  const MeanField& mean_field() const { return mf_; }
  const KarmaMarket& market() const { return market_; }
  const GameConfig& game() const { return game_; }
  Rng& rng() { return rng_; }

 private:
  GameConfig game_;
  MeanField mf_;
  KarmaMarket market_;
  AgentState state_;
  long long steps_ = 0;
  Rng rng_;
};

/// N concrete agents playing a fixed policy plus (optionally) one learner.
/// Every step all agents are randomly paired, winners pay into a pool, and
/// the pool is redistributed in whole units; total karma is conserved.
class PopulationEnv {
 public:
  PopulationEnv(const GameConfig& g, int population_size, bool with_learner, std::uint64_t seed);

  /// Population and learner states drawn i.i.d. from mf_init.mu; the
  /// population plays mf_init.pi from now on.
  void reset(const MeanField& mf_init);

  /// One global round with the learner bidding `learner_bid`.
  StepResult step(int learner_bid);
  /// One global round without a learner bid (requires with_learner == false).
  void step_population();

  /// Normalized histogram over states of the population (learner excluded).
  StateDistribution empirical_state_distribution() const;

  void set_population_policy(const Policy& pi);
  /// Overwrite the agent states; recomputes total karma.
  void set_states(std::span<const AgentState> population, AgentState learner);

  int population_size() const { return population_size_; }
  bool has_learner() const { return with_learner_; }
  std::span<const AgentState> agents() const { return {agents_.data(), static_cast<std::size_t>(population_size_)}; }
  AgentState learner() const { return agents_.back(); }
  long long total_karma() const { return total_karma_; }
  long long karma_sum() const;
  long long conservation_warnings() const { return conservation_warnings_; }
  long long step_count() const { return steps_; }
  const GameConfig& game() const { return game_; }

 private:
  struct RoundOutcome {
    bool learner_played = false;
    bool learner_won = false;
  };
  RoundOutcome play_round(int learner_bid);
  void rebuild_policy_cdf();

  GameConfig game_;
  int population_size_;
  bool with_learner_;
  Rng rng_;
  Policy policy_;
  std::vector<double> policy_cdf_;
  std::vector<AgentState> agents_;  // population first, learner last when present
  std::vector<int> order_;
  std::vector<int> bids_;
  long long total_karma_ = 0;
  long long conservation_warnings_ = 0;
  long long steps_ = 0;
};

}  // namespace karma
