#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace karma {

/// Raised when a caller breaks a documented precondition (infeasible bid,
/// shape mismatch, malformed distribution).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised by iterative solvers that hit their iteration cap.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double last_residual)
      : std::runtime_error(what), last_residual_(last_residual) {}
  double last_residual() const { return last_residual_; }

 private:
  double last_residual_;
};

struct AgentState {
  int urgency = 0;  // index into GameConfig::urgency_values
  int karma = 0;

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

/// One Karma game instance: urgency process, karma cap, average karma and
/// discount. States are indexed x = u * (K + 1) + k.
struct GameConfig {
  std::vector<double> urgency_values;
  std::vector<std::vector<double>> urgency_chain;
  int karma_cap = 1;
  int avg_karma = 1;
  double discount = 0.98;

  int num_urgency() const { return static_cast<int>(urgency_values.size()); }
  int num_bids() const { return karma_cap + 1; }
  int num_states() const { return num_urgency() * num_bids(); }

  int state_index(AgentState s) const { return s.urgency * num_bids() + s.karma; }
  AgentState state_at(int x) const { return {x / num_bids(), x % num_bids()}; }

  /// Largest immediate reward magnitude (max |u|).
  double max_reward() const;

  /// Throws ContractError on any violated invariant: row-stochastic and
  /// irreducible urgency chain, 0 < avg_karma <= karma_cap, 0 <= discount < 1.
  void validate() const;

  /// Stationary law of the urgency chain.
  std::vector<double> stationary_urgency() const;
};

GameConfig game_from_json(const nlohmann::json& j);
nlohmann::json game_to_json(const GameConfig& g);
GameConfig load_game(const std::string& path);

/// Bid distribution per state; row x holds pi[. | x] over bids 0..K.
class Policy {
 public:
  Policy() = default;
  Policy(int num_states, int num_bids);

  static Policy uniform_feasible(const GameConfig& g);
  /// Point mass on bids[x] at every state.
  static Policy deterministic(const GameConfig& g, std::span<const int> bids);

  int num_states() const { return num_states_; }
  int num_bids() const { return num_bids_; }
  int karma_of(int x) const { return x % num_bids_; }

  std::span<double> row(int x) {
    return {probs_.data() + static_cast<std::size_t>(x) * num_bids_,
            static_cast<std::size_t>(num_bids_)};
  }
  std::span<const double> row(int x) const {
    return {probs_.data() + static_cast<std::size_t>(x) * num_bids_,
            static_cast<std::size_t>(num_bids_)};
  }
  double operator()(int x, int a) const { return probs_[static_cast<std::size_t>(x) * num_bids_ + a]; }
  double& operator()(int x, int a) { return probs_[static_cast<std::size_t>(x) * num_bids_ + a]; }

  std::vector<double>& data() { return probs_; }
  const std::vector<double>& data() const { return probs_; }

  /// Rows on the simplex within tol and zero mass on bids above the karma.
  void validate(double tol = 1e-12) const;

  friend bool operator==(const Policy&, const Policy&) = default;

 private:
  int num_states_ = 0;
  int num_bids_ = 0;
  std::vector<double> probs_;
};

using StateDistribution = std::vector<double>;
using BidDistribution = std::vector<double>;

/// The population coupling (mu, pi).
struct MeanField {
  StateDistribution mu;
  Policy pi;

  void validate(const GameConfig& g, double tol = 1e-12) const;
};

/// Throws ContractError unless `p` is nonnegative and sums to one within tol.
void check_simplex(std::span<const double> p, double tol, const char* what);

/// Stationary urgency law tensored with a karma point mass at `karma`.
StateDistribution point_karma_distribution(const GameConfig& g, int karma);
StateDistribution uniform_state_distribution(const GameConfig& g);

struct Redistribution {
  double f_low = 0.0;   // fraction receiving floor(p)
  double f_high = 1.0;  // fraction receiving ceil(p)
  int floor_grant = 0;
  int ceil_grant = 0;
};

BidDistribution opponent_bid_distribution(const MeanField& mf);
double win_probability(int bid, std::span<const double> nu);
double surplus(const MeanField& mf);
Redistribution redistribution_fractions(double mean_surplus);

struct KernelEntry {
  int next_karma;
  double prob;
};

/// Game primitives evaluated at a frozen mean field. Building this once and
/// querying it is the fast path; the free functions below rebuild it per call.
class KarmaMarket {
 public:
  KarmaMarket(const GameConfig& g, const MeanField& mf);

  const GameConfig& game() const { return game_; }
  const BidDistribution& opponent_bids() const { return nu_; }
  double win_probability(int bid) const;
  /// Mean payment p per agent.
  double surplus() const { return surplus_; }
  /// Mean grant per agent: the surplus plus karma that would have been
  /// clipped at the cap, recycled into the pool. Equals surplus() whenever no
  /// grant overflows K.
  double mean_grant() const { return mean_grant_; }
  const Redistribution& redistribution() const { return redistribution_; }

  double reward(AgentState s, int bid) const;
  /// Sparse karma kernel: at most four entries, merged after clamping.
  std::span<const KernelEntry> kernel(int karma, int bid) const;
  std::vector<double> karma_kernel(int karma, int bid) const;
  /// Dense distribution over next states, indexed like GameConfig::state_index.
  std::vector<double> state_transition(AgentState s, int bid) const;

 private:
  void check_bid(int karma, int bid) const;

  GameConfig game_;
  BidDistribution nu_;
  std::vector<double> win_;
  double surplus_ = 0.0;
  double mean_grant_ = 0.0;
  Redistribution redistribution_;
  std::vector<std::vector<KernelEntry>> kernel_;  // index karma * num_bids + bid
};

double reward(const GameConfig& g, AgentState s, int bid, const MeanField& mf);
std::vector<double> karma_kernel(const GameConfig& g, int karma, int bid, const MeanField& mf);
std::vector<double> state_transition(const GameConfig& g, AgentState s, int bid, const MeanField& mf);

}  // namespace karma
