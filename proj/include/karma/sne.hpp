#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "karma/game.hpp"

namespace karma {

/// Q[x, a] and V[x]. Entries with a > karma(x) hold -infinity.
struct ValueTables {
  int num_states = 0;
  int num_bids = 0;
  std::vector<double> q;
  std::vector<double> v;

  ValueTables() = default;
  ValueTables(int states, int bids);

  double operator()(int x, int a) const { return q[static_cast<std::size_t>(x) * num_bids + a]; }
  double& operator()(int x, int a) { return q[static_cast<std::size_t>(x) * num_bids + a]; }
  int karma_of(int x) const { return x % num_bids; }
};

/// Bellman optimality operator of the single-agent MDP induced by a frozen
/// mean field: (TQ)[x,a] = r[x,a] + alpha * sum_x' p[x'|x,a] max_a' Q[x',a'].
class BellmanOperator {
 public:
  BellmanOperator(const GameConfig& g, const MeanField& mf);

  ValueTables apply(const ValueTables& q) const;
  /// Expected-value form with an arbitrary continuation V.
  ValueTables backup(const std::vector<double>& v) const;
  const KarmaMarket& market() const { return market_; }
  ValueTables zeros() const;

 private:
  GameConfig game_;
  KarmaMarket market_;
};

/// Value iteration to ||TQ - Q||_inf <= tol * (1 - alpha). Throws
/// ConvergenceError after max_iters sweeps.
ValueTables value_iteration(const GameConfig& g, const MeanField& mf, double tol,
                            const ValueTables* warm_start = nullptr, int max_iters = 200000);

/// Row-stochastic |X| x |X| matrix of the chain induced by mf.pi under the
/// kernel frozen at mf.
Eigen::MatrixXd transition_matrix(const GameConfig& g, const MeanField& mf);

/// Stationary law of a row-stochastic chain via power iteration on the lazy
/// chain with repeated squaring, starting from `start`. Result is a fixed point
/// within `tol` in L1.
std::vector<double> stationary_of_chain(const Eigen::MatrixXd& chain, std::span<const double> start,
                                        double tol, int max_doublings = 64);

std::vector<double> stationary_distribution(const GameConfig& g, const MeanField& mf, double tol);

/// One application of the population update: mu'[x] = sum mu pi p.
std::vector<double> one_step_image(const GameConfig& g, const MeanField& mf);

/// Logit response pi[a|x] proportional to exp(Q[x,a] / tau) over feasible bids.
Policy softmax_response(const ValueTables& q, double tau);
/// Greedy response; ties go to the lowest bid.
Policy greedy_response(const ValueTables& q);
std::vector<int> greedy_bids(const ValueTables& q);

struct SneSolverConfig {
  double damping_policy = 0.05;
  double damping_mu = 0.2;
  double tau_initial = 1.0;
  double tau_decay = 0.95;
  double tau_min = 1e-4;
  int max_outer_iters = 20000;
  double tol_sne1 = 1e-8;
  /// Nonpositive means 1e-4 * R_max / (1 - alpha).
  double tol_exploit = -1.0;
  double vi_tol = 1e-9;
  double power_iter_tol = 1e-13;
  /// Damped population-dynamics steps applied to mu per outer iteration.
  int population_steps = 10;
  int max_population_steps = 1000000;

  void validate() const;
  double exploit_tolerance(const GameConfig& g) const;
};

struct SneResult {
  MeanField mean_field;
  ValueTables q;
  double residual_sne1 = 0.0;
  double exploitability = 0.0;
  double action_gap = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct SneResiduals {
  double residual_sne1 = 0.0;
  double exploitability = 0.0;
};

double exploitability(const ValueTables& q, const Policy& pi);
SneResiduals sne_residuals(const GameConfig& g, const MeanField& mf, double vi_tol = 1e-9);

/// min over states with a competing bid of (best Q - runner-up Q).
/// +infinity when no state has more than one feasible bid.
double action_gap(const ValueTables& q);
double action_gap(const SneResult& sne);

/// Stationary point of the population dynamics mu <- mu P(mu, pi) for a
/// fixed policy, reached by lazy iteration from mu0. Average karma is
/// preserved along the way.
std::vector<double> population_fixed_point(const GameConfig& g, const Policy& pi, std::span<const double> mu0,
                                           double tol, int max_steps = 1000000);

SneResult solve_sne(const GameConfig& g, const SneSolverConfig& cfg = {}, std::uint64_t seed = 0);

}  // namespace karma
