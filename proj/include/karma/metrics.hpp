#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "karma/game.hpp"

namespace karma {

/// Exact 1-D Wasserstein-1 on an evenly spaced grid:
/// spacing * sum_j |CDF_p(j) - CDF_q(j)|.
double w1_discrete_1d(std::span<const double> p, std::span<const double> q, double grid_spacing = 1.0);

/// Optimal transport cost between two distributions under a general ground
/// cost, solved exactly as a min-cost flow (successive shortest paths).
/// `cost` is |p| x |q|.
double transport_cost(std::span<const double> p, std::span<const double> q, const Eigen::MatrixXd& cost);

/// Mean over all |X| states of the per-state bid-distribution W1.
double policy_distance(const Policy& a, const Policy& b, const GameConfig& g);

enum class MuGround {
  /// Per-urgency karma W1 weighted by the averaged urgency marginals.
  Conditional,
  /// Joint transport with d = |k - k'| + K * [u != u'].
  Joint,
};

double mu_distance(std::span<const double> mu1, std::span<const double> mu2, const GameConfig& g,
                   MuGround ground = MuGround::Conditional);

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 * sample std / sqrt(n); 0 when n < 2
};

MeanCi mean_ci(std::span<const double> values);

struct ExpectedBid {
  int urgency_index;
  double urgency;
  int karma;
  double expected_bid;
};

/// E[a | u, k] for every state.
std::vector<ExpectedBid> expected_bid_curves(const Policy& pi, const GameConfig& g);
void write_expected_bid_csv(const std::string& path, const Policy& pi, const GameConfig& g,
                            std::span<const double> mu = {});

}  // namespace karma
