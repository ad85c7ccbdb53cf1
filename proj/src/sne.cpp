#include "karma/sne.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace karma {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double l1_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d;
}

void normalize_in_place(std::vector<double>& p) {
  double s = 0.0;
  for (double& v : p) {
    v = std::max(v, 0.0);
    s += v;
  }
  for (double& v : p) v /= s;
}

}  // namespace

ValueTables::ValueTables(int states, int bids)
    : num_states(states),
      num_bids(bids),
      q(static_cast<std::size_t>(states) * bids, kNegInf),
      v(states, 0.0) {
  for (int x = 0; x < states; ++x)
    for (int a = 0; a <= karma_of(x); ++a) (*this)(x, a) = 0.0;
}

BellmanOperator::BellmanOperator(const GameConfig& g, const MeanField& mf) : game_(g), market_(g, mf) {}

ValueTables BellmanOperator::zeros() const { return ValueTables(game_.num_states(), game_.num_bids()); }

ValueTables BellmanOperator::backup(const std::vector<double>& v) const {
  const int nu = game_.num_urgency();
  const int nb = game_.num_bids();
  // cont[u][k'] = sum_u' phi[u'|u] V[u', k']
  std::vector<double> cont(static_cast<std::size_t>(nu) * nb, 0.0);
  for (int u = 0; u < nu; ++u)
    for (int up = 0; up < nu; ++up) {
      const double p = game_.urgency_chain[u][up];
      if (p == 0.0) continue;
      for (int k = 0; k < nb; ++k) cont[u * nb + k] += p * v[up * nb + k];
    }

  ValueTables out = zeros();
  const double alpha = game_.discount;
  for (int x = 0; x < game_.num_states(); ++x) {
    const auto s = game_.state_at(x);
    const double urg = game_.urgency_values[s.urgency];
    const double* c = cont.data() + static_cast<std::size_t>(s.urgency) * nb;
    double best = kNegInf;
    for (int a = 0; a <= s.karma; ++a) {
      double ev = 0.0;
      for (const auto& e : market_.kernel(s.karma, a)) ev += e.prob * c[e.next_karma];
      const double q = urg * market_.win_probability(a) + alpha * ev;
      out(x, a) = q;
      best = std::max(best, q);
    }
    out.v[x] = best;
  }
  return out;
}

ValueTables BellmanOperator::apply(const ValueTables& q) const {
  std::vector<double> v(q.num_states);
  for (int x = 0; x < q.num_states; ++x) {
    double best = kNegInf;
    for (int a = 0; a <= q.karma_of(x); ++a) best = std::max(best, q(x, a));
    v[x] = best;
  }
  return backup(v);
}

ValueTables value_iteration(const GameConfig& g, const MeanField& mf, double tol,
                            const ValueTables* warm_start, int max_iters) {
  if (!(tol > 0.0)) throw ContractError("value_iteration tolerance must be positive");
  BellmanOperator op(g, mf);
  ValueTables q = warm_start ? *warm_start : op.zeros();
  if (!warm_start) {
    q = op.apply(q);
  }
  const double stop = tol * (1.0 - g.discount);
  double residual = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iters; ++it) {
    ValueTables next = op.apply(q);
    residual = 0.0;
    for (int x = 0; x < q.num_states; ++x)
      for (int a = 0; a <= q.karma_of(x); ++a) residual = std::max(residual, std::abs(next(x, a) - q(x, a)));
    q = std::move(next);
    if (residual <= stop) return q;
  }
  throw ConvergenceError("value iteration did not converge", residual);
}

Eigen::MatrixXd transition_matrix(const GameConfig& g, const MeanField& mf) {
  KarmaMarket market(g, mf);
  const int n = g.num_states();
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  for (int x = 0; x < n; ++x) {
    const auto s = g.state_at(x);
    const auto& phi = g.urgency_chain[s.urgency];
    for (int a = 0; a <= s.karma; ++a) {
      const double pa = mf.pi(x, a);
      if (pa == 0.0) continue;
      for (const auto& e : market.kernel(s.karma, a))
        for (int u = 0; u < g.num_urgency(); ++u)
          if (phi[u] != 0.0) P(x, g.state_index({u, e.next_karma})) += pa * phi[u] * e.prob;
    }
  }
  return P;
}

std::vector<double> stationary_of_chain(const Eigen::MatrixXd& chain, std::span<const double> start,
                                        double tol, int max_doublings) {
  const Eigen::Index n = chain.rows();
  if (chain.cols() != n || static_cast<Eigen::Index>(start.size()) != n)
    throw ContractError("chain and start distribution shapes disagree");
  Eigen::MatrixXd step = 0.5 * (chain + Eigen::MatrixXd::Identity(n, n));
  Eigen::RowVectorXd mu = Eigen::Map<const Eigen::RowVectorXd>(start.data(), n);
  double residual = std::numeric_limits<double>::infinity();
  for (int d = 0; d <= max_doublings; ++d) {
    Eigen::RowVectorXd image = mu * chain;
    residual = (image - mu).lpNorm<1>();
    if (residual <= tol) break;
    // Advance 2^d lazy steps, then square the step operator.
    mu = mu * step;
    mu = mu.cwiseMax(0.0);
    mu /= mu.sum();
    step = step * step;
  }
  if (residual > tol) throw ConvergenceError("stationary distribution did not converge", residual);
  return {mu.data(), mu.data() + n};
}

std::vector<double> stationary_distribution(const GameConfig& g, const MeanField& mf, double tol) {
  return stationary_of_chain(transition_matrix(g, mf), mf.mu, tol);
}

std::vector<double> one_step_image(const GameConfig& g, const MeanField& mf) {
  KarmaMarket market(g, mf);
  std::vector<double> out(g.num_states(), 0.0);
  for (int x = 0; x < g.num_states(); ++x) {
    if (mf.mu[x] == 0.0) continue;
    const auto s = g.state_at(x);
    const auto& phi = g.urgency_chain[s.urgency];
    for (int a = 0; a <= s.karma; ++a) {
      const double w = mf.mu[x] * mf.pi(x, a);
      if (w == 0.0) continue;
      for (const auto& e : market.kernel(s.karma, a))
        for (int u = 0; u < g.num_urgency(); ++u)
          if (phi[u] != 0.0) out[g.state_index({u, e.next_karma})] += w * phi[u] * e.prob;
    }
  }
  return out;
}

Policy softmax_response(const ValueTables& q, double tau) {
  if (!(tau > 0.0)) throw ContractError("softmax temperature must be positive");
  Policy pi(q.num_states, q.num_bids);
  for (int x = 0; x < q.num_states; ++x) {
    const int k = q.karma_of(x);
    double m = kNegInf;
    for (int a = 0; a <= k; ++a) m = std::max(m, q(x, a));
    double s = 0.0;
    for (int a = 0; a <= k; ++a) {
      pi(x, a) = std::exp((q(x, a) - m) / tau);
      s += pi(x, a);
    }
    for (int a = 0; a <= k; ++a) pi(x, a) /= s;
  }
  return pi;
}

std::vector<int> greedy_bids(const ValueTables& q) {
  std::vector<int> bids(q.num_states, 0);
  for (int x = 0; x < q.num_states; ++x) {
    int best = 0;
    for (int a = 1; a <= q.karma_of(x); ++a)
      if (q(x, a) > q(x, best)) best = a;
    bids[x] = best;
  }
  return bids;
}

Policy greedy_response(const ValueTables& q) {
  Policy pi(q.num_states, q.num_bids);
  auto bids = greedy_bids(q);
  for (int x = 0; x < q.num_states; ++x) pi(x, bids[x]) = 1.0;
  return pi;
}

void SneSolverConfig::validate() const {
  if (!(damping_policy > 0.0 && damping_policy <= 1.0) || !(damping_mu > 0.0 && damping_mu <= 1.0))
    throw ContractError("damping factors must lie in (0, 1]");
  if (!(tau_initial > 0.0) || !(tau_min > 0.0) || !(tau_decay > 0.0 && tau_decay <= 1.0))
    throw ContractError("invalid temperature schedule");
  if (!(tol_sne1 > 0.0) || !(vi_tol > 0.0) || !(power_iter_tol > 0.0))
    throw ContractError("tolerances must be positive");
  if (max_outer_iters <= 0) throw ContractError("max_outer_iters must be positive");
}

double SneSolverConfig::exploit_tolerance(const GameConfig& g) const {
  if (tol_exploit > 0.0) return tol_exploit;
  return 1e-4 * g.max_reward() / (1.0 - g.discount);
}

double exploitability(const ValueTables& q, const Policy& pi) {
  double worst = 0.0;
  for (int x = 0; x < q.num_states; ++x) {
    double best = kNegInf, played = 0.0;
    for (int a = 0; a <= q.karma_of(x); ++a) {
      best = std::max(best, q(x, a));
      played += pi(x, a) * q(x, a);
    }
    worst = std::max(worst, best - played);
  }
  return worst;
}

SneResiduals sne_residuals(const GameConfig& g, const MeanField& mf, double vi_tol) {
  SneResiduals r;
  r.residual_sne1 = l1_distance(mf.mu, one_step_image(g, mf));
  r.exploitability = exploitability(value_iteration(g, mf, vi_tol), mf.pi);
  return r;
}

double action_gap(const ValueTables& q) {
  double gap = std::numeric_limits<double>::infinity();
  for (int x = 0; x < q.num_states; ++x) {
    const int k = q.karma_of(x);
    if (k == 0) continue;
    double best = kNegInf, second = kNegInf;
    for (int a = 0; a <= k; ++a) {
      const double v = q(x, a);
      if (v > best) {
        second = best;
        best = v;
      } else if (v > second) {
        second = v;
      }
    }
    gap = std::min(gap, best - second);
  }
  return gap;
}

double action_gap(const SneResult& sne) { return action_gap(sne.q); }

std::vector<double> population_fixed_point(const GameConfig& g, const Policy& pi, std::span<const double> mu0,
                                           double tol, int max_steps) {
  MeanField mf{{mu0.begin(), mu0.end()}, pi};
  double residual = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_steps; ++it) {
    auto image = one_step_image(g, mf);
    residual = l1_distance(mf.mu, image);
    if (residual <= tol) return mf.mu;
    for (std::size_t i = 0; i < image.size(); ++i) mf.mu[i] = 0.5 * mf.mu[i] + 0.5 * image[i];
    normalize_in_place(mf.mu);
  }
  throw ConvergenceError("population dynamics did not settle", residual);
}

SneResult solve_sne(const GameConfig& g, const SneSolverConfig& cfg, std::uint64_t seed) {
  g.validate();
  cfg.validate();
  const double tol_exploit = cfg.exploit_tolerance(g);

  MeanField mf{point_karma_distribution(g, g.avg_karma), Policy::uniform_feasible(g)};
  if (seed != 0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(0.0, 0.01);
    for (int x = 0; x < g.num_states(); ++x) {
      auto row = mf.pi.row(x);
      double s = 0.0;
      for (int a = 0; a <= mf.pi.karma_of(x); ++a) {
        row[a] *= 1.0 + jitter(rng);
        s += row[a];
      }
      for (double& p : row) p /= s;
    }
  }

  SneResult out;
  double tau = cfg.tau_initial;
  ValueTables q = value_iteration(g, mf, cfg.vi_tol);
  int it = 0;
  for (;; ++it) {
    out.residual_sne1 = l1_distance(mf.mu, one_step_image(g, mf));
    out.exploitability = exploitability(q, mf.pi);
    if (out.residual_sne1 <= cfg.tol_sne1 && out.exploitability <= tol_exploit) {
      out.converged = true;
      break;
    }
    if (it >= cfg.max_outer_iters) break;

    if (out.exploitability <= 0.5 * tol_exploit && tau <= cfg.tau_min) {
      // Policy is settled: bring mu onto the stationary point of its own
      // dynamics, then re-check against the refreshed Q.
      mf.mu = population_fixed_point(g, mf.pi, mf.mu, 0.5 * cfg.tol_sne1, cfg.max_population_steps);
      q = value_iteration(g, mf, cfg.vi_tol, &q);
      continue;
    }

    Policy response = softmax_response(q, tau);
    auto& pd = mf.pi.data();
    const auto& rd = response.data();
    for (std::size_t i = 0; i < pd.size(); ++i)
      pd[i] = (1.0 - cfg.damping_policy) * pd[i] + cfg.damping_policy * rd[i];

    for (int step = 0; step < cfg.population_steps; ++step) {
      auto image = one_step_image(g, mf);
      for (std::size_t i = 0; i < image.size(); ++i)
        mf.mu[i] = (1.0 - cfg.damping_mu) * mf.mu[i] + cfg.damping_mu * image[i];
      normalize_in_place(mf.mu);
    }

    tau = std::max(tau * cfg.tau_decay, cfg.tau_min);
    q = value_iteration(g, mf, cfg.vi_tol, &q);
  }
  out.iterations = it;
  out.mean_field = std::move(mf);
  out.q = std::move(q);
  out.action_gap = action_gap(out.q);
  return out;
}

}  // namespace karma
