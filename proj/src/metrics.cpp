#include "karma/metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "karma/io.hpp"

namespace karma {

double w1_discrete_1d(std::span<const double> p, std::span<const double> q, double grid_spacing) {
  if (p.size() != q.size()) throw ContractError("w1_discrete_1d: distributions differ in length");
  check_simplex(p, 1e-9, "w1 first argument");
  check_simplex(q, 1e-9, "w1 second argument");
  double cp = 0.0, cq = 0.0, total = 0.0;
  // The last CDF difference is the mass mismatch, not transport.
  for (std::size_t j = 0; j + 1 < p.size(); ++j) {
    cp += p[j];
    cq += q[j];
    total += std::abs(cp - cq);
  }
  return grid_spacing * total;
}

double transport_cost(std::span<const double> p, std::span<const double> q, const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(p.size());
  const int m = static_cast<int>(q.size());
  if (cost.rows() != n || cost.cols() != m) throw ContractError("transport cost matrix has the wrong shape");
  constexpr double kTiny = 1e-15;
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // Node layout: 0 = source, 1..n = supplies, n+1..n+m = demands, n+m+1 = sink.
  const int src = 0, sink = n + m + 1, nodes = n + m + 2;
  std::vector<double> supply(p.begin(), p.end()), demand(q.begin(), q.end());
  std::vector<double> shipped(n, 0.0), received(m, 0.0);
  Eigen::MatrixXd flow = Eigen::MatrixXd::Zero(n, m);
  std::vector<double> potential(nodes, 0.0), dist(nodes);
  std::vector<int> parent(nodes);
  std::vector<char> done(nodes);

  auto relax_from = [&](int u, auto&& visit) {
    if (u == src) {
      for (int i = 0; i < n; ++i)
        if (supply[i] > kTiny) visit(1 + i, 0.0);
    } else if (u <= n) {
      const int i = u - 1;
      if (shipped[i] > kTiny) visit(src, 0.0);
      for (int j = 0; j < m; ++j) visit(1 + n + j, cost(i, j));
    } else if (u < sink) {
      const int j = u - 1 - n;
      if (demand[j] > kTiny) visit(sink, 0.0);
      for (int i = 0; i < n; ++i)
        if (flow(i, j) > kTiny) visit(1 + i, -cost(i, j));
    } else {
      for (int j = 0; j < m; ++j)
        if (received[j] > kTiny) visit(1 + n + j, 0.0);
    }
  };

  double total = 0.0;
  for (;;) {
    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(done.begin(), done.end(), 0);
    std::fill(parent.begin(), parent.end(), -1);
    dist[src] = 0.0;
    for (;;) {
      int u = -1;
      for (int v = 0; v < nodes; ++v)
        if (!done[v] && dist[v] < kInf && (u < 0 || dist[v] < dist[u])) u = v;
      if (u < 0) break;
      done[u] = 1;
      relax_from(u, [&](int v, double c) {
        const double reduced = std::max(0.0, c + potential[u] - potential[v]);
        if (dist[u] + reduced < dist[v]) {
          dist[v] = dist[u] + reduced;
          parent[v] = u;
        }
      });
    }
    if (dist[sink] == kInf) break;
    for (int v = 0; v < nodes; ++v)
      if (dist[v] < kInf) potential[v] += dist[v];

    // Bottleneck along the path sink <- ... <- src.
    double amount = kInf;
    for (int v = sink; v != src; v = parent[v]) {
      const int u = parent[v];
      if (u == src) amount = std::min(amount, supply[v - 1]);
      else if (v == sink) amount = std::min(amount, demand[u - 1 - n]);
      else if (u <= n && v > n) continue;  // forward arc, uncapacitated
      else if (u > n && v <= n && v >= 1) amount = std::min(amount, flow(v - 1, u - 1 - n));
      else if (v == src) amount = std::min(amount, shipped[u - 1]);
      else if (u == sink) amount = std::min(amount, received[v - 1 - n]);
    }
    if (!(amount > kTiny) || amount == kInf) break;
    for (int v = sink; v != src; v = parent[v]) {
      const int u = parent[v];
      if (u == src) {
        supply[v - 1] -= amount;
        shipped[v - 1] += amount;
      } else if (v == sink) {
        demand[u - 1 - n] -= amount;
        received[u - 1 - n] += amount;
      } else if (u <= n && v > n) {
        flow(u - 1, v - 1 - n) += amount;
        total += amount * cost(u - 1, v - 1 - n);
      } else if (u > n && v <= n && v >= 1) {
        flow(v - 1, u - 1 - n) -= amount;
        total -= amount * cost(v - 1, u - 1 - n);
      } else if (v == src) {
        shipped[u - 1] -= amount;
        supply[u - 1] += amount;
      } else if (u == sink) {
        received[v - 1 - n] -= amount;
        demand[v - 1 - n] += amount;
      }
    }
  }
  return total;
}

double policy_distance(const Policy& a, const Policy& b, const GameConfig& g) {
  if (a.num_states() != g.num_states() || b.num_states() != g.num_states() || a.num_bids() != g.num_bids() ||
      b.num_bids() != g.num_bids())
    throw ContractError("policies do not match the game");
  double s = 0.0;
  for (int x = 0; x < g.num_states(); ++x) s += w1_discrete_1d(a.row(x), b.row(x), 1.0);
  return s / g.num_states();
}

double mu_distance(std::span<const double> mu1, std::span<const double> mu2, const GameConfig& g, MuGround ground) {
  const int n = g.num_states();
  if (static_cast<int>(mu1.size()) != n || static_cast<int>(mu2.size()) != n)
    throw ContractError("state distributions do not match the game");
  check_simplex(mu1, 1e-9, "mu_distance first argument");
  check_simplex(mu2, 1e-9, "mu_distance second argument");
  const int nb = g.num_bids();

  if (ground == MuGround::Joint) {
    Eigen::MatrixXd cost(n, n);
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < n; ++y) {
        const auto s = g.state_at(x), t = g.state_at(y);
        cost(x, y) = std::abs(s.karma - t.karma) + (s.urgency != t.urgency ? g.karma_cap : 0);
      }
    return transport_cost(mu1, mu2, cost);
  }

  auto conditional = [&](std::span<const double> mu, int u, double& mass) {
    std::vector<double> c(mu.begin() + u * nb, mu.begin() + (u + 1) * nb);
    mass = std::accumulate(c.begin(), c.end(), 0.0);
    if (mass > 0.0) {
      for (double& v : c) v /= mass;
    } else {
      std::fill(c.begin(), c.end(), 1.0 / nb);
    }
    return c;
  };
  double total = 0.0;
  for (int u = 0; u < g.num_urgency(); ++u) {
    double m1 = 0.0, m2 = 0.0;
    auto c1 = conditional(mu1, u, m1);
    auto c2 = conditional(mu2, u, m2);
    total += 0.5 * (m1 + m2) * w1_discrete_1d(c1, c2, 1.0);
  }
  return total;
}

MeanCi mean_ci(std::span<const double> values) {
  MeanCi r;
  const std::size_t n = values.size();
  if (n == 0) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  if (n < 2) return r;
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  r.half_width = 1.96 * sd / std::sqrt(static_cast<double>(n));
  return r;
}

std::vector<ExpectedBid> expected_bid_curves(const Policy& pi, const GameConfig& g) {
  std::vector<ExpectedBid> out;
  out.reserve(g.num_states());
  for (int x = 0; x < g.num_states(); ++x) {
    const auto s = g.state_at(x);
    double e = 0.0;
    for (int a = 0; a < g.num_bids(); ++a) e += a * pi(x, a);
    out.push_back({s.urgency, g.urgency_values[s.urgency], s.karma, e});
  }
  return out;
}

void write_expected_bid_csv(const std::string& path, const Policy& pi, const GameConfig& g,
                            std::span<const double> mu) {
  std::vector<std::string> header{"urgency_index", "urgency", "karma", "expected_bid"};
  if (!mu.empty()) header.push_back("mu");
  CsvTable csv(header);
  auto rows = expected_bid_curves(pi, g);
  for (std::size_t x = 0; x < rows.size(); ++x) {
    const auto& r = rows[x];
    std::vector<std::string> cells{CsvTable::cell(r.urgency_index), CsvTable::cell(r.urgency),
                                   CsvTable::cell(r.karma), CsvTable::cell(r.expected_bid)};
    if (!mu.empty()) cells.push_back(CsvTable::cell(mu[x]));
    csv.row(cells);
  }
  csv.save(path);
}

}  // namespace karma
