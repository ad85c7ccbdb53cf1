#include "karma/game.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace karma {

namespace {

// p within this distance of an integer counts as that integer.
constexpr double kSurplusSnap = 1e-9;

bool strongly_connected(const std::vector<std::vector<double>>& chain) {
  const std::size_t n = chain.size();
  auto reach_all = [&](bool forward) {
    std::vector<char> seen(n, 0);
    std::vector<std::size_t> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      std::size_t i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < n; ++j) {
        double w = forward ? chain[i][j] : chain[j][i];
        if (w > 0.0 && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
    return std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; });
  };
  return reach_all(true) && reach_all(false);
}

}  // namespace

double GameConfig::max_reward() const {
  double m = 0.0;
  for (double u : urgency_values) m = std::max(m, std::abs(u));
  return m;
}

void GameConfig::validate() const {
  const int nu = num_urgency();
  if (nu == 0) throw ContractError("urgency_values must be non-empty");
  if (static_cast<int>(urgency_chain.size()) != nu)
    throw ContractError("urgency_chain must have one row per urgency value");
  for (const auto& row : urgency_chain) {
    if (static_cast<int>(row.size()) != nu)
      throw ContractError("urgency_chain must be square");
    double s = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) throw ContractError("urgency_chain entries must be nonnegative");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ContractError("urgency_chain rows must sum to 1");
  }
  if (!strongly_connected(urgency_chain)) throw ContractError("urgency_chain must be irreducible");
  if (karma_cap < 1) throw ContractError("karma_cap must be >= 1");
  if (avg_karma <= 0 || avg_karma > karma_cap)
    throw ContractError("avg_karma must satisfy 0 < avg_karma <= karma_cap");
  if (!(discount >= 0.0 && discount < 1.0)) throw ContractError("discount must lie in [0, 1)");
  auto st = stationary_urgency();
  if (std::any_of(st.begin(), st.end(), [](double p) { return !(p > 0.0); }))
    throw ContractError("urgency_chain stationary law is not strictly positive");
}

std::vector<double> GameConfig::stationary_urgency() const {
  // Lazy chain (I + P) / 2 shares the stationary law and is aperiodic.
  const int n = num_urgency();
  std::vector<double> p(n, 1.0 / n), next(n);
  for (int it = 0; it < 1'000'000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      next[i] += 0.5 * p[i];
      for (int j = 0; j < n; ++j) next[j] += 0.5 * p[i] * urgency_chain[i][j];
    }
    double diff = 0.0;
    for (int i = 0; i < n; ++i) diff += std::abs(next[i] - p[i]);
    p.swap(next);
    if (diff < 1e-15) break;
  }
  double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= s;
  return p;
}

GameConfig game_from_json(const nlohmann::json& j) {
  GameConfig g;
  g.urgency_values = j.at("urgency_values").get<std::vector<double>>();
  g.urgency_chain = j.at("urgency_chain").get<std::vector<std::vector<double>>>();
  g.karma_cap = j.at("karma_cap").get<int>();
  g.avg_karma = j.at("avg_karma").get<int>();
  g.discount = j.at("discount").get<double>();
  g.validate();
  return g;
}

nlohmann::json game_to_json(const GameConfig& g) {
  return {{"urgency_values", g.urgency_values},
          {"urgency_chain", g.urgency_chain},
          {"karma_cap", g.karma_cap},
          {"avg_karma", g.avg_karma},
          {"discount", g.discount}};
}

GameConfig load_game(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open game config: " + path);
  return game_from_json(nlohmann::json::parse(in));
}

Policy::Policy(int num_states, int num_bids)
    : num_states_(num_states),
      num_bids_(num_bids),
      probs_(static_cast<std::size_t>(num_states) * num_bids, 0.0) {}

Policy Policy::uniform_feasible(const GameConfig& g) {
  Policy p(g.num_states(), g.num_bids());
  for (int x = 0; x < p.num_states(); ++x) {
    const int k = p.karma_of(x);
    for (int a = 0; a <= k; ++a) p(x, a) = 1.0 / (k + 1);
  }
  return p;
}

Policy Policy::deterministic(const GameConfig& g, std::span<const int> bids) {
  if (static_cast<int>(bids.size()) != g.num_states())
    throw ContractError("deterministic policy needs one bid per state");
  Policy p(g.num_states(), g.num_bids());
  for (int x = 0; x < p.num_states(); ++x) {
    if (bids[x] < 0 || bids[x] > p.karma_of(x)) throw ContractError("infeasible bid in policy");
    p(x, bids[x]) = 1.0;
  }
  return p;
}

void Policy::validate(double tol) const {
  for (int x = 0; x < num_states_; ++x) {
    auto r = row(x);
    check_simplex(r, tol, "policy row");
    for (int a = karma_of(x) + 1; a < num_bids_; ++a)
      if (r[a] != 0.0) throw ContractError("policy places mass on an infeasible bid");
  }
}

void MeanField::validate(const GameConfig& g, double tol) const {
  if (static_cast<int>(mu.size()) != g.num_states()) throw ContractError("mu has wrong size");
  if (pi.num_states() != g.num_states() || pi.num_bids() != g.num_bids())
    throw ContractError("pi has wrong shape");
  check_simplex(mu, tol, "mu");
  pi.validate(tol);
}

void check_simplex(std::span<const double> p, double tol, const char* what) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw ContractError(std::string(what) + " has a negative or NaN entry");
    s += v;
  }
  if (std::abs(s - 1.0) > tol) throw ContractError(std::string(what) + " does not sum to 1");
}

StateDistribution point_karma_distribution(const GameConfig& g, int karma) {
  if (karma < 0 || karma > g.karma_cap) throw ContractError("karma out of range");
  StateDistribution mu(g.num_states(), 0.0);
  auto urg = g.stationary_urgency();
  for (int u = 0; u < g.num_urgency(); ++u) mu[g.state_index({u, karma})] = urg[u];
  return mu;
}

StateDistribution uniform_state_distribution(const GameConfig& g) {
  return StateDistribution(g.num_states(), 1.0 / g.num_states());
}

BidDistribution opponent_bid_distribution(const MeanField& mf) {
  const int nb = mf.pi.num_bids();
  BidDistribution nu(nb, 0.0);
  for (int x = 0; x < mf.pi.num_states(); ++x) {
    if (mf.mu[x] == 0.0) continue;
    auto r = mf.pi.row(x);
    for (int a = 0; a < nb; ++a) nu[a] += mf.mu[x] * r[a];
  }
  return nu;
}

double win_probability(int bid, std::span<const double> nu) {
  if (bid < 0 || bid >= static_cast<int>(nu.size())) throw ContractError("bid out of range");
  double below = 0.0;
  for (int a = 0; a < bid; ++a) below += nu[a];
  return below + 0.5 * nu[bid];
}

double surplus(const MeanField& mf) {
  auto nu = opponent_bid_distribution(mf);
  const int nb = mf.pi.num_bids();
  std::vector<double> paid(nb);
  for (int a = 0; a < nb; ++a) paid[a] = win_probability(a, nu) * a;
  double p = 0.0;
  for (int x = 0; x < mf.pi.num_states(); ++x) {
    if (mf.mu[x] == 0.0) continue;
    auto r = mf.pi.row(x);
    double s = 0.0;
    for (int a = 0; a < nb; ++a) s += r[a] * paid[a];
    p += mf.mu[x] * s;
  }
  return p;
}

Redistribution redistribution_fractions(double mean_surplus) {
  if (!(mean_surplus >= 0.0)) throw ContractError("surplus must be nonnegative");
  double nearest = std::round(mean_surplus);
  if (std::abs(mean_surplus - nearest) <= kSurplusSnap) mean_surplus = nearest;
  Redistribution r;
  r.floor_grant = static_cast<int>(std::floor(mean_surplus));
  r.ceil_grant = static_cast<int>(std::ceil(mean_surplus));
  r.f_low = std::ceil(mean_surplus) - mean_surplus;
  r.f_high = 1.0 - r.f_low;
  return r;
}

KarmaMarket::KarmaMarket(const GameConfig& g, const MeanField& mf)
    : game_(g), nu_(opponent_bid_distribution(mf)) {
  const int nb = g.num_bids();
  if (mf.pi.num_bids() != nb) throw ContractError("mean field does not match the game");
  win_.resize(nb);
  for (int a = 0; a < nb; ++a) win_[a] = karma::win_probability(a, nu_);

  double p = 0.0;
  for (int x = 0; x < mf.pi.num_states(); ++x) {
    if (mf.mu[x] == 0.0) continue;
    auto r = mf.pi.row(x);
    double s = 0.0;
    for (int a = 0; a < nb; ++a) s += r[a] * win_[a] * a;
    p += mf.mu[x] * s;
  }
  surplus_ = std::clamp(p, 0.0, static_cast<double>(g.karma_cap));
  const int K = g.karma_cap;

  // Expected karma lost at the cap when the mean grant is `grant`.
  auto overflow = [&](double grant) {
    const auto rd = redistribution_fractions(grant);
    auto over = [&](int target) { return static_cast<double>(std::max(0, target - K)); };
    double total = 0.0;
    for (int x = 0; x < mf.pi.num_states(); ++x) {
      if (mf.mu[x] == 0.0) continue;
      const int k = mf.pi.karma_of(x);
      if (k + rd.ceil_grant <= K) continue;
      auto r = mf.pi.row(x);
      double s = 0.0;
      for (int a = 0; a <= k; ++a) {
        if (r[a] == 0.0) continue;
        const double w = win_[a];
        s += r[a] * (w * (rd.f_low * over(k - a + rd.floor_grant) + rd.f_high * over(k - a + rd.ceil_grant)) +
                     (1.0 - w) * (rd.f_low * over(k + rd.floor_grant) + rd.f_high * over(k + rd.ceil_grant)));
      }
      total += mf.mu[x] * s;
    }
    return total;
  };
  // Least fixed point of grant = surplus + overflow(grant); overflow is
  // nondecreasing with slope below one unless all mass sits at the cap.
  double grant = surplus_;
  for (int it = 0; it < 10000; ++it) {
    const double next = std::min(surplus_ + overflow(grant), static_cast<double>(K));
    if (std::abs(next - grant) <= 1e-15 * std::max(1.0, next)) {
      grant = next;
      break;
    }
    grant = next;
  }
  mean_grant_ = grant;
  redistribution_ = redistribution_fractions(mean_grant_);

  const auto& rd = redistribution_;
  kernel_.assign(static_cast<std::size_t>(nb) * nb, {});
  for (int k = 0; k <= K; ++k) {
    for (int a = 0; a <= k; ++a) {
      auto& entries = kernel_[static_cast<std::size_t>(k) * nb + a];
      auto add = [&](int target, double prob) {
        if (prob == 0.0) return;
        target = std::clamp(target, 0, K);
        for (auto& e : entries)
          if (e.next_karma == target) {
            e.prob += prob;
            return;
          }
        entries.push_back({target, prob});
      };
      const double w = win_[a];
      add(k - a + rd.floor_grant, w * rd.f_low);
      add(k - a + rd.ceil_grant, w * rd.f_high);
      add(k + rd.floor_grant, (1.0 - w) * rd.f_low);
      add(k + rd.ceil_grant, (1.0 - w) * rd.f_high);
      std::sort(entries.begin(), entries.end(),
                [](const KernelEntry& l, const KernelEntry& r) { return l.next_karma < r.next_karma; });
    }
  }
}

void KarmaMarket::check_bid(int karma, int bid) const {
  if (karma < 0 || karma > game_.karma_cap) throw ContractError("karma out of range");
  if (bid < 0 || bid > karma) throw ContractError("infeasible bid: must satisfy 0 <= bid <= karma");
}

double KarmaMarket::win_probability(int bid) const {
  if (bid < 0 || bid >= static_cast<int>(win_.size())) throw ContractError("bid out of range");
  return win_[bid];
}

double KarmaMarket::reward(AgentState s, int bid) const {
  check_bid(s.karma, bid);
  return game_.urgency_values.at(s.urgency) * win_[bid];
}

std::span<const KernelEntry> KarmaMarket::kernel(int karma, int bid) const {
  check_bid(karma, bid);
  return kernel_[static_cast<std::size_t>(karma) * game_.num_bids() + bid];
}

std::vector<double> KarmaMarket::karma_kernel(int karma, int bid) const {
  std::vector<double> out(game_.num_bids(), 0.0);
  for (const auto& e : kernel(karma, bid)) out[e.next_karma] += e.prob;
  return out;
}

std::vector<double> KarmaMarket::state_transition(AgentState s, int bid) const {
  auto kk = kernel(s.karma, bid);
  std::vector<double> out(game_.num_states(), 0.0);
  const auto& row = game_.urgency_chain.at(s.urgency);
  for (int u = 0; u < game_.num_urgency(); ++u) {
    if (row[u] == 0.0) continue;
    for (const auto& e : kk) out[game_.state_index({u, e.next_karma})] += row[u] * e.prob;
  }
  return out;
}

double reward(const GameConfig& g, AgentState s, int bid, const MeanField& mf) {
  return KarmaMarket(g, mf).reward(s, bid);
}

std::vector<double> karma_kernel(const GameConfig& g, int karma, int bid, const MeanField& mf) {
  return KarmaMarket(g, mf).karma_kernel(karma, bid);
}

std::vector<double> state_transition(const GameConfig& g, AgentState s, int bid, const MeanField& mf) {
  return KarmaMarket(g, mf).state_transition(s, bid);
}

}  // namespace karma
