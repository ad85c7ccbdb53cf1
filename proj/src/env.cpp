#include "karma/env.hpp"

#include <algorithm>
#include <numeric>

namespace karma {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(master) ^ (stream * 0xd1b54a32d192ed03ULL + 1));
}

int sample_index(std::span<const double> probs, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double cum = 0.0;
  int last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cum += probs[i];
    last_positive = static_cast<int>(i);
    if (u < cum) return last_positive;
  }
  return last_positive;
}

AgentState sample_state(const GameConfig& g, std::span<const double> mu, Rng& rng) {
  return g.state_at(sample_index(mu, rng));
}

MeanFieldEnv::MeanFieldEnv(const GameConfig& g, const MeanField& mf, std::uint64_t seed)
    : game_(g), mf_(mf), market_(g, mf), rng_(seed) {
  mf_.validate(game_, 1e-9);
}

StepResult MeanFieldEnv::step(int bid) {
  StepResult r;
  r.reward = market_.reward(state_, bid);
  const int next_u = sample_index(game_.urgency_chain[state_.urgency], rng_);
  auto kk = market_.kernel(state_.karma, bid);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng_);
  double cum = 0.0;
  int next_k = kk.back().next_karma;
  for (const auto& e : kk) {
    cum += e.prob;
    if (u < cum) {
      next_k = e.next_karma;
      break;
    }
  }
  state_ = {next_u, next_k};
  r.next = state_;
  ++steps_;
  return r;
}

AgentState MeanFieldEnv::reset(std::span<const double> init_mu) { return reset(init_mu, rng_); }

AgentState MeanFieldEnv::reset(std::span<const double> init_mu, Rng& rng) {
  if (static_cast<int>(init_mu.size()) != game_.num_states()) throw ContractError("init_mu has wrong size");
  check_simplex(init_mu, 1e-9, "init_mu");
  state_ = sample_state(game_, init_mu, rng);
  return state_;
}

PopulationEnv::PopulationEnv(const GameConfig& g, int population_size, bool with_learner, std::uint64_t seed)
    : game_(g), population_size_(population_size), with_learner_(with_learner), rng_(seed) {
  if (population_size < 1) throw ContractError("population size must be at least 1");
  agents_.assign(population_size + (with_learner ? 1 : 0), AgentState{0, 0});
  order_.resize(agents_.size());
  bids_.resize(agents_.size());
  policy_ = Policy::uniform_feasible(g);
  rebuild_policy_cdf();
}

void PopulationEnv::rebuild_policy_cdf() {
  const int nb = game_.num_bids();
  policy_cdf_.assign(policy_.data().size(), 0.0);
  for (int x = 0; x < policy_.num_states(); ++x) {
    double cum = 0.0;
    for (int a = 0; a < nb; ++a) {
      cum += policy_(x, a);
      policy_cdf_[static_cast<std::size_t>(x) * nb + a] = cum;
    }
  }
}

void PopulationEnv::set_population_policy(const Policy& pi) {
  if (pi.num_states() != game_.num_states() || pi.num_bids() != game_.num_bids())
    throw ContractError("population policy does not match the game");
  pi.validate(1e-9);
  policy_ = pi;
  rebuild_policy_cdf();
}

void PopulationEnv::reset(const MeanField& mf_init) {
  mf_init.validate(game_, 1e-9);
  set_population_policy(mf_init.pi);
  for (auto& a : agents_) a = sample_state(game_, mf_init.mu, rng_);
  total_karma_ = karma_sum();
}

void PopulationEnv::set_states(std::span<const AgentState> population, AgentState learner) {
  if (static_cast<int>(population.size()) != population_size_) throw ContractError("wrong number of agents");
  std::copy(population.begin(), population.end(), agents_.begin());
  if (with_learner_) agents_.back() = learner;
  for (const auto& a : agents_)
    if (a.karma < 0 || a.karma > game_.karma_cap || a.urgency < 0 || a.urgency >= game_.num_urgency())
      throw ContractError("agent state out of range");
  total_karma_ = karma_sum();
}

long long PopulationEnv::karma_sum() const {
  long long s = 0;
  for (const auto& a : agents_) s += a.karma;
  return s;
}

PopulationEnv::RoundOutcome PopulationEnv::play_round(int learner_bid) {
  const int m = static_cast<int>(agents_.size());
  const int nb = game_.num_bids();
  const int K = game_.karma_cap;
  const int learner = with_learner_ ? m - 1 : -1;
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (int j = 0; j < m; ++j) {
    if (j == learner) {
      bids_[j] = learner_bid;
      continue;
    }
    const auto& s = agents_[j];
    const double* cdf = policy_cdf_.data() + static_cast<std::size_t>(game_.state_index(s)) * nb;
    const double u = unif(rng_) * cdf[s.karma];
    int a = 0;
    while (a < s.karma && !(u < cdf[a])) ++a;
    bids_[j] = a;
  }

  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);

  RoundOutcome out;
  long long pool = 0;
  std::bernoulli_distribution coin(0.5);
  for (int p = 0; p + 1 < m; p += 2) {
    const int i = order_[p], j = order_[p + 1];
    int winner;
    if (bids_[i] != bids_[j]) {
      winner = bids_[i] > bids_[j] ? i : j;
    } else {
      winner = coin(rng_) ? i : j;
    }
    agents_[winner].karma -= bids_[winner];
    pool += bids_[winner];
    if (i == learner || j == learner) {
      out.learner_played = true;
      out.learner_won = winner == learner;
    }
  }

  // Whole-unit redistribution: floor share to everyone, remainder to
  // distinct random agents, overflow above K handed to agents with headroom.
  const long long share = pool / m;
  const long long extra = pool % m;
  std::iota(order_.begin(), order_.end(), 0);
  for (long long r = 0; r < extra; ++r) {
    std::uniform_int_distribution<int> pick(static_cast<int>(r), m - 1);
    std::swap(order_[r], order_[pick(rng_)]);
  }
  long long overflow = 0;
  auto grant = [&](int j, long long units) {
    const long long room = K - agents_[j].karma;
    const long long give = std::min(units, room);
    agents_[j].karma += static_cast<int>(give);
    overflow += units - give;
  };
  if (share > 0)
    for (int j = 0; j < m; ++j) grant(j, share);
  for (long long r = 0; r < extra; ++r) grant(order_[r], 1);
  if (overflow > 0) {
    std::vector<int> headroom;
    for (int j = 0; j < m; ++j)
      if (agents_[j].karma < K) headroom.push_back(j);
    while (overflow > 0) {
      if (headroom.empty()) {
        conservation_warnings_ += overflow;
        break;
      }
      std::uniform_int_distribution<std::size_t> pick(0, headroom.size() - 1);
      const std::size_t h = pick(rng_);
      const int j = headroom[h];
      ++agents_[j].karma;
      --overflow;
      if (agents_[j].karma == K) {
        headroom[h] = headroom.back();
        headroom.pop_back();
      }
    }
  }

  for (auto& a : agents_) a.urgency = sample_index(game_.urgency_chain[a.urgency], rng_);
  ++steps_;
  return out;
}

StepResult PopulationEnv::step(int learner_bid) {
  if (!with_learner_) throw ContractError("this population has no learner");
  const AgentState before = agents_.back();
  if (learner_bid < 0 || learner_bid > before.karma)
    throw ContractError("infeasible bid: must satisfy 0 <= bid <= karma");
  auto outcome = play_round(learner_bid);
  StepResult r;
  r.reward = outcome.learner_won ? game_.urgency_values[before.urgency] : 0.0;
  r.next = agents_.back();
  return r;
}

void PopulationEnv::step_population() {
  if (with_learner_) throw ContractError("step_population requires a population without learner");
  play_round(0);
}

StateDistribution PopulationEnv::empirical_state_distribution() const {
  StateDistribution mu(game_.num_states(), 0.0);
  for (int j = 0; j < population_size_; ++j) mu[game_.state_index(agents_[j])] += 1.0;
  for (double& v : mu) v /= population_size_;
  return mu;
}

}  // namespace karma
