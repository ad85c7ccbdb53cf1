#include "karma/fp_dqn.hpp"

#include <chrono>

#include "karma/env.hpp"
#include "karma/metrics.hpp"
#include "karma/sne.hpp"

namespace karma {

void FpConfig::validate() const {
  if (outer_iters < 1 || episodes_per_iter < 1 || population_size < 1 || episode_length < 1)
    throw ContractError("fictitious play counts must be positive");
  if (average_last_episodes < 1) throw ContractError("average_last_episodes must be at least 1");
  dqn.validate();
}

FpConfig fp_config_from_json(const nlohmann::json& j) {
  FpConfig c;
  c.outer_iters = j.value("outer_iters", c.outer_iters);
  c.episodes_per_iter = j.value("episodes_per_iter", c.episodes_per_iter);
  c.population_size = j.value("population_size", c.population_size);
  c.episode_length = j.value("episode_length", c.episode_length);
  c.seed = j.value("seed", c.seed);
  c.fresh_buffer = j.value("fresh_buffer", c.fresh_buffer);
  c.init_mu_mean_karma = j.value("init_mu_mean_karma", c.init_mu_mean_karma);
  c.average_last_episodes = j.value("average_last_episodes", c.average_last_episodes);
  c.exploitability_of_avg = j.value("exploitability_of_avg", c.exploitability_of_avg);
  c.record_wall_time = j.value("record_wall_time", c.record_wall_time);
  const long long per_iter = static_cast<long long>(c.episodes_per_iter) * c.episode_length;
  DqnConfig base;
  base.total_steps = per_iter;
  base.epsilon.horizon = per_iter;
  c.dqn = dqn_config_from_json(j.value("dqn", nlohmann::json::object()), base);
  c.validate();
  return c;
}

nlohmann::json fp_config_to_json(const FpConfig& c) {
  return {{"outer_iters", c.outer_iters},
          {"episodes_per_iter", c.episodes_per_iter},
          {"population_size", c.population_size},
          {"episode_length", c.episode_length},
          {"seed", c.seed},
          {"fresh_buffer", c.fresh_buffer},
          {"init_mu_mean_karma", c.init_mu_mean_karma},
          {"average_last_episodes", c.average_last_episodes},
          {"exploitability_of_avg", c.exploitability_of_avg},
          {"record_wall_time", c.record_wall_time},
          {"dqn", dqn_config_to_json(c.dqn)}};
}

std::vector<double> fp_average(std::span<const double> avg, std::span<const double> value, int i) {
  if (avg.size() != value.size()) throw ContractError("fp_average: shape mismatch");
  if (i < 0) throw ContractError("fp_average: negative iteration index");
  const double keep = static_cast<double>(i) / (i + 1);
  const double take = 1.0 / (i + 1);
  std::vector<double> out(avg.size());
  for (std::size_t j = 0; j < avg.size(); ++j) out[j] = keep * avg[j] + take * value[j];
  return out;
}

Policy fp_average(const Policy& avg, const Policy& value, int i) {
  if (avg.num_states() != value.num_states() || avg.num_bids() != value.num_bids())
    throw ContractError("fp_average: policy shape mismatch");
  Policy out(avg.num_states(), avg.num_bids());
  out.data() = fp_average(avg.data(), value.data(), i);
  return out;
}

FpState run_fp_dqn(const GameConfig& g, const FpConfig& fp, const MeanField* reference,
                   const std::function<void(const FpState&)>& on_iteration) {
  fp.validate();
  if (reference) reference->validate(g, 1e-9);
  DqnConfig dqn = fp.dqn;
  dqn.discount = g.discount;
  const auto t0 = std::chrono::steady_clock::now();

  FpState st;
  st.avg_mu = fp.init_mu_mean_karma ? point_karma_distribution(g, g.avg_karma) : uniform_state_distribution(g);
  st.avg_pi = Policy::uniform_feasible(g);

  auto record = [&] {
    FpRow row;
    row.iteration = st.iteration;
    if (reference) {
      row.w1_mu = mu_distance(st.avg_mu, reference->mu, g);
      row.w_pi = policy_distance(st.avg_pi, reference->pi, g);
    }
    if (fp.exploitability_of_avg) row.exploitability = sne_residuals(g, {st.avg_mu, st.avg_pi}).exploitability;
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.rows.push_back(row);
  };
  record();

  DqnAgent agent(g, dqn, derive_seed(fp.seed, 1));
  PopulationEnv env(g, fp.population_size, true, derive_seed(fp.seed, 2));
  const int tail = std::min(fp.average_last_episodes, fp.episodes_per_iter);

  for (int i = 0; i < fp.outer_iters; ++i) {
    if (i > 0) agent.reinitialize(fp.fresh_buffer);
    const MeanField frozen{st.avg_mu, st.avg_pi};
    StateDistribution mu_end(g.num_states(), 0.0);
    for (int e = 0; e < fp.episodes_per_iter; ++e) {
      env.reset(frozen);
      AgentState s = env.learner();
      for (int t = 0; t < fp.episode_length; ++t) {
        const int bid = agent.act(s);
        const auto r = env.step(bid);
        agent.observe({s, bid, r.reward, r.next});
        s = r.next;
      }
      if (e >= fp.episodes_per_iter - tail) {
        const auto h = env.empirical_state_distribution();
        for (std::size_t x = 0; x < h.size(); ++x) mu_end[x] += h[x];
      }
    }
    for (double& v : mu_end) v /= tail;

    st.mu_history.push_back(mu_end);
    st.pi_history.push_back(agent.greedy_policy());
    st.avg_mu = fp_average(st.avg_mu, mu_end, i);
    st.avg_pi = fp_average(st.avg_pi, st.pi_history.back(), i);
    st.iteration = i + 1;
    st.conservation_warnings = env.conservation_warnings();
    record();
    if (on_iteration) on_iteration(st);
  }
  return st;
}

CsvTable fp_table(const FpState& state, const FpConfig& fp) {
  std::vector<std::string> header{"iteration", "W1_mu", "W_pi"};
  if (fp.exploitability_of_avg) header.push_back("exploitability_of_avg");
  if (fp.record_wall_time) header.push_back("wall_time");
  CsvTable csv(header);
  for (const auto& r : state.rows) {
    std::vector<std::string> cells{CsvTable::cell(r.iteration), CsvTable::cell(r.w1_mu), CsvTable::cell(r.w_pi)};
    if (fp.exploitability_of_avg) cells.push_back(CsvTable::cell(r.exploitability));
    if (fp.record_wall_time) cells.push_back(CsvTable::cell(r.wall_time));
    csv.row(cells);
  }
  return csv;
}

}  // namespace karma
