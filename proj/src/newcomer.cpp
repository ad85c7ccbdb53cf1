#include "karma/newcomer.hpp"

#include <fstream>
#include <optional>

#include "karma/metrics.hpp"

namespace karma {

double episode_return(MeanFieldEnv& env, const Policy& pi, std::span<const double> init_mu, int length,
                      std::uint64_t seed) {
  env.reseed(seed);
  Rng action_rng(derive_seed(seed, 1));
  const auto& g = env.game();
  AgentState s = env.reset(init_mu);
  double total = 0.0;
  for (int t = 0; t < length; ++t) {
    auto row = pi.row(g.state_index(s)).first(static_cast<std::size_t>(s.karma) + 1);
    const int bid = sample_index(row, action_rng);
    auto r = env.step(bid);
    total += r.reward;
    s = r.next;
  }
  return total;
}

ValueGap value_gap(const Policy& learned, const MeanField& equilibrium, const GameConfig& g, const EvalConfig& eval,
                   std::uint64_t seed) {
  learned.validate(1e-9);
  MeanFieldEnv env(g, equilibrium, seed);
  std::vector<double> diffs;
  diffs.reserve(eval.episodes);
  for (int e = 0; e < eval.episodes; ++e) {
    const auto s = derive_seed(seed, static_cast<std::uint64_t>(e));
    const double star = episode_return(env, equilibrium.pi, equilibrium.mu, eval.episode_length, s);
    const double mine = episode_return(env, learned, equilibrium.mu, eval.episode_length, s);
    diffs.push_back(star - mine);
  }
  const auto ci = mean_ci(diffs);
  return {ci.mean, ci.half_width};
}

NewcomerMode parse_newcomer_mode(const std::string& s) {
  if (s == "mf") return NewcomerMode::MeanField;
  if (s == "pop") return NewcomerMode::Population;
  throw ContractError("mode must be mf or pop, got " + s);
}

std::string to_string(NewcomerMode m) { return m == NewcomerMode::MeanField ? "mf" : "pop"; }

void NewcomerConfig::validate() const {
  dqn.validate();
  if (population_size < 1) throw ContractError("population_size must be positive");
  if (episode_length < 1) throw ContractError("episode_length must be positive");
  if (eval.episodes < 1 || eval.episode_length < 1) throw ContractError("evaluation sizes must be positive");
}

NewcomerResult train_newcomer(const GameConfig& g, const MeanField& equilibrium, const NewcomerConfig& cfg) {
  cfg.validate();
  equilibrium.validate(g, 1e-9);
  DqnConfig dqn = cfg.dqn;
  dqn.discount = g.discount;

  DqnAgent agent(g, dqn, derive_seed(cfg.seed, 1));
  const bool pop = cfg.mode == NewcomerMode::Population;
  std::optional<MeanFieldEnv> mf_env;
  std::optional<PopulationEnv> pop_env;
  if (pop)
    pop_env.emplace(g, cfg.population_size, true, derive_seed(cfg.seed, 2));
  else
    mf_env.emplace(g, equilibrium, derive_seed(cfg.seed, 2));
  const auto eval_seed = derive_seed(cfg.seed, 3);

  std::ofstream trace;
  if (!cfg.trace_path.empty()) {
    write_text(cfg.trace_path, "step,urgency,karma,bid,reward\n");
    trace.open(cfg.trace_path, std::ios::app | std::ios::binary);
  }

  NewcomerResult out;
  auto evaluate = [&](long long step) {
    const Policy greedy = agent.greedy_policy();
    const auto gap = value_gap(greedy, equilibrium, g, cfg.eval, eval_seed);
    out.rows.push_back({step, policy_distance(greedy, equilibrium.pi, g), gap.gap, gap.ci});
  };
  evaluate(0);

  AgentState s;
  for (long long t = 0; t < dqn.total_steps; ++t) {
    if (t % cfg.episode_length == 0) {
      if (pop) {
        pop_env->reset(equilibrium);
        s = pop_env->learner();
      } else {
        s = mf_env->reset(equilibrium.mu);
      }
    }
    const int bid = agent.act(s);
    const StepResult r = pop ? pop_env->step(bid) : mf_env->step(bid);
    if (trace.is_open())
      trace << t << ',' << s.urgency << ',' << s.karma << ',' << bid << ',' << format_double(r.reward) << '\n';
    agent.observe({s, bid, r.reward, r.next});
    s = r.next;
    if ((t + 1) % dqn.eval_period == 0) evaluate(t + 1);
  }
  out.network = agent.online();
  if (pop) out.conservation_warnings = pop_env->conservation_warnings();
  return out;
}

CsvTable newcomer_table(const std::vector<NewcomerRow>& rows) {
  CsvTable csv({"step", "W_pi", "value_gap", "value_gap_ci"});
  for (const auto& r : rows)
    csv.row({CsvTable::cell(r.step), CsvTable::cell(r.w_pi), CsvTable::cell(r.value_gap),
             CsvTable::cell(r.value_gap_ci)});
  return csv;
}

}  // namespace karma
