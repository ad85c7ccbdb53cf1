#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "karma/experiment.hpp"
#include "karma/fp_dqn.hpp"
#include "karma/io.hpp"
#include "karma/metrics.hpp"
#include "karma/newcomer.hpp"
#include "karma/sne.hpp"

namespace py = pybind11;
using namespace karma;

namespace {

std::vector<std::vector<double>> policy_rows(const Policy& p) {
  std::vector<std::vector<double>> out;
  for (int x = 0; x < p.num_states(); ++x) out.emplace_back(p.row(x).begin(), p.row(x).end());
  return out;
}

Policy policy_from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ContractError("policy needs at least one row");
  Policy p(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
  for (std::size_t x = 0; x < rows.size(); ++x) {
    if (rows[x].size() != rows.front().size()) throw ContractError("ragged policy rows");
    std::copy(rows[x].begin(), rows[x].end(), p.row(static_cast<int>(x)).begin());
  }
  return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Karma mean field game core";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConvergenceError>(m, "ConvergenceError", PyExc_RuntimeError);

  py::class_<AgentState>(m, "AgentState")
      .def(py::init<int, int>(), py::arg("urgency"), py::arg("karma"))
      .def_readwrite("urgency", &AgentState::urgency)
      .def_readwrite("karma", &AgentState::karma)
      .def("__eq__", [](const AgentState& a, const AgentState& b) { return a == b; })
      .def("__repr__", [](const AgentState& s) {
        return "AgentState(urgency=" + std::to_string(s.urgency) + ", karma=" + std::to_string(s.karma) + ")";
      });

  py::class_<GameConfig>(m, "GameConfig")
      .def(py::init<>())
      .def_readwrite("urgency_values", &GameConfig::urgency_values)
      .def_readwrite("urgency_chain", &GameConfig::urgency_chain)
      .def_readwrite("karma_cap", &GameConfig::karma_cap)
      .def_readwrite("avg_karma", &GameConfig::avg_karma)
      .def_readwrite("discount", &GameConfig::discount)
      .def_property_readonly("num_states", &GameConfig::num_states)
      .def_property_readonly("num_bids", &GameConfig::num_bids)
      .def("state_index", &GameConfig::state_index)
      .def("state_at", &GameConfig::state_at)
      .def("validate", &GameConfig::validate)
      .def_static("load", &load_game)
      .def_static("from_json", [](const std::string& s) { return game_from_json(nlohmann::json::parse(s)); })
      .def("to_json", [](const GameConfig& g) { return game_to_json(g).dump(); });

  py::class_<Policy>(m, "Policy")
      .def(py::init(&policy_from_rows), py::arg("rows"))
      .def_static("uniform_feasible", &Policy::uniform_feasible)
      .def_static("deterministic",
                  [](const GameConfig& g, const std::vector<int>& bids) { return Policy::deterministic(g, bids); })
      .def_property_readonly("num_states", &Policy::num_states)
      .def_property_readonly("num_bids", &Policy::num_bids)
      .def("row", [](const Policy& p, int x) {
        auto r = p.row(x);
        return std::vector<double>(r.begin(), r.end());
      })
      .def("rows", &policy_rows)
      .def("validate", &Policy::validate, py::arg("tol") = 1e-12);

  py::class_<MeanField>(m, "MeanField")
      .def(py::init([](std::vector<double> mu, Policy pi) { return MeanField{std::move(mu), std::move(pi)}; }),
           py::arg("mu"), py::arg("pi"))
      .def_readwrite("mu", &MeanField::mu)
      .def_readwrite("pi", &MeanField::pi)
      .def("validate", &MeanField::validate, py::arg("game"), py::arg("tol") = 1e-12);

  py::class_<SneResult>(m, "SneResult")
      .def_readonly("mean_field", &SneResult::mean_field)
      .def_readonly("residual_sne1", &SneResult::residual_sne1)
      .def_readonly("exploitability", &SneResult::exploitability)
      .def_readonly("action_gap", &SneResult::action_gap)
      .def_readonly("iterations", &SneResult::iterations)
      .def_readonly("converged", &SneResult::converged)
      .def_property_readonly("q", [](const SneResult& r) { return r.q.q; })
      .def_property_readonly("greedy_bids", [](const SneResult& r) { return greedy_bids(r.q); });

  py::class_<SneSolverConfig>(m, "SneSolverConfig")
      .def(py::init<>())
      .def_readwrite("damping_policy", &SneSolverConfig::damping_policy)
      .def_readwrite("damping_mu", &SneSolverConfig::damping_mu)
      .def_readwrite("tau_initial", &SneSolverConfig::tau_initial)
      .def_readwrite("tau_decay", &SneSolverConfig::tau_decay)
      .def_readwrite("tau_min", &SneSolverConfig::tau_min)
      .def_readwrite("max_outer_iters", &SneSolverConfig::max_outer_iters)
      .def_readwrite("tol_sne1", &SneSolverConfig::tol_sne1)
      .def_readwrite("tol_exploit", &SneSolverConfig::tol_exploit)
      .def_readwrite("vi_tol", &SneSolverConfig::vi_tol);

  m.def("solve_sne", &solve_sne, py::arg("game"), py::arg("config") = SneSolverConfig{}, py::arg("seed") = 0,
        py::call_guard<py::gil_scoped_release>());
  m.def(
      "sne_residuals",
      [](const GameConfig& g, const MeanField& mf) {
        const auto r = sne_residuals(g, mf);
        return py::dict(py::arg("residual_sne1") = r.residual_sne1, py::arg("exploitability") = r.exploitability);
      },
      py::arg("game"), py::arg("mean_field"));
  m.def("save_sne", &save_sne, py::arg("path"), py::arg("game"), py::arg("result"), py::arg("include_q") = true);
  m.def(
      "load_sne",
      [](const std::string& path) {
        auto f = load_sne(path);
        return py::make_tuple(f.game, f.result);
      },
      py::arg("path"));

  m.def("encode_state", &encode_state, py::arg("state"), py::arg("game"));
  m.def("reward", [](const GameConfig& g, const MeanField& mf, AgentState s, int a) { return reward(g, s, a, mf); },
        py::arg("game"), py::arg("mean_field"), py::arg("state"), py::arg("bid"));
  m.def("state_transition",
        [](const GameConfig& g, const MeanField& mf, AgentState s, int a) { return state_transition(g, s, a, mf); },
        py::arg("game"), py::arg("mean_field"), py::arg("state"), py::arg("bid"));

  m.def(
      "w1_discrete_1d",
      [](const std::vector<double>& p, const std::vector<double>& q, double h) { return w1_discrete_1d(p, q, h); },
      py::arg("p"), py::arg("q"), py::arg("grid_spacing") = 1.0);
  m.def("policy_distance", &policy_distance, py::arg("a"), py::arg("b"), py::arg("game"));
  m.def(
      "mu_distance",
      [](const std::vector<double>& a, const std::vector<double>& b, const GameConfig& g, bool joint) {
        return mu_distance(a, b, g, joint ? MuGround::Joint : MuGround::Conditional);
      },
      py::arg("a"), py::arg("b"), py::arg("game"), py::arg("joint") = false);
  m.def(
      "mean_ci",
      [](const std::vector<double>& v) {
        const auto c = mean_ci(v);
        return py::make_tuple(c.mean, c.half_width);
      },
      py::arg("values"));
  m.def(
      "value_gap",
      [](const Policy& learned, const MeanField& eq, const GameConfig& g, int episodes, int length,
         std::uint64_t seed) {
        const auto v = value_gap(learned, eq, g, {episodes, length}, seed);
        return py::make_tuple(v.gap, v.ci);
      },
      py::arg("learned"), py::arg("equilibrium"), py::arg("game"), py::arg("episodes") = 10,
      py::arg("episode_length") = 1000, py::arg("seed") = 0);

  m.def(
      "train_newcomer",
      [](const GameConfig& g, const MeanField& eq, const std::string& mode, std::size_t buffer, int pop_size,
         long long steps, long long eval_period, int eval_episodes, long long epsilon_horizon, std::uint64_t seed) {
        NewcomerConfig cfg;
        cfg.mode = parse_newcomer_mode(mode);
        cfg.population_size = pop_size;
        cfg.dqn.buffer_size = buffer;
        cfg.dqn.total_steps = steps;
        cfg.dqn.eval_period = eval_period;
        cfg.dqn.eval_episodes = eval_episodes;
        cfg.dqn.epsilon.horizon = epsilon_horizon > 0 ? epsilon_horizon : steps;
        cfg.eval.episodes = eval_episodes;
        cfg.seed = seed;
        NewcomerResult res;
        {
          py::gil_scoped_release release;
          res = train_newcomer(g, eq, cfg);
        }
        py::list rows;
        for (const auto& r : res.rows)
          rows.append(py::dict(py::arg("step") = r.step, py::arg("W_pi") = r.w_pi,
                               py::arg("value_gap") = r.value_gap, py::arg("value_gap_ci") = r.value_gap_ci));
        return rows;
      },
      py::arg("game"), py::arg("equilibrium"), py::arg("mode") = "mf", py::arg("buffer") = 1'000'000,
      py::arg("pop_size") = 1000, py::arg("steps") = 1'000'000, py::arg("eval_period") = 10'000,
      py::arg("eval_episodes") = 10, py::arg("epsilon_horizon") = 0, py::arg("seed") = 0);

  m.def(
      "run_fp_dqn",
      [](const GameConfig& g, const MeanField* reference, int outer_iters, int episodes, int population,
         int episode_length, std::size_t buffer, bool init_mu_mean_karma, std::uint64_t seed) {
        nlohmann::json j{{"outer_iters", outer_iters},
                         {"episodes_per_iter", episodes},
                         {"population_size", population},
                         {"episode_length", episode_length},
                         {"init_mu_mean_karma", init_mu_mean_karma},
                         {"seed", seed},
                         {"dqn", {{"buffer_size", buffer}}}};
        const auto cfg = fp_config_from_json(j);
        FpState st;
        {
          py::gil_scoped_release release;
          st = run_fp_dqn(g, cfg, reference);
        }
        py::list rows;
        for (const auto& r : st.rows)
          rows.append(py::dict(py::arg("iteration") = r.iteration, py::arg("W1_mu") = r.w1_mu,
                               py::arg("W_pi") = r.w_pi));
        return py::dict(py::arg("rows") = rows, py::arg("avg_mu") = st.avg_mu, py::arg("avg_pi") = st.avg_pi,
                        py::arg("conservation_warnings") = st.conservation_warnings);
      },
      py::arg("game"), py::arg("reference") = nullptr, py::arg("outer_iters") = 100, py::arg("episodes") = 100,
      py::arg("population") = 1000, py::arg("episode_length") = 1000, py::arg("buffer") = 1'000'000,
      py::arg("init_mu_mean_karma") = false, py::arg("seed") = 0);

  m.def(
      "run_experiment",
      [](const std::string& plan_path, const std::string& out_dir) {
        auto plan = load_plan(plan_path);
        if (!out_dir.empty()) plan.out_dir = out_dir;
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(plan);
        }
        int failed = 0;
        for (const auto& run : r.runs) failed += run.ok ? 0 : 1;
        return py::dict(py::arg("runs") = r.runs.size(), py::arg("failed") = failed,
                        py::arg("out_dir") = plan.out_dir);
      },
      py::arg("plan"), py::arg("out_dir") = "");
}
