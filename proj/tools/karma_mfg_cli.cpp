#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "karma/experiment.hpp"
#include "karma/fp_dqn.hpp"
#include "karma/io.hpp"
#include "karma/metrics.hpp"
#include "karma/newcomer.hpp"
#include "karma/sne.hpp"

namespace fs = std::filesystem;
using namespace karma;

namespace {

int solve_sne_cmd(const std::string& config, const std::string& out, const std::string& bids_csv,
                  const SneSolverConfig& cfg, std::uint64_t seed) {
  const auto g = load_game(config);
  const auto r = solve_sne(g, cfg, seed);
  save_sne(out, g, r);
  if (!bids_csv.empty()) write_expected_bid_csv(bids_csv, r.mean_field.pi, g, r.mean_field.mu);
  std::cout << nlohmann::json{{"converged", r.converged},
                              {"iterations", r.iterations},
                              {"residual_sne1", r.residual_sne1},
                              {"exploitability", r.exploitability},
                              {"action_gap", std::isfinite(r.action_gap) ? nlohmann::json(r.action_gap) : nlohmann::json()}}
                   .dump()
            << "\n";
  return r.converged ? 0 : 2;
}

DqnConfig dqn_from_file(const std::string& path, DqnConfig base) {
  return path.empty() ? base : dqn_config_from_json(read_json(path), base);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Karma mean field game: equilibrium solver, DQN newcomer and fictitious play"};
  app.require_subcommand(1);

  // solve-sne
  std::string game_path, out_path, bids_csv;
  std::uint64_t seed = 0;
  SneSolverConfig scfg;
  auto* solve = app.add_subcommand("solve-sne", "Compute a stationary Nash equilibrium");
  solve->add_option("--config", game_path, "Game JSON")->required()->check(CLI::ExistingFile);
  solve->add_option("--out", out_path, "Output sne.json")->required();
  solve->add_option("--bids-csv", bids_csv, "Also write expected bid curves");
  solve->add_option("--seed", seed, "Jitter seed for the initial policy");
  solve->add_option("--damping-policy", scfg.damping_policy);
  solve->add_option("--damping-mu", scfg.damping_mu);
  solve->add_option("--tau-min", scfg.tau_min);
  solve->add_option("--max-iters", scfg.max_outer_iters);
  solve->add_option("--tol-sne1", scfg.tol_sne1);
  solve->add_option("--tol-exploit", scfg.tol_exploit, "Nonpositive selects 1e-4 R_max/(1-alpha)");

  // train-newcomer
  std::string sne_path, mode = "mf", dqn_path, trace_path;
  std::size_t buffer = 1'000'000;
  int pop_size = 1000;
  long long steps = 1'000'000, eval_period = 10'000;
  int eval_episodes = 10;
  auto* train = app.add_subcommand("train-newcomer", "Train a Double-DQN newcomer against an equilibrium");
  train->add_option("--sne", sne_path, "Equilibrium sne.json")->required()->check(CLI::ExistingFile);
  train->add_option("--mode", mode, "mf or pop")->check(CLI::IsMember({"mf", "pop"}));
  train->add_option("--buffer", buffer, "Replay capacity");
  train->add_option("--pop-size", pop_size, "Population size in pop mode");
  train->add_option("--steps", steps, "Environment steps");
  train->add_option("--eval-period", eval_period);
  train->add_option("--eval-episodes", eval_episodes);
  train->add_option("--dqn-config", dqn_path, "JSON with learner overrides");
  train->add_option("--trace", trace_path, "Per-step trace CSV");
  train->add_option("--seed", seed);
  train->add_option("--out", out_path, "Output directory")->required();

  // fp-dqn
  std::string fp_path;
  auto* fp = app.add_subcommand("fp-dqn", "Fictitious play with DQN best responses");
  fp->add_option("--config", game_path, "Game JSON")->check(CLI::ExistingFile);
  fp->add_option("--fp-config", fp_path, "fp.json")->check(CLI::ExistingFile);
  fp->add_option("--sne", sne_path, "Reference equilibrium for the metric columns")->check(CLI::ExistingFile);
  fp->add_option("--out", out_path, "Output directory")->required();
  fp->add_option("--seed", seed);

  // eval
  std::string policy_path;
  auto* eval = app.add_subcommand("eval", "Distance and value gap of saved network weights");
  eval->add_option("--policy", policy_path, "Weights binary")->required()->check(CLI::ExistingFile);
  eval->add_option("--sne", sne_path, "Equilibrium sne.json")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", eval_episodes);
  eval->add_option("--seed", seed);

  // metrics
  std::string a_path, b_path;
  bool joint = false;
  auto* metrics = app.add_subcommand("metrics", "Distances between two mean fields");
  metrics->add_option("--a", a_path, "First mean field (sne.json layout)")->required()->check(CLI::ExistingFile);
  metrics->add_option("--b", b_path, "Second mean field")->required()->check(CLI::ExistingFile);
  metrics->add_option("--config", game_path, "Game JSON when the files carry none")->check(CLI::ExistingFile);
  metrics->add_flag("--joint", joint, "Joint transport ground metric for mu");

  // experiment
  std::string plan_path;
  int workers = 0;
  auto* exp = app.add_subcommand("experiment", "Run a sweep plan");
  exp->add_option("--plan", plan_path, "Plan JSON")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", out_path, "Override the plan's output directory");
  exp->add_option("--workers", workers, "Worker cap (KARMA_MFG_THREADS also applies)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*solve) return solve_sne_cmd(game_path, out_path, bids_csv, scfg, seed);

    if (*train) {
      const auto sne = load_sne(sne_path);
      NewcomerConfig cfg;
      cfg.mode = parse_newcomer_mode(mode);
      DqnConfig base;
      base.buffer_size = buffer;
      base.total_steps = steps;
      base.eval_period = eval_period;
      base.eval_episodes = eval_episodes;
      cfg.dqn = dqn_from_file(dqn_path, base);
      cfg.population_size = pop_size;
      cfg.eval.episodes = cfg.dqn.eval_episodes;
      cfg.seed = seed;
      cfg.trace_path = trace_path;
      const auto res = train_newcomer(sne.game, sne.result.mean_field, cfg);
      fs::create_directories(out_path);
      newcomer_table(res.rows).save((fs::path(out_path) / "newcomer.csv").string());
      save_weights(res.network, (fs::path(out_path) / "weights.bin").string(),
                   (fs::path(out_path) / "weights.json").string());
      const auto& last = res.rows.back();
      std::cout << nlohmann::json{{"step", last.step},
                                  {"W_pi", last.w_pi},
                                  {"value_gap", last.value_gap},
                                  {"value_gap_ci", last.value_gap_ci},
                                  {"conservation_warnings", res.conservation_warnings}}
                       .dump()
                << "\n";
      return 0;
    }

    if (*fp) {
      FpConfig cfg = fp_path.empty() ? fp_config_from_json(nlohmann::json::object()) : fp_config_from_json(read_json(fp_path));
      if (fp->count("--seed")) cfg.seed = seed;
      std::optional<SneFile> ref;
      GameConfig g;
      if (!sne_path.empty()) {
        ref = load_sne(sne_path);
        g = ref->game;
      }
      if (!game_path.empty()) g = load_game(game_path);
      if (game_path.empty() && !ref) throw ContractError("fp-dqn needs --config or --sne");
      if (ref && !game_path.empty() && game_to_json(g) != game_to_json(ref->game))
        throw ContractError("--config and --sne describe different games");
      fs::create_directories(out_path);
      const auto csv = (fs::path(out_path) / "fp.csv").string();
      const MeanField* reference = ref ? &ref->result.mean_field : nullptr;
      auto st = run_fp_dqn(g, cfg, reference, [&](const FpState& s) {
        fp_table(s, cfg).save(csv);
        std::cerr << "iteration " << s.iteration << "/" << cfg.outer_iters << "\n";
      });
      fp_table(st, cfg).save(csv);
      SneResult avg;
      avg.mean_field = {st.avg_mu, st.avg_pi};
      const auto res = sne_residuals(g, avg.mean_field);
      avg.residual_sne1 = res.residual_sne1;
      avg.exploitability = res.exploitability;
      avg.action_gap = std::numeric_limits<double>::infinity();
      avg.iterations = st.iteration;
      save_sne((fs::path(out_path) / "fp_final.sne.json").string(), g, avg, false);
      std::cout << nlohmann::json{{"W1_mu", st.rows.back().w1_mu},
                                  {"W_pi", st.rows.back().w_pi},
                                  {"exploitability", res.exploitability},
                                  {"conservation_warnings", st.conservation_warnings}}
                       .dump()
                << "\n";
      return 0;
    }

    if (*eval) {
      const auto sne = load_sne(sne_path);
      const auto net = load_weights(policy_path);
      const auto pi = extract_greedy_policy(net, sne.game);
      const auto gap = value_gap(pi, sne.result.mean_field, sne.game, {eval_episodes, 1000}, seed);
      std::cout << nlohmann::json{{"W_pi", policy_distance(pi, sne.result.mean_field.pi, sne.game)},
                                  {"value_gap", gap.gap},
                                  {"value_gap_ci", gap.ci}}
                       .dump()
                << "\n";
      return 0;
    }

    if (*metrics) {
      const auto ja = read_json(a_path), jb = read_json(b_path);
      GameConfig g;
      if (!game_path.empty()) g = load_game(game_path);
      else if (ja.contains("game")) g = game_from_json(ja["game"]);
      else throw ContractError("no game description: pass --config");
      const auto a = mean_field_from_json(ja, g), b = mean_field_from_json(jb, g);
      std::cout << nlohmann::json{{"W_pi", policy_distance(a.pi, b.pi, g)},
                                  {"W1_mu", mu_distance(a.mu, b.mu, g, joint ? MuGround::Joint : MuGround::Conditional)}}
                       .dump()
                << "\n";
      return 0;
    }

    if (*exp) {
      auto plan = load_plan(plan_path);
      if (!out_path.empty()) plan.out_dir = out_path;
      if (workers > 0) plan.max_workers = workers;
      const auto res = run_experiment(plan);
      int failed = 0;
      for (const auto& r : res.runs)
        if (!r.ok) {
          ++failed;
          std::cerr << "run " << r.sweep_value << "/" << r.seed << " failed: " << r.error << "\n";
        }
      std::cout << "runs: " << res.runs.size() << ", failed: " << failed << ", output: " << plan.out_dir << "\n";
      return failed ? 1 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
