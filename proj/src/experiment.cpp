#include "karma/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "karma/metrics.hpp"
#include "karma/sne.hpp"

namespace fs = std::filesystem;

namespace karma {

ExperimentKind parse_experiment_kind(const std::string& s) {
  if (s == "newcomer-mf") return ExperimentKind::NewcomerMf;
  if (s == "newcomer-pop") return ExperimentKind::NewcomerPop;
  if (s == "fp-dqn") return ExperimentKind::FpDqn;
  throw ContractError("unknown experiment kind: " + s);
}

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::NewcomerMf: return "newcomer-mf";
    case ExperimentKind::NewcomerPop: return "newcomer-pop";
    case ExperimentKind::FpDqn: return "fp-dqn";
  }
  return "?";
}

void ExperimentPlan::validate() const {
  if (sweep.empty()) throw ContractError("plan sweep is empty");
  if (seeds.empty()) throw ContractError("plan seeds are empty");
  if (sne_path.empty() && game_path.empty()) throw ContractError("plan needs an sne or a game file");
  for (long long v : sweep)
    if (v < 1) throw ContractError("sweep values must be positive");
  if (kind == ExperimentKind::FpDqn) {
    fp.validate();
  } else {
    if (total_steps < 1 || eval_period < 1 || eval_episodes < 1 || episode_length < 1 || buffer_size < 1)
      throw ContractError("plan counts must be positive");
    dqn.validate();
  }
}

ExperimentPlan plan_from_json(const nlohmann::json& j) {
  ExperimentPlan p;
  p.kind = parse_experiment_kind(j.at("kind").get<std::string>());
  p.sne_path = j.value("sne", std::string{});
  p.game_path = j.value("game", std::string{});
  p.sweep = j.at("sweep").get<std::vector<long long>>();
  p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  p.out_dir = j.value("out_dir", p.out_dir);
  p.total_steps = j.value("total_steps", p.total_steps);
  p.eval_period = j.value("eval_period", p.eval_period);
  p.eval_episodes = j.value("eval_episodes", p.eval_episodes);
  p.episode_length = j.value("episode_length", p.episode_length);
  p.buffer_size = j.value("buffer_size", p.buffer_size);
  p.max_workers = j.value("max_workers", p.max_workers);
  DqnConfig base;
  base.total_steps = p.total_steps;
  base.eval_period = p.eval_period;
  base.eval_episodes = p.eval_episodes;
  base.buffer_size = p.buffer_size;
  base.epsilon.horizon = p.total_steps;
  p.dqn = dqn_config_from_json(j.value("dqn", nlohmann::json::object()), base);
  if (p.kind == ExperimentKind::FpDqn) p.fp = fp_config_from_json(j.value("fp", nlohmann::json::object()));
  p.validate();
  return p;
}

nlohmann::json plan_to_json(const ExperimentPlan& p) {
  nlohmann::json j{{"kind", to_string(p.kind)},
                   {"sne", p.sne_path},
                   {"game", p.game_path},
                   {"sweep", p.sweep},
                   {"seeds", p.seeds},
                   {"out_dir", p.out_dir},
                   {"max_workers", p.max_workers}};
  if (p.kind == ExperimentKind::FpDqn) {
    j["fp"] = fp_config_to_json(p.fp);
  } else {
    j["total_steps"] = p.total_steps;
    j["eval_period"] = p.eval_period;
    j["eval_episodes"] = p.eval_episodes;
    j["episode_length"] = p.episode_length;
    j["buffer_size"] = p.buffer_size;
    j["dqn"] = dqn_config_to_json(p.dqn);
  }
  return j;
}

ExperimentPlan load_plan(const std::string& path) {
  auto p = plan_from_json(read_json(path));
  // Input files are relative to the plan; out_dir stays relative to the caller.
  const fs::path base = fs::path(path).parent_path();
  for (auto* f : {&p.sne_path, &p.game_path})
    if (!f->empty() && fs::path(*f).is_relative()) *f = (base / *f).lexically_normal().string();
  return p;
}

std::vector<AggregateRow> ExperimentResult::curve(const std::string& metric, long long sweep_value) const {
  std::vector<AggregateRow> out;
  auto it = aggregates.find(metric);
  if (it == aggregates.end()) return out;
  for (const auto& r : it->second)
    if (r.sweep_value == sweep_value) out.push_back(r);
  return out;
}

int worker_budget(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("KARMA_MFG_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap > 0) n = std::min<long>(n, cap);
  }
  return std::max(1, n);
}

std::map<std::string, std::vector<AggregateRow>> aggregate_runs(const std::vector<RunRecord>& runs) {
  std::map<std::string, std::vector<AggregateRow>> out;
  std::vector<long long> sweeps;
  for (const auto& r : runs)
    if (r.ok && std::find(sweeps.begin(), sweeps.end(), r.sweep_value) == sweeps.end())
      sweeps.push_back(r.sweep_value);
  for (long long sv : sweeps) {
    std::vector<const RunRecord*> group;
    for (const auto& r : runs)
      if (r.ok && r.sweep_value == sv) group.push_back(&r);
    std::size_t len = group.front()->index.size();
    for (const auto* r : group) len = std::min(len, r->index.size());
    for (const auto& [metric, _] : group.front()->series) {
      auto& rows = out[metric];
      for (std::size_t t = 0; t < len; ++t) {
        std::vector<double> vals;
        for (const auto* r : group) vals.push_back(r->series.at(metric)[t]);
        const auto ci = mean_ci(vals);
        rows.push_back({sv, group.front()->index[t], ci.mean, ci.mean - ci.half_width, ci.mean + ci.half_width,
                        static_cast<int>(vals.size())});
      }
    }
  }
  return out;
}

namespace {

std::string run_name(const ExperimentPlan& p, long long sweep, std::uint64_t seed) {
  const char* label = p.kind == ExperimentKind::NewcomerMf ? "buffer" : "pop";
  return to_string(p.kind) + "_" + label + std::to_string(sweep) + "_seed" + std::to_string(seed);
}

void run_one(const ExperimentPlan& p, const GameConfig& g, const MeanField& eq, RunRecord& rec) {
  const fs::path dir = fs::path(p.out_dir) / "runs";
  const std::string name = run_name(p, rec.sweep_value, rec.seed);
  rec.csv_path = (dir / (name + ".csv")).string();
  if (p.kind == ExperimentKind::FpDqn) {
    FpConfig fp = p.fp;
    fp.population_size = static_cast<int>(rec.sweep_value);
    fp.seed = rec.seed;
    auto st = run_fp_dqn(g, fp, &eq, [&](const FpState& s) { fp_table(s, fp).save(rec.csv_path); });
    fp_table(st, fp).save(rec.csv_path);
    SneResult avg;
    avg.mean_field = {st.avg_mu, st.avg_pi};
    const auto res = sne_residuals(g, avg.mean_field);
    avg.residual_sne1 = res.residual_sne1;
    avg.exploitability = res.exploitability;
    avg.action_gap = std::numeric_limits<double>::infinity();
    avg.iterations = st.iteration;
    save_sne((dir / (name + ".sne.json")).string(), g, avg, false);
    rec.conservation_warnings = st.conservation_warnings;
    for (const auto& r : st.rows) {
      rec.index.push_back(r.iteration);
      rec.series["W1_mu"].push_back(r.w1_mu);
      rec.series["W_pi"].push_back(r.w_pi);
    }
    return;
  }
  NewcomerConfig cfg;
  cfg.mode = p.kind == ExperimentKind::NewcomerMf ? NewcomerMode::MeanField : NewcomerMode::Population;
  cfg.dqn = p.dqn;
  cfg.dqn.total_steps = p.total_steps;
  cfg.dqn.eval_period = p.eval_period;
  cfg.dqn.eval_episodes = p.eval_episodes;
  cfg.dqn.buffer_size = p.kind == ExperimentKind::NewcomerMf ? static_cast<std::size_t>(rec.sweep_value) : p.buffer_size;
  cfg.population_size = p.kind == ExperimentKind::NewcomerPop ? static_cast<int>(rec.sweep_value) : 1;
  cfg.episode_length = p.episode_length;
  cfg.eval = {p.eval_episodes, p.episode_length};
  cfg.seed = rec.seed;
  auto res = train_newcomer(g, eq, cfg);
  newcomer_table(res.rows).save(rec.csv_path);
  save_weights(res.network, (dir / (name + ".weights.bin")).string(), (dir / (name + ".weights.json")).string());
  rec.conservation_warnings = res.conservation_warnings;
  for (const auto& r : res.rows) {
    rec.index.push_back(r.step);
    rec.series["W_pi"].push_back(r.w_pi);
    rec.series["value_gap"].push_back(r.value_gap);
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentPlan& plan) {
  plan.validate();
  fs::create_directories(fs::path(plan.out_dir) / "runs");

  GameConfig game;
  MeanField eq;
  if (!plan.sne_path.empty()) {
    auto f = load_sne(plan.sne_path);
    game = f.game;
    eq = f.result.mean_field;
  } else {
    game = load_game(plan.game_path);
    auto sne = solve_sne(game);
    save_sne((fs::path(plan.out_dir) / "sne.json").string(), game, sne);
    eq = sne.mean_field;
  }

  ExperimentResult result;
  result.index_name = plan.kind == ExperimentKind::FpDqn ? "iteration" : "step";
  for (long long v : plan.sweep)
    for (auto s : plan.seeds) {
      RunRecord r;
      r.sweep_value = v;
      r.seed = s;
      result.runs.push_back(r);
    }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < result.runs.size(); i = next++) {
      auto& rec = result.runs[i];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        run_one(plan, game, eq, rec);
        rec.ok = true;
      } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  };
  const int workers = std::min<int>(worker_budget(plan.max_workers), static_cast<int>(result.runs.size()));
  {
    std::vector<std::jthread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }

  result.aggregates = aggregate_runs(result.runs);
  for (const auto& [metric, rows] : result.aggregates) {
    CsvTable csv({"sweep_value", result.index_name, "mean", "ci_low", "ci_high"});
    for (const auto& r : rows)
      csv.row({CsvTable::cell(r.sweep_value), CsvTable::cell(r.index), CsvTable::cell(r.mean),
               CsvTable::cell(r.ci_low), CsvTable::cell(r.ci_high)});
    csv.save((fs::path(plan.out_dir) / ("aggregate_" + metric + ".csv")).string());
  }

  nlohmann::json manifest{{"plan", plan_to_json(plan)}, {"runs", nlohmann::json::array()}};
  for (const auto& r : result.runs)
    manifest["runs"].push_back({{"sweep_value", r.sweep_value},
                                {"seed", r.seed},
                                {"csv", r.csv_path},
                                {"ok", r.ok},
                                {"error", r.error},
                                {"conservation_warnings", r.conservation_warnings},
                                {"seconds", r.seconds}});
  write_json((fs::path(plan.out_dir) / "manifest.json").string(), manifest);
  return result;
}

}  // namespace karma
