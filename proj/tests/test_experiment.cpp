#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "karma/experiment.hpp"
#include "karma/sne.hpp"
#include "test_util.hpp"

using namespace karma;
using namespace karma::testing;
namespace fs = std::filesystem;

namespace {

const std::string& reduced_sne_path() {
  static const std::string path = [] {
    const auto g = load_game(data_path("instance-reduced.json"));
    const auto p = (fs::temp_directory_path() / "karma_exp_test" / "sne.json").string();
    save_sne(p, g, solve_sne(g));
    return p;
  }();
  return path;
}

ExperimentPlan tiny_plan(ExperimentKind kind, const std::string& out) {
  ExperimentPlan p;
  p.kind = kind;
  p.sne_path = reduced_sne_path();
  p.sweep = {200};
  p.seeds = {1};
  p.out_dir = (fs::temp_directory_path() / "karma_exp_test" / out).string();
  fs::remove_all(p.out_dir);
  p.total_steps = 900;
  p.eval_period = 100;
  p.eval_episodes = 2;
  p.episode_length = 100;
  p.buffer_size = 500;
  p.dqn.batch_size = 16;
  p.dqn.warmup_steps = 16;
  p.dqn.hidden = {16};
  p.dqn.total_steps = 900;
  p.dqn.epsilon.horizon = 900;
  p.fp.outer_iters = 2;
  p.fp.episodes_per_iter = 1;
  p.fp.episode_length = 50;
  p.fp.dqn = p.dqn;
  p.max_workers = 2;
  return p;
}

std::size_t line_count(const std::string& text) { return std::count(text.begin(), text.end(), '\n'); }

}  // namespace

TEST_CASE("one seed, one sweep value, ten eval points") {
  const auto plan = tiny_plan(ExperimentKind::NewcomerMf, "rows");
  const auto res = run_experiment(plan);
  REQUIRE(res.runs.size() == 1);
  REQUIRE(res.runs[0].ok);
  const auto text = read_text(res.runs[0].csv_path);
  CHECK(text.rfind("step,W_pi,value_gap,value_gap_ci\n0,", 0) == 0);
  CHECK(line_count(text) == 1 + 10);
  CHECK(res.index_name == "step");
  CHECK(res.curve("W_pi", 200).size() == 10);
  CHECK(res.curve("value_gap", 200).back().index == 900);

  const auto agg = read_text(plan.out_dir + "/aggregate_W_pi.csv");
  CHECK(agg.rfind("sweep_value,step,mean,ci_low,ci_high\n200,0,", 0) == 0);
  CHECK(line_count(agg) == 11);
  CHECK(fs::exists(plan.out_dir + "/manifest.json"));
  CHECK(fs::exists(plan.out_dir + "/runs/newcomer-mf_buffer200_seed1.weights.bin"));
}

TEST_CASE("aggregate of identical runs") {
  RunRecord r;
  r.ok = true;
  r.sweep_value = 5;
  r.index = {0, 10, 20};
  r.series["W_pi"] = {2.0, 1.5, 0.25};
  const auto agg = aggregate_runs({r, r, r});
  const auto& rows = agg.at("W_pi");
  REQUIRE(rows.size() == 3);
  for (int t = 0; t < 3; ++t) {
    CHECK(rows[t].mean == r.series["W_pi"][t]);
    CHECK(rows[t].ci_low == rows[t].mean);
    CHECK(rows[t].ci_high == rows[t].mean);
    CHECK(rows[t].runs == 3);
    CHECK(rows[t].index == r.index[t]);
  }

  RunRecord a = r, b = r, failed = r;
  a.series["W_pi"] = {1.0, 1.0, 1.0};
  b.series["W_pi"] = {3.0, 2.0, 1.0};
  failed.ok = false;
  failed.series["W_pi"] = {100.0, 100.0, 100.0};
  const auto two = aggregate_runs({a, b, failed}).at("W_pi");
  CHECK(two[0].mean == 2.0);
  CHECK(two[0].runs == 2);
  // sample std of {1, 3} is sqrt(2)
  CHECK(std::abs((two[0].ci_high - two[0].mean) - 1.96 * std::sqrt(2.0) / std::sqrt(2.0)) <= 1e-12);
}

TEST_CASE("worker budget honours the thread cap") {
  ::unsetenv("KARMA_MFG_THREADS");
  CHECK(worker_budget(3) == 3);
  CHECK(worker_budget(0) >= 1);
  ::setenv("KARMA_MFG_THREADS", "2", 1);
  CHECK(worker_budget(8) == 2);
  CHECK(worker_budget(1) == 1);
  ::setenv("KARMA_MFG_THREADS", "junk", 1);
  CHECK(worker_budget(4) == 4);
  ::unsetenv("KARMA_MFG_THREADS");
}

TEST_CASE("failed runs are recorded and the rest proceed") {
  auto plan = tiny_plan(ExperimentKind::NewcomerPop, "failing");
  plan.sweep = {20, 30};
  // A directory where the CSV should go makes that one run fail.
  fs::create_directories(plan.out_dir + "/runs/newcomer-pop_pop30_seed1.csv");
  const auto res = run_experiment(plan);
  REQUIRE(res.runs.size() == 2);
  CHECK(res.runs[0].ok);
  CHECK_FALSE(res.runs[1].ok);
  CHECK_FALSE(res.runs[1].error.empty());
  CHECK(res.curve("W_pi", 20).size() == 10);
  CHECK(res.curve("W_pi", 30).empty());
  const auto manifest = read_json(plan.out_dir + "/manifest.json");
  CHECK(manifest["runs"][1]["ok"] == false);
}

TEST_CASE("experiment outputs are reproducible") {
  for (auto kind : {ExperimentKind::NewcomerPop, ExperimentKind::FpDqn}) {
    auto a = tiny_plan(kind, "det_a");
    auto b = tiny_plan(kind, "det_b");
    a.seeds = b.seeds = {1, 2};
    ::setenv("KARMA_MFG_THREADS", "1", 1);
    const auto ra = run_experiment(a);
    ::unsetenv("KARMA_MFG_THREADS");
    const auto rb = run_experiment(b);
    REQUIRE(ra.runs.size() == rb.runs.size());
    for (std::size_t i = 0; i < ra.runs.size(); ++i) {
      REQUIRE(ra.runs[i].ok);
      CHECK(read_text(ra.runs[i].csv_path) == read_text(rb.runs[i].csv_path));
    }
    for (const auto& [metric, _] : ra.aggregates)
      CHECK(read_text(a.out_dir + "/aggregate_" + metric + ".csv") ==
            read_text(b.out_dir + "/aggregate_" + metric + ".csv"));
  }
}

TEST_CASE("plan json") {
  auto plan = tiny_plan(ExperimentKind::FpDqn, "json");
  const auto back = plan_from_json(plan_to_json(plan));
  CHECK(plan_to_json(back) == plan_to_json(plan));
  nlohmann::json bad{{"kind", "newcomer-mf"}, {"sne", "x"}, {"sweep", nlohmann::json::array()}, {"seeds", {1}}};
  CHECK_THROWS_AS(plan_from_json(bad), ContractError);
  bad["kind"] = "other";
  CHECK_THROWS_AS(plan_from_json(bad), ContractError);
}
