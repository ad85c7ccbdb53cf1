#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "karma/env.hpp"
#include "karma/io.hpp"
#include "karma/qnet.hpp"
#include "test_util.hpp"

using namespace karma;
using namespace karma::testing;

namespace {

// Straightforward dense evaluation used as the forward-pass oracle.
std::vector<double> naive_forward(const QNetwork& net, std::vector<double> x) {
  const auto& d = net.dims();
  std::size_t off = 0;
  for (int l = 0; l + 1 < static_cast<int>(d.size()); ++l) {
    const int in = d[l], out = d[l + 1];
    std::vector<double> y(out, 0.0);
    for (int o = 0; o < out; ++o) {
      double s = 0.0;
      for (int i = 0; i < in; ++i) s += net.params()[off + static_cast<std::size_t>(i) * out + o] * x[i];
      s += net.params()[off + static_cast<std::size_t>(in) * out + o];
      y[o] = (l + 2 < static_cast<int>(d.size())) ? std::max(0.0, s) : s;
    }
    off += static_cast<std::size_t>(in) * out + out;
    x = y;
  }
  return x;
}

// Network whose output is the given bias whatever the input.
QNetwork constant_net(const GameConfig& g, const std::vector<double>& out) {
  auto net = QNetwork::for_game(g, {4});
  for (double& p : net.params()) p = 0.0;
  auto params = net.params();
  std::copy(out.begin(), out.end(), params.end() - static_cast<long>(out.size()));
  return net;
}

}  // namespace

TEST_CASE("state encoding") {
  const auto g2 = two_urgency_game(40, 10);
  CHECK(encode_state({0, 0}, g2) == std::vector<double>{1, 0, 0.0});
  CHECK(encode_state({1, 40}, g2) == std::vector<double>{0, 1, 1.0});
  auto g3 = load_game(data_path("instance-3u.json"));
  CHECK(encode_state({2, 10}, g3) == std::vector<double>{0, 0, 1, 0.25});
  const std::vector<AgentState> states{{0, 3}, {1, 7}};
  const auto m = encode_states(states, g2);
  CHECK(m.cols() == 2);
  CHECK(m(1, 1) == 1.0);
  CHECK(m(2, 1) == doctest::Approx(7.0 / 40));
}

TEST_CASE("network shape and forward pass") {
  const auto g = load_game(data_path("instance-2u.json"));
  auto net = QNetwork::for_game(g);
  CHECK(net.dims() == std::vector<int>{3, 64, 64, 41});

  SUBCASE("zero weights give zero outputs") {
    const auto q = net.forward(encode_state({1, 17}, g));
    CHECK(q.size() == 41);
    for (int i = 0; i < q.size(); ++i) CHECK(q(i) == 0.0);
  }
  SUBCASE("hand-computed 2-2-2 network") {
    QNetwork tiny({2, 2, 2});
    auto p = tiny.params();
    // W1 = [[1, 0], [0, -1]] (column-major), b1 = (0.5, 0), W2 = [[2, 0], [1, 1]], b2 = (0, -1).
    const double vals[] = {1, 0, 0, -1, 0.5, 0, 2, 1, 0, 1, 0, -1};
    std::copy(std::begin(vals), std::end(vals), p.begin());
    const std::vector<double> x{1.0, 1.0};
    // h = relu((1 + 0.5, -1)) = (1.5, 0); out = (2 * 1.5 + 0, 1 * 1.5 + 0 - 1) = (3, 0.5).
    const auto q = tiny.forward(x);
    CHECK(q(0) == 3.0);
    CHECK(q(1) == 0.5);
  }
  SUBCASE("random weights match the naive evaluation") {
    Rng rng(7);
    net.init_glorot(rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 20; ++t) {
      const std::vector<double> x{u(rng), u(rng), u(rng)};
      const auto q = net.forward(x);
      const auto ref = naive_forward(net, x);
      for (int i = 0; i < 41; ++i) CHECK(std::abs(q(i) - ref[i]) < 1e-12);
    }
  }
}

TEST_CASE("glorot initialisation bounds") {
  const auto g = load_game(data_path("instance-reduced.json"));
  auto net = QNetwork::for_game(g);
  Rng rng(1);
  net.init_glorot(rng);
  const auto& d = net.dims();
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < d.size(); ++l) {
    const double lim = std::sqrt(6.0 / (d[l] + d[l + 1]));
    const std::size_t nw = static_cast<std::size_t>(d[l]) * d[l + 1];
    for (std::size_t i = 0; i < nw; ++i) CHECK(std::abs(net.params()[off + i]) <= lim);
    for (int b = 0; b < d[l + 1]; ++b) CHECK(net.params()[off + nw + b] == 0.0);
    off += nw + d[l + 1];
  }
  CHECK(net.all_finite());
}

TEST_CASE("masked greedy") {
  const std::vector<double> q{1, 5, 3};
  CHECK(masked_greedy(q, 0) == 0);
  CHECK(masked_greedy(q, 2) == 1);
  const std::vector<double> q2{1, 9, 3};
  CHECK(masked_greedy(q2, 1) == 1);
  const std::vector<double> tie{2, 2, 2};
  CHECK(masked_greedy(tie, 2) == 0);
}

TEST_CASE("epsilon greedy") {
  const std::vector<double> q{1, 5, 3, 0, 9};
  Rng rng(3);
  for (int t = 0; t < 100; ++t) CHECK(epsilon_greedy(q, 3, 0.0, rng) == 1);
  for (int t = 0; t < 100; ++t) CHECK(epsilon_greedy(q, 0, 0.5, rng) == 0);
  std::vector<long long> counts(4, 0);
  for (int t = 0; t < 100000; ++t) ++counts[epsilon_greedy(q, 3, 1.0, rng)];
  CHECK(chi_square_ok(counts, {0.25, 0.25, 0.25, 0.25}));
}

TEST_CASE("epsilon schedule") {
  EpsilonSchedule s;
  CHECK(s.value(0) == 1.0);
  CHECK(std::abs(s.value(1'000'000) - 0.01) < 1e-6);
  CHECK(s.value(5'000'000) == 0.01);
  double prev = 2.0;
  for (long long t = 0; t <= 1'200'000; t += 997) {
    CHECK(s.value(t) <= prev);
    prev = s.value(t);
  }
}

TEST_CASE("double DQN targets") {
  auto g = two_urgency_game(2, 1, 0.98);
  // Online prefers bid 1 among feasible bids; target holds the values.
  const auto online = constant_net(g, {0, 5, 1});
  const auto target = constant_net(g, {7, 2, 9});
  Batch b;
  b.states = {{0, 2}, {1, 1}, {0, 0}};
  b.actions = {0, 1, 0};
  b.rewards = {1.0, 0.5, 2.0};
  b.next_states = {{0, 2}, {1, 1}, {0, 0}};
  const auto y = double_dqn_targets(b, online, target, 0.98, g);
  CHECK(y[0] == doctest::Approx(1.0 + 0.98 * 2.0).epsilon(1e-15));
  CHECK(y[0] == doctest::Approx(2.96).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.5 + 0.98 * 2.0).epsilon(1e-15));
  CHECK(y[2] == doctest::Approx(2.0 + 0.98 * 7.0).epsilon(1e-15));  // only bid 0 feasible

  const auto myopic = double_dqn_targets(b, online, target, 0.0, g);
  CHECK(myopic == b.rewards);

  // Identical networks reduce to the vanilla masked max.
  const auto same = double_dqn_targets(b, target, target, 0.98, g);
  CHECK(same[0] == doctest::Approx(1.0 + 0.98 * 9.0).epsilon(1e-15));
  CHECK(same[1] == doctest::Approx(0.5 + 0.98 * 7.0).epsilon(1e-15));
}

TEST_CASE("loss gradient matches central differences") {
  const auto g = load_game(data_path("instance-reduced.json"));
  Rng rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick_state(0, g.num_states() - 1);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto net = QNetwork::for_game(g, {16, 16});
    net.init_glorot(rng);
    // Nonzero biases so that every layer's parameters are exercised.
    for (double& p : net.params()) p += 0.05 * (u(rng) - 0.5);
    std::vector<AgentState> states;
    std::vector<int> actions;
    std::vector<double> targets;
    for (int i = 0; i < 6; ++i) {
      const auto s = g.state_at(pick_state(rng));
      states.push_back(s);
      actions.push_back(std::uniform_int_distribution<int>(0, s.karma)(rng));
      targets.push_back(4.0 * u(rng));
    }
    const auto X = encode_states(states, g);
    std::vector<double> grad(net.param_count());
    net.loss_and_gradient(X, actions, targets, grad);
    std::vector<double> scratch(net.param_count());
    const double h = 1e-5;
    for (std::size_t i = 0; i < net.param_count(); ++i) {
      const double keep = net.params()[i];
      net.params()[i] = keep + h;
      const double lp = net.loss_and_gradient(X, actions, targets, scratch);
      net.params()[i] = keep - h;
      const double lm = net.loss_and_gradient(X, actions, targets, scratch);
      net.params()[i] = keep;
      const double fd = (lp - lm) / (2 * h);
      const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-4});
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("regression steps") {
  const auto g = load_game(data_path("instance-reduced.json"));
  DqnConfig cfg;
  cfg.buffer_size = 1000;
  cfg.learning_rate = 1e-3;
  DqnAgent agent(g, cfg, 5);
  Batch b;
  b.states = {{1, 4}};
  b.actions = {2};
  b.rewards = {0.0};
  b.next_states = {{1, 4}};

  SUBCASE("targets equal to predictions leave the weights unchanged") {
    const auto q = agent.online().forward(encode_state({1, 4}, g));
    const std::vector<double> y{q(2)};
    const auto before = agent.online();
    const double loss = agent.regression_step(b, y);
    CHECK(loss == 0.0);
    CHECK(agent.online() == before);
  }
  SUBCASE("a repeated transition is fitted") {
    const std::vector<double> y{3.0};
    for (int i = 0; i < 4000; ++i) agent.regression_step(b, y);
    const auto q = agent.online().forward(encode_state({1, 4}, g));
    CHECK(std::abs(q(2) - 3.0) < 1e-3);
  }
}

TEST_CASE("rmsprop update rule") {
  Rmsprop opt(2, 0.1, 0.9, 1e-8);
  std::vector<double> p{1.0, -1.0};
  const std::vector<double> gr{2.0, 0.0};
  opt.step(p, gr);
  const double s0 = 0.1 * 4.0;
  CHECK(opt.accumulators()[0] == doctest::Approx(s0));
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 2.0 / (std::sqrt(s0) + 1e-8)));
  CHECK(p[1] == -1.0);
  for (double a : opt.accumulators()) CHECK(a >= 0.0);
}

TEST_CASE("replay buffer") {
  ReplayBuffer buf(5);
  for (int i = 0; i < 8; ++i) buf.push({{0, i}, 0, static_cast<double>(i), {0, i}});
  CHECK(buf.size() == 5);
  std::vector<double> kept;
  for (std::size_t i = 0; i < buf.size(); ++i) kept.push_back(buf.at(i).reward);
  std::sort(kept.begin(), kept.end());
  CHECK(kept == std::vector<double>{3, 4, 5, 6, 7});

  ReplayBuffer big(100);
  for (int i = 0; i < 37; ++i) big.push({{0, 0}, 0, 0.0, {0, 0}});
  Rng rng(9);
  std::vector<long long> counts(37, 0);
  for (int t = 0; t < 2000; ++t)
    for (auto i : big.sample_indices(128, rng)) ++counts[i];
  CHECK(chi_square_ok(counts, std::vector<double>(37, 1.0 / 37)));
  big.clear();
  CHECK(big.size() == 0);
}

TEST_CASE("target network synchronisation") {
  const auto g = load_game(data_path("instance-reduced.json"));
  DqnConfig cfg;
  cfg.buffer_size = 2000;
  cfg.batch_size = 16;
  cfg.warmup_steps = 16;
  cfg.target_sync_period = 50;
  DqnAgent agent(g, cfg, 1);
  MeanField mf{point_karma_distribution(g, 4), Policy::uniform_feasible(g)};
  MeanFieldEnv env(g, mf, 2);
  auto s = env.reset(mf.mu);
  int syncs_seen = 0;
  for (int t = 0; t < 400; ++t) {
    const int a = agent.act(s);
    const auto r = env.step(a);
    agent.observe({s, a, r.reward, r.next});
    s = r.next;
    if (agent.gradient_steps() > 0 && agent.gradient_steps() % 50 == 0) {
      CHECK(agent.target() == agent.online());
      ++syncs_seen;
    } else if (agent.gradient_steps() % 50 > 1) {
      CHECK_FALSE(agent.target() == agent.online());
    }
  }
  CHECK(syncs_seen > 0);
  agent.sync_target();
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    const std::vector<double> x{u(rng), u(rng), u(rng)};
    CHECK(agent.online().forward(x) == agent.target().forward(x));
  }
}

TEST_CASE("greedy policy extraction") {
  const auto g = load_game(data_path("instance-reduced.json"));
  auto net = QNetwork::for_game(g);
  auto pi = extract_greedy_policy(net, g);
  for (int x = 0; x < g.num_states(); ++x) CHECK(pi(x, 0) == 1.0);

  Rng rng(12);
  net.init_glorot(rng);
  pi = extract_greedy_policy(net, g);
  CHECK_NOTHROW(pi.validate());
  for (int x = 0; x < g.num_states(); ++x) {
    const auto s = g.state_at(x);
    const auto q = net.forward(encode_state(s, g));
    int best = 0;
    for (int a = 1; a <= s.karma; ++a)
      if (q(a) > q(best)) best = a;
    CHECK(pi(x, best) == 1.0);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto g = load_game(data_path("instance-reduced.json"));
  DqnConfig cfg;
  cfg.buffer_size = 5000;
  cfg.batch_size = 32;
  auto run = [&] {
    DqnAgent agent(g, cfg, 77);
    MeanField mf{point_karma_distribution(g, 4), Policy::uniform_feasible(g)};
    MeanFieldEnv env(g, mf, 78);
    auto s = env.reset(mf.mu);
    for (int t = 0; t < 600; ++t) {
      const int a = agent.act(s);
      const auto r = env.step(a);
      agent.observe({s, a, r.reward, r.next});
      s = r.next;
    }
    return agent.online();
  };
  const auto a = run(), b = run();
  CHECK(a == b);
  CHECK(a.all_finite());
}

TEST_CASE("weights round trip") {
  const auto g = load_game(data_path("instance-reduced.json"));
  auto net = QNetwork::for_game(g);
  Rng rng(3);
  net.init_glorot(rng);
  const auto dir = std::filesystem::temp_directory_path() / "karma_qnet_test";
  std::filesystem::create_directories(dir);
  const auto bin = (dir / "w.bin").string(), man = (dir / "w.json").string();
  save_weights(net, bin, man);
  CHECK(load_weights(bin) == net);

  const auto bytes = read_text(bin);
  CHECK(bytes.substr(0, 4) == "KQNW");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version, little endian
  CHECK(static_cast<unsigned char>(bytes[8]) == 4);  // four layer dims
  CHECK(bytes.size() == 4 + 4 + 4 + 4 * 4 + 8 * net.param_count());
  const auto j = read_json(man);
  CHECK(j["param_count"] == net.param_count());
  CHECK(j["dims"] == net.dims());
  CHECK(j["weights"] == "w.bin");
  std::filesystem::remove_all(dir);
}

TEST_CASE("dqn config validation and json") {
  DqnConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.buffer_size = 64;
  CHECK_THROWS_AS(c.validate(), ContractError);  // batch larger than buffer
  DqnConfig d;
  d.learning_rate = 1e-3;
  d.epsilon.horizon = 1234;
  const auto back = dqn_config_from_json(dqn_config_to_json(d));
  CHECK(back.learning_rate == 1e-3);
  CHECK(back.epsilon.horizon == 1234);
}
