#include "karma/qnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace karma {

QNetwork::QNetwork(std::vector<int> dims) : dims_(std::move(dims)) {
  if (dims_.size() < 2) throw ContractError("network needs at least an input and an output layer");
  std::size_t off = 0;
  for (int l = 0; l + 1 < static_cast<int>(dims_.size()); ++l) {
    if (dims_[l] <= 0 || dims_[l + 1] <= 0) throw ContractError("layer widths must be positive");
    offsets_.push_back(off);
    off += static_cast<std::size_t>(dims_[l]) * dims_[l + 1] + dims_[l + 1];
  }
  params_.assign(off, 0.0);
}

QNetwork QNetwork::for_game(const GameConfig& g, const std::vector<int>& hidden) {
  std::vector<int> dims{g.num_urgency() + 1};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(g.num_bids());
  return QNetwork(std::move(dims));
}

void QNetwork::init_glorot(Rng& rng) {
  for (int l = 0; l < num_layers(); ++l) {
    const double limit = std::sqrt(6.0 / (dims_[l] + dims_[l + 1]));
    std::uniform_real_distribution<double> dist(-limit, limit);
    double* w = params_.data() + weight_offset(l);
    const std::size_t n = static_cast<std::size_t>(dims_[l]) * dims_[l + 1];
    for (std::size_t i = 0; i < n; ++i) w[i] = dist(rng);
    std::fill_n(params_.data() + bias_offset(l), dims_[l + 1], 0.0);
  }
}

Eigen::VectorXd QNetwork::forward(std::span<const double> features) const {
  if (static_cast<int>(features.size()) != input_dim()) throw ContractError("feature length mismatch");
  Eigen::MatrixXd in = Eigen::Map<const Eigen::VectorXd>(features.data(), input_dim());
  return forward_batch(in).col(0);
}

Eigen::MatrixXd QNetwork::forward_batch(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != input_dim()) throw ContractError("feature length mismatch");
  Eigen::MatrixXd h = inputs;
  for (int l = 0; l < num_layers(); ++l) {
    Eigen::Map<const Eigen::MatrixXd> w(params_.data() + weight_offset(l), dims_[l + 1], dims_[l]);
    Eigen::Map<const Eigen::VectorXd> b(params_.data() + bias_offset(l), dims_[l + 1]);
    Eigen::MatrixXd z = w * h;
    z.colwise() += b;
    if (l + 1 < num_layers()) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

double QNetwork::loss_and_gradient(const Eigen::MatrixXd& inputs, std::span<const int> actions,
                                   std::span<const double> targets, std::span<double> grad) const {
  const Eigen::Index n = inputs.cols();
  if (static_cast<Eigen::Index>(actions.size()) != n || static_cast<Eigen::Index>(targets.size()) != n)
    throw ContractError("batch arrays disagree in length");
  if (grad.size() != params_.size()) throw ContractError("gradient buffer has the wrong size");

  // Forward pass keeping every post-activation.
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(num_layers() + 1);
  acts.push_back(inputs);
  for (int l = 0; l < num_layers(); ++l) {
    Eigen::Map<const Eigen::MatrixXd> w(params_.data() + weight_offset(l), dims_[l + 1], dims_[l]);
    Eigen::Map<const Eigen::VectorXd> b(params_.data() + bias_offset(l), dims_[l + 1]);
    Eigen::MatrixXd z = w * acts.back();
    z.colwise() += b;
    if (l + 1 < num_layers()) z = z.cwiseMax(0.0);
    acts.push_back(std::move(z));
  }

  const Eigen::MatrixXd& out = acts.back();
  Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(output_dim(), n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int a = actions[i];
    if (a < 0 || a >= output_dim()) throw ContractError("action index out of range");
    const double err = out(a, i) - targets[i];
    loss += err * err;
    delta(a, i) = 2.0 * err / static_cast<double>(n);
  }
  loss /= static_cast<double>(n);

  for (int l = num_layers() - 1; l >= 0; --l) {
    Eigen::Map<const Eigen::MatrixXd> w(params_.data() + weight_offset(l), dims_[l + 1], dims_[l]);
    Eigen::Map<Eigen::MatrixXd> gw(grad.data() + weight_offset(l), dims_[l + 1], dims_[l]);
    Eigen::Map<Eigen::VectorXd> gb(grad.data() + bias_offset(l), dims_[l + 1]);
    gw.noalias() = delta * acts[l].transpose();
    gb = delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd back = w.transpose() * delta;
      delta = back.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
    }
  }
  return loss;
}

bool QNetwork::all_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

Rmsprop::Rmsprop(std::size_t n, double learning_rate, double decay, double epsilon)
    : lr_(learning_rate), decay_(decay), eps_(epsilon), sq_(n, 0.0) {}

void Rmsprop::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != sq_.size() || grad.size() != sq_.size())
    throw ContractError("optimizer state does not match parameter count");
  for (std::size_t i = 0; i < sq_.size(); ++i) {
    sq_[i] = decay_ * sq_[i] + (1.0 - decay_) * grad[i] * grad[i];
    params[i] -= lr_ * grad[i] / (std::sqrt(sq_[i]) + eps_);
  }
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ContractError("replay buffer capacity must be positive");
}

void ReplayBuffer::push(const Transition& t) {
  if (data_.size() < capacity_) {
    data_.push_back(t);
  } else {
    data_[cursor_] = t;
  }
  cursor_ = (cursor_ + 1) % capacity_;
}

void ReplayBuffer::clear() {
  data_.clear();
  cursor_ = 0;
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Rng& rng) const {
  if (data_.empty()) throw ContractError("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

double EpsilonSchedule::value(long long t) const {
  if (t <= 0) return eps0;
  const double log_g = std::log(eps_min / eps0) / static_cast<double>(horizon);
  return std::max(eps_min, eps0 * std::exp(log_g * static_cast<double>(t)));
}

void DqnConfig::validate() const {
  if (buffer_size == 0 || batch_size <= 0 || target_sync_period <= 0 || total_steps <= 0 || eval_period <= 0 ||
      eval_episodes <= 0 || warmup_steps <= 0 || epsilon.horizon <= 0)
    throw ContractError("DQN counts must be positive");
  if (static_cast<std::size_t>(batch_size) > buffer_size) throw ContractError("batch_size exceeds buffer_size");
  if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
  if (!(discount >= 0.0 && discount < 1.0)) throw ContractError("discount must lie in [0, 1)");
}

DqnConfig dqn_config_from_json(const nlohmann::json& j, DqnConfig c) {
  c.buffer_size = j.value("buffer_size", c.buffer_size);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.target_sync_period = j.value("target_sync_period", c.target_sync_period);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.discount = j.value("discount", c.discount);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.eval_period = j.value("eval_period", c.eval_period);
  c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  c.rms_decay = j.value("rms_decay", c.rms_decay);
  c.rms_epsilon = j.value("rms_epsilon", c.rms_epsilon);
  c.epsilon.eps0 = j.value("epsilon_initial", c.epsilon.eps0);
  c.epsilon.eps_min = j.value("epsilon_min", c.epsilon.eps_min);
  c.epsilon.horizon = j.value("epsilon_horizon", c.epsilon.horizon);
  c.hidden = j.value("hidden", c.hidden);
  return c;
}

nlohmann::json dqn_config_to_json(const DqnConfig& c) {
  return {{"buffer_size", c.buffer_size},       {"batch_size", c.batch_size},
          {"target_sync_period", c.target_sync_period}, {"total_steps", c.total_steps},
          {"learning_rate", c.learning_rate},   {"discount", c.discount},
          {"warmup_steps", c.warmup_steps},     {"eval_period", c.eval_period},
          {"eval_episodes", c.eval_episodes},   {"rms_decay", c.rms_decay},
          {"rms_epsilon", c.rms_epsilon},       {"epsilon_initial", c.epsilon.eps0},
          {"epsilon_min", c.epsilon.eps_min},   {"epsilon_horizon", c.epsilon.horizon},
          {"hidden", c.hidden}};
}

std::vector<double> encode_state(AgentState s, const GameConfig& g) {
  std::vector<double> f(g.num_urgency() + 1, 0.0);
  f.at(s.urgency) = 1.0;
  f.back() = static_cast<double>(s.karma) / g.karma_cap;
  return f;
}

Eigen::MatrixXd encode_states(std::span<const AgentState> states, const GameConfig& g) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(g.num_urgency() + 1, static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) {
    m(states[i].urgency, static_cast<Eigen::Index>(i)) = 1.0;
    m(g.num_urgency(), static_cast<Eigen::Index>(i)) = static_cast<double>(states[i].karma) / g.karma_cap;
  }
  return m;
}

int masked_greedy(std::span<const double> q, int karma) {
  if (karma < 0 || karma >= static_cast<int>(q.size())) throw ContractError("karma out of range for Q vector");
  int best = 0;
  for (int a = 1; a <= karma; ++a)
    if (q[a] > q[best]) best = a;
  return best;
}

int epsilon_greedy(std::span<const double> q, int karma, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ContractError("epsilon must lie in [0, 1]");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < epsilon) {
    std::uniform_int_distribution<int> pick(0, karma);
    return pick(rng);
  }
  return masked_greedy(q, karma);
}

std::vector<double> double_dqn_targets(const Batch& batch, const QNetwork& online, const QNetwork& target,
                                       double discount, const GameConfig& g) {
  const std::size_t n = batch.next_states.size();
  std::vector<double> y(n);
  if (discount == 0.0) {
    std::copy(batch.rewards.begin(), batch.rewards.end(), y.begin());
    return y;
  }
  Eigen::MatrixXd next = encode_states(batch.next_states, g);
  Eigen::MatrixXd q_online = online.forward_batch(next);
  Eigen::MatrixXd q_target = target.forward_batch(next);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Index c = static_cast<Eigen::Index>(i);
    const int a = masked_greedy({q_online.col(c).data(), static_cast<std::size_t>(q_online.rows())},
                                batch.next_states[i].karma);
    y[i] = batch.rewards[i] + discount * q_target(a, c);
  }
  return y;
}

std::vector<int> greedy_bid_table(const QNetwork& net, const GameConfig& g) {
  std::vector<AgentState> all;
  all.reserve(g.num_states());
  for (int x = 0; x < g.num_states(); ++x) all.push_back(g.state_at(x));
  Eigen::MatrixXd q = net.forward_batch(encode_states(all, g));
  std::vector<int> bids(g.num_states());
  for (int x = 0; x < g.num_states(); ++x)
    bids[x] = masked_greedy({q.col(x).data(), static_cast<std::size_t>(q.rows())}, all[x].karma);
  return bids;
}

Policy extract_greedy_policy(const QNetwork& net, const GameConfig& g) {
  auto bids = greedy_bid_table(net, g);
  return Policy::deterministic(g, bids);
}

DqnAgent::DqnAgent(const GameConfig& g, const DqnConfig& cfg, std::uint64_t seed)
    : game_(g), cfg_(cfg), rng_(seed), buffer_(cfg.buffer_size) {
  cfg_.validate();
  std::vector<AgentState> all;
  for (int x = 0; x < g.num_states(); ++x) all.push_back(g.state_at(x));
  feature_table_ = encode_states(all, g);
  reinitialize(true);
}

void DqnAgent::reinitialize(bool clear_buffer) {
  online_ = QNetwork::for_game(game_, cfg_.hidden);
  online_.init_glorot(rng_);
  target_ = online_;
  opt_ = Rmsprop(online_.param_count(), cfg_.learning_rate, cfg_.rms_decay, cfg_.rms_epsilon);
  grad_.assign(online_.param_count(), 0.0);
  if (clear_buffer) buffer_.clear();
  env_steps_ = 0;
  grad_steps_ = 0;
}

int DqnAgent::act(AgentState s) {
  const double eps = epsilon();
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng_) < eps) {
    std::uniform_int_distribution<int> pick(0, s.karma);
    return pick(rng_);
  }
  Eigen::VectorXd q = online_.forward_batch(feature_table_.col(game_.state_index(s))).col(0);
  return masked_greedy({q.data(), static_cast<std::size_t>(q.size())}, s.karma);
}

double DqnAgent::observe(const Transition& t) {
  buffer_.push(t);
  ++env_steps_;
  if (static_cast<long long>(buffer_.size()) < std::max<long long>(cfg_.warmup_steps, cfg_.batch_size)) return -1.0;
  return train_step(sample_batch());
}

Batch DqnAgent::sample_batch() {
  Batch b;
  auto idx = buffer_.sample_indices(static_cast<std::size_t>(cfg_.batch_size), rng_);
  b.states.reserve(idx.size());
  for (auto i : idx) {
    const auto& t = buffer_.at(i);
    b.states.push_back(t.state);
    b.actions.push_back(t.action);
    b.rewards.push_back(t.reward);
    b.next_states.push_back(t.next_state);
  }
  return b;
}

double DqnAgent::regression_step(const Batch& batch, std::span<const double> targets) {
  Eigen::MatrixXd inputs = encode_states(batch.states, game_);
  const double loss = online_.loss_and_gradient(inputs, batch.actions, targets, grad_);
  opt_.step(online_.params(), grad_);
  if (!online_.all_finite()) throw std::runtime_error("non-finite network weights after an update");
  return loss;
}

double DqnAgent::train_step(const Batch& batch) {
  auto y = double_dqn_targets(batch, online_, target_, cfg_.discount, game_);
  const double loss = regression_step(batch, y);
  ++grad_steps_;
  if (grad_steps_ % cfg_.target_sync_period == 0) sync_target();
  return loss;
}

void DqnAgent::sync_target() { target_ = online_; }

namespace {

template <class T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(value);
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class T>
T get_le(std::istream& in) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw std::runtime_error("truncated weights file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

constexpr char kMagic[4] = {'K', 'Q', 'N', 'W'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_weights(const QNetwork& net, const std::string& bin_path, const std::string& manifest_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + bin_path);
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.dims().size()));
  for (int d : net.dims()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double p : net.params()) put_le<double>(out, p);
  if (!manifest_path.empty()) {
    std::ofstream m(manifest_path);
    nlohmann::json j = {{"format", "karma-qnet-f64le"},
                        {"version", kVersion},
                        {"dims", net.dims()},
                        {"activation", "relu"},
                        {"param_count", net.param_count()},
                        {"weights", std::filesystem::path(bin_path).filename().string()}};
    m << j.dump(2) << "\n";
  }
}

QNetwork load_weights(const std::string& bin_path) {
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + bin_path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not a weights file");
  if (get_le<std::uint32_t>(in) != kVersion) throw std::runtime_error("unsupported weights version");
  const auto nd = get_le<std::uint32_t>(in);
  std::vector<int> dims(nd);
  for (auto& d : dims) d = static_cast<int>(get_le<std::uint32_t>(in));
  QNetwork net(dims);
  for (double& p : net.params()) p = get_le<double>(in);
  return net;
}

}  // namespace karma
