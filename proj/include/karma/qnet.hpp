#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "karma/game.hpp"

namespace karma {

using Rng = std::mt19937_64;

/// Eigen picks its vectorized kernels by address, so buffers that Eigen maps
/// must have a fixed alignment for results to be reproducible bit for bit.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

/// Fully connected network with ReLU hidden layers and a linear head.
/// Parameters live in one flat buffer: for each layer the weight matrix
/// (out x in, column-major) followed by its bias.
class QNetwork {
 public:
  QNetwork() = default;
  explicit QNetwork(std::vector<int> dims);

  /// |U| + 1 inputs, the given hidden widths, K + 1 outputs.
  static QNetwork for_game(const GameConfig& g, const std::vector<int>& hidden = {64, 64});

  /// Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases.
  void init_glorot(Rng& rng);

  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  int num_layers() const { return static_cast<int>(dims_.size()) - 1; }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  Eigen::VectorXd forward(std::span<const double> features) const;
  /// Columns of `inputs` are samples.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs) const;

  /// Mean over the batch of (Q(x_i, a_i) - y_i)^2 and its gradient with
  /// respect to every parameter (written into `grad`, sized param_count()).
  double loss_and_gradient(const Eigen::MatrixXd& inputs, std::span<const int> actions,
                           std::span<const double> targets, std::span<double> grad) const;

  bool all_finite() const;

  friend bool operator==(const QNetwork&, const QNetwork&) = default;

 private:
  std::size_t weight_offset(int layer) const { return offsets_[layer]; }
  std::size_t bias_offset(int layer) const {
    return offsets_[layer] + static_cast<std::size_t>(dims_[layer]) * dims_[layer + 1];
  }

  std::vector<int> dims_;
  std::vector<std::size_t> offsets_;
  AlignedVector params_;
};

class Rmsprop {
 public:
  Rmsprop() = default;
  Rmsprop(std::size_t n, double learning_rate, double decay = 0.99, double epsilon = 1e-8);

  void step(std::span<double> params, std::span<const double> grad);
  std::span<const double> accumulators() const { return sq_; }
  double learning_rate() const { return lr_; }

 private:
  double lr_ = 3e-4;
  double decay_ = 0.99;
  double eps_ = 1e-8;
  std::vector<double> sq_;
};

struct Transition {
  AgentState state;
  int action = 0;
  double reward = 0.0;
  AgentState next_state;
};

/// Fixed-capacity FIFO ring of transitions with uniform sampling.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(const Transition& t);
  void clear();
  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return data_[i]; }
  /// Indices drawn uniformly with replacement from [0, size()).
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::size_t cursor_ = 0;
  std::vector<Transition> data_;
};

/// eps_t = max(eps_min, eps0 * g^t), g = (eps_min / eps0)^(1 / horizon).
struct EpsilonSchedule {
  double eps0 = 1.0;
  double eps_min = 0.01;
  long long horizon = 1'000'000;

  double value(long long t) const;
};

struct DqnConfig {
  std::size_t buffer_size = 1'000'000;
  int batch_size = 128;
  int target_sync_period = 1000;
  long long total_steps = 1'000'000;
  double learning_rate = 3e-4;
  double discount = 0.98;
  long long warmup_steps = 128;
  long long eval_period = 10'000;
  int eval_episodes = 10;
  double rms_decay = 0.99;
  double rms_epsilon = 1e-8;
  EpsilonSchedule epsilon;
  std::vector<int> hidden = {64, 64};

  void validate() const;
};

DqnConfig dqn_config_from_json(const nlohmann::json& j, DqnConfig base = {});
nlohmann::json dqn_config_to_json(const DqnConfig& c);

std::vector<double> encode_state(AgentState s, const GameConfig& g);
/// Feature matrix of a batch of states, one column per state.
Eigen::MatrixXd encode_states(std::span<const AgentState> states, const GameConfig& g);

/// argmax over bids 0..karma; ties go to the lowest bid.
int masked_greedy(std::span<const double> q, int karma);
int epsilon_greedy(std::span<const double> q, int karma, double epsilon, Rng& rng);

struct Batch {
  std::vector<AgentState> states;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<AgentState> next_states;
};

/// y = r + alpha * Q_target(x', argmax_{a' <= k'} Q_online(x', a')).
std::vector<double> double_dqn_targets(const Batch& batch, const QNetwork& online, const QNetwork& target,
                                       double discount, const GameConfig& g);

/// Deterministic policy of masked greedy bids over all states.
Policy extract_greedy_policy(const QNetwork& net, const GameConfig& g);
std::vector<int> greedy_bid_table(const QNetwork& net, const GameConfig& g);

/// Online/target networks, optimizer, replay buffer and exploration
/// schedule of one Double-DQN learner.
class DqnAgent {
 public:
  DqnAgent(const GameConfig& g, const DqnConfig& cfg, std::uint64_t seed);

  /// Epsilon-greedy bid at the current environment step.
  int act(AgentState s);
  /// Stores the transition, advances the step counter, and runs one gradient
  /// step once the buffer holds warmup_steps transitions. Returns the loss of
  /// that step, or a negative value when no step ran.
  double observe(const Transition& t);

  /// One RMSprop step on a batch against Double-DQN targets; syncs the
  /// target network every target_sync_period gradient steps. Returns the
  /// pre-step loss.
  double train_step(const Batch& batch);
  /// One RMSprop step toward fixed regression targets.
  double regression_step(const Batch& batch, std::span<const double> targets);

  Batch sample_batch();
  void sync_target();
  /// Fresh weights and optimizer state; optionally keep the replay buffer.
  void reinitialize(bool clear_buffer);

  double epsilon() const { return cfg_.epsilon.value(env_steps_); }
  long long env_steps() const { return env_steps_; }
  long long gradient_steps() const { return grad_steps_; }
  const QNetwork& online() const { return online_; }
  QNetwork& online() { return online_; }
  const QNetwork& target() const { return target_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const DqnConfig& config() const { return cfg_; }
  Policy greedy_policy() const { return extract_greedy_policy(online_, game_); }

 private:
  GameConfig game_;
  DqnConfig cfg_;
  Rng rng_;
  QNetwork online_;
  QNetwork target_;
  Rmsprop opt_;
  ReplayBuffer buffer_;
  Eigen::MatrixXd feature_table_;  // column x encodes state x
  AlignedVector grad_;
  long long env_steps_ = 0;
  long long grad_steps_ = 0;
};

/// Flat little-endian float64 weights with a header of layer dims:
/// "KQNW" magic, uint32 version, uint32 ndims, ndims x uint32 dims, then
/// params as float64. A JSON manifest next to it records the same shape.
void save_weights(const QNetwork& net, const std::string& bin_path, const std::string& manifest_path);
QNetwork load_weights(const std::string& bin_path);

}  // namespace karma
