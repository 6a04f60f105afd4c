#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "faultnav/buffer.hpp"
#include "faultnav/faults.hpp"
#include "faultnav/fixedpoint.hpp"
#include "faultnav/gridworld.hpp"
#include "faultnav/range_profile.hpp"
#include "faultnav/rng.hpp"

namespace faultnav {

enum class AgentKind { tabular, mlp };
std::string_view to_string(AgentKind k);
AgentKind parse_agent_kind(std::string_view s);

struct Transition {
  int state = 0;
  int action = 0;
  int reward = 0;
  int next_state = 0;
  bool terminal = false;
};

/// Per-call knobs of a forward pass.
struct ForwardContext {
  std::span<const ReadFault> read_faults{};
  const RangeProfile* guard = nullptr;  // screen reads and zero anomalies
  std::uint64_t* alarms = nullptr;      // incremented once per flagged read
};

/// A Q-function whose state lives entirely in fault-site buffers.
class QAgent {
 public:
  virtual ~QAgent() = default;

  virtual AgentKind kind() const = 0;
  virtual int num_states() const = 0;
  int num_actions() const { return kNumActions; }
  virtual const FixedFormat& format() const = 0;

  /// Writes |A| action values into `out`. Non-const: MLP passes write their
  /// input and output buffers.
  virtual void q_values(int state, std::span<double> out, const ForwardContext& ctx = {}) = 0;

  /// One Q-learning update from a transition.
  virtual void learn(const Transition& t, double gamma, double lr) = 0;

  virtual std::vector<BufferSlot> buffers() = 0;
  std::vector<BufferSlot> buffers(const FaultSite& site);
  QuantBuffer* buffer(const BufferId& id);

  virtual std::unique_ptr<QAgent> clone() const = 0;

  /// Re-expresses every stored value in another format (stuck masks dropped).
  virtual void requantize(const FixedFormat& fmt) = 0;
};

/// Tabular Q-learning over a |S| x |A| table buffer.
class TabularQ final : public QAgent {
 public:
  TabularQ(int num_states, FixedFormat format, bool carry_residual = true);

  AgentKind kind() const override { return AgentKind::tabular; }
  int num_states() const override { return num_states_; }
  const FixedFormat& format() const override { return table_.format(); }

  void q_values(int state, std::span<double> out, const ForwardContext& ctx = {}) override;
  void learn(const Transition& t, double gamma, double lr) override;
  std::vector<BufferSlot> buffers() override;
  std::unique_ptr<QAgent> clone() const override;
  void requantize(const FixedFormat& fmt) override;

  QuantBuffer& table() { return table_; }
  const QuantBuffer& table() const { return table_; }
  double at(int s, int a) const { return table_.read(index(s, a)); }
  static std::size_t index(int s, int a) {
    return static_cast<std::size_t>(s) * kNumActions + static_cast<std::size_t>(a);
  }

 private:
  int num_states_;
  QuantBuffer table_;
};

enum class Activation { relu, identity };

/// Dense layer: parameter buffer holds the out x in weights (row-major)
/// followed by the out biases; the output buffer holds pre-activation values.
struct MlpLayer {
  int in = 0;
  int out = 0;
  Activation act = Activation::relu;
  QuantBuffer params;
  QuantBuffer output;

  std::size_t weight_index(int o, int i) const {
    return static_cast<std::size_t>(o) * static_cast<std::size_t>(in) + static_cast<std::size_t>(i);
  }
  std::size_t bias_index(int o) const {
    return static_cast<std::size_t>(out) * static_cast<std::size_t>(in) + static_cast<std::size_t>(o);
  }
  std::size_t weight_count() const { return static_cast<std::size_t>(out) * static_cast<std::size_t>(in); }
};

/// Explicit layer contents, used for constructed networks and checkpoints.
struct LayerSpec {
  int in = 0;
  int out = 0;
  Activation act = Activation::relu;
  std::vector<double> weights;  // out x in, row-major; empty = zeros
  std::vector<double> biases;   // out; empty = zeros
};

/// MLP Q-function with a one-hot state encoding.
class MlpQ final : public QAgent {
 public:
  /// |S| -> hidden... (relu) -> |A| (identity); He-uniform hidden init,
  /// Glorot-uniform output init, zero biases.
  MlpQ(int num_states, std::span<const int> hidden, FixedFormat format, std::uint64_t init_seed,
       bool carry_residual = true);
  /// Network from explicit layers. The last layer must output |A| values.
  MlpQ(int num_states, std::span<const LayerSpec> layers, FixedFormat format,
       bool carry_residual = true);

  AgentKind kind() const override { return AgentKind::mlp; }
  int num_states() const override { return num_states_; }
  const FixedFormat& format() const override { return input_.format(); }

  void q_values(int state, std::span<double> out, const ForwardContext& ctx = {}) override;
  void learn(const Transition& t, double gamma, double lr) override;
  std::vector<BufferSlot> buffers() override;
  std::unique_ptr<QAgent> clone() const override;
  void requantize(const FixedFormat& fmt) override;

  std::vector<MlpLayer>& layers() { return layers_; }
  const std::vector<MlpLayer>& layers() const { return layers_; }
  QuantBuffer& input() { return input_; }
  std::vector<int> hidden_sizes() const;

  /// When false, pre-activations bypass the output-buffer quantization; used
  /// by gradient checks against a real-valued reference.
  void set_quantize_activations(bool on) { quantize_activations_ = on; }

  /// d/dparams of 0.5 * (Q(s,a) - target)^2 with the target held constant,
  /// one vector per layer in parameter-buffer order.
  std::vector<std::vector<double>> td_gradient(int state, int action, double target);

  /// Applies params -= lr * grad through the parameter buffers.
  void apply_gradient(const std::vector<std::vector<double>>& grad, double lr);

 private:
  void forward(int state, const ForwardContext& ctx);
  void backward(int action, double target);
  const double* layer_params(std::size_t layer, const ForwardContext& ctx);
  const std::vector<double>& layer_input(std::size_t layer) const;
  std::uint64_t params_epoch() const;

  int num_states_;
  QuantBuffer input_;
  std::vector<MlpLayer> layers_;
  bool quantize_activations_ = true;

  // Scratch owned per instance; a training run owns its agent exclusively.
  std::vector<double> x_;
  std::vector<std::vector<double>> z_;  // pre-activations as read back
  std::vector<std::vector<double>> h_;  // post-activations
  std::vector<std::vector<double>> dz_;
  std::vector<int> active_;
  std::vector<double> saved_x_;
  std::vector<std::vector<double>> saved_z_;
  std::vector<std::vector<double>> saved_h_;
  int fresh_state_ = -1;
  std::uint64_t fresh_epoch_ = 0;
  std::vector<std::vector<double>> patched_;
  struct GuardCache {
    std::uint64_t version = ~std::uint64_t{0};
    const RangeProfile* profile = nullptr;
    std::vector<double> values;
    std::uint64_t flagged = 0;
  };
  std::vector<GuardCache> guard_cache_;
};

/// Lowest-index argmax over q.
int greedy_action(std::span<const double> q);

/// With probability epsilon a uniform action, otherwise the greedy one.
int select_action(std::span<const double> q, double epsilon, Rng& rng);

/// Linear epsilon decay with mitigation hooks.
struct ExplorationSchedule {
  double initial = 1.0;
  double floor = 0.05;
  int decay_episodes = 100;  // T
  int slow_down = 0;         // n: decay horizon is T * 2^n
  int anchor = 0;            // episode the current decay started at

  /// A raised rate set at `start` that blends linearly back into the base
  /// schedule over T episodes.
  struct Boost {
    int start = 0;
    double value = 0.0;
  };
  std::optional<Boost> boost;

  int horizon() const { return decay_episodes << slow_down; }
  double base_rate(int episode) const;
  double rate(int episode) const;
  bool boosted(int episode) const;
  /// At the floor with no boost in effect.
  bool steady(int episode) const;
};

double epsilon_at(const ExplorationSchedule& schedule, int episode);

struct TrainConfig {
  AgentKind kind = AgentKind::tabular;
  double gamma = 0.9;
  double lr = 0.1;
  int episodes = 1000;
  int eval_every = 10;
  int eval_trials = 100;
  ExplorationSchedule schedule;
  FixedFormat format;
  std::vector<int> hidden{32, 32};
  bool carry_residual = true;
  double q_init = 1.0;  // initial table entries / output-layer biases

  /// Per-kind defaults. The MLP gets a finer 8-bit split, Q(1,1,6), and a
  /// 400-episode decay; the table keeps Q(1,3,4) and 100.
  static TrainConfig defaults(AgentKind kind);
};

struct Checkpoint {
  int episode = 0;
  double success_rate = 0.0;
};

struct DetectionEvent {
  int episode = 0;
  std::string kind;      // transient | permanent | anomaly
  std::string location;
  double old_rate = 0.0;
  double new_rate = 0.0;
};

struct TrainingTrace {
  std::vector<double> rewards;   // per-episode cumulative reward
  std::vector<double> epsilons;  // per-episode exploration rate
  std::vector<int> lengths;
  std::vector<Checkpoint> checkpoints;
  int checkpoint_stride = 10;
  std::optional<int> fault_episode;
  std::vector<FaultEvent> fault_events;
  std::vector<DetectionEvent> detections;

  double final_success() const { return checkpoints.empty() ? 0.0 : checkpoints.back().success_rate; }
};

/// Hook run after every episode; may edit the exploration schedule.
class TrainingObserver {
 public:
  virtual ~TrainingObserver() = default;
  virtual void on_episode_end(int episode, double reward, ExplorationSchedule& schedule,
                              TrainingTrace& trace) = 0;
};

struct TrainResult {
  std::unique_ptr<QAgent> agent;
  TrainingTrace trace;
};

std::unique_ptr<QAgent> make_agent(const TrainConfig& config, int num_states, std::uint64_t seed);

/// Epsilon-greedy Q-learning with per-step updates. Checkpoints (greedy
/// success) are taken every `eval_every` episodes and after the last one.
/// Deterministic in (world, config, plan, seed).
TrainResult train(const GridWorld& world, const TrainConfig& config, const FaultPlan* plan,
                  TrainingObserver* observer, std::uint64_t seed);

struct Metrics {
  double success_rate = 0.0;
  double mean_reward = 0.0;
  double mean_length = 0.0;
  std::uint64_t alarms = 0;
  int trials = 0;
};

struct EvalOptions {
  int trials = 100;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  const RangeProfile* guard = nullptr;
  int start_state = -1;  // -1 = source
};

struct Rollout {
  bool success = false;
  int reward = 0;
  int length = 0;
  std::vector<int> states;
  std::vector<int> actions;
};

/// Single rollout from `start`. `faults` (optional) drives per-step injection.
Rollout rollout(QAgent& agent, const GridWorld& world, int start, double epsilon, Rng& rng,
                InferenceFaultDriver* faults = nullptr, const RangeProfile* guard = nullptr,
                std::uint64_t* alarms = nullptr);

/// Rollouts from the source; step-cap overruns count as failures. With no
/// randomness (epsilon 0, no active plan) one rollout stands for all trials.
Metrics evaluate(const QAgent& agent, const GridWorld& world, const EvalOptions& options,
                 const FaultPlan* plan = nullptr);

/// Episodes from the fault (or from 0) until the windowed checkpoint success
/// exceeds the threshold. Checkpoint i counts from the first checkpoint at or
/// after the fault episode; the window averages up to `window` trailing
/// checkpoints.
std::optional<int> episodes_to_converge(std::span<const Checkpoint> checkpoints, int fault_episode,
                                        double threshold = 0.95, int window = 2);
std::optional<int> episodes_to_converge(const TrainingTrace& trace, double threshold = 0.95,
                                        int window = 2);

/// Binary checkpoint: text header, then every buffer's raws little-endian.
void save_checkpoint(const QAgent& agent, std::ostream& out, std::uint64_t seed);
struct LoadedCheckpoint {
  std::unique_ptr<QAgent> agent;
  std::uint64_t seed = 0;
};
LoadedCheckpoint load_checkpoint(std::istream& in);

}  // namespace faultnav
