#pragma once

#include <optional>
#include <span>
#include <vector>

#include "faultnav/agent.hpp"
#include "faultnav/range_profile.hpp"

namespace faultnav {

// ------------------------------------------------------------------ training

struct TrainMitigationConfig {
  double x = 25.0;     // reward-drop percent
  int y = 50;          // episode window
  double alpha = 0.8;  // adjustment coefficient
  int T = 100;         // episodes to reach steady exploitation
  bool transient = true;
  bool permanent = true;
  int smoothing = 75;     // moving-average width applied before detection
  int max_slowdown = 6;   // cap on n in the T * 2^n horizon

  /// alpha 0.8 for tables, 0.4 for the MLP; T matches the kind's decay.
  static TrainMitigationConfig defaults(AgentKind kind);
  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

/// Trailing moving average; early entries average what is available.
std::vector<double> smooth_rewards(std::span<const double> rewards, int width);

struct TransientDetection {
  double drop = 0.0;  // window max minus current
  double r_max = 0.0;
};

/// Fires when the drop from the maximum of the last `y` entries to the
/// current one is at least x% of r_max. `history` ends at the current episode.
std::optional<TransientDetection> detect_transient(std::span<const double> history, double x, int y,
                                                   double r_max);

/// Fires when steady and the mean of `window` is below half of r_max.
bool detect_permanent(std::span<const double> window, bool steady, double r_max);

/// ER_old + alpha * min(f(r), f(r) * f(t)) with f(r) = drop / r_max and
/// f(t) = t / T, clamped to [floor, 1].
double adjust_exploration(double er_old, double alpha, double drop, double r_max, double t, double T,
                          double floor = 0.0);

struct MitigationState {
  int n = 0;  // permanent detections so far
  std::optional<double> override_rate;
  std::vector<DetectionEvent> events;
};

/// Resets the decay to start over from `episode` with horizon T * 2^n.
void recover_permanent(ExplorationSchedule& schedule, MitigationState& state, int episode,
                       int max_slowdown = 6);

/// Training observer applying both detectors and their recoveries. Detection
/// events are appended to the trace.
class ExplorationController final : public TrainingObserver {
 public:
  explicit ExplorationController(TrainMitigationConfig config);

  void on_episode_end(int episode, double reward, ExplorationSchedule& schedule,
                      TrainingTrace& trace) override;

  const MitigationState& state() const { return state_; }

 private:
  TrainMitigationConfig config_;
  MitigationState state_;
  std::vector<double> raw_;
  std::vector<double> smoothed_;
  double r_max_ = 0.0;
  bool settled_ = false;    // first steady stretch reached
  int quiet_until_ = 0;     // no transient detection before this episode
  int steady_since_ = -1;   // first episode of the current steady stretch
  bool armed_ = true;
};

// ----------------------------------------------------------------- inference

/// Widens [lo, hi] by `margin` of each bound's magnitude; zero bounds move
/// out by one integer LSB.
ValueBounds widen_bounds(double lo, double hi, double margin = 0.1);

/// Per-layer ranges of a fault-free agent. Activations are observed over
/// `calibration_trials` greedy rollouts cycling through every non-terminal
/// start state.
RangeProfile calibrate_ranges(QAgent& agent, const GridWorld& world, int calibration_trials = 100,
                              double margin = 0.1);

/// Q-values with every read screened against the profile; flagged values
/// are replaced by zero.
void guarded_forward(QAgent& agent, int state, const RangeProfile& profile, std::span<double> out,
                     std::uint64_t* alarms = nullptr, std::span<const ReadFault> read_faults = {});

}  // namespace faultnav
