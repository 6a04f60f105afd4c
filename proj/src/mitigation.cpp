#include "faultnav/mitigation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace faultnav {

TrainMitigationConfig TrainMitigationConfig::defaults(AgentKind kind) {
  TrainMitigationConfig c;
  c.alpha = kind == AgentKind::mlp ? 0.4 : 0.8;
  c.T = TrainConfig::defaults(kind).schedule.decay_episodes;
  return c;
}

void TrainMitigationConfig::validate() const {
  if (!(x > 0.0 && x < 100.0)) throw std::invalid_argument("mitigation x must be in (0,100)");
  if (y < 1) throw std::invalid_argument("mitigation y must be >= 1");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("mitigation alpha must be in (0,1]");
  if (T < 1) throw std::invalid_argument("mitigation T must be >= 1");
  if (smoothing < 1) throw std::invalid_argument("mitigation smoothing must be >= 1");
  if (max_slowdown < 0 || max_slowdown > 20) {
    throw std::invalid_argument("mitigation max_slowdown must be in [0,20]");
  }
}

std::vector<double> smooth_rewards(std::span<const double> rewards, int width) {
  if (width < 1) throw std::invalid_argument("smoothing width must be >= 1");
  std::vector<double> out(rewards.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    sum += rewards[i];
    if (i >= static_cast<std::size_t>(width)) sum -= rewards[i - width];
    out[i] = sum / static_cast<double>(std::min<std::size_t>(i + 1, width));
  }
  return out;
}

std::optional<TransientDetection> detect_transient(std::span<const double> history, double x, int y,
                                                   double r_max) {
  if (y < 1 || history.size() < static_cast<std::size_t>(y) || r_max <= 0.0) return std::nullopt;
  const auto window = history.last(static_cast<std::size_t>(y));
  const double peak = *std::max_element(window.begin(), window.end());
  const double drop = peak - window.back();
  if (drop / r_max >= x / 100.0) return TransientDetection{drop, r_max};
  return std::nullopt;
}

bool detect_permanent(std::span<const double> window, bool steady, double r_max) {
  if (!steady || window.empty() || r_max <= 0.0) return false;
  const double mean = std::accumulate(window.begin(), window.end(), 0.0) / window.size();
  return mean < 0.5 * r_max;
}

double adjust_exploration(double er_old, double alpha, double drop, double r_max, double t, double T,
                          double floor) {
  if (r_max <= 0.0) throw std::invalid_argument("r_max must be positive");
  if (T <= 0.0) throw std::invalid_argument("T must be positive");
  const double fr = std::max(0.0, drop) / r_max;
  const double ft = std::max(0.0, t) / T;
  const double delta = alpha * std::min(fr, fr * ft);
  return std::clamp(er_old + delta, floor, 1.0);
}

void recover_permanent(ExplorationSchedule& schedule, MitigationState& state, int episode,
                       int max_slowdown) {
  ++state.n;
  schedule.slow_down = std::min(state.n, max_slowdown);
  schedule.anchor = episode;
  schedule.boost.reset();
  state.override_rate = schedule.initial;
}

ExplorationController::ExplorationController(TrainMitigationConfig config) : config_(config) {
  config_.validate();
}

void ExplorationController::on_episode_end(int episode, double reward, ExplorationSchedule& schedule,
                                           TrainingTrace& trace) {
  raw_.push_back(reward);
  const auto w = static_cast<std::size_t>(config_.smoothing);
  if (raw_.size() < w) return;
  const double smoothed =
      std::accumulate(raw_.end() - static_cast<std::ptrdiff_t>(w), raw_.end(), 0.0) / w;
  smoothed_.push_back(smoothed);
  r_max_ = std::max(r_max_, smoothed);

  const double rate = schedule.rate(episode);
  const int next = episode + 1;

  if (schedule.steady(episode)) settled_ = true;
  if (config_.transient && settled_ && episode >= quiet_until_) {
    if (auto d = detect_transient(smoothed_, config_.x, config_.y, r_max_)) {
      const double er = adjust_exploration(rate, config_.alpha, d->drop, d->r_max, episode,
                                           config_.T, schedule.floor);
      schedule.boost = ExplorationSchedule::Boost{next, er};
      state_.override_rate = er;
      quiet_until_ = next + config_.T;
      DetectionEvent ev{episode, "transient", "reward", rate, er};
      state_.events.push_back(ev);
      trace.detections.push_back(ev);
      return;
    }
  }

  if (!schedule.steady(episode)) {
    steady_since_ = -1;
    return;
  }
  if (steady_since_ < 0) {
    steady_since_ = episode;
    armed_ = true;
  }
  const auto y = static_cast<std::size_t>(config_.y);
  if (!config_.permanent || !armed_ || episode - steady_since_ + 1 < config_.y) return;
  if (detect_permanent(std::span<const double>(raw_).last(y), true, r_max_)) {
    recover_permanent(schedule, state_, next, config_.max_slowdown);
    armed_ = false;
    quiet_until_ = std::max(quiet_until_, next + schedule.horizon() + config_.y);
    DetectionEvent ev{episode, "permanent", "reward", rate, schedule.initial};
    state_.events.push_back(ev);
    trace.detections.push_back(ev);
  }
}

// ----------------------------------------------------------------- inference

ValueBounds widen_bounds(double lo, double hi, double margin) {
  if (lo > hi) throw std::invalid_argument("bounds out of order");
  if (margin < 0.0) throw std::invalid_argument("margin must be >= 0");
  const double lower = lo == 0.0 ? -1.0 : lo - margin * std::abs(lo);
  const double upper = hi == 0.0 ? 1.0 : hi + margin * std::abs(hi);
  return {lower, upper};
}

namespace {

struct MinMax {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void add(const QuantBuffer& b) {
    for (std::size_t i = 0; i < b.size(); ++i) add(b.read(i));
  }
  ValueBounds widened(double margin) const {
    if (lo > hi) return widen_bounds(0.0, 0.0, margin);
    return widen_bounds(lo, hi, margin);
  }
};

}  // namespace

RangeProfile calibrate_ranges(QAgent& agent, const GridWorld& world, int calibration_trials,
                              double margin) {
  if (calibration_trials < 1) throw std::invalid_argument("calibration needs at least one trial");
  if (agent.num_states() != world.num_states()) {
    throw std::invalid_argument("agent and world disagree on the state count");
  }
  RangeProfile profile;
  profile.format = agent.format();

  if (agent.kind() == AgentKind::tabular) {
    MinMax table;
    table.add(static_cast<TabularQ&>(agent).table());
    const ValueBounds b = table.widened(margin);
    profile.layers.push_back({b, b});
    return profile;
  }

  auto& mlp = static_cast<MlpQ&>(agent);
  auto& layers = mlp.layers();
  std::vector<MinMax> outputs(layers.size());
  MinMax input;
  std::vector<int> starts;
  for (int s = 0; s < world.num_states(); ++s) {
    if (!world.is_terminal(s)) starts.push_back(s);
  }
  std::array<double, kNumActions> q{};
  for (int t = 0; t < calibration_trials; ++t) {
    int s = starts[static_cast<std::size_t>(t) % starts.size()];
    for (int step = 0; step < world.step_cap(); ++step) {
      mlp.q_values(s, q);
      input.add(mlp.input());
      for (std::size_t l = 0; l < layers.size(); ++l) outputs[l].add(layers[l].output);
      const StepResult r = world.step(s, greedy_action(q));
      if (r.terminal) break;
      s = r.next_state;
    }
  }
  profile.input = input.widened(margin);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    MinMax params;
    params.add(layers[l].params);
    profile.layers.push_back({params.widened(margin), outputs[l].widened(margin)});
  }
  return profile;
}

void guarded_forward(QAgent& agent, int state, const RangeProfile& profile, std::span<double> out,
                     std::uint64_t* alarms, std::span<const ReadFault> read_faults) {
  if (!(profile.format == agent.format())) {
    throw std::invalid_argument("range profile format does not match the agent");
  }
  ForwardContext ctx;
  ctx.guard = &profile;
  ctx.alarms = alarms;
  ctx.read_faults = read_faults;
  agent.q_values(state, out, ctx);
}

}  // namespace faultnav
