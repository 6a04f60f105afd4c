#include "faultnav/agent.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace faultnav {

std::string_view to_string(AgentKind k) { return k == AgentKind::tabular ? "tabular" : "mlp"; }

AgentKind parse_agent_kind(std::string_view s) {
  if (s == "tabular") return AgentKind::tabular;
  if (s == "mlp" || s == "nn") return AgentKind::mlp;
  throw std::invalid_argument("unknown agent kind '" + std::string(s) + "'");
}

std::vector<BufferSlot> QAgent::buffers(const FaultSite& site) {
  std::vector<BufferSlot> out;
  for (auto& slot : buffers()) {
    if (site.matches(slot.id)) out.push_back(slot);
  }
  return out;
}

QuantBuffer* QAgent::buffer(const BufferId& id) {
  for (auto& slot : buffers()) {
    if (slot.id == id) return slot.buffer;
  }
  return nullptr;
}

// ---------------------------------------------------------------- TabularQ

TabularQ::TabularQ(int num_states, FixedFormat format, bool carry_residual)
    : num_states_(num_states),
      table_({static_cast<std::size_t>(num_states), static_cast<std::size_t>(kNumActions)}, format,
             carry_residual) {
  if (num_states <= 0) throw std::invalid_argument("tabular agent needs at least one state");
}

void TabularQ::q_values(int state, std::span<double> out, const ForwardContext& ctx) {
  const auto& fmt = table_.format();
  for (int a = 0; a < kNumActions; ++a) {
    const std::size_t idx = index(state, a);
    std::uint32_t raw = table_.raw(idx);
    double v = table_.read(idx);
    for (const auto& rf : ctx.read_faults) {
      if (rf.id.kind == SiteKind::tabular && rf.element == idx) {
        raw ^= rf.xor_mask;
        v = dequantize_raw(raw, fmt);
      }
    }
    if (ctx.guard != nullptr && !ctx.guard->layers.empty() &&
        check_anomaly_raw(raw, fmt, ctx.guard->layers.front().params)) {
      v = 0.0;
      if (ctx.alarms != nullptr) ++*ctx.alarms;
    }
    out[static_cast<std::size_t>(a)] = v;
  }
}

void TabularQ::learn(const Transition& t, double gamma, double lr) {
  const std::size_t idx = index(t.state, t.action);
  double boot = 0.0;
  if (!t.terminal) {
    boot = at(t.next_state, 0);
    for (int a = 1; a < kNumActions; ++a) boot = std::max(boot, at(t.next_state, a));
  }
  const double target = t.reward + gamma * boot;
  table_.accumulate(idx, lr * (target - table_.read(idx)));
}

std::vector<BufferSlot> TabularQ::buffers() { return {{{SiteKind::tabular, 0}, &table_}}; }

std::unique_ptr<QAgent> TabularQ::clone() const { return std::make_unique<TabularQ>(*this); }

void TabularQ::requantize(const FixedFormat& fmt) {
  QuantBuffer next(table_.tensor().shape(), fmt, table_.carries_residual());
  for (std::size_t i = 0; i < table_.size(); ++i) next.write(i, table_.read(i));
  table_ = std::move(next);
}

// ---------------------------------------------------------------- MlpQ

namespace {

QuantBuffer make_params(int in, int out, const FixedFormat& fmt, bool carry) {
  return QuantBuffer({static_cast<std::size_t>(out) * static_cast<std::size_t>(in) +
                      static_cast<std::size_t>(out)},
                     fmt, carry);
}

QuantBuffer make_output(int out, const FixedFormat& fmt) {
  return QuantBuffer({static_cast<std::size_t>(out)}, fmt, false);
}

}  // namespace

MlpQ::MlpQ(int num_states, std::span<const int> hidden, FixedFormat format,
           std::uint64_t init_seed, bool carry_residual)
    : num_states_(num_states), input_({static_cast<std::size_t>(num_states)}, format, false) {
  if (num_states <= 0) throw std::invalid_argument("mlp agent needs at least one state");
  Rng rng(derive_seed({tag("mlp-init"), init_seed}));
  std::vector<int> sizes{num_states};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(kNumActions);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    MlpLayer layer;
    layer.in = sizes[l];
    layer.out = sizes[l + 1];
    if (layer.in <= 0 || layer.out <= 0) throw std::invalid_argument("layer sizes must be positive");
    const bool last = l + 2 == sizes.size();
    layer.act = last ? Activation::identity : Activation::relu;
    layer.params = make_params(layer.in, layer.out, format, carry_residual);
    layer.output = make_output(layer.out, format);
    const double limit = last ? std::sqrt(6.0 / (layer.in + layer.out)) : std::sqrt(6.0 / layer.in);
    for (std::size_t i = 0; i < layer.weight_count(); ++i) {
      layer.params.write(i, uniform_real(rng, -limit, limit));
    }
    layers_.push_back(std::move(layer));
  }
}

MlpQ::MlpQ(int num_states, std::span<const LayerSpec> specs, FixedFormat format,
           bool carry_residual)
    : num_states_(num_states), input_({static_cast<std::size_t>(num_states)}, format, false) {
  if (specs.empty()) throw std::invalid_argument("mlp needs at least one layer");
  int in = num_states;
  for (const auto& spec : specs) {
    if (spec.in != in) throw std::invalid_argument("layer dimensions do not chain");
    MlpLayer layer;
    layer.in = spec.in;
    layer.out = spec.out;
    layer.act = spec.act;
    layer.params = make_params(layer.in, layer.out, format, carry_residual);
    layer.output = make_output(layer.out, format);
    if (!spec.weights.empty()) {
      if (spec.weights.size() != layer.weight_count()) throw std::invalid_argument("weight count");
      for (std::size_t i = 0; i < spec.weights.size(); ++i) layer.params.write(i, spec.weights[i]);
    }
    if (!spec.biases.empty()) {
      if (spec.biases.size() != static_cast<std::size_t>(spec.out)) {
        throw std::invalid_argument("bias count");
      }
      for (int o = 0; o < spec.out; ++o) layer.params.write(layer.bias_index(o), spec.biases[o]);
    }
    in = spec.out;
    layers_.push_back(std::move(layer));
  }
  if (in != kNumActions) throw std::invalid_argument("last layer must emit one value per action");
  if (layers_.back().act != Activation::identity) {
    throw std::invalid_argument("last layer activation must be identity");
  }
}

std::vector<int> MlpQ::hidden_sizes() const {
  std::vector<int> out;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) out.push_back(layers_[l].out);
  return out;
}

const double* MlpQ::layer_params(std::size_t l, const ForwardContext& ctx) {
  MlpLayer& layer = layers_[l];
  const auto& fmt = layer.params.format();
  const double* base = layer.params.values().data();

  if (ctx.guard != nullptr) {
    if (guard_cache_.size() != layers_.size()) guard_cache_.resize(layers_.size());
    GuardCache& cache = guard_cache_[l];
    if (cache.version != layer.params.version() || cache.profile != ctx.guard) {
      const ValueBounds& b = ctx.guard->layers.at(l).params;
      cache.values.assign(layer.params.values().begin(), layer.params.values().end());
      cache.flagged = 0;
      for (std::size_t i = 0; i < cache.values.size(); ++i) {
        if (check_anomaly_raw(layer.params.raw(i), fmt, b)) {
          cache.values[i] = 0.0;
          ++cache.flagged;
        }
      }
      cache.version = layer.params.version();
      cache.profile = ctx.guard;
    }
    if (ctx.alarms != nullptr) *ctx.alarms += cache.flagged;
    base = cache.values.data();
  }

  bool touched = false;
  for (const auto& rf : ctx.read_faults) {
    if (rf.id.kind == SiteKind::weights && rf.id.layer == static_cast<int>(l)) {
      touched = true;
      break;
    }
  }
  if (!touched) return base;

  if (patched_.size() != layers_.size()) patched_.resize(layers_.size());
  auto& patched = patched_[l];
  patched.assign(base, base + layer.params.size());
  for (const auto& rf : ctx.read_faults) {
    if (rf.id.kind != SiteKind::weights || rf.id.layer != static_cast<int>(l)) continue;
    const std::uint32_t raw = (layer.params.raw(rf.element) ^ rf.xor_mask) & fmt.mask();
    double v = dequantize_raw(raw, fmt);
    if (ctx.guard != nullptr) {
      const bool was_flagged = check_anomaly_raw(layer.params.raw(rf.element), fmt,
                                                 ctx.guard->layers.at(l).params);
      if (check_anomaly_raw(raw, fmt, ctx.guard->layers.at(l).params)) {
        v = 0.0;
        if (ctx.alarms != nullptr && !was_flagged) ++*ctx.alarms;
      }
    }
    patched[rf.element] = v;
  }
  return patched.data();
}

void MlpQ::forward(int state, const ForwardContext& ctx) {
  const auto& fmt = input_.format();
  for (int i = 0; i < num_states_; ++i) {
    const double want = (i == state) ? 1.0 : 0.0;
    if (input_.read(static_cast<std::size_t>(i)) != want || input_.has_stuck()) {
      input_.write(static_cast<std::size_t>(i), want);
    }
  }
  input_.commit_pending();

  x_.assign(input_.values().begin(), input_.values().end());
  if (ctx.guard != nullptr) {
    const RawWindow window = raw_window(ctx.guard->input, fmt);
    for (int i = 0; i < num_states_; ++i) {
      if (window.flags(input_.raw(static_cast<std::size_t>(i)))) {
        x_[static_cast<std::size_t>(i)] = 0.0;
        if (ctx.alarms != nullptr) ++*ctx.alarms;
      }
    }
  }

  z_.resize(layers_.size());
  h_.resize(layers_.size());
  const double* h = x_.data();
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    MlpLayer& layer = layers_[l];
    const double* p = layer_params(l, ctx);
    auto& z = z_[l];
    z.resize(static_cast<std::size_t>(layer.out));
    if (l == 0) {
      // The encoded input is one-hot, so only its nonzero columns are visited.
      active_.clear();
      for (int i = 0; i < layer.in; ++i) {
        if (h[i] != 0.0) active_.push_back(i);
      }
      for (int o = 0; o < layer.out; ++o) {
        double acc = p[layer.bias_index(o)];
        const double* w = p + layer.weight_index(o, 0);
        for (int i : active_) acc += w[i] * h[i];
        z[static_cast<std::size_t>(o)] = acc;
      }
    } else {
      for (int o = 0; o < layer.out; ++o) {
        double acc = p[layer.bias_index(o)];
        const double* w = p + layer.weight_index(o, 0);
        for (int i = 0; i < layer.in; ++i) acc += w[i] * h[i];
        z[static_cast<std::size_t>(o)] = acc;
      }
    }
    for (int o = 0; o < layer.out; ++o) {
      layer.output.write(static_cast<std::size_t>(o), z[static_cast<std::size_t>(o)]);
    }
    layer.output.commit_pending();

    const bool guarded = ctx.guard != nullptr;
    const RawWindow window = guarded ? raw_window(ctx.guard->layers.at(l).outputs, fmt) : RawWindow{};
    auto& post = h_[l];
    post.resize(z.size());
    for (std::size_t o = 0; o < z.size(); ++o) {
      if (quantize_activations_) z[o] = layer.output.read(o);
      if (guarded && window.flags(layer.output.raw(o))) {
        z[o] = 0.0;
        if (ctx.alarms != nullptr) ++*ctx.alarms;
      }
      post[o] = (layer.act == Activation::relu) ? std::max(z[o], 0.0) : z[o];
    }
    h = post.data();
  }
}

void MlpQ::q_values(int state, std::span<double> out, const ForwardContext& ctx) {
  if (state < 0 || state >= num_states_) throw std::out_of_range("state outside agent input");
  forward(state, ctx);
  const bool plain = ctx.read_faults.empty() && ctx.guard == nullptr;
  fresh_state_ = plain ? state : -1;
  fresh_epoch_ = params_epoch();
  const auto& q = z_.back();
  std::copy(q.begin(), q.end(), out.begin());
}

std::uint64_t MlpQ::params_epoch() const {
  std::uint64_t sum = 0;
  for (const auto& layer : layers_) sum += layer.params.version();
  return sum;
}

void MlpQ::backward(int action, double target) {
  const std::size_t last = layers_.size() - 1;
  dz_.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    dz_[l].assign(static_cast<std::size_t>(layers_[l].out), 0.0);
  }
  dz_[last][static_cast<std::size_t>(action)] = z_[last][static_cast<std::size_t>(action)] - target;

  for (std::size_t l = layers_.size() - 1; l > 0; --l) {
    const MlpLayer& layer = layers_[l];
    const MlpLayer& prev = layers_[l - 1];
    const auto& dz = dz_[l];
    auto& dprev = dz_[l - 1];
    const auto& zprev = z_[l - 1];
    const double* w = layer.params.values().data();
    for (int o = 0; o < layer.out; ++o) {
      const double d = dz[static_cast<std::size_t>(o)];
      if (d == 0.0) continue;
      const double* row = w + layer.weight_index(o, 0);
      for (int i = 0; i < layer.in; ++i) dprev[static_cast<std::size_t>(i)] += d * row[i];
    }
    if (prev.act == Activation::relu) {
      for (int i = 0; i < layer.in; ++i) {
        if (zprev[static_cast<std::size_t>(i)] <= 0.0) dprev[static_cast<std::size_t>(i)] = 0.0;
      }
    }
  }
}

const std::vector<double>& MlpQ::layer_input(std::size_t l) const { return l == 0 ? x_ : h_[l - 1]; }

std::vector<std::vector<double>> MlpQ::td_gradient(int state, int action, double target) {
  forward(state, {});
  backward(action, target);
  std::vector<std::vector<double>> grad(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const MlpLayer& layer = layers_[l];
    const auto& in_h = layer_input(l);
    auto& g = grad[l];
    g.assign(layer.params.size(), 0.0);
    for (int o = 0; o < layer.out; ++o) {
      const double d = dz_[l][static_cast<std::size_t>(o)];
      g[layer.bias_index(o)] = d;
      for (int i = 0; i < layer.in; ++i) {
        g[layer.weight_index(o, i)] = d * in_h[static_cast<std::size_t>(i)];
      }
    }
  }
  return grad;
}

void MlpQ::apply_gradient(const std::vector<std::vector<double>>& grad, double lr) {
  if (lr == 0.0) return;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& params = layers_[l].params;
    const auto& g = grad.at(l);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g[i] != 0.0) params.accumulate(i, -lr * g[i]);
    }
  }
}

void MlpQ::learn(const Transition& t, double gamma, double lr) {
  // Reuse the pass that selected the action when nothing has moved since.
  const bool reuse = fresh_state_ == t.state && fresh_epoch_ == params_epoch();
  fresh_state_ = -1;
  double target = t.reward;
  if (!t.terminal) {
    if (reuse) {
      std::swap(x_, saved_x_);
      std::swap(z_, saved_z_);
      std::swap(h_, saved_h_);
    }
    forward(t.next_state, {});
    const auto& q = z_.back();
    target += gamma * *std::max_element(q.begin(), q.end());
    if (reuse) {
      std::swap(x_, saved_x_);
      std::swap(z_, saved_z_);
      std::swap(h_, saved_h_);
    }
  }
  if (!reuse) forward(t.state, {});
  if (lr == 0.0) return;
  backward(t.action, target);
  // Sparse form of apply_gradient(td_gradient(...)): deltas are all taken
  // before any parameter moves.
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    MlpLayer& layer = layers_[l];
    const auto& in_h = layer_input(l);
    active_.clear();
    for (int i = 0; i < layer.in; ++i) {
      if (in_h[static_cast<std::size_t>(i)] != 0.0) active_.push_back(i);
    }
    for (int o = 0; o < layer.out; ++o) {
      const double d = dz_[l][static_cast<std::size_t>(o)];
      if (d == 0.0) continue;
      const double step = -lr * d;
      layer.params.accumulate(layer.bias_index(o), step);
      for (int i : active_) {
        layer.params.accumulate(layer.weight_index(o, i), step * in_h[static_cast<std::size_t>(i)]);
      }
    }
  }
}

std::vector<BufferSlot> MlpQ::buffers() {
  std::vector<BufferSlot> out;
  out.push_back({{SiteKind::input, 0}, &input_});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    out.push_back({{SiteKind::weights, static_cast<int>(l)}, &layers_[l].params});
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    out.push_back({{SiteKind::activations, static_cast<int>(l)}, &layers_[l].output});
  }
  return out;
}

std::unique_ptr<QAgent> MlpQ::clone() const { return std::make_unique<MlpQ>(*this); }

void MlpQ::requantize(const FixedFormat& fmt) {
  auto convert = [&](QuantBuffer& b) {
    QuantBuffer next(b.tensor().shape(), fmt, b.carries_residual());
    for (std::size_t i = 0; i < b.size(); ++i) next.write(i, b.read(i));
    b = std::move(next);
  };
  convert(input_);
  for (auto& layer : layers_) {
    convert(layer.params);
    convert(layer.output);
  }
  guard_cache_.clear();
}

// ---------------------------------------------------------------- policy

int greedy_action(std::span<const double> q) {
  int best = 0;
  for (std::size_t a = 1; a < q.size(); ++a) {
    if (q[a] > q[static_cast<std::size_t>(best)]) best = static_cast<int>(a);
  }
  return best;
}

int select_action(std::span<const double> q, double epsilon, Rng& rng) {
  if (q.empty()) throw std::invalid_argument("select_action needs at least one action");
  if (epsilon > 0.0 && uniform01(rng) < epsilon) {
    return static_cast<int>(uniform_index(rng, q.size()));
  }
  return greedy_action(q);
}

double ExplorationSchedule::base_rate(int episode) const {
  const int k = episode - anchor;
  const int h = horizon();
  if (k <= 0) return initial;
  if (k >= h) return floor;
  return initial + (floor - initial) * static_cast<double>(k) / static_cast<double>(h);
}

bool ExplorationSchedule::boosted(int episode) const {
  return boost.has_value() && episode >= boost->start && episode - boost->start < decay_episodes;
}

double ExplorationSchedule::rate(int episode) const {
  double r = base_rate(episode);
  if (boosted(episode)) {
    const double tau = static_cast<double>(episode - boost->start) / decay_episodes;
    r = boost->value + (r - boost->value) * tau;
  }
  return std::clamp(r, floor, 1.0);
}

bool ExplorationSchedule::steady(int episode) const {
  return !boosted(episode) && base_rate(episode) <= floor;
}

double epsilon_at(const ExplorationSchedule& schedule, int episode) {
  if (episode < 0) throw std::invalid_argument("episode must be non-negative");
  return schedule.rate(episode);
}

TrainConfig TrainConfig::defaults(AgentKind kind) {
  TrainConfig c;
  c.kind = kind;
  if (kind == AgentKind::mlp) {
    c.format = FixedFormat(1, 6);
    c.schedule.decay_episodes = 400;
  }
  return c;
}

std::unique_ptr<QAgent> make_agent(const TrainConfig& config, int num_states, std::uint64_t seed) {
  if (config.kind == AgentKind::tabular) {
    auto agent = std::make_unique<TabularQ>(num_states, config.format, config.carry_residual);
    agent->table().fill(config.q_init);
    return agent;
  }
  auto agent = std::make_unique<MlpQ>(num_states, config.hidden, config.format,
                                      derive_seed({tag("init"), seed}), config.carry_residual);
  auto& out = agent->layers().back();
  for (int o = 0; o < out.out; ++o) out.params.write(out.bias_index(o), config.q_init);
  return agent;
}

// ---------------------------------------------------------------- rollouts

Rollout rollout(QAgent& agent, const GridWorld& world, int start, double epsilon, Rng& rng,
                InferenceFaultDriver* faults, const RangeProfile* guard, std::uint64_t* alarms) {
  if (world.is_terminal(start)) throw std::invalid_argument("rollout must start off-terminal");
  Rollout r;
  if (faults != nullptr) faults->before_rollout();
  std::array<double, kNumActions> q{};
  int s = start;
  for (int step = 0; step < world.step_cap(); ++step) {
    ForwardContext ctx;
    if (faults != nullptr) ctx.read_faults = faults->before_step(step);
    ctx.guard = guard;
    ctx.alarms = alarms;
    agent.q_values(s, q, ctx);
    const int a = select_action(q, epsilon, rng);
    const StepResult res = world.step(s, a);
    r.states.push_back(s);
    r.actions.push_back(a);
    r.reward += res.reward;
    ++r.length;
    if (res.terminal) {
      r.success = res.reward > 0;
      r.states.push_back(res.next_state);
      return r;
    }
    s = res.next_state;
  }
  r.states.push_back(s);
  return r;
}

Metrics evaluate(const QAgent& agent, const GridWorld& world, const EvalOptions& options,
                 const FaultPlan* plan) {
  if (options.trials < 1) throw std::invalid_argument("evaluate needs at least one trial");
  if (agent.num_states() != world.num_states()) {
    throw std::invalid_argument("agent and world disagree on the state count");
  }
  const bool faulty = plan != nullptr && plan->active();
  if (faulty) plan->validate(agent.kind(), false);
  const int start = options.start_state >= 0 ? options.start_state : world.source_state();
  const bool stochastic = faulty || options.epsilon > 0.0;

  Metrics m;
  m.trials = options.trials;
  auto work = agent.clone();

  // Single-shot transients strike at a step drawn over the clean episode length.
  int clean_length = 1;
  if (faulty && plan->timing == FaultTiming::inference && plan->inference_step < 0) {
    Rng unused(0);
    auto probe = agent.clone();
    clean_length = std::max(1, rollout(*probe, world, start, 0.0, unused).length);
  }

  const int runs = stochastic ? options.trials : 1;
  double successes = 0.0;
  double reward = 0.0;
  double length = 0.0;
  for (int t = 0; t < runs; ++t) {
    Rng rng(derive_seed({tag("eval"), options.seed, static_cast<std::uint64_t>(t)}));
    Rollout r;
    if (faulty) {
      auto trial = agent.clone();
      Rng fault_rng(derive_seed({tag("eval-faults"), plan->seed, static_cast<std::uint64_t>(t)}));
      const int fault_step = plan->inference_step >= 0
                                 ? plan->inference_step
                                 : static_cast<int>(uniform_index(fault_rng, clean_length));
      InferenceFaultDriver driver(*plan, *trial, fault_rng, fault_step);
      r = rollout(*trial, world, start, options.epsilon, rng, &driver, options.guard, &m.alarms);
    } else {
      r = rollout(*work, world, start, options.epsilon, rng, nullptr, options.guard, &m.alarms);
    }
    successes += r.success ? 1.0 : 0.0;
    reward += r.reward;
    length += r.length;
  }
  m.success_rate = successes / runs;
  m.mean_reward = reward / runs;
  m.mean_length = length / runs;
  if (!stochastic) m.alarms *= static_cast<std::uint64_t>(options.trials);
  return m;
}

// ---------------------------------------------------------------- training

namespace {

void log_sites(TrainingTrace& trace, std::span<const ResolvedSite> sites, int episode,
               FaultKind kind) {
  for (const auto& s : sites) {
    trace.fault_events.push_back({episode, 0, s.id.name(), s.element, s.bit, kind});
  }
}

double checkpoint_success(const QAgent& agent, const GridWorld& world, const TrainConfig& config) {
  EvalOptions opts;
  opts.trials = config.eval_trials;
  return evaluate(agent, world, opts).success_rate;
}

}  // namespace

TrainResult train(const GridWorld& world, const TrainConfig& config, const FaultPlan* plan,
                  TrainingObserver* observer, std::uint64_t seed) {
  if (config.episodes < 1) throw std::invalid_argument("training needs at least one episode");
  if (config.eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (config.gamma <= 0.0 || config.gamma >= 1.0) throw std::invalid_argument("gamma in (0,1)");
  if (config.schedule.decay_episodes < 1) throw std::invalid_argument("decay episodes >= 1");
  if (config.lr < 0.0) throw std::invalid_argument("learning rate must be >= 0");
  const bool faulty = plan != nullptr && plan->active();
  if (plan != nullptr) plan->validate(config.kind, true, config.episodes);

  TrainResult result;
  result.agent = make_agent(config, world.num_states(), seed);
  QAgent& agent = *result.agent;
  TrainingTrace& trace = result.trace;
  trace.checkpoint_stride = config.eval_every;
  ExplorationSchedule schedule = config.schedule;
  const double lr = config.lr;

  Rng explore(derive_seed({tag("explore"), seed}));
  Rng fault_rng(derive_seed({tag("train-faults"), plan != nullptr ? plan->seed : seed}));
  const int fault_episode =
      faulty ? (plan->timing == FaultTiming::episode ? plan->episode : 0) : -1;
  if (faulty) trace.fault_episode = fault_episode;

  std::array<double, kNumActions> q{};
  for (int e = 0; e < config.episodes; ++e) {
    if (e == fault_episode) {
      const auto sites = sample_agent_sites(agent, *plan, fault_rng);
      inject_into_memory(agent, sites, plan->kind);
      log_sites(trace, sites, e, plan->kind);
    }
    if (e % config.eval_every == 0) {
      trace.checkpoints.push_back({e, checkpoint_success(agent, world, config)});
    }

    const double eps = schedule.rate(e);
    int s = world.source_state();
    int total = 0;
    int steps = 0;
    for (; steps < world.step_cap(); ++steps) {
      agent.q_values(s, q);
      const int a = select_action(q, eps, explore);
      const StepResult r = world.step(s, a);
      agent.learn({s, a, r.reward, r.next_state, r.terminal}, config.gamma, lr);
      total += r.reward;
      if (r.terminal) {
        ++steps;
        break;
      }
      s = r.next_state;
    }
    trace.rewards.push_back(total);
    trace.epsilons.push_back(eps);
    trace.lengths.push_back(steps);
    if (observer != nullptr) observer->on_episode_end(e, total, schedule, trace);
  }
  trace.checkpoints.push_back({config.episodes, checkpoint_success(agent, world, config)});
  return result;
}

std::optional<int> episodes_to_converge(std::span<const Checkpoint> checkpoints, int fault_episode,
                                        double threshold, int window) {
  if (window < 1) throw std::invalid_argument("convergence window must be >= 1");
  std::vector<const Checkpoint*> after;
  for (const auto& c : checkpoints) {
    if (c.episode >= fault_episode) after.push_back(&c);
  }
  for (std::size_t i = 0; i < after.size(); ++i) {
    const std::size_t lo = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - window : 0;
    double sum = 0.0;
    for (std::size_t j = lo; j <= i; ++j) sum += after[j]->success_rate;
    if (sum / static_cast<double>(i - lo + 1) > threshold) return after[i]->episode - fault_episode;
  }
  return std::nullopt;
}

std::optional<int> episodes_to_converge(const TrainingTrace& trace, double threshold, int window) {
  return episodes_to_converge(trace.checkpoints, trace.fault_episode.value_or(0), threshold, window);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr std::string_view kMagic = "faultnav-checkpoint";

std::string_view act_name(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation parse_act(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw std::runtime_error("checkpoint: unknown activation '" + s + "'");
}

}  // namespace

void save_checkpoint(const QAgent& agent, std::ostream& out, std::uint64_t seed) {
  auto copy = agent.clone();
  const auto& fmt = copy->format();
  out << kMagic << " 1\n";
  out << "kind " << to_string(copy->kind()) << "\n";
  out << "format " << fmt.to_string() << "\n";
  out << "states " << copy->num_states() << "\n";
  out << "seed " << seed << "\n";
  if (auto* mlp = dynamic_cast<MlpQ*>(copy.get())) {
    for (const auto& layer : mlp->layers()) {
      out << "layer " << layer.in << " " << layer.out << " " << act_name(layer.act) << "\n";
    }
  }
  const auto slots = copy->buffers();
  for (const auto& slot : slots) out << "buffer " << slot.id.name() << " " << slot.buffer->size() << "\n";
  out << "data\n";
  const int bytes = (fmt.width() + 7) / 8;
  for (const auto& slot : slots) {
    for (std::size_t i = 0; i < slot.buffer->size(); ++i) {
      const std::uint32_t raw = slot.buffer->raw(i);
      for (int b = 0; b < bytes; ++b) out.put(static_cast<char>((raw >> (8 * b)) & 0xFFu));
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

LoadedCheckpoint load_checkpoint(std::istream& in) {
  auto fail = [](const std::string& why) -> LoadedCheckpoint {
    throw std::runtime_error("checkpoint: " + why);
  };
  std::string line;
  if (!std::getline(in, line) || line != std::string(kMagic) + " 1") return fail("bad magic");

  AgentKind kind = AgentKind::tabular;
  FixedFormat fmt;
  int states = 0;
  std::uint64_t seed = 0;
  std::vector<LayerSpec> specs;
  std::vector<std::pair<std::string, std::size_t>> declared;
  for (;;) {
    if (!std::getline(in, line)) return fail("truncated header");
    if (line == "data") break;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key == "kind") {
      std::string v;
      fields >> v;
      kind = parse_agent_kind(v);
    } else if (key == "format") {
      std::string v;
      std::getline(fields, v);
      fmt = FixedFormat::parse(v);
    } else if (key == "states") {
      fields >> states;
    } else if (key == "seed") {
      fields >> seed;
    } else if (key == "layer") {
      LayerSpec spec;
      std::string act;
      fields >> spec.in >> spec.out >> act;
      spec.act = parse_act(act);
      specs.push_back(spec);
    } else if (key == "buffer") {
      std::string name;
      std::size_t n = 0;
      fields >> name >> n;
      declared.emplace_back(name, n);
    } else {
      return fail("unknown header key '" + key + "'");
    }
    if (fields.fail()) return fail("malformed header line '" + line + "'");
  }
  if (states <= 0) return fail("missing state count");

  LoadedCheckpoint loaded;
  loaded.seed = seed;
  if (kind == AgentKind::tabular) {
    loaded.agent = std::make_unique<TabularQ>(states, fmt);
  } else {
    loaded.agent = std::make_unique<MlpQ>(states, specs, fmt);
  }
  auto slots = loaded.agent->buffers();
  if (slots.size() != declared.size()) return fail("buffer count mismatch");
  const int bytes = (fmt.width() + 7) / 8;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (slots[k].id.name() != declared[k].first || slots[k].buffer->size() != declared[k].second) {
      return fail("buffer layout mismatch at " + declared[k].first);
    }
    std::vector<std::uint32_t> raws(declared[k].second);
    for (auto& raw : raws) {
      raw = 0;
      for (int b = 0; b < bytes; ++b) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) return fail("truncated data");
        raw |= static_cast<std::uint32_t>(c & 0xFF) << (8 * b);
      }
    }
    slots[k].buffer->load_raw(raws);
  }
  return loaded;
}

}  // namespace faultnav
