#include <doctest.h>

#include <array>
#include <cmath>
#include <sstream>
#include <vector>

#include "faultnav/agent.hpp"

using namespace faultnav;

namespace {

const GridWorld kEmpty3 = GridWorld::from_text("S..\n...\n..G\n");

// Exact probability that a uniform random walk from the source reaches the
// goal of a hell-free grid within the step cap.
double random_walk_success(const GridWorld& w) {
  std::vector<double> p(static_cast<std::size_t>(w.num_states()), 0.0);
  p[static_cast<std::size_t>(w.source_state())] = 1.0;
  double absorbed = 0.0;
  for (int t = 0; t < w.step_cap(); ++t) {
    std::vector<double> next(p.size(), 0.0);
    for (int s = 0; s < w.num_states(); ++s) {
      const double mass = p[static_cast<std::size_t>(s)];
      if (mass == 0.0) continue;
      for (int a = 0; a < kNumActions; ++a) {
        const StepResult r = w.step(s, a);
        if (r.terminal) {
          if (r.reward > 0) absorbed += mass / kNumActions;
        } else {
          next[static_cast<std::size_t>(r.next_state)] += mass / kNumActions;
        }
      }
    }
    p = std::move(next);
  }
  return absorbed;
}

double td_loss(MlpQ& net, int state, int action, double target) {
  std::array<double, kNumActions> q{};
  net.q_values(state, q);
  const double d = q[static_cast<std::size_t>(action)] - target;
  return 0.5 * d * d;
}

}  // namespace

TEST_SUITE("agent") {

TEST_CASE("select_action examples") {
  Rng rng(1);
  const std::array<double, 4> a{0.1, 0.9, 0.3, 0.3};
  const std::array<double, 4> b{0.5, 0.5, 0.1, 0.1};
  CHECK(select_action(a, 0.0, rng) == 1);
  CHECK(select_action(b, 0.0, rng) == 0);
  std::array<int, 4> counts{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(select_action(a, 1.0, rng))];
  for (int c : counts) CHECK(std::fabs(static_cast<double>(c) / draws - 0.25) < 0.01);
}

TEST_CASE("property: argmax invariant under positive affine maps") {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    std::array<double, 4> q{};
    for (auto& v : q) v = std::round(uniform_real(rng, -4, 4) * 4) / 4;  // ties happen
    const double scale = uniform_real(rng, 0.25, 8.0);
    const double shift = uniform_real(rng, -8, 8);
    std::array<double, 4> t{};
    for (std::size_t k = 0; k < 4; ++k) t[k] = q[k] * scale + shift;
    REQUIRE(greedy_action(q) == greedy_action(t));
  }
}

TEST_CASE("tabular update examples") {
  TabularQ agent(9, FixedFormat(3, 4), false);
  agent.table().fill(0.0);
  agent.learn({0, 3, 1, 8, true}, 0.9, 0.1);
  CHECK(agent.at(0, 3) == doctest::Approx(0.125));  // 0.1 rounds to the Q(1,3,4) grid
  TabularQ wide(9, FixedFormat(4, 11), false);
  wide.table().fill(0.0);
  wide.learn({0, 3, 1, 8, true}, 0.9, 0.1);
  CHECK(wide.at(0, 3) == doctest::Approx(0.1).epsilon(1e-3));

  TabularQ b(9, FixedFormat(3, 4), false);
  b.table().fill(0.0);
  b.table().write(TabularQ::index(1, 1), 0.729);
  b.learn({0, 3, 0, 1, false}, 0.9, 0.1);
  // 0.1 * 0.9 * 0.75 (0.729 stored as 0.75) = 0.0675, nearest grid point 0.0625.
  CHECK(b.at(0, 3) == 0.0625);

  TabularQ c(9, FixedFormat(3, 4));
  c.table().fill(0.5);
  const auto before = c.table().tensor().data();
  c.learn({0, 3, 1, 8, true}, 0.9, 0.0);
  CHECK(c.table().tensor().data() == before);
}

TEST_CASE("mlp forward examples") {
  const int S = 4;
  std::vector<LayerSpec> zero{{S, 8, Activation::relu, {}, {}}, {8, 4, Activation::identity, {}, {}}};
  MlpQ z(S, zero, FixedFormat(3, 4));
  std::array<double, 4> q{};
  for (int s = 0; s < S; ++s) {
    z.q_values(s, q);
    for (double v : q) CHECK(v == 0.0);
  }
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 4 + i)] = 1.0;
  std::vector<LayerSpec> ident{{S, 4, Activation::identity, eye, {}}};
  MlpQ id(S, ident, FixedFormat(3, 4));
  id.q_values(2, q);
  CHECK(q == std::array<double, 4>{0.0, 0.0, 1.0, 0.0});
}

TEST_CASE("mlp gradient matches central differences") {
  const int S = 6;
  const std::array<int, 1> hidden{8};
  // A 32-bit format with params on its grid and a power-of-two step keeps the
  // perturbed parameters exact; the loss is quadratic in any single
  // parameter between ReLU kinks, so central differences are exact there.
  MlpQ net(S, hidden, FixedFormat(10, 21), 5, false);
  net.set_quantize_activations(false);
  Rng rng(6);
  for (auto& layer : net.layers()) {
    for (std::size_t i = 0; i < layer.params.size(); ++i) {
      layer.params.write(i, uniform_real(rng, -0.8, 0.8));
    }
  }
  const double h = std::ldexp(1.0, -12);
  for (int state = 0; state < S; ++state) {
    const int action = state % 4;
    const double target = 0.3;
    const auto grad = net.td_gradient(state, action, target);
    REQUIRE(grad.size() == net.layers().size());
    double worst = 0.0;
    for (std::size_t l = 0; l < grad.size(); ++l) {
      QuantBuffer& p = net.layers()[l].params;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double w = p.read(i);
        p.write(i, w + h);
        const double up = td_loss(net, state, action, target);
        p.write(i, w - h);
        const double down = td_loss(net, state, action, target);
        p.write(i, w);
        const double fd = (up - down) / (2 * h);
        const double denom = std::max({std::fabs(fd), std::fabs(grad[l][i]), 1e-8});
        worst = std::max(worst, std::fabs(fd - grad[l][i]) / denom);
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("mlp learning rate zero leaves weights unchanged") {
  const std::array<int, 2> hidden{32, 32};
  MlpQ net(25, hidden, FixedFormat(1, 6), 3);
  std::vector<std::vector<std::uint32_t>> before;
  for (auto& l : net.layers()) before.push_back(l.params.tensor().data());
  net.learn({0, 1, 0, 5, false}, 0.9, 0.0);
  for (std::size_t l = 0; l < before.size(); ++l) {
    CHECK(net.layers()[l].params.tensor().data() == before[l]);
  }
}

TEST_CASE("mlp converges on a fixed terminal transition") {
  const std::array<int, 2> hidden{32, 32};
  const FixedFormat fmt(1, 6);
  MlpQ net(25, hidden, fmt, 4);
  for (int i = 0; i < 2000; ++i) net.learn({3, 2, 1, 4, true}, 0.9, 0.05);
  std::array<double, 4> q{};
  net.q_values(3, q);
  CHECK(std::fabs(q[2] - 1.0) < fmt.lsb());
}

TEST_CASE("epsilon schedule examples") {
  ExplorationSchedule s;
  s.initial = 1.0;
  s.floor = 0.05;
  s.decay_episodes = 100;
  CHECK(epsilon_at(s, 0) == 1.0);
  CHECK(epsilon_at(s, 100) == doctest::Approx(0.05));
  CHECK(epsilon_at(s, 5000) == doctest::Approx(0.05));
  CHECK(epsilon_at(s, 50) == doctest::Approx(0.525));
  double prev = 2.0;
  for (int e = 0; e < 300; ++e) {
    const double r = epsilon_at(s, e);
    REQUIRE(r <= prev);
    REQUIRE(r >= s.floor);
    REQUIRE(r <= 1.0);
    prev = r;
  }
  CHECK_FALSE(s.steady(99));
  CHECK(s.steady(100));
}

TEST_CASE("episodes_to_converge examples") {
  const std::vector<Checkpoint> rising{{0, 0.2}, {50, 0.8}, {100, 0.97}, {150, 0.99}};
  CHECK(episodes_to_converge(rising, 0) == 150);
  const std::vector<Checkpoint> ones{{0, 1.0}, {10, 1.0}, {20, 1.0}};
  CHECK(episodes_to_converge(ones, 0) == 0);
  const std::vector<Checkpoint> half{{0, 0.5}, {10, 0.5}, {20, 0.5}};
  CHECK_FALSE(episodes_to_converge(half, 0).has_value());
  // Counting starts at the first checkpoint at or after the fault.
  const std::vector<Checkpoint> late{{0, 1.0}, {10, 1.0}, {20, 0.1}, {30, 1.0}, {40, 1.0}};
  CHECK(episodes_to_converge(late, 20) == 20);
}

TEST_CASE("clean tabular training converges on the pinned world") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  const TrainResult r = train(w, TrainConfig::defaults(AgentKind::tabular), nullptr, nullptr, 0);
  CHECK(r.trace.final_success() > 0.95);
  CHECK(r.trace.rewards.size() == 1000);
  CHECK(r.trace.epsilons.size() == 1000);
  CHECK(r.trace.lengths.size() == 1000);
}

TEST_CASE("training is deterministic") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  for (const auto kind : {AgentKind::tabular, AgentKind::mlp}) {
    TrainConfig c = TrainConfig::defaults(kind);
    c.episodes = kind == AgentKind::mlp ? 150 : 400;
    FaultPlan plan;
    plan.kind = FaultKind::transient_m;
    plan.site = {kind == AgentKind::mlp ? SiteKind::weights : SiteKind::tabular, -1};
    plan.ber = 0.01;
    plan.timing = FaultTiming::episode;
    plan.episode = 100;
    plan.seed = 9;
    const TrainResult a = train(w, c, &plan, nullptr, 42);
    const TrainResult b = train(w, c, &plan, nullptr, 42);
    CHECK(a.trace.rewards == b.trace.rewards);
    CHECK(a.trace.epsilons == b.trace.epsilons);
    CHECK(a.trace.fault_events.size() == b.trace.fault_events.size());
    std::ostringstream ca;
    std::ostringstream cb;
    save_checkpoint(*a.agent, ca, 42);
    save_checkpoint(*b.agent, cb, 42);
    CHECK(ca.str() == cb.str());
  }
}

TEST_CASE("late transient shows up as a reward drop") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  TrainConfig c = TrainConfig::defaults(AgentKind::tabular);
  FaultPlan plan;
  plan.kind = FaultKind::transient_m;
  plan.site = {SiteKind::tabular, -1};
  plan.ber = 0.05;
  plan.timing = FaultTiming::episode;
  plan.episode = 900;
  int dropped = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    plan.seed = seed;
    const TrainResult r = train(w, c, &plan, nullptr, seed);
    REQUIRE(r.trace.fault_episode == 900);
    double before = 0.0;
    for (int e = 850; e < 900; ++e) before += r.trace.rewards[static_cast<std::size_t>(e)];
    double after = 0.0;
    for (int e = 900; e < 950; ++e) after += r.trace.rewards[static_cast<std::size_t>(e)];
    if (after < before) ++dropped;
    for (const auto& ev : r.trace.fault_events) REQUIRE(ev.episode == 900);
  }
  CHECK(dropped >= 15);
}

TEST_CASE("property: Bellman oracle equivalence on empty grids") {
  for (const char* text : {"S..\n...\n..G\n", "S....\n.....\n.....\n.....\n....G\n"}) {
    const GridWorld w = GridWorld::from_text(text);
    const OptimalQ oracle = solve_exact(w, 0.9);
    TrainConfig c = TrainConfig::defaults(AgentKind::tabular);
    c.format = FixedFormat(4, 11);
    c.episodes = 2000;
    c.q_init = 0.0;
    const TrainResult r = train(w, c, nullptr, nullptr, 3);
    auto& agent = static_cast<TabularQ&>(*r.agent);
    int s = w.source_state();
    int steps = 0;
    while (!w.is_terminal(s) && steps < w.step_cap()) {
      std::array<double, 4> q{};
      agent.q_values(s, q);
      const int a = greedy_action(q);
      // Any oracle-optimal action is acceptable where the oracle ties.
      REQUIRE(oracle.at(s, a) == doctest::Approx(oracle.value(s)).epsilon(1e-9));
      s = w.step(s, oracle.greedy(s)).next_state;
      ++steps;
    }
    CHECK(s == w.goal_state());
  }
}

TEST_CASE("property: stored raws are reachable by quantize") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  const TrainResult r = train(w, TrainConfig::defaults(AgentKind::mlp), nullptr, nullptr, 1);
  for (auto& slot : r.agent->buffers()) {
    const FixedFormat& f = slot.buffer->format();
    for (std::size_t i = 0; i < slot.buffer->size(); ++i) {
      const std::uint32_t raw = slot.buffer->raw(i);
      REQUIRE(quantize(dequantize_raw(raw, f), f).raw == raw);
      REQUIRE((raw & ~f.mask()) == 0u);
    }
  }
}

TEST_CASE("evaluate: oracle policy and random walk") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  const OptimalQ oracle = solve_exact(w, 0.9);
  TabularQ agent(w.num_states(), FixedFormat(4, 11));
  for (int s = 0; s < w.num_states(); ++s) {
    for (int a = 0; a < kNumActions; ++a) agent.table().write(TabularQ::index(s, a), oracle.at(s, a));
  }
  EvalOptions opts;
  CHECK(evaluate(agent, w, opts).success_rate == 1.0);

  const double exact = random_walk_success(kEmpty3);
  TabularQ walker(9, FixedFormat(3, 4));
  EvalOptions walk;
  walk.trials = 1000;
  walk.epsilon = 1.0;
  walk.seed = 8;
  const double observed = evaluate(walker, kEmpty3, walk).success_rate;
  const double sigma = std::sqrt(exact * (1 - exact) / walk.trials);
  CHECK(exact > 0.0);
  CHECK(exact < 1.0);
  CHECK(std::fabs(observed - exact) <= 3 * sigma);
}

TEST_CASE("evaluate: constant table follows the tie-break path") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  TabularQ agent(w.num_states(), FixedFormat(3, 4));
  agent.table().fill(FixedFormat(3, 4).max_value());
  EvalOptions opts;
  opts.trials = 50;
  const Metrics a = evaluate(agent, w, opts);
  const Metrics b = evaluate(agent, w, opts);
  // Always "up" from the top-left corner: the agent never leaves the source.
  CHECK(a.success_rate == 0.0);
  CHECK(a.mean_length == w.step_cap());
  CHECK(a.success_rate == b.success_rate);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  for (const auto kind : {AgentKind::tabular, AgentKind::mlp}) {
    TrainConfig c = TrainConfig::defaults(kind);
    c.episodes = 100;
    const TrainResult r = train(w, c, nullptr, nullptr, 11);
    std::stringstream buf;
    save_checkpoint(*r.agent, buf, 11);
    const std::string first = buf.str();
    const LoadedCheckpoint loaded = load_checkpoint(buf);
    CHECK(loaded.seed == 11);
    CHECK(loaded.agent->kind() == kind);
    std::ostringstream again;
    save_checkpoint(*loaded.agent, again, 11);
    CHECK(again.str() == first);
  }
  std::istringstream junk("not a checkpoint");
  CHECK_THROWS(load_checkpoint(junk));
}

TEST_CASE("train rejects mismatched plans before running") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  FaultPlan plan;
  plan.kind = FaultKind::stuck_at_1;
  plan.site = {SiteKind::weights, -1};
  plan.ber = 0.01;
  CHECK_THROWS_AS(train(w, TrainConfig::defaults(AgentKind::tabular), &plan, nullptr, 0),
                  std::invalid_argument);
  plan.kind = FaultKind::transient_1;
  plan.site = {SiteKind::tabular, -1};
  CHECK_THROWS_AS(train(w, TrainConfig::defaults(AgentKind::tabular), &plan, nullptr, 0),
                  std::invalid_argument);
  TrainConfig bad = TrainConfig::defaults(AgentKind::tabular);
  bad.lr = -1;
  CHECK_THROWS(train(w, bad, nullptr, nullptr, 0));
}

}  // TEST_SUITE
