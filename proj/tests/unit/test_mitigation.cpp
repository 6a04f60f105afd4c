#include <doctest.h>

#include <array>
#include <algorithm>
#include <cmath>
#include <vector>

#include "faultnav/mitigation.hpp"

using namespace faultnav;

TEST_SUITE("mitigation") {

TEST_CASE("config defaults and validation") {
  const auto t = TrainMitigationConfig::defaults(AgentKind::tabular);
  const auto m = TrainMitigationConfig::defaults(AgentKind::mlp);
  CHECK(t.x == 25.0);
  CHECK(t.y == 50);
  CHECK(t.alpha == 0.8);
  CHECK(m.alpha == 0.4);
  CHECK(t.T == 100);
  CHECK(m.T == TrainConfig::defaults(AgentKind::mlp).schedule.decay_episodes);
  TrainMitigationConfig bad = t;
  bad.x = 100.0;
  CHECK_THROWS(bad.validate());
  bad = t;
  bad.y = 0;
  CHECK_THROWS(bad.validate());
  bad = t;
  bad.alpha = 1.5;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("detect_transient examples") {
  std::vector<double> flat(60, 10.0);
  CHECK_FALSE(detect_transient(flat, 25, 50, 10.0).has_value());
  std::vector<double> drop(60, 10.0);
  drop.back() = 7.0;
  const auto hit = detect_transient(drop, 25, 50, 10.0);
  REQUIRE(hit.has_value());
  CHECK(hit->drop == doctest::Approx(3.0));
  drop.back() = 8.0;
  CHECK_FALSE(detect_transient(drop, 25, 50, 10.0).has_value());
  // The maximum only counts inside the last y entries.
  std::vector<double> old_peak(60, 6.0);
  old_peak[0] = 10.0;
  old_peak.back() = 5.0;
  CHECK_FALSE(detect_transient(old_peak, 25, 50, 10.0).has_value());
}

TEST_CASE("detect_permanent examples") {
  const std::vector<double> low(50, 0.4);
  const std::vector<double> high(50, 0.6);
  const std::vector<double> tiny(50, 0.1);
  CHECK(detect_permanent(low, true, 1.0));
  CHECK_FALSE(detect_permanent(high, true, 1.0));
  CHECK_FALSE(detect_permanent(tiny, false, 1.0));
}

TEST_CASE("adjust_exploration examples") {
  CHECK(adjust_exploration(0.1, 0.8, 0.5, 1.0, 50, 100) == doctest::Approx(0.3));
  CHECK(adjust_exploration(0.1, 0.8, 0.0, 1.0, 50, 100) == 0.1);
  CHECK(adjust_exploration(0.1, 0.8, 0.5, 1.0, 200, 100) == doctest::Approx(0.5));
  CHECK(adjust_exploration(0.9, 0.8, 1.0, 1.0, 500, 100) == 1.0);
  CHECK(adjust_exploration(0.0, 0.8, 0.0, 1.0, 0, 100, 0.05) == 0.05);
  CHECK_THROWS(adjust_exploration(0.1, 0.8, 0.5, 0.0, 50, 100));
  CHECK_THROWS(adjust_exploration(0.1, 0.8, 0.5, 1.0, 50, 0));
}

TEST_CASE("property: adjustment bounds and monotonicity") {
  Rng rng(21);
  for (int i = 0; i < 20000; ++i) {
    const double alpha = uniform_real(rng, 0.01, 1.0);
    const double r_max = uniform_real(rng, 0.1, 10.0);
    const double dr = uniform_real(rng, 0.0, r_max);
    const double T = uniform_real(rng, 1.0, 500.0);
    const double t = uniform_real(rng, 0.0, 3 * T);
    const double er = uniform_real(rng, 0.0, 0.2);
    const double delta = adjust_exploration(er, alpha, dr, r_max, t, T, 0.0) - er;
    REQUIRE(delta >= -1e-12);
    REQUIRE(delta <= alpha * dr / r_max + 1e-12);
    const double more_dr = adjust_exploration(er, alpha, std::min(r_max, dr * 1.1), r_max, t, T, 0.0);
    const double later = adjust_exploration(er, alpha, dr, r_max, t * 1.1, T, 0.0);
    REQUIRE(more_dr >= er + delta - 1e-12);
    REQUIRE(later >= er + delta - 1e-12);
  }
}

TEST_CASE("recover_permanent examples") {
  ExplorationSchedule s;
  s.initial = 1.0;
  s.floor = 0.05;
  s.decay_episodes = 100;
  MitigationState st;
  recover_permanent(s, st, 300);
  CHECK(st.n == 1);
  CHECK(s.horizon() == 200);
  CHECK(s.rate(300) == 1.0);
  CHECK(s.rate(400) == doctest::Approx(0.525));
  CHECK(s.rate(500) == doctest::Approx(0.05));
  recover_permanent(s, st, 600);
  recover_permanent(s, st, 1500);
  CHECK(st.n == 3);
  CHECK(s.horizon() == 800);
  for (int i = 0; i < 10; ++i) recover_permanent(s, st, 3000 + i, 6);
  CHECK(s.horizon() == 100 << 6);

  ExplorationSchedule untouched;
  CHECK(untouched.horizon() == 100);
  CHECK(untouched.anchor == 0);
}

TEST_CASE("boost decays back to the base schedule over T") {
  ExplorationSchedule s;
  s.decay_episodes = 100;
  s.boost = ExplorationSchedule::Boost{500, 0.45};
  CHECK(s.rate(500) == doctest::Approx(0.45));
  CHECK(s.rate(550) == doctest::Approx(0.25));
  CHECK(s.rate(600) == doctest::Approx(0.05));
  CHECK_FALSE(s.steady(550));
  CHECK(s.steady(600));
}

TEST_CASE("widen_bounds examples") {
  const ValueBounds b = widen_bounds(-1.0, 2.0);
  CHECK(b.lower == doctest::Approx(-1.1));
  CHECK(b.upper == doctest::Approx(2.2));
  const ValueBounds z = widen_bounds(0.0, 0.0);
  CHECK(z.lower == -1.0);
  CHECK(z.upper == 1.0);
  const ValueBounds pos = widen_bounds(0.5, 1.0);
  CHECK(pos.lower == doctest::Approx(0.45));
}

TEST_CASE("check_anomaly examples") {
  const FixedFormat f(4, 11);
  const ValueBounds b{-1.1, 2.2};
  CHECK(check_anomaly(quantize(3.7, f), b));
  CHECK_FALSE(check_anomaly(quantize(2.9, f), b));
  CHECK_FALSE(check_anomaly(quantize(-1.05, f), b));
  CHECK(check_anomaly(flip_bit(quantize(0.0, f), 15), b));
  // Fraction-only perturbations never flag an in-range value.
  for (int bit = 0; bit < f.fraction_bits(); ++bit) {
    CHECK_FALSE(check_anomaly(flip_bit(quantize(1.0, f), bit), b));
  }
}

TEST_CASE("property: raw window agrees with check_anomaly on every pattern") {
  Rng rng(17);
  for (const FixedFormat f : {FixedFormat(3, 4), FixedFormat(1, 6), FixedFormat(4, 11)}) {
    for (int k = 0; k < 50; ++k) {
      const double a = uniform01(rng) * 2.0 * f.max_value() - f.max_value();
      const double b = uniform01(rng) * 2.0 * f.max_value() - f.max_value();
      const ValueBounds bounds{std::min(a, b), std::max(a, b)};
      const RawWindow w = raw_window(bounds, f);
      for (std::uint32_t raw = 0; raw <= f.mask(); ++raw) {
        REQUIRE(w.flags(raw) == check_anomaly_raw(raw, f, bounds));
      }
    }
    const RawWindow wide = raw_window({-1e300, 1e300}, f);
    CHECK_FALSE(wide.flags(0));
    CHECK_FALSE(wide.flags(f.mask()));
  }
}

TEST_CASE("guard transparency without faults") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  for (const auto kind : {AgentKind::tabular, AgentKind::mlp}) {
    const TrainResult r = train(w, TrainConfig::defaults(kind), nullptr, nullptr, 0);
    const RangeProfile profile = calibrate_ranges(*r.agent, w);
    auto agent = r.agent->clone();
    std::uint64_t alarms = 0;
    for (int s = 0; s < w.num_states(); ++s) {
      std::array<double, 4> plain{};
      std::array<double, 4> guarded{};
      agent->q_values(s, plain);
      guarded_forward(*agent, s, profile, guarded, &alarms);
      REQUIRE(plain == guarded);
    }
    CHECK(alarms == 0);
    EvalOptions opts;
    const Metrics a = evaluate(*r.agent, w, opts);
    opts.guard = &profile;
    const Metrics b = evaluate(*r.agent, w, opts);
    CHECK(a.success_rate == b.success_rate);
    CHECK(a.mean_length == b.mean_length);
  }
}

TEST_CASE("guard skip equals zeroing the flagged weight") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  TrainConfig c = TrainConfig::defaults(AgentKind::mlp);
  c.format = FixedFormat(4, 11);
  const TrainResult r = train(w, c, nullptr, nullptr, 0);
  const RangeProfile profile = calibrate_ranges(*r.agent, w);

  auto faulty = r.agent->clone();
  auto zeroed = r.agent->clone();
  auto& fl = static_cast<MlpQ&>(*faulty).layers()[1];
  auto& zl = static_cast<MlpQ&>(*zeroed).layers()[1];
  const std::size_t idx = fl.weight_index(3, 5);
  fl.params.flip(idx, 14);  // +8 on a small weight
  zl.params.write(idx, 0.0);
  REQUIRE(check_anomaly_raw(fl.params.raw(idx), c.format, profile.layers[1].params));

  std::uint64_t alarms = 0;
  for (int s = 0; s < w.num_states(); ++s) {
    if (w.is_terminal(s)) continue;
    std::array<double, 4> guarded{};
    std::array<double, 4> reference{};
    guarded_forward(*faulty, s, profile, guarded, &alarms);
    zeroed->q_values(s, reference);
    REQUIRE(guarded == reference);
  }
  CHECK(alarms > 0);

  std::array<double, 4> wrong{};
  RangeProfile other = profile;
  other.format = FixedFormat(3, 4);
  CHECK_THROWS(guarded_forward(*faulty, 0, other, wrong));
}

TEST_CASE("guarded table read treats an out-of-range entry as zero") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  const TrainResult r = train(w, TrainConfig::defaults(AgentKind::tabular), nullptr, nullptr, 0);
  const RangeProfile profile = calibrate_ranges(*r.agent, w);
  REQUIRE(profile.layers.size() == 1);
  auto faulty = r.agent->clone();
  auto& table = static_cast<TabularQ&>(*faulty).table();
  const int s = w.source_state();
  std::array<double, 4> clean{};
  faulty->q_values(s, clean);
  const int best = greedy_action(clean);
  const int other = (best + 1) % 4;
  table.flip(TabularQ::index(s, other), 6);  // +4 in Q(1,3,4)
  std::array<double, 4> plain{};
  std::array<double, 4> guarded{};
  faulty->q_values(s, plain);
  CHECK(greedy_action(plain) == other);
  std::uint64_t alarms = 0;
  guarded_forward(*faulty, s, profile, guarded, &alarms);
  CHECK(guarded[static_cast<std::size_t>(other)] == 0.0);
  CHECK(alarms == 1);
  for (int a = 0; a < 4; ++a) {
    if (a != other) CHECK(guarded[static_cast<std::size_t>(a)] == clean[static_cast<std::size_t>(a)]);
  }
}

TEST_CASE("calibrated profiles contain the clean values") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  const TrainResult r = train(w, TrainConfig::defaults(AgentKind::mlp), nullptr, nullptr, 0);
  const RangeProfile p = calibrate_ranges(*r.agent, w, 100, 0.1);
  auto& net = static_cast<MlpQ&>(*r.agent);
  REQUIRE(p.layers.size() == net.layers().size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(p.layers[l].params.lower <= p.layers[l].params.upper);
    CHECK(p.layers[l].outputs.lower <= p.layers[l].outputs.upper);
    const auto& params = net.layers()[l].params;
    for (std::size_t i = 0; i < params.size(); ++i) {
      REQUIRE(params.read(i) >= p.layers[l].params.lower);
      REQUIRE(params.read(i) <= p.layers[l].params.upper);
    }
  }
  CHECK(p.input.lower <= 0.0);
  CHECK(p.input.upper >= 1.0);
}

TEST_CASE("controller is silent on clean runs") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  for (const auto kind : {AgentKind::tabular, AgentKind::mlp}) {
    const TrainConfig c = TrainConfig::defaults(kind);
    int flagged = 0;
    const int runs = 200;
    for (int seed = 0; seed < runs; ++seed) {
      ExplorationController ctl(TrainMitigationConfig::defaults(kind));
      const TrainResult r = train(w, c, nullptr, &ctl, static_cast<std::uint64_t>(seed));
      if (!r.trace.detections.empty()) ++flagged;
    }
    INFO(to_string(kind));
    CHECK(flagged < runs / 20);
  }
}

TEST_CASE("controller reacts to a late transient and logs the change") {
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  TrainConfig c = TrainConfig::defaults(AgentKind::tabular);
  FaultPlan plan;
  plan.kind = FaultKind::transient_m;
  plan.site = {SiteKind::tabular, -1};
  plan.ber = 0.05;
  plan.timing = FaultTiming::episode;
  plan.episode = 600;
  int detected = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    plan.seed = seed;
    ExplorationController ctl(TrainMitigationConfig::defaults(AgentKind::tabular));
    const TrainResult r = train(w, c, &plan, &ctl, seed);
    for (const auto& d : r.trace.detections) {
      REQUIRE(d.episode >= 600);
      REQUIRE(d.new_rate >= d.old_rate);
      REQUIRE(r.trace.epsilons[static_cast<std::size_t>(std::min(d.episode + 1, 999))] >= d.old_rate);
    }
    if (!r.trace.detections.empty()) ++detected;
  }
  CHECK(detected >= 10);
}

TEST_CASE("mitigation is transparent on clean greedy rollouts") {
  // With no faults and no detections the controller leaves training alone.
  const GridWorld w = GridWorld::generate(5, 0.2, 7);
  const TrainConfig c = TrainConfig::defaults(AgentKind::tabular);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ExplorationController ctl(TrainMitigationConfig::defaults(AgentKind::tabular));
    const TrainResult with = train(w, c, nullptr, &ctl, seed);
    const TrainResult without = train(w, c, nullptr, nullptr, seed);
    if (!with.trace.detections.empty()) continue;
    CHECK(with.trace.rewards == without.trace.rewards);
    CHECK(with.trace.epsilons == without.trace.epsilons);
  }
}

}  // TEST_SUITE
