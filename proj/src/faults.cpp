#include "faultnav/faults.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "faultnav/agent.hpp"
#include "faultnav/buffer.hpp"

namespace faultnav {

std::string_view to_string(FaultKind k) {
  switch (k) {
    case FaultKind::none: return "none";
    case FaultKind::transient_1: return "transient_1";
    case FaultKind::transient_m: return "transient_m";
    case FaultKind::stuck_at_0: return "stuck_at_0";
    case FaultKind::stuck_at_1: return "stuck_at_1";
  }
  return "?";
}

std::string_view to_string(SiteKind k) {
  switch (k) {
    case SiteKind::tabular: return "tabular";
    case SiteKind::input: return "input";
    case SiteKind::weights: return "weights";
    case SiteKind::activations: return "activations";
  }
  return "?";
}

std::string_view to_string(FaultTiming t) {
  switch (t) {
    case FaultTiming::before_training: return "before_training";
    case FaultTiming::episode: return "episode";
    case FaultTiming::inference: return "inference";
    case FaultTiming::per_step: return "per_step";
  }
  return "?";
}

std::string_view to_string(SamplingMode m) {
  return m == SamplingMode::exact ? "exact" : "bernoulli";
}

FaultKind parse_fault_kind(std::string_view s) {
  if (s == "none") return FaultKind::none;
  if (s == "transient_1" || s == "transient-1") return FaultKind::transient_1;
  if (s == "transient_m" || s == "transient-m" || s == "transient_M") return FaultKind::transient_m;
  if (s == "stuck_at_0" || s == "stuck-at-0") return FaultKind::stuck_at_0;
  if (s == "stuck_at_1" || s == "stuck-at-1") return FaultKind::stuck_at_1;
  throw std::invalid_argument("unknown fault kind '" + std::string(s) + "'");
}

SiteKind parse_site_kind(std::string_view s) {
  if (s == "tabular" || s == "table") return SiteKind::tabular;
  if (s == "input") return SiteKind::input;
  if (s == "weights" || s == "weight") return SiteKind::weights;
  if (s == "activations" || s == "activation") return SiteKind::activations;
  throw std::invalid_argument("unknown fault site '" + std::string(s) + "'");
}

FaultTiming parse_fault_timing(std::string_view s) {
  if (s == "before_training") return FaultTiming::before_training;
  if (s == "episode") return FaultTiming::episode;
  if (s == "inference") return FaultTiming::inference;
  if (s == "per_step") return FaultTiming::per_step;
  throw std::invalid_argument("unknown fault timing '" + std::string(s) + "'");
}

SamplingMode parse_sampling_mode(std::string_view s) {
  if (s == "exact") return SamplingMode::exact;
  if (s == "bernoulli") return SamplingMode::bernoulli;
  throw std::invalid_argument("unknown sampling mode '" + std::string(s) + "'");
}

bool is_stuck(FaultKind k) { return k == FaultKind::stuck_at_0 || k == FaultKind::stuck_at_1; }
int stuck_level(FaultKind k) { return k == FaultKind::stuck_at_1 ? 1 : 0; }

std::string BufferId::name() const {
  switch (kind) {
    case SiteKind::tabular: return "table";
    case SiteKind::input: return "input";
    case SiteKind::weights: return "weights[" + std::to_string(layer) + "]";
    case SiteKind::activations: return "activations[" + std::to_string(layer) + "]";
  }
  return "?";
}

bool FaultSite::matches(const BufferId& id) const {
  if (id.kind != kind) return false;
  return layer < 0 || kind == SiteKind::tabular || kind == SiteKind::input || id.layer == layer;
}

std::string FaultSite::name() const {
  std::string out(to_string(kind));
  if ((kind == SiteKind::weights || kind == SiteKind::activations) && layer >= 0) {
    out += "[" + std::to_string(layer) + "]";
  }
  return out;
}

void FaultPlan::validate(AgentKind agent, bool training, int episodes) const {
  if (!(ber >= 0.0 && ber <= 1.0)) throw std::invalid_argument("fault ber must lie in [0, 1]");
  if (kind == FaultKind::none) return;
  const bool tabular_site = site.kind == SiteKind::tabular;
  if (tabular_site != (agent == AgentKind::tabular)) {
    throw std::invalid_argument("fault site '" + site.name() + "' does not exist on a " +
                                std::string(to_string(agent)) + " agent");
  }
  if (training) {
    if (!is_training()) {
      throw std::invalid_argument("fault timing '" + std::string(to_string(timing)) +
                                  "' is inference-only");
    }
    if (kind == FaultKind::transient_1) {
      throw std::invalid_argument("transient_1 faults are only valid at inference");
    }
    if (timing == FaultTiming::episode && (episode < 0 || (episodes > 0 && episode >= episodes))) {
      throw std::invalid_argument("fault episode " + std::to_string(episode) +
                                  " outside the training run");
    }
  } else if (is_training()) {
    throw std::invalid_argument("fault timing '" + std::string(to_string(timing)) +
                                "' is training-only");
  }
}

FaultSiteSet sample_sites(std::span<const std::size_t> buffer_dims, int width, double ber,
                          Rng& rng, SamplingMode mode) {
  if (!(ber >= 0.0 && ber <= 1.0)) throw std::invalid_argument("ber must lie in [0, 1]");
  if (width <= 0 || width > 32) throw std::invalid_argument("bit width must be in [1, 32]");
  std::uint64_t total = 0;
  for (auto d : buffer_dims) total += static_cast<std::uint64_t>(d) * static_cast<std::uint64_t>(width);

  std::vector<std::uint64_t> picked;
  if (ber > 0.0 && total > 0) {
    if (mode == SamplingMode::exact) {
      const auto k = std::min<std::uint64_t>(
          total, static_cast<std::uint64_t>(std::llround(ber * static_cast<double>(total))));
      // Floyd's algorithm: k distinct values from [0, total).
      std::unordered_set<std::uint64_t> chosen;
      chosen.reserve(static_cast<std::size_t>(k) * 2);
      for (std::uint64_t j = total - k; j < total; ++j) {
        const std::uint64_t t = uniform_index(rng, j + 1);
        if (!chosen.insert(t).second) chosen.insert(j);
      }
      picked.assign(chosen.begin(), chosen.end());
    } else {
      for (std::uint64_t b = 0; b < total; ++b) {
        if (uniform01(rng) < ber) picked.push_back(b);
      }
    }
  }
  std::sort(picked.begin(), picked.end());

  FaultSiteSet out;
  out.sites.reserve(picked.size());
  std::size_t buf = 0;
  std::uint64_t base = 0;
  for (auto b : picked) {
    while (b >= base + buffer_dims[buf] * static_cast<std::uint64_t>(width)) {
      base += buffer_dims[buf] * static_cast<std::uint64_t>(width);
      ++buf;
    }
    const std::uint64_t local = b - base;
    out.sites.push_back({buf, static_cast<std::size_t>(local / static_cast<std::uint64_t>(width)),
                         static_cast<int>(local % static_cast<std::uint64_t>(width))});
  }
  return out;
}

FaultSiteSet sample_sites(std::span<const std::size_t> buffer_dims, int width, double ber,
                          std::uint64_t seed, SamplingMode mode) {
  Rng rng(derive_seed({tag("sites"), seed}));
  return sample_sites(buffer_dims, width, ber, rng, mode);
}

namespace {
void check_site(const FixedTensor& t, const BitSite& s) {
  if (s.buffer != 0 || s.element >= t.numel() || s.bit < 0 || s.bit >= t.format().width()) {
    throw std::out_of_range("fault site outside buffer bounds");
  }
}
}  // namespace

FixedTensor apply_static(const FixedTensor& buffer, const FaultSiteSet& sites, FaultKind kind) {
  FixedTensor out = buffer;
  for (const auto& s : sites.sites) {
    check_site(out, s);
    const FixedValue v = out.at(s.element);
    if (is_stuck(kind)) {
      out.set(s.element, stuck_bit(v, s.bit, stuck_level(kind)));
    } else if (kind != FaultKind::none) {
      out.set(s.element, flip_bit(v, s.bit));
    }
  }
  return out;
}

FixedTensor enforce_stuck_on_write(const FixedTensor& buffer, const FaultSiteSet& stuck_sites) {
  if (stuck_sites.level != 0 && stuck_sites.level != 1) {
    throw std::invalid_argument("stuck site set needs a level");
  }
  FixedTensor out = buffer;
  for (const auto& s : stuck_sites.sites) {
    check_site(out, s);
    out.set(s.element, stuck_bit(out.at(s.element), s.bit, stuck_sites.level));
  }
  return out;
}

FixedValue corrupt_read(const FixedValue& value, std::span<const int> flip_bits) {
  FixedValue v = value;
  for (int b : flip_bits) v = flip_bit(v, b);
  return v;
}

void mac_fault_as_output_corruption(QuantBuffer& activation_buffer, const FaultSiteSet& sites) {
  for (const auto& s : sites.sites) {
    if (s.element >= activation_buffer.size() || s.bit < 0 ||
        s.bit >= activation_buffer.format().width()) {
      throw std::out_of_range("fault site outside activation buffer");
    }
    activation_buffer.arm_flip(s.element, 1u << s.bit);
  }
}

std::vector<ResolvedSite> sample_agent_sites(QAgent& agent, const FaultPlan& plan, Rng& rng) {
  auto slots = agent.buffers(plan.site);
  if (slots.empty()) {
    throw std::invalid_argument("fault site '" + plan.site.name() + "' selects no buffer");
  }
  std::vector<std::size_t> dims;
  dims.reserve(slots.size());
  for (const auto& s : slots) dims.push_back(s.buffer->size());
  const auto set = sample_sites(dims, agent.format().width(), plan.ber, rng, plan.sampling);
  std::vector<ResolvedSite> out;
  out.reserve(set.size());
  for (const auto& s : set.sites) out.push_back({slots[s.buffer].id, s.element, s.bit});
  return out;
}

namespace {
bool rewritten_each_pass(SiteKind k) { return k == SiteKind::input || k == SiteKind::activations; }
}  // namespace

void inject_into_memory(QAgent& agent, std::span<const ResolvedSite> sites, FaultKind kind) {
  if (kind == FaultKind::none) return;
  for (const auto& s : sites) {
    QuantBuffer* buf = agent.buffer(s.id);
    if (buf == nullptr) throw std::invalid_argument("agent has no buffer " + s.id.name());
    if (s.element >= buf->size()) throw std::out_of_range("fault site outside " + s.id.name());
    if (is_stuck(kind)) {
      buf->set_stuck(s.element, s.bit, stuck_level(kind));
    } else if (rewritten_each_pass(s.id.kind)) {
      buf->arm_flip(s.element, 1u << s.bit);
    } else {
      buf->flip(s.element, s.bit);
    }
  }
}

std::vector<ReadFault> read_scoped_faults(QAgent& agent, std::span<const ResolvedSite> sites) {
  std::vector<ReadFault> out;
  for (const auto& s : sites) {
    if (rewritten_each_pass(s.id.kind)) {
      QuantBuffer* buf = agent.buffer(s.id);
      if (buf == nullptr) throw std::invalid_argument("agent has no buffer " + s.id.name());
      buf->arm_flip(s.element, 1u << s.bit);
    } else {
      // Merge flips on the same element into one mask.
      if (!out.empty() && out.back().id == s.id && out.back().element == s.element) {
        out.back().xor_mask ^= 1u << s.bit;
      } else {
        out.push_back({s.id, s.element, 1u << s.bit});
      }
    }
  }
  return out;
}

InferenceFaultDriver::InferenceFaultDriver(const FaultPlan& plan, QAgent& agent, Rng& rng,
                                           int fault_step)
    : plan_(plan), agent_(agent), rng_(rng), fault_step_(fault_step) {}

void InferenceFaultDriver::before_rollout() {
  if (!plan_.active() || plan_.timing != FaultTiming::inference) return;
  if (plan_.kind == FaultKind::transient_1) return;
  if (plan_.kind == FaultKind::transient_m && rewritten_each_pass(plan_.site.kind)) return;
  const auto sites = sample_agent_sites(agent_, plan_, rng_);
  inject_into_memory(agent_, sites, plan_.kind);
}

std::span<const ReadFault> InferenceFaultDriver::before_step(int step) {
  current_.clear();
  if (!plan_.active()) return {};
  const bool single_shot_transient =
      plan_.timing == FaultTiming::inference &&
      (plan_.kind == FaultKind::transient_1 ||
       (plan_.kind == FaultKind::transient_m && rewritten_each_pass(plan_.site.kind)));
  if (single_shot_transient && step == fault_step_) {
    const auto sites = sample_agent_sites(agent_, plan_, rng_);
    current_ = read_scoped_faults(agent_, sites);
  } else if (plan_.timing == FaultTiming::per_step) {
    const auto sites = sample_agent_sites(agent_, plan_, rng_);
    if (plan_.kind == FaultKind::transient_1) {
      current_ = read_scoped_faults(agent_, sites);
    } else {
      inject_into_memory(agent_, sites, plan_.kind);
    }
  }
  return current_;
}

}  // namespace faultnav
