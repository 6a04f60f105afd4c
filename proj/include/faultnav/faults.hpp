#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "faultnav/fixedpoint.hpp"
#include "faultnav/rng.hpp"

namespace faultnav {

class QAgent;
class QuantBuffer;
enum class AgentKind;

enum class FaultKind { none, transient_1, transient_m, stuck_at_0, stuck_at_1 };

/// Memory a fault lands in. Tabular agents expose one table buffer; MLP agents
/// expose an input buffer plus per-layer parameter (weights and biases) and
/// output buffers. Output buffers hold the affine results before activation.
enum class SiteKind { tabular, input, weights, activations };

/// When the plan fires.
///  - before_training: once, ahead of the first episode (static injection).
///  - episode: at the start of `FaultPlan::episode`, before any step.
///  - inference: once per evaluation trial. Memory faults are injected before
///    the rollout; read-scoped faults hit a single step.
///  - per_step: inference only; fresh sites are drawn for every step.
enum class FaultTiming { before_training, episode, inference, per_step };

enum class SamplingMode { exact, bernoulli };

std::string_view to_string(FaultKind k);
std::string_view to_string(SiteKind k);
std::string_view to_string(FaultTiming t);
std::string_view to_string(SamplingMode m);
FaultKind parse_fault_kind(std::string_view s);
SiteKind parse_site_kind(std::string_view s);
FaultTiming parse_fault_timing(std::string_view s);
SamplingMode parse_sampling_mode(std::string_view s);

bool is_stuck(FaultKind k);
int stuck_level(FaultKind k);

/// Identifies one buffer of an agent.
struct BufferId {
  SiteKind kind = SiteKind::tabular;
  int layer = 0;

  std::string name() const;
  friend bool operator==(const BufferId&, const BufferId&) = default;
};

/// Buffer selector used by plans; layer -1 selects every layer.
struct FaultSite {
  SiteKind kind = SiteKind::tabular;
  int layer = -1;

  bool matches(const BufferId& id) const;
  std::string name() const;
  friend bool operator==(const FaultSite&, const FaultSite&) = default;
};

struct BufferSlot {
  BufferId id;
  QuantBuffer* buffer = nullptr;
};

struct FaultPlan {
  FaultKind kind = FaultKind::none;
  FaultSite site;
  double ber = 0.0;
  FaultTiming timing = FaultTiming::before_training;
  int episode = 0;            // FaultTiming::episode
  int inference_step = -1;    // transient_1 step; -1 draws one per trial
  SamplingMode sampling = SamplingMode::exact;
  std::uint64_t seed = 0;

  bool active() const { return kind != FaultKind::none && ber > 0.0; }
  bool is_training() const {
    return timing == FaultTiming::before_training || timing == FaultTiming::episode;
  }

  /// Throws std::invalid_argument when the plan cannot run against the agent
  /// kind or phase.
  void validate(AgentKind agent, bool training, int episodes = 0) const;
};

/// One selected bit.
struct BitSite {
  std::size_t buffer = 0;  // index into the dims the sites were sampled over
  std::size_t element = 0;
  int bit = 0;

  friend auto operator<=>(const BitSite&, const BitSite&) = default;
};

/// Unique, sorted bit positions, plus the stuck level when the set describes
/// stuck-at faults (-1 for flips).
struct FaultSiteSet {
  std::vector<BitSite> sites;
  int level = -1;

  bool empty() const { return sites.empty(); }
  std::size_t size() const { return sites.size(); }
};

/// Draws bits over buffers of `buffer_dims` elements, each `width` bits wide.
/// Exact mode picks exactly round(ber * total_bits) distinct bits; Bernoulli
/// mode keeps each bit independently with probability ber.
FaultSiteSet sample_sites(std::span<const std::size_t> buffer_dims, int width, double ber,
                          std::uint64_t seed, SamplingMode mode = SamplingMode::exact);
FaultSiteSet sample_sites(std::span<const std::size_t> buffer_dims, int width, double ber,
                          Rng& rng, SamplingMode mode = SamplingMode::exact);

/// Static injection into a single tensor. Sites must all address buffer 0.
/// Transient kinds flip, stuck kinds force. Throws std::out_of_range for
/// sites outside the tensor.
FixedTensor apply_static(const FixedTensor& buffer, const FaultSiteSet& sites, FaultKind kind);

/// Re-forces every stuck site after a write.
FixedTensor enforce_stuck_on_write(const FixedTensor& buffer, const FaultSiteSet& stuck_sites);

/// Read-register corruption: XORs the masks into the value handed to the
/// consumer; the backing memory is untouched.
FixedValue corrupt_read(const FixedValue& value, std::span<const int> flip_bits);

/// MAC faults surface as flips in the output buffer right after the layer
/// writes it. The flips are armed here and land on the next forward pass.
void mac_fault_as_output_corruption(QuantBuffer& activation_buffer, const FaultSiteSet& sites);

/// A transient flip applied to one value at read time only.
struct ReadFault {
  BufferId id;
  std::size_t element = 0;
  std::uint32_t xor_mask = 0;
};

/// Row of the fault-event log.
struct FaultEvent {
  int episode = 0;
  int step = 0;
  std::string buffer;
  std::size_t element = 0;
  int bit = 0;
  FaultKind kind = FaultKind::none;
};

/// Sites resolved onto concrete agent buffers.
struct ResolvedSite {
  BufferId id;
  std::size_t element = 0;
  int bit = 0;
};

/// Samples the plan's bits over every agent buffer the plan's site selects.
std::vector<ResolvedSite> sample_agent_sites(QAgent& agent, const FaultPlan& plan, Rng& rng);

/// Writes the sites into agent memory: stuck kinds install permanent masks,
/// transient kinds flip stored bits. On input/output buffers (rewritten every
/// forward pass) transients are armed to land after the next write instead.
void inject_into_memory(QAgent& agent, std::span<const ResolvedSite> sites, FaultKind kind);

/// Converts sites on stored buffers into read faults; sites on rewritten
/// buffers are armed for the next forward pass instead.
std::vector<ReadFault> read_scoped_faults(QAgent& agent, std::span<const ResolvedSite> sites);

/// Per-trial driver for inference-time plans.
class InferenceFaultDriver {
 public:
  /// `fault_step` is the step a single-shot transient fires at.
  InferenceFaultDriver(const FaultPlan& plan, QAgent& agent, Rng& rng, int fault_step);

  /// Static part: memory transients and stuck masks.
  void before_rollout();
  /// Read faults for this step (may be empty). Also arms output-buffer flips.
  std::span<const ReadFault> before_step(int step);

 private:
  const FaultPlan& plan_;
  QAgent& agent_;
  Rng& rng_;
  int fault_step_;
  std::vector<ReadFault> current_;
};

}  // namespace faultnav
