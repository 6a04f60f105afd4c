#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "faultnav/agent.hpp"
#include "faultnav/faults.hpp"
#include "faultnav/gridworld.hpp"
#include "faultnav/mitigation.hpp"

namespace faultnav {

/// Bad configuration; `key()` names the offending dotted key when known.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct EnvironmentSpec {
  int size = 5;
  double density = 0.2;
  std::uint64_t seed = 7;

  GridWorld make() const { return GridWorld::generate(size, density, seed); }
};

enum class Phase { training, inference };
std::string_view to_string(Phase p);

/// Cartesian sweep: format x kind x site x ber x episode x mitigation.
struct SweepSpec {
  Phase phase = Phase::training;
  std::vector<FixedFormat> formats;  // empty = the agent's format
  std::vector<FaultKind> kinds{FaultKind::none};
  std::vector<FaultSite> sites;
  std::vector<double> bers{0.0};
  std::vector<int> episodes{0};  // injection episode; -1 = before training
  std::vector<bool> mitigation{false};
  FaultTiming inference_timing = FaultTiming::inference;
  int inference_step = -1;
  SamplingMode sampling = SamplingMode::exact;
};

struct CampaignConfig {
  std::string name = "campaign";
  EnvironmentSpec environment;
  TrainConfig agent;
  std::optional<FixedFormat> train_format;  // inference policies trained here, then requantized
  SweepSpec sweep;
  TrainMitigationConfig mitigation;
  double guard_margin = 0.1;
  int calibration_trials = 100;
  std::uint64_t seed = 0;
  int repeats = 200;
  int policies = 1;
  int eval_trials = 100;
  int workers = 0;
  bool timing = false;
  std::string out = "results";
};

struct ConfigKey {
  std::string_view key;
  std::string_view fallback;  // "auto" = depends on agent.kind
  std::string_view doc;
};
std::span<const ConfigKey> config_keys();

/// Flat dotted-key view of a config file, holding only keys that were set.
struct ConfigDocument {
  std::map<std::string, std::string> values;
};

ConfigDocument parse_config_text(std::string_view text);
ConfigDocument load_config_file(const std::filesystem::path& path);

/// Applies "key=value". Unknown keys and a second, different value for a key
/// already overridden are errors.
void apply_override(ConfigDocument& doc, std::string_view assignment,
                    std::map<std::string, std::string>* seen = nullptr);

CampaignConfig resolve_config(const ConfigDocument& doc);

/// Every key with its resolved value, as an INI document.
std::string render_config(const CampaignConfig& config);

/// Markdown table of every key, its default and meaning.
std::string config_reference_markdown();

FaultSite parse_fault_site(std::string_view text);

}  // namespace faultnav
