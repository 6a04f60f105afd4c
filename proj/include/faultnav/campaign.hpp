#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "faultnav/config.hpp"

namespace faultnav {

/// Malformed or missing campaign data (records, summaries).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One point of the sweep.
struct SweepCell {
  int id = 0;
  int plan = 0;  // index over (kind, site, ber, episode); formats and
                 // mitigation settings of one plan draw the same fault sites
  std::string campaign_id;
  FixedFormat format;
  FaultKind kind = FaultKind::none;
  FaultSite site;
  double ber = 0.0;
  int episode = 0;  // -1 = before training; inference cells use -1
  bool mitigation = false;
};

std::vector<SweepCell> enumerate_cells(const CampaignConfig& config);

/// Stable per-run seed: hash of (base seed, cell, repeat).
std::uint64_t run_seed(std::uint64_t base, int cell, int repeat);
/// Fault-sampling seed: hash of (base seed, plan, repeat).
std::uint64_t fault_seed(std::uint64_t base, int plan, int repeat);

struct RunRecord {
  std::string campaign_id;
  int cell_id = 0;
  int repeat = 0;
  std::uint64_t seed = 0;
  std::string fault_kind;
  std::string site;
  double ber = 0.0;
  int inject_episode = 0;
  bool mitigation = false;
  double success_rate = 0.0;  // NaN on a failed run
  double mean_reward = 0.0;   // NaN on a failed run
  std::optional<int> episodes_to_converge;
  bool converged = false;
  std::int64_t alarms = 0;  // detections (training) or guard alarms (inference)
  std::int64_t wall_ms = 0;

  bool failed() const;
};

extern const char* const kRecordHeader;

void write_record_row(std::ostream& out, const RunRecord& r);
void write_records_csv(std::ostream& out, std::span<const RunRecord> records);
/// Throws DataError on a header mismatch or a malformed row.
std::vector<RunRecord> read_records_csv(std::istream& in);

/// Clean policies shared by inference runs, trained on first use.
class PolicyCache {
 public:
  struct Policy {
    std::unique_ptr<QAgent> agent;
    bool converged = false;
    RangeProfile profile;  // filled when a guarded run asks for it
  };

  /// Policy `index` in `format`. Thread-safe; each policy trains once.
  const Policy& get(const CampaignConfig& config, const GridWorld& world, int index,
                    const FixedFormat& format, bool with_profile);

 private:
  struct Slot {
    std::once_flag trained;
    std::once_flag calibrated;
    Policy policy;
  };
  std::mutex mutex_;
  std::map<std::pair<int, std::string>, std::shared_ptr<Slot>> slots_;
};

/// Runs a single (cell, repeat). Failures come back as failed records.
RunRecord run_one(const CampaignConfig& config, const GridWorld& world, const SweepCell& cell, int repeat,
                  PolicyCache& policies);

struct CampaignOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool resume = false;
  int workers = 0;  // 0: config value, then hardware concurrency
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// Every (cell, repeat) record in cell/repeat order. With an output directory
/// records stream to records.partial.csv and land in records.csv at the end;
/// resume skips runs already on disk. A lock file guards the directory.
std::vector<RunRecord> run_campaign(const CampaignConfig& config, const CampaignOptions& options = {});

struct MetricSummary {
  int n = 0;
  double mean = 0.0;
  double sd = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct CellSummary {
  std::string campaign_id;
  int cell_id = 0;
  std::string fault_kind;
  std::string site;
  double ber = 0.0;
  int inject_episode = 0;
  bool mitigation = false;
  int runs = 0;
  int failed = 0;
  MetricSummary success;  // Wilson 95% interval
  MetricSummary reward;   // normal-approximation 95% interval
  MetricSummary episodes_to_converge;  // converged runs only
  double not_converged = 0.0;
  double alarms = 0.0;
};

struct CampaignSummary {
  std::vector<CellSummary> cells;  // sorted by (campaign_id, cell_id)
};

/// Wilson score interval for a proportion p observed over n trials.
std::pair<double, double> wilson_interval(double p, int n, double z = 1.959964);

/// Throws DataError on an empty input.
CampaignSummary aggregate(std::span<const RunRecord> records);

void write_summary_csv(std::ostream& out, const CampaignSummary& summary);

/// Dense grid of mean success: header row holds the BER axis, the first
/// column the injection-episode axis. One grid per (campaign, kind, site,
/// mitigation) group.
struct HeatmapGrid {
  std::string campaign_id;
  std::string fault_kind;
  std::string site;
  bool mitigation = false;
  std::vector<double> bers;
  std::vector<int> episodes;
  std::vector<std::vector<double>> values;  // [episode][ber]

  std::string file_stem() const;
};

/// Throws DataError when a group does not cover its full episode x BER grid.
std::vector<HeatmapGrid> heatmap_grids(const CampaignSummary& summary);
void write_heatmap_csv(std::ostream& out, const HeatmapGrid& grid);

/// Writes summary.csv and heatmap_*.csv next to the records.
void write_campaign_outputs(const std::filesystem::path& dir, std::span<const RunRecord> records);

}  // namespace faultnav
