#include "faultnav/campaign.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>
#include <tuple>

namespace faultnav {

namespace fs = std::filesystem;

const char* const kRecordHeader =
    "campaign_id,cell_id,repeat,seed,fault_kind,site,ber,inject_episode,mitigation,success_rate,"
    "mean_reward,episodes_to_converge,converged,alarms,wall_ms";

namespace {

constexpr const char* kSummaryHeader =
    "campaign_id,cell_id,fault_kind,site,ber,inject_episode,mitigation,runs,failed,success_mean,"
    "success_sd,success_ci_low,success_ci_high,reward_mean,reward_sd,reward_ci_low,reward_ci_high,"
    "etc_mean,etc_sd,etc_n,not_converged,alarms_mean";

std::string fmt_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt_fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw DataError("unterminated quote in record row");
  out.push_back(std::move(cur));
  return out;
}

template <typename T>
T parse_number(const std::string& s, const char* column) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw DataError(std::string("bad value '") + s + "' in column " + column);
  }
  return v;
}

bool parse_flag(const std::string& s, const char* column) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw DataError(std::string("bad flag '") + s + "' in column " + column);
}

RunRecord parse_record(const std::string& line) {
  const auto f = split_csv_line(line);
  if (f.size() != 15) throw DataError("record row has " + std::to_string(f.size()) + " fields");
  RunRecord r;
  r.campaign_id = f[0];
  r.cell_id = parse_number<int>(f[1], "cell_id");
  r.repeat = parse_number<int>(f[2], "repeat");
  r.seed = parse_number<std::uint64_t>(f[3], "seed");
  r.fault_kind = f[4];
  r.site = f[5];
  r.ber = parse_number<double>(f[6], "ber");
  r.inject_episode = parse_number<int>(f[7], "inject_episode");
  r.mitigation = parse_flag(f[8], "mitigation");
  r.success_rate = f[9] == "nan" ? std::nan("") : parse_number<double>(f[9], "success_rate");
  r.mean_reward = f[10] == "nan" ? std::nan("") : parse_number<double>(f[10], "mean_reward");
  if (!f[11].empty()) r.episodes_to_converge = parse_number<int>(f[11], "episodes_to_converge");
  r.converged = parse_flag(f[12], "converged");
  r.alarms = parse_number<std::int64_t>(f[13], "alarms");
  r.wall_ms = parse_number<std::int64_t>(f[14], "wall_ms");
  return r;
}

std::string format_tag(const FixedFormat& f) { return f.to_string(); }

MetricSummary summarize(std::vector<double> v) {
  MetricSummary m;
  m.n = static_cast<int>(v.size());
  if (v.empty()) {
    m.mean = m.sd = m.ci_low = m.ci_high = std::nan("");
    return m;
  }
  const double n = static_cast<double>(v.size());
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  const double half = 1.959964 * m.sd / std::sqrt(n);
  m.ci_low = m.mean - half;
  m.ci_high = m.mean + half;
  return m;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) {
    const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.';
    out += keep ? c : '_';
  }
  return out;
}

// Removes the lock file when the campaign finishes or throws.
class DirLock {
 public:
  explicit DirLock(fs::path path) : path_(std::move(path)) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw DataError("output directory is locked by another run (" + path_.string() + ")");
    }
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

// Records from a partially written file; a torn final line is dropped.
std::vector<RunRecord> read_partial(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) return {};
  if (line != kRecordHeader) throw DataError("record header mismatch in " + path.string());
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  std::vector<RunRecord> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(parse_record(lines[i]));
    } catch (const DataError&) {
      if (i + 1 != lines.size()) throw;
    }
  }
  return out;
}

}  // namespace

bool RunRecord::failed() const { return std::isnan(success_rate); }

std::uint64_t run_seed(std::uint64_t base, int cell, int repeat) {
  return derive_seed({tag("run"), base, static_cast<std::uint64_t>(cell),
                      static_cast<std::uint64_t>(repeat)});
}

std::uint64_t fault_seed(std::uint64_t base, int plan, int repeat) {
  return derive_seed({tag("fault"), base, static_cast<std::uint64_t>(plan),
                      static_cast<std::uint64_t>(repeat)});
}

std::vector<SweepCell> enumerate_cells(const CampaignConfig& config) {
  const SweepSpec& s = config.sweep;
  std::vector<FixedFormat> formats = s.formats;
  const bool tagged = !formats.empty();
  if (formats.empty()) formats.push_back(config.agent.format);
  const std::vector<int> episodes = s.phase == Phase::training ? s.episodes : std::vector<int>{-1};
  std::vector<SweepCell> cells;
  int id = 0;
  for (const auto& fmt : formats) {
    int plan = 0;
    for (const auto kind : s.kinds) {
      for (const auto& site : s.sites) {
        for (const double ber : s.bers) {
          for (const int episode : episodes) {
            for (const bool mit : s.mitigation) {
              SweepCell c;
              c.id = id++;
              c.plan = plan;
              c.campaign_id = tagged ? config.name + "@" + format_tag(fmt) : config.name;
              c.format = fmt;
              c.kind = kind;
              c.site = site;
              c.ber = ber;
              c.episode = episode;
              c.mitigation = mit;
              cells.push_back(std::move(c));
            }
            ++plan;
          }
        }
      }
    }
  }
  return cells;
}

void write_record_row(std::ostream& out, const RunRecord& r) {
  out << csv_field(r.campaign_id) << ',' << r.cell_id << ',' << r.repeat << ',' << r.seed << ','
      << r.fault_kind << ',' << r.site << ',' << fmt_real(r.ber) << ',' << r.inject_episode << ','
      << (r.mitigation ? 1 : 0) << ',' << fmt_real(r.success_rate) << ','
      << fmt_real(r.mean_reward) << ','
      << (r.episodes_to_converge ? std::to_string(*r.episodes_to_converge) : std::string()) << ','
      << (r.converged ? 1 : 0) << ',' << r.alarms << ',' << r.wall_ms << '\n';
}

void write_records_csv(std::ostream& out, std::span<const RunRecord> records) {
  out << kRecordHeader << '\n';
  for (const auto& r : records) write_record_row(out, r);
}

std::vector<RunRecord> read_records_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("record file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kRecordHeader) throw DataError("record header does not match the expected schema");
  std::vector<RunRecord> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      out.push_back(parse_record(line));
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(row) + ": " + e.what());
    }
  }
  return out;
}

const PolicyCache::Policy& PolicyCache::get(const CampaignConfig& config, const GridWorld& world,
                                            int index, const FixedFormat& format,
                                            bool with_profile) {
  std::shared_ptr<Slot> slot;
  {
    std::lock_guard lock(mutex_);
    auto& s = slots_[{index, format.to_string()}];
    if (!s) s = std::make_shared<Slot>();
    slot = s;
  }
  std::call_once(slot->trained, [&] {
    TrainConfig tc = config.agent;
    tc.format = config.train_format.value_or(format);
    const std::uint64_t seed =
        derive_seed({tag("policy"), config.seed, static_cast<std::uint64_t>(index)});
    TrainResult r = train(world, tc, nullptr, nullptr, seed);
    if (!(tc.format == format)) r.agent->requantize(format);
    slot->policy.converged = episodes_to_converge(r.trace).has_value();
    slot->policy.agent = std::move(r.agent);
  });
  if (with_profile) {
    std::call_once(slot->calibrated, [&] {
      auto probe = slot->policy.agent->clone();
      slot->policy.profile =
          calibrate_ranges(*probe, world, config.calibration_trials, config.guard_margin);
    });
  }
  return slot->policy;
}

RunRecord run_one(const CampaignConfig& config, const GridWorld& world, const SweepCell& cell, int repeat,
                  PolicyCache& policies) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.campaign_id = cell.campaign_id;
  rec.cell_id = cell.id;
  rec.repeat = repeat;
  rec.seed = run_seed(config.seed, cell.id, repeat);
  rec.fault_kind = std::string(to_string(cell.kind));
  rec.site = cell.site.name();
  rec.ber = cell.ber;
  rec.inject_episode = cell.episode;
  rec.mitigation = cell.mitigation;

  FaultPlan plan;
  plan.kind = cell.kind;
  plan.site = cell.site;
  plan.ber = cell.ber;
  plan.sampling = config.sweep.sampling;
  plan.seed = fault_seed(config.seed, cell.plan, repeat);
  try {
    if (config.sweep.phase == Phase::training) {
      TrainConfig tc = config.agent;
      tc.format = cell.format;
      if (cell.episode < 0) {
        plan.timing = FaultTiming::before_training;
      } else {
        plan.timing = FaultTiming::episode;
        plan.episode = cell.episode;
      }
      std::optional<ExplorationController> controller;
      if (cell.mitigation) controller.emplace(config.mitigation);
      const TrainResult r = train(world, tc, plan.active() ? &plan : nullptr,
                                  controller ? &*controller : nullptr, rec.seed);
      const auto& tr = r.trace;
      rec.success_rate = tr.final_success();
      rec.mean_reward = std::accumulate(tr.rewards.begin(), tr.rewards.end(), 0.0) /
                        static_cast<double>(tr.rewards.size());
      rec.episodes_to_converge = episodes_to_converge(tr);
      rec.converged = rec.episodes_to_converge.has_value();
      rec.alarms = static_cast<std::int64_t>(tr.detections.size());
    } else {
      const auto& policy = policies.get(config, world, repeat % config.policies, cell.format,
                                        cell.mitigation);
      plan.timing = config.sweep.inference_timing;
      plan.inference_step = config.sweep.inference_step;
      EvalOptions opts;
      opts.trials = config.eval_trials;
      opts.seed = rec.seed;
      opts.guard = cell.mitigation ? &policy.profile : nullptr;
      const Metrics m = evaluate(*policy.agent, world, opts, plan.active() ? &plan : nullptr);
      rec.success_rate = m.success_rate;
      rec.mean_reward = m.mean_reward;
      rec.converged = policy.converged;
      rec.alarms = static_cast<std::int64_t>(m.alarms);
    }
  } catch (const std::exception&) {
    rec.success_rate = std::nan("");
    rec.mean_reward = std::nan("");
    rec.episodes_to_converge.reset();
    rec.converged = false;
  }
  if (config.timing) {
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  }
  return rec;
}

std::vector<RunRecord> run_campaign(const CampaignConfig& config, const CampaignOptions& options) {
  const GridWorld world = config.environment.make();
  const std::vector<SweepCell> cells = enumerate_cells(config);
  const std::size_t repeats = static_cast<std::size_t>(config.repeats);
  const std::size_t total = cells.size() * repeats;
  std::vector<std::optional<RunRecord>> slots(total);

  std::optional<DirLock> lock;
  std::ofstream partial;
  std::mutex io;
  const bool on_disk = !options.out_dir.empty();
  const fs::path records_path = options.out_dir / "records.csv";
  const fs::path partial_path = options.out_dir / "records.partial.csv";
  if (on_disk) {
    fs::create_directories(options.out_dir);
    lock.emplace(options.out_dir / ".lock");
    {
      std::ofstream cfg(options.out_dir / "config.cfg");
      cfg << render_config(config);
    }
    std::vector<RunRecord> prior;
    if (options.resume) {
      if (fs::exists(records_path)) {
        std::ifstream in(records_path);
        prior = read_records_csv(in);
      }
      if (fs::exists(partial_path)) {
        auto more = read_partial(partial_path);
        prior.insert(prior.end(), more.begin(), more.end());
      }
    }
    for (auto& r : prior) {
      if (r.cell_id < 0 || static_cast<std::size_t>(r.cell_id) >= cells.size()) continue;
      if (r.repeat < 0 || static_cast<std::size_t>(r.repeat) >= repeats) continue;
      const SweepCell& c = cells[static_cast<std::size_t>(r.cell_id)];
      if (r.campaign_id != c.campaign_id || r.seed != run_seed(config.seed, c.id, r.repeat)) continue;
      if (r.fault_kind != to_string(c.kind) || r.site != c.site.name() || r.ber != c.ber) continue;
      slots[static_cast<std::size_t>(r.cell_id) * repeats + static_cast<std::size_t>(r.repeat)] =
          std::move(r);
    }
    partial.open(partial_path, std::ios::trunc);
    partial << kRecordHeader << '\n';
    for (const auto& s : slots) {
      if (s) write_record_row(partial, *s);
    }
    partial.flush();
  }

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < total; ++i) {
    if (!slots[i]) todo.push_back(i);
  }
  std::size_t done = total - todo.size();

  int workers = options.workers > 0 ? options.workers : config.workers;
  if (workers <= 0) workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(workers),
                                                   std::max<std::size_t>(1, todo.size())));

  PolicyCache policies;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    try {
      for (;;) {
        const std::size_t k = next.fetch_add(1);
        if (k >= todo.size()) return;
        const std::size_t i = todo[k];
        RunRecord r = run_one(config, world, cells[i / repeats], static_cast<int>(i % repeats),
                              policies);
        std::lock_guard guard(io);
        if (on_disk) {
          write_record_row(partial, r);
          partial.flush();
        }
        slots[i] = std::move(r);
        ++done;
        if (options.progress) options.progress(done, total);
      }
    } catch (...) {
      std::lock_guard guard(io);
      if (!failure) failure = std::current_exception();
      next = todo.size();
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<RunRecord> records;
  records.reserve(total);
  for (auto& s : slots) records.push_back(std::move(*s));
  if (on_disk) {
    partial.close();
    const fs::path tmp = options.out_dir / "records.csv.tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      write_records_csv(out, records);
    }
    fs::rename(tmp, records_path);
    fs::remove(partial_path);
  }
  return records;
}

std::pair<double, double> wilson_interval(double p, int n, double z) {
  if (n < 1) throw std::invalid_argument("wilson interval needs n >= 1");
  const double nn = static_cast<double>(n);
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

CampaignSummary aggregate(std::span<const RunRecord> records) {
  if (records.empty()) throw DataError("no records to aggregate");
  std::map<std::pair<std::string, int>, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) groups[{r.campaign_id, r.cell_id}].push_back(&r);

  CampaignSummary summary;
  for (auto& [key, rs] : groups) {
    std::sort(rs.begin(), rs.end(), [](const RunRecord* a, const RunRecord* b) {
      return std::tie(a->repeat, a->seed) < std::tie(b->repeat, b->seed);
    });
    const RunRecord& first = *rs.front();
    CellSummary c;
    c.campaign_id = key.first;
    c.cell_id = key.second;
    c.fault_kind = first.fault_kind;
    c.site = first.site;
    c.ber = first.ber;
    c.inject_episode = first.inject_episode;
    c.mitigation = first.mitigation;
    c.runs = static_cast<int>(rs.size());
    std::vector<double> success, reward, etc;
    double alarms = 0.0;
    int not_converged = 0;
    for (const RunRecord* r : rs) {
      if (r->failed()) {
        ++c.failed;
        continue;
      }
      success.push_back(r->success_rate);
      reward.push_back(r->mean_reward);
      if (r->episodes_to_converge) etc.push_back(*r->episodes_to_converge);
      if (!r->converged) ++not_converged;
      alarms += static_cast<double>(r->alarms);
    }
    c.success = summarize(success);
    if (c.success.n > 0) {
      const auto [lo, hi] = wilson_interval(c.success.mean, c.success.n);
      c.success.ci_low = lo;
      c.success.ci_high = hi;
    }
    c.reward = summarize(reward);
    c.episodes_to_converge = summarize(etc);
    const int ok = c.runs - c.failed;
    c.not_converged = ok > 0 ? static_cast<double>(not_converged) / ok : std::nan("");
    c.alarms = ok > 0 ? alarms / ok : std::nan("");
    summary.cells.push_back(std::move(c));
  }
  return summary;
}

void write_summary_csv(std::ostream& out, const CampaignSummary& summary) {
  out << kSummaryHeader << '\n';
  for (const auto& c : summary.cells) {
    out << csv_field(c.campaign_id) << ',' << c.cell_id << ',' << c.fault_kind << ',' << c.site
        << ',' << fmt_real(c.ber) << ',' << c.inject_episode << ',' << (c.mitigation ? 1 : 0) << ','
        << c.runs << ',' << c.failed;
    for (const MetricSummary* m : {&c.success, &c.reward}) {
      out << ',' << fmt_fixed(m->mean, 6) << ',' << fmt_fixed(m->sd, 6) << ','
          << fmt_fixed(m->ci_low, 6) << ',' << fmt_fixed(m->ci_high, 6);
    }
    out << ',' << fmt_fixed(c.episodes_to_converge.mean, 3) << ','
        << fmt_fixed(c.episodes_to_converge.sd, 3) << ',' << c.episodes_to_converge.n << ','
        << fmt_fixed(c.not_converged, 6) << ',' << fmt_fixed(c.alarms, 3) << '\n';
  }
}

std::string HeatmapGrid::file_stem() const {
  return "heatmap_" + sanitize(campaign_id) + "_" + fault_kind + "_" + sanitize(site) +
         (mitigation ? "_mit" : "");
}

std::vector<HeatmapGrid> heatmap_grids(const CampaignSummary& summary) {
  using Key = std::tuple<std::string, std::string, std::string, bool>;
  std::map<Key, std::vector<const CellSummary*>> groups;
  std::vector<Key> order;
  for (const auto& c : summary.cells) {
    Key k{c.campaign_id, c.fault_kind, c.site, c.mitigation};
    if (!groups.contains(k)) order.push_back(k);
    groups[k].push_back(&c);
  }
  std::vector<HeatmapGrid> grids;
  for (const auto& k : order) {
    const auto& cs = groups[k];
    HeatmapGrid g;
    std::tie(g.campaign_id, g.fault_kind, g.site, g.mitigation) = k;
    for (const auto* c : cs) {
      g.bers.push_back(c->ber);
      g.episodes.push_back(c->inject_episode);
    }
    std::sort(g.bers.begin(), g.bers.end());
    g.bers.erase(std::unique(g.bers.begin(), g.bers.end()), g.bers.end());
    std::sort(g.episodes.begin(), g.episodes.end());
    g.episodes.erase(std::unique(g.episodes.begin(), g.episodes.end()), g.episodes.end());
    if (cs.size() != g.bers.size() * g.episodes.size()) {
      throw DataError("ragged sweep for " + g.file_stem() + ": " + std::to_string(cs.size()) +
                      " cells for a " + std::to_string(g.episodes.size()) + "x" +
                      std::to_string(g.bers.size()) + " grid");
    }
    const double unset = std::numeric_limits<double>::infinity();
    g.values.assign(g.episodes.size(), std::vector<double>(g.bers.size(), unset));
    for (const auto* c : cs) {
      const auto ei = std::lower_bound(g.episodes.begin(), g.episodes.end(), c->inject_episode) -
                      g.episodes.begin();
      const auto bi = std::lower_bound(g.bers.begin(), g.bers.end(), c->ber) - g.bers.begin();
      double& slot = g.values[static_cast<std::size_t>(ei)][static_cast<std::size_t>(bi)];
      if (slot != unset) throw DataError("duplicate grid point in " + g.file_stem());
      slot = c->success.mean;
    }
    grids.push_back(std::move(g));
  }
  return grids;
}

void write_heatmap_csv(std::ostream& out, const HeatmapGrid& g) {
  out << "episode\\ber";
  for (double b : g.bers) out << ',' << fmt_real(b);
  out << '\n';
  for (std::size_t e = 0; e < g.episodes.size(); ++e) {
    out << g.episodes[e];
    for (double v : g.values[e]) out << ',' << fmt_fixed(v, 4);
    out << '\n';
  }
}

void write_campaign_outputs(const fs::path& dir, std::span<const RunRecord> records) {
  const CampaignSummary summary = aggregate(records);
  {
    std::ofstream out(dir / "summary.csv", std::ios::trunc);
    write_summary_csv(out, summary);
  }
  for (const auto& g : heatmap_grids(summary)) {
    std::ofstream out(dir / (g.file_stem() + ".csv"), std::ios::trunc);
    write_heatmap_csv(out, g);
  }
}

}  // namespace faultnav
