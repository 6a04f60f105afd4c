// faultnav: train agents, run fault campaigns, report on their records.
//
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "faultnav/campaign.hpp"
#include "faultnav/config.hpp"

namespace fs = std::filesystem;
using namespace faultnav;

namespace {

constexpr int kConfigError = 2;
constexpr int kDataError = 3;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

CampaignConfig load(const Common& c) {
  ConfigDocument doc;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw ConfigError("", "config file not found: " + c.config);
    doc = load_config_file(c.config);
  }
  std::map<std::string, std::string> seen;
  for (const auto& s : c.sets) apply_override(doc, s, &seen);
  CampaignConfig cfg = resolve_config(doc);
  if (!c.out.empty()) cfg.out = c.out;
  return cfg;
}

int workers_from_env() {
  const char* env = std::getenv("FAULTNAV_WORKERS");
  if (env == nullptr || *env == '\0') return 0;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 0) throw ConfigError("FAULTNAV_WORKERS", "expected a non-negative integer");
  return static_cast<int>(v);
}

std::string fmt(double v, int digits) {
  if (std::isnan(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void print_summary(const CampaignSummary& s, const std::string& metric) {
  std::printf("%-28s %5s %-12s %-14s %8s %6s %4s %5s  ", "campaign", "cell", "kind", "site", "ber",
              "ep", "mit", "runs");
  if (metric == "episodes_to_converge") {
    std::printf("%10s %8s %6s %9s\n", "etc_mean", "etc_sd", "n", "not_conv");
  } else if (metric == "mean_reward") {
    std::printf("%8s %19s\n", "reward", "95% ci");
  } else {
    std::printf("%8s %19s\n", "success", "95% ci (wilson)");
  }
  for (const auto& c : s.cells) {
    std::printf("%-28s %5d %-12s %-14s %8g %6d %4s %5d  ", c.campaign_id.c_str(), c.cell_id,
                c.fault_kind.c_str(), c.site.c_str(), c.ber, c.inject_episode,
                c.mitigation ? "on" : "off", c.runs);
    if (metric == "episodes_to_converge") {
      std::printf("%10s %8s %6d %9s\n", fmt(c.episodes_to_converge.mean, 1).c_str(),
                  fmt(c.episodes_to_converge.sd, 1).c_str(), c.episodes_to_converge.n,
                  fmt(c.not_converged, 3).c_str());
    } else {
      const MetricSummary& m = metric == "mean_reward" ? c.reward : c.success;
      std::printf("%8s  [%7s, %7s]\n", fmt(m.mean, 4).c_str(), fmt(m.ci_low, 4).c_str(),
                  fmt(m.ci_high, 4).c_str());
    }
  }
}

int cmd_train(const Common& common) {
  const CampaignConfig cfg = load(common);
  if (cfg.sweep.phase != Phase::training) {
    throw ConfigError("faults.phase", "train needs a training-phase config");
  }
  const std::vector<SweepCell> cells = enumerate_cells(cfg);
  if (cells.size() != 1) {
    throw ConfigError("faults", "train runs one cell; the config sweeps " +
                                    std::to_string(cells.size()) + " (use campaign)");
  }
  const SweepCell& cell = cells.front();
  const GridWorld world = cfg.environment.make();

  TrainConfig tc = cfg.agent;
  tc.format = cell.format;
  FaultPlan plan;
  plan.kind = cell.kind;
  plan.site = cell.site;
  plan.ber = cell.ber;
  plan.sampling = cfg.sweep.sampling;
  plan.seed = cfg.seed;
  plan.timing = cell.episode < 0 ? FaultTiming::before_training : FaultTiming::episode;
  plan.episode = std::max(0, cell.episode);
  std::optional<ExplorationController> controller;
  if (cell.mitigation) controller.emplace(cfg.mitigation);
  const TrainResult r =
      train(world, tc, plan.active() ? &plan : nullptr, controller ? &*controller : nullptr, cfg.seed);

  const fs::path dir = cfg.out;
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "config.cfg");
    out << render_config(cfg);
  }
  {
    std::ofstream out(dir / "checkpoint.bin", std::ios::binary);
    save_checkpoint(*r.agent, out, cfg.seed);
  }
  const TrainingTrace& t = r.trace;
  {
    std::ofstream out(dir / "trace.csv");
    out << "episode,reward,epsilon,length\n";
    for (std::size_t e = 0; e < t.rewards.size(); ++e) {
      out << e << ',' << t.rewards[e] << ',' << t.epsilons[e] << ',' << t.lengths[e] << '\n';
    }
  }
  {
    std::ofstream out(dir / "checkpoints.csv");
    out << "episode,success_rate\n";
    for (const auto& c : t.checkpoints) out << c.episode << ',' << c.success_rate << '\n';
  }
  {
    std::ofstream out(dir / "detections.csv");
    out << "episode,kind,location,old_er,new_er\n";
    for (const auto& d : t.detections) {
      out << d.episode << ',' << d.kind << ',' << d.location << ',' << d.old_rate << ','
          << d.new_rate << '\n';
    }
  }
  {
    std::ofstream out(dir / "faults.csv");
    out << "episode,step,buffer,element,bit,kind\n";
    for (const auto& f : t.fault_events) {
      out << f.episode << ',' << f.step << ',' << f.buffer << ',' << f.element << ',' << f.bit << ','
          << to_string(f.kind) << '\n';
    }
  }
  const auto etc = episodes_to_converge(t);
  std::printf("final success %.4f, converged %s, detections %zu -> %s\n", t.final_success(),
              etc ? ("after " + std::to_string(*etc) + " episodes").c_str() : "no",
              t.detections.size(), dir.string().c_str());
  return 0;
}

int cmd_campaign(const Common& common, int workers, int repeats, bool resume) {
  CampaignConfig cfg = load(common);
  if (repeats > 0) cfg.repeats = repeats;
  if (workers <= 0) workers = workers_from_env();
  CampaignOptions opts;
  opts.out_dir = cfg.out;
  opts.resume = resume;
  opts.workers = workers;
  std::size_t last = 0;
  opts.progress = [&last](std::size_t done, std::size_t total) {
    const std::size_t pct = done * 10 / total;
    if (pct != last) {
      last = pct;
      std::fprintf(stderr, "  %zu/%zu runs\n", done, total);
    }
  };
  const auto records = run_campaign(cfg, opts);
  write_campaign_outputs(cfg.out, records);
  print_summary(aggregate(records), "success_rate");
  std::printf("records, summary and heatmaps in %s\n", cfg.out.c_str());
  return 0;
}

int cmd_report(const std::string& path, const std::string& metric, const std::string& out_dir) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read records file " + path);
  const auto records = read_records_csv(in);
  if (records.empty()) throw DataError("records file has no rows: " + path);
  const CampaignSummary summary = aggregate(records);
  print_summary(summary, metric);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_campaign_outputs(out_dir, records);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fault injection and mitigation for Q-learning navigation agents"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config, "Config file (INI)");
    sub->add_option("--set", common.sets, "Override KEY=VALUE (repeatable)");
    sub->add_option("--out", common.out, "Output directory");
  };

  auto* train_cmd = app.add_subcommand("train", "Train one agent; write checkpoint and traces");
  add_common(train_cmd);

  int workers = 0;
  int repeats = 0;
  bool resume = false;
  auto* campaign_cmd = app.add_subcommand("campaign", "Run a fault campaign");
  add_common(campaign_cmd);
  campaign_cmd->add_option("--workers", workers, "Worker threads (FAULTNAV_WORKERS otherwise)");
  campaign_cmd->add_option("--repeats", repeats, "Runs per cell");
  campaign_cmd->add_flag("--resume", resume, "Reuse records already in the output directory");

  std::string records_path;
  std::string metric = "success_rate";
  std::string report_out;
  auto* report_cmd = app.add_subcommand("report", "Summarize a records CSV");
  report_cmd->add_option("records", records_path, "records.csv")->required();
  report_cmd->add_option("--metric", metric, "success_rate, mean_reward or episodes_to_converge")
      ->check(CLI::IsMember({"success_rate", "mean_reward", "episodes_to_converge"}));
  report_cmd->add_option("--out", report_out, "Write summary and heatmaps here");

  std::string reference_out;
  auto* ref_cmd = app.add_subcommand("config-reference", "Print every config key as markdown");
  ref_cmd->add_option("--out", reference_out, "Write to a file instead");

  auto* grid_cmd = app.add_subcommand("show-grid", "Print the configured world");
  grid_cmd->add_option("--config", common.config, "Config file (INI)");
  grid_cmd->add_option("--set", common.sets, "Override KEY=VALUE (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(common);
    if (*campaign_cmd) return cmd_campaign(common, workers, repeats, resume);
    if (*report_cmd) return cmd_report(records_path, metric, report_out);
    if (*ref_cmd) {
      const std::string text = config_reference_markdown();
      if (reference_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream(reference_out) << text;
      }
      return 0;
    }
    if (*grid_cmd) {
      const CampaignConfig cfg = load(common);
      const GridWorld world = cfg.environment.make();
      std::cout << world.to_text();
      std::printf("shortest path %d steps, %d hells\n", world.shortest_path_length(),
                  world.hell_count());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kDataError;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
