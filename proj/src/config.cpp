#include "faultnav/config.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace faultnav {

namespace {

constexpr std::array<ConfigKey, 45> kKeys{{
    {"environment.size", "5", "Grid side length n."},
    {"environment.density", "0.2", "Hell density (low 0.1, mid 0.2, high 0.3)."},
    {"environment.seed", "7", "World generation seed."},

    {"agent.kind", "tabular", "tabular or mlp."},
    {"agent.format", "auto", "Storage format Q(1,i,f). auto: Q(1,3,4) tabular, Q(1,1,6) mlp."},
    {"agent.train_format", "", "Inference only: train policies in this format, then requantize into each swept format."},
    {"agent.lr", "0.1", "Learning rate."},
    {"agent.gamma", "0.9", "Discount factor, in (0,1)."},
    {"agent.episodes", "1000", "Training episodes per run."},
    {"agent.eval_every", "10", "Greedy checkpoint stride, in episodes."},
    {"agent.eval_trials", "100", "Rollouts per checkpoint."},
    {"agent.epsilon_initial", "1.0", "Exploration rate at the start of a decay."},
    {"agent.epsilon_floor", "0.05", "Steady exploration rate."},
    {"agent.decay_episodes", "auto", "Linear decay length T. auto: 100 tabular, 400 mlp."},
    {"agent.hidden", "32,32", "MLP hidden layer widths."},
    {"agent.q_init", "1.0", "Initial table entries / output-layer biases."},
    {"agent.carry_residual", "true", "Carry sub-LSB update residue between writes."},

    {"faults.phase", "training", "training or inference."},
    {"faults.formats", "", "Format sweep axis; empty uses agent.format."},
    {"faults.kinds", "none", "Fault kinds: none, transient_1, transient_m, stuck_at_0, stuck_at_1."},
    {"faults.sites", "auto", "Sites: tabular, input, weights, activations; weights[l] picks a layer. auto: tabular or weights."},
    {"faults.bers", "0", "Bit error rates."},
    {"faults.episodes", "0", "Training injection episodes; -1 injects before training."},
    {"faults.timing", "inference", "Inference timing: inference (once per trial) or per_step."},
    {"faults.inference_step", "-1", "Step a Transient-1 fault fires at; -1 draws one per trial."},
    {"faults.sampling", "exact", "exact or bernoulli bit selection."},

    {"mitigation.enabled", "off", "Mitigation axis: off, on, or off,on."},
    {"mitigation.x", "25", "Transient detection: reward-drop percent."},
    {"mitigation.y", "50", "Transient detection: episode window."},
    {"mitigation.alpha", "auto", "Exploration adjustment coefficient. auto: 0.8 tabular, 0.4 mlp."},
    {"mitigation.T", "auto", "Episodes to steady exploitation. auto: agent.decay_episodes."},
    {"mitigation.transient", "true", "Enable transient detection."},
    {"mitigation.permanent", "true", "Enable permanent detection."},
    {"mitigation.smoothing", "75", "Reward moving-average width."},
    {"mitigation.max_slowdown", "6", "Cap on n in the T*2^n decay."},
    {"mitigation.margin", "0.1", "Range guard margin (fraction of each bound)."},
    {"mitigation.calibration_trials", "100", "Greedy rollouts used to calibrate ranges."},

    {"campaign.name", "campaign", "Campaign identifier written to every record."},
    {"campaign.seed", "0", "Base seed."},
    {"campaign.repeats", "200", "Runs per cell."},
    {"campaign.policies", "1", "Inference: trained policies cycled over repeats."},
    {"campaign.eval_trials", "100", "Inference: rollouts per run."},
    {"campaign.workers", "0", "Worker threads; 0 = hardware concurrency."},
    {"campaign.timing", "false", "Record wall_ms (off keeps outputs byte-stable)."},
    {"campaign.out", "results", "Output directory."},
}};

const ConfigKey* find_key(std::string_view key) {
  for (const auto& k : kKeys) {
    if (k.key == key) return &k;
  }
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Commas inside parentheses belong to the item, as in Q(1,4,11).
std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  int depth = 0;
  for (char ch : s + ",") {
    if (ch == '(') ++depth;
    if (ch == ')') --depth;
    if (ch == ',' && depth == 0) {
      auto t = trim(item);
      if (!t.empty()) out.push_back(t);
      item.clear();
    } else {
      item += ch;
    }
  }
  return out;
}

// Reads a key, falling back to the table default.
class Reader {
 public:
  explicit Reader(const ConfigDocument& doc) : doc_(doc) {}

  std::string str(std::string_view key) const {
    const auto it = doc_.values.find(std::string(key));
    if (it != doc_.values.end()) return it->second;
    return std::string(find_key(key)->fallback);
  }
  bool is_auto(std::string_view key) const { return str(key) == "auto"; }

  double real(std::string_view key) const {
    const std::string s = str(key);
    return parse_real(key, s);
  }
  long long integer(std::string_view key) const {
    const std::string s = str(key);
    return parse_int(key, s);
  }
  std::uint64_t seed(std::string_view key) const {
    const std::string s = str(key);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(std::string(key), "expected an unsigned integer, got '" + s + "'");
    return v;
  }
  bool boolean(std::string_view key) const { return parse_bool(key, str(key)); }
  std::vector<std::string> list(std::string_view key) const { return split_list(str(key)); }

  static double parse_real(std::string_view key, const std::string& s) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(std::string(key), "expected a number, got '" + s + "'");
    return v;
  }
  static long long parse_int(std::string_view key, const std::string& s) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(std::string(key), "expected an integer, got '" + s + "'");
    return v;
  }
  static bool parse_bool(std::string_view key, const std::string& s) {
    if (s == "true" || s == "on" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "off" || s == "0" || s == "no") return false;
    throw ConfigError(std::string(key), "expected a boolean, got '" + s + "'");
  }

 private:
  const ConfigDocument& doc_;
};

template <typename F>
auto guarded(std::string_view key, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string(key), e.what());
  }
}

void require(bool ok, std::string_view key, const std::string& message) {
  if (!ok) throw ConfigError(std::string(key), message);
}

std::string fmt_real(double v) {
  std::array<char, 64> buf{};
  const auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), p);
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ",";
    out += f(items[i]);
  }
  return out;
}

}  // namespace

std::string_view to_string(Phase p) { return p == Phase::training ? "training" : "inference"; }

std::span<const ConfigKey> config_keys() { return kKeys; }

FaultSite parse_fault_site(std::string_view text) {
  const std::string s = trim(text);
  const auto open = s.find('[');
  FaultSite site;
  if (open == std::string::npos) {
    site.kind = parse_site_kind(s);
    return site;
  }
  if (s.back() != ']') throw std::invalid_argument("malformed site '" + s + "'");
  site.kind = parse_site_kind(s.substr(0, open));
  const std::string idx = s.substr(open + 1, s.size() - open - 2);
  site.layer = static_cast<int>(Reader::parse_int("site", idx));
  if (site.layer < 0) throw std::invalid_argument("site layer must be >= 0");
  if (site.kind != SiteKind::weights && site.kind != SiteKind::activations) {
    throw std::invalid_argument("only weights and activations take a layer index");
  }
  return site;
}

ConfigDocument parse_config_text(std::string_view text) {
  boost::property_tree::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("", "malformed config: " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  ConfigDocument doc;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(section, "keys must live inside a [section]");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      if (find_key(key) == nullptr) throw ConfigError(key, "unknown key");
      doc.values[key] = trim(value.data());
    }
  }
  return doc;
}

ConfigDocument load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_override(ConfigDocument& doc, std::string_view assignment,
                    std::map<std::string, std::string>* seen) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError(trim(assignment), "override must look like key=value");
  }
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  if (find_key(key) == nullptr) throw ConfigError(key, "unknown key");
  if (seen != nullptr) {
    const auto [it, fresh] = seen->emplace(key, value);
    if (!fresh && it->second != value) {
      throw ConfigError(key, "conflicting overrides '" + it->second + "' and '" + value + "'");
    }
  }
  doc.values[key] = value;
}

CampaignConfig resolve_config(const ConfigDocument& doc) {
  const Reader r(doc);
  CampaignConfig c;

  c.environment.size = static_cast<int>(r.integer("environment.size"));
  require(c.environment.size >= 2, "environment.size", "must be >= 2");
  c.environment.density = r.real("environment.density");
  require(c.environment.density >= 0.0 && c.environment.density < 1.0, "environment.density",
          "must be in [0,1)");
  c.environment.seed = r.seed("environment.seed");

  const AgentKind kind = guarded("agent.kind", [&] { return parse_agent_kind(r.str("agent.kind")); });
  TrainConfig a = TrainConfig::defaults(kind);
  if (!r.is_auto("agent.format")) {
    a.format = guarded("agent.format", [&] { return FixedFormat::parse(r.str("agent.format")); });
  }
  if (!r.str("agent.train_format").empty()) {
    c.train_format = guarded("agent.train_format",
                             [&] { return FixedFormat::parse(r.str("agent.train_format")); });
  }
  a.lr = r.real("agent.lr");
  require(a.lr >= 0.0, "agent.lr", "must be >= 0");
  a.gamma = r.real("agent.gamma");
  require(a.gamma > 0.0 && a.gamma < 1.0, "agent.gamma", "must be in (0,1)");
  a.episodes = static_cast<int>(r.integer("agent.episodes"));
  require(a.episodes >= 1, "agent.episodes", "must be >= 1");
  a.eval_every = static_cast<int>(r.integer("agent.eval_every"));
  require(a.eval_every >= 1, "agent.eval_every", "must be >= 1");
  a.eval_trials = static_cast<int>(r.integer("agent.eval_trials"));
  require(a.eval_trials >= 1, "agent.eval_trials", "must be >= 1");
  a.schedule.initial = r.real("agent.epsilon_initial");
  require(a.schedule.initial > 0.0 && a.schedule.initial <= 1.0, "agent.epsilon_initial",
          "must be in (0,1]");
  a.schedule.floor = r.real("agent.epsilon_floor");
  require(a.schedule.floor >= 0.0 && a.schedule.floor <= a.schedule.initial, "agent.epsilon_floor",
          "must be in [0, epsilon_initial]");
  if (!r.is_auto("agent.decay_episodes")) {
    a.schedule.decay_episodes = static_cast<int>(r.integer("agent.decay_episodes"));
  }
  require(a.schedule.decay_episodes >= 1, "agent.decay_episodes", "must be >= 1");
  a.hidden.clear();
  for (const auto& h : r.list("agent.hidden")) {
    a.hidden.push_back(static_cast<int>(Reader::parse_int("agent.hidden", h)));
    require(a.hidden.back() >= 1, "agent.hidden", "widths must be >= 1");
  }
  a.q_init = r.real("agent.q_init");
  a.carry_residual = r.boolean("agent.carry_residual");
  c.agent = a;

  SweepSpec& s = c.sweep;
  const std::string phase = r.str("faults.phase");
  require(phase == "training" || phase == "inference", "faults.phase",
          "must be training or inference");
  s.phase = phase == "training" ? Phase::training : Phase::inference;
  for (const auto& f : r.list("faults.formats")) {
    s.formats.push_back(guarded("faults.formats", [&] { return FixedFormat::parse(f); }));
  }
  s.kinds.clear();
  for (const auto& k : r.list("faults.kinds")) {
    s.kinds.push_back(guarded("faults.kinds", [&] { return parse_fault_kind(k); }));
  }
  require(!s.kinds.empty(), "faults.kinds", "needs at least one kind");
  if (r.is_auto("faults.sites")) {
    s.sites = {FaultSite{kind == AgentKind::tabular ? SiteKind::tabular : SiteKind::weights, -1}};
  } else {
    for (const auto& t : r.list("faults.sites")) {
      s.sites.push_back(guarded("faults.sites", [&] { return parse_fault_site(t); }));
    }
  }
  require(!s.sites.empty(), "faults.sites", "needs at least one site");
  s.bers.clear();
  for (const auto& b : r.list("faults.bers")) {
    s.bers.push_back(Reader::parse_real("faults.bers", b));
    require(s.bers.back() >= 0.0 && s.bers.back() <= 1.0, "faults.bers", "must be in [0,1]");
  }
  require(!s.bers.empty(), "faults.bers", "needs at least one value");
  s.episodes.clear();
  for (const auto& e : r.list("faults.episodes")) {
    s.episodes.push_back(static_cast<int>(Reader::parse_int("faults.episodes", e)));
    require(s.episodes.back() >= -1 && s.episodes.back() < a.episodes, "faults.episodes",
            "must be -1 or in [0, agent.episodes)");
  }
  require(!s.episodes.empty(), "faults.episodes", "needs at least one value");
  s.inference_timing =
      guarded("faults.timing", [&] { return parse_fault_timing(r.str("faults.timing")); });
  require(s.inference_timing == FaultTiming::inference || s.inference_timing == FaultTiming::per_step,
          "faults.timing", "must be inference or per_step");
  s.inference_step = static_cast<int>(r.integer("faults.inference_step"));
  require(s.inference_step >= -1, "faults.inference_step", "must be >= -1");
  s.sampling = guarded("faults.sampling", [&] { return parse_sampling_mode(r.str("faults.sampling")); });

  s.mitigation.clear();
  for (const auto& m : r.list("mitigation.enabled")) {
    s.mitigation.push_back(Reader::parse_bool("mitigation.enabled", m));
  }
  require(!s.mitigation.empty(), "mitigation.enabled", "needs at least one value");

  // Every kind/site pair must be runnable in the chosen phase.
  for (const auto kind_v : s.kinds) {
    for (const auto& site : s.sites) {
      FaultPlan p;
      p.kind = kind_v;
      p.site = site;
      p.ber = 0.5;
      p.timing = s.phase == Phase::training ? FaultTiming::episode : s.inference_timing;
      guarded("faults.kinds", [&] {
        p.validate(kind, s.phase == Phase::training, a.episodes);
        return 0;
      });
    }
  }

  TrainMitigationConfig m = TrainMitigationConfig::defaults(kind);
  m.x = r.real("mitigation.x");
  m.y = static_cast<int>(r.integer("mitigation.y"));
  if (!r.is_auto("mitigation.alpha")) m.alpha = r.real("mitigation.alpha");
  m.T = r.is_auto("mitigation.T") ? a.schedule.decay_episodes
                                  : static_cast<int>(r.integer("mitigation.T"));
  m.transient = r.boolean("mitigation.transient");
  m.permanent = r.boolean("mitigation.permanent");
  m.smoothing = static_cast<int>(r.integer("mitigation.smoothing"));
  m.max_slowdown = static_cast<int>(r.integer("mitigation.max_slowdown"));
  guarded("mitigation", [&] {
    m.validate();
    return 0;
  });
  c.mitigation = m;
  c.guard_margin = r.real("mitigation.margin");
  require(c.guard_margin >= 0.0, "mitigation.margin", "must be >= 0");
  c.calibration_trials = static_cast<int>(r.integer("mitigation.calibration_trials"));
  require(c.calibration_trials >= 1, "mitigation.calibration_trials", "must be >= 1");

  c.name = r.str("campaign.name");
  require(!c.name.empty() && c.name.find_first_of(",\"\n") == std::string::npos, "campaign.name",
          "must be non-empty without commas or quotes");
  c.seed = r.seed("campaign.seed");
  c.repeats = static_cast<int>(r.integer("campaign.repeats"));
  require(c.repeats >= 1, "campaign.repeats", "must be >= 1");
  c.policies = static_cast<int>(r.integer("campaign.policies"));
  require(c.policies >= 1, "campaign.policies", "must be >= 1");
  c.eval_trials = static_cast<int>(r.integer("campaign.eval_trials"));
  require(c.eval_trials >= 1, "campaign.eval_trials", "must be >= 1");
  c.workers = static_cast<int>(r.integer("campaign.workers"));
  require(c.workers >= 0, "campaign.workers", "must be >= 0");
  c.timing = r.boolean("campaign.timing");
  c.out = r.str("campaign.out");
  return c;
}

std::string render_config(const CampaignConfig& c) {
  const TrainConfig& a = c.agent;
  const SweepSpec& s = c.sweep;
  const TrainMitigationConfig& m = c.mitigation;
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::ostringstream o;
  o << "[environment]\n"
    << "size = " << c.environment.size << "\n"
    << "density = " << fmt_real(c.environment.density) << "\n"
    << "seed = " << c.environment.seed << "\n\n";
  o << "[agent]\n"
    << "kind = " << to_string(a.kind) << "\n"
    << "format = " << a.format.to_string() << "\n"
    << "train_format = " << (c.train_format ? c.train_format->to_string() : "") << "\n"
    << "lr = " << fmt_real(a.lr) << "\n"
    << "gamma = " << fmt_real(a.gamma) << "\n"
    << "episodes = " << a.episodes << "\n"
    << "eval_every = " << a.eval_every << "\n"
    << "eval_trials = " << a.eval_trials << "\n"
    << "epsilon_initial = " << fmt_real(a.schedule.initial) << "\n"
    << "epsilon_floor = " << fmt_real(a.schedule.floor) << "\n"
    << "decay_episodes = " << a.schedule.decay_episodes << "\n"
    << "hidden = " << join(a.hidden, [](int h) { return std::to_string(h); }) << "\n"
    << "q_init = " << fmt_real(a.q_init) << "\n"
    << "carry_residual = " << b(a.carry_residual) << "\n\n";
  o << "[faults]\n"
    << "phase = " << to_string(s.phase) << "\n"
    << "formats = " << join(s.formats, [](const FixedFormat& f) { return f.to_string(); }) << "\n"
    << "kinds = " << join(s.kinds, [](FaultKind k) { return std::string(to_string(k)); }) << "\n"
    << "sites = " << join(s.sites, [](const FaultSite& f) { return f.name(); }) << "\n"
    << "bers = " << join(s.bers, fmt_real) << "\n"
    << "episodes = " << join(s.episodes, [](int e) { return std::to_string(e); }) << "\n"
    << "timing = " << to_string(s.inference_timing) << "\n"
    << "inference_step = " << s.inference_step << "\n"
    << "sampling = " << to_string(s.sampling) << "\n\n";
  o << "[mitigation]\n"
    << "enabled = " << join(s.mitigation, [](bool v) { return std::string(v ? "on" : "off"); }) << "\n"
    << "x = " << fmt_real(m.x) << "\n"
    << "y = " << m.y << "\n"
    << "alpha = " << fmt_real(m.alpha) << "\n"
    << "T = " << m.T << "\n"
    << "transient = " << b(m.transient) << "\n"
    << "permanent = " << b(m.permanent) << "\n"
    << "smoothing = " << m.smoothing << "\n"
    << "max_slowdown = " << m.max_slowdown << "\n"
    << "margin = " << fmt_real(c.guard_margin) << "\n"
    << "calibration_trials = " << c.calibration_trials << "\n\n";
  o << "[campaign]\n"
    << "name = " << c.name << "\n"
    << "seed = " << c.seed << "\n"
    << "repeats = " << c.repeats << "\n"
    << "policies = " << c.policies << "\n"
    << "eval_trials = " << c.eval_trials << "\n"
    << "workers = " << c.workers << "\n"
    << "timing = " << b(c.timing) << "\n"
    << "out = " << c.out << "\n";
  return o.str();
}

std::string config_reference_markdown() {
  std::ostringstream o;
  o << "# Configuration reference\n\n"
    << "Config files are INI documents with the sections `[environment]`, `[agent]`,\n"
    << "`[faults]`, `[mitigation]` and `[campaign]`. Every key can also be set from the\n"
    << "command line with `--set section.key=value`. Unknown keys are rejected. Lists\n"
    << "are comma-separated; list-valued keys under `[faults]` and\n"
    << "`mitigation.enabled` are sweep axes.\n\n"
    << "| key | default | meaning |\n|---|---|---|\n";
  for (const auto& k : kKeys) {
    o << "| `" << k.key << "` | `" << (k.fallback.empty() ? "(empty)" : k.fallback) << "` | "
      << k.doc << " |\n";
  }
  return o.str();
}

}  // namespace faultnav
