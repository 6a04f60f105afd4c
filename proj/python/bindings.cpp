// Python bindings: fixed-point helpers, the grid world, single training runs
// and campaigns driven by the same dotted config keys as the CLI.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "faultnav/campaign.hpp"

namespace py = pybind11;
using namespace faultnav;

namespace {

CampaignConfig resolve(const std::optional<std::string>& config, const std::vector<std::string>& sets) {
  ConfigDocument doc;
  if (config) doc = load_config_file(*config);
  std::map<std::string, std::string> seen;
  for (const auto& s : sets) apply_override(doc, s, &seen);
  return resolve_config(doc);
}

py::dict record_dict(const RunRecord& r) {
  py::dict d;
  d["campaign_id"] = r.campaign_id;
  d["cell_id"] = r.cell_id;
  d["repeat"] = r.repeat;
  d["seed"] = r.seed;
  d["fault_kind"] = r.fault_kind;
  d["site"] = r.site;
  d["ber"] = r.ber;
  d["inject_episode"] = r.inject_episode;
  d["mitigation"] = r.mitigation;
  d["success_rate"] = r.success_rate;
  d["mean_reward"] = r.mean_reward;
  d["episodes_to_converge"] = r.episodes_to_converge;
  d["converged"] = r.converged;
  d["alarms"] = r.alarms;
  return d;
}

py::dict train_run(const std::vector<std::string>& sets, std::uint64_t seed) {
  const CampaignConfig cfg = resolve(std::nullopt, sets);
  const GridWorld world = cfg.environment.make();
  TrainResult r;
  {
    py::gil_scoped_release release;
    r = train(world, cfg.agent, nullptr, nullptr, seed);
  }
  py::dict d;
  d["final_success"] = r.trace.final_success();
  d["episodes_to_converge"] = episodes_to_converge(r.trace);
  d["rewards"] = r.trace.rewards;
  d["epsilons"] = r.trace.epsilons;
  std::vector<std::pair<int, double>> checkpoints;
  for (const auto& c : r.trace.checkpoints) checkpoints.emplace_back(c.episode, c.success_rate);
  d["checkpoints"] = checkpoints;
  const FaultSite site{r.agent->kind() == AgentKind::mlp ? SiteKind::weights : SiteKind::tabular, -1};
  std::vector<std::uint32_t> raws;
  for (auto& slot : r.agent->buffers(site)) {
    const auto& data = slot.buffer->tensor().data();
    raws.insert(raws.end(), data.begin(), data.end());
  }
  const BitCounts bits = bit_histogram(raws, r.agent->format());
  d["bit_counts"] = std::make_pair(bits.zeros, bits.ones);
  return d;
}

py::list campaign_run(const std::optional<std::string>& config, const std::vector<std::string>& sets,
                      int workers) {
  const CampaignConfig cfg = resolve(config, sets);
  CampaignOptions opts;
  opts.workers = workers;
  std::vector<RunRecord> records;
  {
    py::gil_scoped_release release;
    records = run_campaign(cfg, opts);
  }
  py::list out;
  for (const auto& r : records) out.append(record_dict(r));
  return out;
}

}  // namespace

PYBIND11_MODULE(_faultnav, m) {
  m.doc() = "Fault injection and mitigation for Q-learning navigation agents";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

  py::class_<FixedFormat>(m, "FixedFormat")
      .def(py::init<int, int>(), py::arg("integer_bits"), py::arg("fraction_bits"))
      .def_static("parse", &FixedFormat::parse)
      .def_property_readonly("integer_bits", &FixedFormat::integer_bits)
      .def_property_readonly("fraction_bits", &FixedFormat::fraction_bits)
      .def_property_readonly("width", &FixedFormat::width)
      .def_property_readonly("lsb", &FixedFormat::lsb)
      .def_property_readonly("min_value", &FixedFormat::min_value)
      .def_property_readonly("max_value", &FixedFormat::max_value)
      .def("__eq__", [](const FixedFormat& a, const FixedFormat& b) { return a == b; })
      .def("__repr__", &FixedFormat::to_string);

  m.def("quantize", &quantize_raw, py::arg("x"), py::arg("format"),
        "Raw two's-complement pattern of x, rounded to nearest even and saturated.");
  m.def("dequantize", &dequantize_raw, py::arg("raw"), py::arg("format"));
  m.def(
      "flip_bit",
      [](std::uint32_t raw, const FixedFormat& fmt, int pos) { return flip_bit({raw, fmt}, pos).raw; },
      py::arg("raw"), py::arg("format"), py::arg("bit"));
  m.def(
      "stuck_bit",
      [](std::uint32_t raw, const FixedFormat& fmt, int pos, int level) {
        return stuck_bit({raw, fmt}, pos, level).raw;
      },
      py::arg("raw"), py::arg("format"), py::arg("bit"), py::arg("level"));

  py::class_<GridWorld>(m, "GridWorld")
      .def_static("generate", &GridWorld::generate, py::arg("n") = 5, py::arg("density") = 0.2,
                  py::arg("seed") = 7)
      .def_static("from_text", &GridWorld::from_text)
      .def("to_text", &GridWorld::to_text)
      .def_property_readonly("side", &GridWorld::side)
      .def_property_readonly("num_states", &GridWorld::num_states)
      .def_property_readonly("source_state", &GridWorld::source_state)
      .def_property_readonly("goal_state", &GridWorld::goal_state)
      .def_property_readonly("hell_count", &GridWorld::hell_count)
      .def("is_terminal", &GridWorld::is_terminal)
      .def("step",
           [](const GridWorld& w, int s, int a) {
             const StepResult r = w.step(s, a);
             return py::make_tuple(r.next_state, r.reward, r.terminal);
           })
      .def("shortest_path_length", &GridWorld::shortest_path_length)
      .def(
          "optimal_values",
          [](const GridWorld& w, double gamma) {
            const OptimalQ q = solve_exact(w, gamma);
            std::vector<double> v(static_cast<std::size_t>(w.num_states()));
            for (int s = 0; s < w.num_states(); ++s) v[static_cast<std::size_t>(s)] = q.value(s);
            return v;
          },
          py::arg("gamma") = 0.9);

  m.def("train", &train_run, py::arg("overrides") = std::vector<std::string>{}, py::arg("seed") = 0,
        "Trains one clean agent configured by KEY=VALUE overrides.");
  m.def("run_campaign", &campaign_run, py::arg("config") = std::nullopt,
        py::arg("overrides") = std::vector<std::string>{}, py::arg("workers") = 0,
        "Runs a campaign in memory and returns one dict per run.");
  m.def("config_reference", &config_reference_markdown);
}
