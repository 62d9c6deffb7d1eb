#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "leakprobe/attacks.hpp"
#include "leakprobe/cli.hpp"
#include "leakprobe/error.hpp"
#include "leakprobe/evaluation.hpp"
#include "leakprobe/trace.hpp"

namespace py = pybind11;
using namespace leakprobe;

namespace {

SpvGroup parse_group(const std::string& s) {
  if (s == "referenced") return SpvGroup::referenced;
  if (s == "nonreferenced") return SpvGroup::nonreferenced;
  if (s == "none") return SpvGroup::none;
  throw ConfigError("unknown spv group: " + s);
}

AttackConfig attack_config(double k_percent, bool zlib_literal, bool shadow_columns) {
  AttackConfig cfg;
  cfg.k_percent = k_percent;
  cfg.zlib_literal = zlib_literal;
  cfg.shadow_columns = shadow_columns;
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_leakprobe, m) {
  m.doc() = "Native core of leakprobe: trace parsing, attack scoring, AUC evaluation.";

  auto base = py::register_exception<std::runtime_error>(m, "LeakprobeError");
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<AttackError>(m, "AttackError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("version", [] { return std::string(cli::version()); });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a CLI subcommand in-process. Returns (exit_code, stdout, stderr).");

  m.def(
      "normalize_traces", [](const std::string& text) { return write_trace_file(parse_trace_file(text)); },
      py::arg("text"), "Parse and validate trace JSONL, returning its canonical serialization.");

  m.def("zlib_entropy", [](const std::string& text) { return zlib_entropy(text); }, py::arg("text"));

  m.def(
      "score_traces",
      [](const std::string& text, double k_percent, bool zlib_literal, bool shadow_columns) {
        TraceSet set = parse_trace_file(text);
        return score_table_to_csv(run_attack_suite(set, attack_config(k_percent, zlib_literal, shadow_columns)));
      },
      py::arg("text"), py::arg("k_percent") = 20.0, py::arg("zlib_literal") = false,
      py::arg("shadow_columns") = true, "Score every sample with every available attack; returns CSV.");

  m.def(
      "evaluate_traces",
      [](const std::string& text, std::size_t bootstrap, std::uint64_t seed, const std::string& spv_group,
         bool ppl_exp, double k_percent) {
        TraceSet set = parse_trace_file(text);
        ScoreTable table = run_attack_suite(set, attack_config(k_percent, false, true));
        AUCReport report = evaluate(table, {bootstrap, seed, parse_group(spv_group), ppl_exp});
        attach_utility(report, set, ppl_exp);
        return report_to_json(report).dump();
      },
      py::arg("text"), py::arg("bootstrap") = 0, py::arg("seed") = 0, py::arg("spv_group") = "referenced",
      py::arg("ppl_exp") = false, py::arg("k_percent") = 20.0, "Full audit report as a JSON string.");

  m.def(
      "roc_auc",
      [](const std::vector<double>& members, const std::vector<double>& nonmembers) {
        return roc_auc({members, nonmembers});
      },
      py::arg("members"), py::arg("nonmembers"));

  m.def(
      "bootstrap_ci",
      [](const std::vector<double>& members, const std::vector<double>& nonmembers, std::size_t resamples,
         std::uint64_t seed) {
        Interval ci = bootstrap_ci({members, nonmembers}, resamples, seed);
        return py::make_tuple(ci.lo, ci.hi);
      },
      py::arg("members"), py::arg("nonmembers"), py::arg("resamples"), py::arg("seed"));

  m.def("perplexity", &perplexity, py::arg("losses"));
  m.def("gap", &gap, py::arg("ppl_val"), py::arg("ppl_ft"));
}
