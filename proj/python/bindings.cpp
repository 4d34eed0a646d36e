// Python bindings. JSON crosses the boundary as text; the package wrapper
// turns it into dicts.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "analogon/errors.hpp"
#include "analogon/evalkit.hpp"
#include "analogon/pipeline.hpp"

namespace py = pybind11;
using namespace analogon;

namespace {

RunContext context(const std::string& config, const std::string& out, int jobs, bool paper_scale) {
  RunContext ctx;
  ctx.config = RunConfig::from_json(nlohmann::json::parse(config.empty() ? "{}" : config), paper_scale);
  ctx.out = out.empty() ? default_out_dir() : std::filesystem::path(out);
  ctx.jobs = jobs;
  return ctx;
}

template <class Fn>
auto command(std::string name, Fn fn) {
  return [name, fn](const std::string& config, const std::string& out, int jobs, bool paper_scale) {
    const auto ctx = context(config, out, jobs, paper_scale);
    CommandResult r;
    {
      py::gil_scoped_release release;
      r = fn(ctx);
    }
    write_log(ctx, name, r.log);
    return py::make_tuple(r.ok, r.summary, r.log.dump());
  };
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "analogon core";

  py::register_exception<SpecError>(m, "SpecError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<Environment>(m, "Environment")
      .def_property_readonly("id", &Environment::id)
      .def_property_readonly("state_count", &Environment::state_count)
      .def_property_readonly("action_count", &Environment::action_count)
      .def_property_readonly("factor_count", &Environment::factor_count)
      .def_property_readonly("observation_width", &Environment::observation_width)
      .def("encode", &Environment::encode)
      .def("decode", &Environment::decode)
      .def("next", &Environment::next)
      .def("endogenous_mask", &Environment::endogenous_mask)
      .def("observations", [](const Environment& e) { return observation_matrix(e); })
      .def("spec_json", [](const Environment& e) { return to_json(e.spec()).dump(); });

  m.def("make_env", [](const std::string& id) { return make_env(preset_spec(id)); }, py::arg("preset"));
  m.def("make_env_from_json", [](const std::string& j) { return make_env(env_spec_from_json(nlohmann::json::parse(j))); });
  m.def("preset_ids", &preset_ids);

  m.def(
      "distances",
      [](const Environment& env, bool endogenous) {
        const auto t = solve_distances(env, endogenous ? RewardMode::EndogenousMatch : RewardMode::FullMatch);
        const auto n = static_cast<py::ssize_t>(t.state_count());
        py::array_t<std::uint16_t> a({n, n});
        std::copy(t.raw().begin(), t.raw().end(), a.mutable_data());
        return a;
      },
      py::arg("env"), py::arg("endogenous") = false,
      "Optimal step counts; 65535 marks unreachable pairs.");
  m.attr("UNREACHABLE") = static_cast<int>(DistanceTable::kInfinity);

  m.def("expectile_loss", &expectile_loss, py::arg("x"), py::arg("iota"));
  m.def("implied_distance", [](double v, double gamma, double d_max) { return implied_distance(v, gamma, d_max); },
        py::arg("v"), py::arg("gamma"), py::arg("d_max"));

  m.def("resolve_config", [](const std::string& config, bool paper_scale) {
    const auto c = RunConfig::from_json(nlohmann::json::parse(config.empty() ? "{}" : config), paper_scale);
    auto j = c.to_json();
    j["config_hash"] = c.hash();
    return j.dump();
  });

  m.def("gen_data", command("gen-data", gen_data), py::arg("config") = "", py::arg("out") = "", py::arg("jobs") = 1,
        py::arg("paper_scale") = false);
  m.def("ooc_holdout", command("ooc-holdout", ooc_holdout), py::arg("config") = "", py::arg("out") = "", py::arg("jobs") = 1,
        py::arg("paper_scale") = false);
  m.def("train_analogy", command("train-analogy", train_analogy), py::arg("config") = "", py::arg("out") = "", py::arg("jobs") = 1,
        py::arg("paper_scale") = false);
  m.def("train_cta", command("train-cta", train_cta), py::arg("config") = "", py::arg("out") = "", py::arg("jobs") = 1,
        py::arg("paper_scale") = false);
  m.def("evaluate", command("eval", evaluate_run), py::arg("config") = "", py::arg("out") = "", py::arg("jobs") = 1,
        py::arg("paper_scale") = false);
  m.def("verify_theory", command("verify-theory", verify_theory), py::arg("config") = "", py::arg("out") = "", py::arg("jobs") = 1,
        py::arg("paper_scale") = false);
  m.def(
      "nn_probe",
      [](const std::string& config, const std::string& out, int pairs, int top) {
        const auto ctx = context(config, out, 1, false);
        CommandResult r;
        {
          py::gil_scoped_release release;
          r = nn_probe(ctx, pairs, top);
        }
        write_log(ctx, "nn-probe", r.log);
        return py::make_tuple(r.ok, r.summary, r.log.dump());
      },
      py::arg("config") = "", py::arg("out") = "", py::arg("pairs") = 2000, py::arg("top") = 10);

  m.def("describe_file", [](const std::string& path) { return describe_file(path).dump(); });
  m.def("check_gates", [](const std::string& manifest, const std::string& out) {
    std::vector<std::tuple<std::string, bool, std::string>> res;
    for (const auto& g : check_gates(manifest, out)) res.emplace_back(g.name, g.passed, g.detail);
    return res;
  });
}
