// analogon: command-line front end over the pipeline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "analogon/errors.hpp"
#include "analogon/pipeline.hpp"

using namespace analogon;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
  bool paper_scale = false;
  std::string gate;
  bool verbose = false;
  std::string env;
  std::string variant;
  int pairs = 2000;
  int top = 10;
  std::string file;
};

RunContext make_context(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw IoError("cannot read config " + o.config);
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw SpecError("config", e.what());
    }
  }
  if (!o.env.empty()) j["env"] = o.env;
  if (!o.variant.empty()) j["cta"]["variant"] = o.variant;
  if (o.seed) {
    // A flag seed wins over every seed in the file.
    j["seed"] = *o.seed;
    for (const char* block : {"analogy", "cta"}) {
      if (j.contains(block)) j[block].erase("seed");
    }
  }
  RunContext ctx;
  ctx.config = RunConfig::from_json(j, o.paper_scale);
  ctx.out = o.out.empty() ? default_out_dir() : std::filesystem::path(o.out);
  ctx.jobs = o.jobs;
  ctx.verbose = o.verbose;
  return ctx;
}

int finish(const RunContext& ctx, const Options& o, const std::string& command, const CommandResult& r) {
  write_log(ctx, command, r.log);
  std::cout << r.summary << std::endl;
  int code = r.ok ? 0 : 1;
  if (!o.gate.empty()) {
    for (const auto& g : check_gates(o.gate, ctx.out)) {
      std::cout << (g.passed ? "PASS " : "FAIL ") << g.name << ": " << g.detail << std::endl;
      if (!g.passed) code = 3;
    }
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Analogy-conditioned goal reaching on factored gridworlds"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "Run config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Seed for every module");
  app.add_option("--out", o.out, "Output root (default $ANALOGON_OUT_DIR or ./analogon-out)");
  app.add_option("--jobs", o.jobs, "Worker cap for evaluation")->check(CLI::PositiveNumber);
  app.add_flag("--paper-scale", o.paper_scale, "Use the paper's hyperparameter tables");
  app.add_option("--gate", o.gate, "Gate manifest checked after the command")->check(CLI::ExistingFile);
  app.add_flag("-v,--verbose", o.verbose, "Progress on stderr");
  app.add_option("--env", o.env, "Environment preset id");

  app.add_subcommand("gen-data", "Generate the play dataset");
  app.add_subcommand("ooc-holdout", "Remove held-out context/task pairs from the dataset");
  app.add_subcommand("train-analogy", "Train the distance model and dual analogies");
  auto* train = app.add_subcommand("train-cta", "Train a control agent");
  auto* eval = app.add_subcommand("eval", "Evaluate saved checkpoints");
  for (auto* sub : {train, eval}) {
    sub->add_option("--variant", o.variant, "cta | hiql-dual | hiql-dual-analogy | flat-analogy");
  }
  app.add_subcommand("verify-theory", "Exact checks on the oracle distances");
  auto* probe = app.add_subcommand("nn-probe", "Nearest-neighbour table over dual analogies");
  probe->add_option("--pairs", o.pairs, "Sampled (s, g) pairs");
  probe->add_option("--top", o.top, "Neighbours per pair");
  auto* describe = app.add_subcommand("describe", "Print a dataset or checkpoint header, or the resolved config");
  describe->add_option("file", o.file, "Dataset or checkpoint file");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "describe" && !o.file.empty()) {
      std::cout << describe_file(o.file).dump(2) << std::endl;
      return 0;
    }
    const auto ctx = make_context(o);
    if (name == "describe") {
      nlohmann::json j = ctx.config.to_json();
      j["config_hash"] = ctx.config.hash();
      std::cout << j.dump(2) << std::endl;
      return 0;
    }
    CommandResult r;
    if (name == "gen-data") r = gen_data(ctx);
    else if (name == "ooc-holdout") r = ooc_holdout(ctx);
    else if (name == "train-analogy") r = train_analogy(ctx);
    else if (name == "train-cta") r = train_cta(ctx);
    else if (name == "eval") r = evaluate_run(ctx);
    else if (name == "verify-theory") r = verify_theory(ctx);
    else r = nn_probe(ctx, o.pairs, o.top);
    return finish(ctx, o, name, r);
  } catch (const SpecError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
