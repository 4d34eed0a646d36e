#pragma once

// The command pipeline: every CLI subcommand is one function here so the
// CLI, the acceptance harness and the Python bindings share a code path.
//
// Layout under the output directory:
//   dataset.bin, dataset.holdout.bin       gen-data, ooc-holdout
//   analogy.ckpt (+ .json)                 train-analogy
//   cta/<variant>/step_<N>.ckpt (+ .json)  train-cta
//   cta/<variant>/metrics.csv              train-cta
//   eval/<variant>.csv, eval/<variant>.json
//   theory.json, nn_probe.json
//   logs/<command>.json                    full log of the last run

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "analogon/config.hpp"

namespace analogon {

struct RunContext {
  RunConfig config;
  std::filesystem::path out = "analogon-out";
  int jobs = 1;
  bool verbose = false;  // progress lines on stderr
};

struct CommandResult {
  std::string summary;  // one line
  nlohmann::json log;
  bool ok = true;
};

/// Output root: --out if given, else $ANALOGON_OUT_DIR, else ./analogon-out.
std::filesystem::path default_out_dir();

std::filesystem::path dataset_path(const std::filesystem::path& out, bool holdout);
std::filesystem::path analogy_path(const std::filesystem::path& out);
std::filesystem::path cta_dir(const std::filesystem::path& out, CtaVariant v);
std::filesystem::path cta_checkpoint_path(const std::filesystem::path& out, CtaVariant v, std::int64_t step);
/// Existing step_<N>.ckpt files, ascending by N.
std::vector<std::int64_t> cta_checkpoints(const std::filesystem::path& out, CtaVariant v);
std::filesystem::path eval_stem(const std::filesystem::path& out, CtaVariant v);

/// Dataset training reads: the holdout dataset when the config names holdout
/// rules, otherwise the full one. Missing files name the producing command.
TransitionDataset load_training_dataset(const RunContext& ctx);

CommandResult gen_data(const RunContext& ctx);
/// Applies the config's holdout rules, or the drawer rule on GridScene when
/// the config has none.
CommandResult ooc_holdout(const RunContext& ctx);
CommandResult train_analogy(const RunContext& ctx);
CommandResult train_cta(const RunContext& ctx);
CommandResult evaluate_run(const RunContext& ctx);
CommandResult verify_theory(const RunContext& ctx);
CommandResult nn_probe(const RunContext& ctx, int pairs, int top);

/// Header of a dataset or checkpoint file as JSON.
nlohmann::json describe_file(const std::filesystem::path& path);

struct GateOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Manifest: {"gates": [{"name", "file", "pointer", "op", "value"}]}; `file`
/// is relative to `out`, `pointer` a JSON pointer, `op` one of
/// < <= > >= == !=.
std::vector<GateOutcome> check_gates(const std::filesystem::path& manifest, const std::filesystem::path& out);

/// Writes logs/<command>.json with the config, its hash and `log`.
void write_log(const RunContext& ctx, const std::string& command, const nlohmann::json& log);

}  // namespace analogon
