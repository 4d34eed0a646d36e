#pragma once

// Run configuration shared by every command: one JSON document with a block
// per module. Unknown keys are rejected so typos surface immediately.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "analogon/analogy.hpp"
#include "analogon/cta.hpp"
#include "analogon/datagen.hpp"
#include "analogon/envsim.hpp"

namespace analogon {

struct DataConfig {
  int episodes = 500;
  double epsilon = 0.2;
  int max_steps = 0;  // 0: the env's episode length
};

struct EvalConfig {
  std::string task_set = "random";  // "random" or "drawer-holdout"
  int tasks = 20;
  int rollouts = 50;
  double sigma_h = 0.0;  // high-level sampling noise during rollouts
  bool full_state = false;
  int last_checkpoints = 3;
};

struct RunConfig {
  /// Preset id, or an inline env spec object.
  nlohmann::json env = "gridscene-5";
  std::uint64_t seed = 0;
  DataConfig data;
  std::vector<nlohmann::json> holdout;  // HoldoutRule documents
  AnalogyConfig analogy;
  CtaConfig cta;
  int checkpoint_every = 10000;
  EvalConfig eval;

  /// Desk-scale defaults for `env` (k follows the env family).
  static RunConfig desk(const nlohmann::json& env = "gridscene-5");
  /// The paper's hyperparameter tables.
  static RunConfig paper(const nlohmann::json& env = "gridscene-5");
  /// Overlays `j` on the desk or paper profile; unknown keys raise SpecError.
  static RunConfig from_json(const nlohmann::json& j, bool paper_scale = false);

  EnvSpec env_spec() const;
  std::vector<HoldoutRule> holdout_rules(const Environment& env) const;
  /// Copies the run seed into every module.
  void apply_seed(std::uint64_t s);
  void validate() const;
  nlohmann::json to_json() const;
  /// First 16 hex digits of SHA-256 over the canonical JSON.
  std::string hash() const;
};

std::string sha256_hex(const std::string& bytes);

}  // namespace analogon
