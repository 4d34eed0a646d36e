#pragma once

// Rollout evaluation: tasks, batched rollouts, success and direct-success
// scoring, checkpoint averaging and CSV/JSON reports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "analogon/envsim.hpp"
#include "analogon/oracle.hpp"

namespace analogon {

struct EvalTask {
  std::string id;
  StateIndex start = 0;
  StateIndex goal = 0;
  int optimal = 0;  // oracle distance under the success criterion
  int budget = 0;
  std::vector<bool> success_mask;      // factors that must match the goal
  std::vector<int> exogenous_reference;  // factors whose start value must persist for a direct success
  nlohmann::json to_json(const Environment& env) const;
};

/// Budget max(10, 4 * d*). With `full_state` every factor must match.
/// Throws UsageError when the goal is unreachable.
EvalTask make_task(const Environment& env, StateIndex start, StateIndex goal, std::string id,
                   bool full_state = false);

/// `count` distinct random pairs with d* >= 1, drawn deterministically from `seed`.
std::vector<EvalTask> sample_tasks(const Environment& env, int count, std::uint64_t seed, bool full_state = false);

/// Held-out GridScene pair: start with window closed, drawer closed and
/// unlocked; goal with the drawer open and the window still closed.
std::vector<EvalTask> drawer_holdout_tasks(const Environment& env, int count, std::uint64_t seed);

struct Trajectory {
  std::vector<StateIndex> states;
  std::vector<int> actions;
};

/// Maps a batch of (state, goal) rows to actions.
using BatchPolicy = std::function<std::vector<int>(const std::vector<StateIndex>& s,
                                                   const std::vector<StateIndex>& g, std::mt19937_64& rng)>;

bool goal_reached(const Environment& env, const EvalTask& task, StateIndex s);

/// Runs `n` rollouts of one task side by side until each reaches the goal
/// or exhausts the budget.
std::vector<Trajectory> rollout(const Environment& env, const BatchPolicy& policy, const EvalTask& task, int n,
                                std::uint64_t seed);

struct Score {
  bool success = false;
  bool direct = false;
};
Score score(const Environment& env, const Trajectory& traj, const EvalTask& task);

/// Greedy descent on the endogenous oracle (lowest action index on ties).
BatchPolicy oracle_policy(const Environment& env, const DistanceTable& endogenous);

struct MetricsRow {
  std::int64_t checkpoint = 0;
  std::string task;
  double success = 0.0;
  double direct = 0.0;
  double length = 0.0;
  int n = 0;
};

/// Rollouts are split over `jobs` threads by task; each task has its own
/// generator so results do not depend on `jobs`.
std::vector<MetricsRow> evaluate(const Environment& env, const BatchPolicy& policy, const std::vector<EvalTask>& tasks,
                                 int rollouts_per_task, std::int64_t checkpoint, std::uint64_t seed, int jobs = 1);

struct EvalSummary {
  std::vector<std::int64_t> checkpoints;  // the ones averaged
  double success = 0.0;
  double direct = 0.0;
  double length = 0.0;
  std::string warning;
  nlohmann::json to_json() const;
};

/// Mean over tasks per checkpoint, then over the last three checkpoints.
EvalSummary summarize(const std::vector<MetricsRow>& rows);

/// Writes `<stem>.csv` and `<stem>.json`; `extra` is merged into the JSON summary.
void write_report(const std::vector<MetricsRow>& rows, const std::filesystem::path& stem, const nlohmann::json& extra);
std::vector<MetricsRow> read_report_csv(const std::filesystem::path& csv);

}  // namespace analogon
