#pragma once

// Offline play datasets: scripted collection, hindsight goal sampling and the
// context/task holdout editor.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "analogon/envsim.hpp"

namespace analogon {

/// One trajectory: states[0..T] and actions[0..T-1]. Observations are the
/// environment encoding of each state index.
struct Episode {
  std::vector<StateIndex> states;
  std::vector<std::uint8_t> actions;
  std::size_t last() const { return states.size() - 1; }
};

/// Conjunction of factor == value tests.
struct ContextPredicate {
  std::vector<std::pair<int, int>> equals;
  bool holds(const Environment& env, StateIndex s) const;
};

struct HoldoutRule {
  std::string name;
  ContextPredicate context;
  int event_factor = 0;
  int event_from = 0;
  int event_to = 1;
  int window = 15;

  void validate(const Environment& env) const;
  nlohmann::json to_json(const Environment& env) const;
  static HoldoutRule from_json(const nlohmann::json& j, const Environment& env);
};

/// The held-out pair used for the out-of-combination experiments on
/// gridscene-5: opening the drawer while the window is closed and the drawer
/// is unlocked.
HoldoutRule gridscene_drawer_holdout(const Environment& env, int window = 15);

class TransitionDataset {
 public:
  TransitionDataset() = default;
  TransitionDataset(std::string env_id, nlohmann::json env_spec, std::uint64_t seed);

  const std::string& env_id() const noexcept { return env_id_; }
  const nlohmann::json& env_spec() const noexcept { return env_spec_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<Episode>& episodes() const noexcept { return episodes_; }
  const std::vector<nlohmann::json>& provenance() const noexcept { return provenance_; }
  nlohmann::json& meta() noexcept { return meta_; }
  const nlohmann::json& meta() const noexcept { return meta_; }

  void add_episode(Episode e);
  void add_provenance(nlohmann::json entry) { provenance_.push_back(std::move(entry)); }

  std::size_t transition_count() const noexcept { return transitions_.size(); }
  std::size_t state_count() const noexcept { return state_refs_.size(); }
  /// (episode, t) of the i-th transition s_t -> s_{t+1}.
  std::pair<std::uint32_t, std::uint32_t> transition(std::size_t i) const { return transitions_[i]; }
  /// Any stored observation, uniformly indexed.
  StateIndex state_at(std::size_t i) const;
  std::size_t distinct_states() const;

  void save(const std::filesystem::path& path) const;
  static TransitionDataset load(const std::filesystem::path& path);
  /// Header fields as JSON (no per-episode arrays).
  nlohmann::json describe() const;

 private:
  std::string env_id_;
  nlohmann::json env_spec_;
  std::uint64_t seed_ = 0;
  nlohmann::json meta_ = nlohmann::json::object();
  std::vector<nlohmann::json> provenance_;
  std::vector<Episode> episodes_;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> transitions_;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> state_refs_;
};

struct PlayConfig {
  int episodes = 500;
  double epsilon = 0.2;
  int max_steps = 0;  // 0: the environment's max_episode_steps
  std::uint64_t seed = 0;
};

/// Task-switching scripted collector: pick a random (factor, value) target,
/// take a shortest-path action towards it (ties broken at random), or a
/// uniform action with probability epsilon.
TransitionDataset generate_play(const Environment& env, const PlayConfig& cfg);

struct GoalSamplerConfig {
  double p_cur = 0.2;
  double p_traj = 0.5;
  double p_rand = 0.3;
  bool geometric = true;
  double gamma = 0.99;

  void validate() const;
  static GoalSamplerConfig value_default(double gamma) { return {0.2, 0.5, 0.3, true, gamma}; }
  static GoalSamplerConfig actor_default() { return {0.0, 1.0, 0.0, false, 0.99}; }
};

enum class GoalBranch { Current, Trajectory, Random };

struct SampledGoal {
  StateIndex goal = 0;
  GoalBranch branch = GoalBranch::Current;
};

/// Goal for the state at (episode, t). Trajectory goals use a geometric
/// offset (support 1, 2, ...) with parameter 1 - gamma, or a uniform offset in
/// [1, T - t] when `geometric` is false; both are truncated at the episode end.
SampledGoal sample_value_goal(const TransitionDataset& ds, std::uint32_t episode, std::uint32_t t,
                              const GoalSamplerConfig& cfg, std::mt19937_64& rng);

/// min(t + k, T)
std::size_t subgoal_index(std::size_t t, std::size_t k, std::size_t T);

struct HoldoutResult {
  TransitionDataset dataset;
  std::size_t removed = 0;
  std::size_t events = 0;
};

/// Deletes the `window` transitions ending with every matching event whose
/// context held at the start of the window, splits episodes at the gaps and
/// drops fragments without a transition. Overlapping windows merge. Repeats
/// until a re-scan finds nothing.
HoldoutResult apply_holdout(const TransitionDataset& ds, const Environment& env, const HoldoutRule& rule);

/// Number of event transitions whose context holds at the (clipped) window start.
std::size_t holdout_violations(const TransitionDataset& ds, const Environment& env, const HoldoutRule& rule);

}  // namespace analogon
