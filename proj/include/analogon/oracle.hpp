#pragma once

// Exact optimal temporal distances on enumerable environments, the
// distance-difference field, and machine checks of the structural claims
// (quasimetric, endogenous closure, field invariance across contexts).

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "analogon/envsim.hpp"

namespace analogon {

enum class RewardMode { FullMatch, EndogenousMatch };

std::string to_string(RewardMode m);
RewardMode reward_mode_from_string(const std::string& s);

class DistanceTable {
 public:
  using Entry = std::uint16_t;
  static constexpr Entry kInfinity = std::numeric_limits<Entry>::max();
  /// Largest state count for which a dense pair table is built.
  static constexpr std::size_t kMaxStates = 16'384;

  DistanceTable() = default;
  DistanceTable(std::string env_id, RewardMode mode, std::size_t states);

  const std::string& env_id() const noexcept { return env_id_; }
  RewardMode reward_mode() const noexcept { return mode_; }
  std::size_t state_count() const noexcept { return n_; }

  Entry at(StateIndex s, StateIndex g) const { return d_[static_cast<std::size_t>(s) * n_ + g]; }
  Entry& at(StateIndex s, StateIndex g) { return d_[static_cast<std::size_t>(s) * n_ + g]; }
  bool finite(StateIndex s, StateIndex g) const { return at(s, g) != kInfinity; }
  std::size_t infinite_count() const;
  int max_finite() const;

  const std::vector<Entry>& raw() const noexcept { return d_; }

  void save(const std::filesystem::path& path) const;
  static DistanceTable load(const std::filesystem::path& path);

 private:
  std::string env_id_;
  RewardMode mode_ = RewardMode::FullMatch;
  std::size_t n_ = 0;
  std::vector<Entry> d_;
};

/// Multi-source BFS over reversed edges, one search per goal (full match) or
/// per (goal, endogenous mask) class (endogenous match).
DistanceTable solve_distances(const Environment& env, RewardMode mode);

/// Distance from every state to the set {x : x[f] = value}.
std::vector<int> distances_to_factor_value(const Environment& env, int factor, int value);

struct OptimalValue {
  double value = 0.0;           // gamma^d
  double modified_return = 0.0; // -(1 - gamma^d) / (1 - gamma)
  bool infinite = false;
};

OptimalValue value_of(double distance, double gamma);
OptimalValue value_of(const DistanceTable& table, StateIndex s, StateIndex g, double gamma);

/// Bellman value iteration on the modified reward -1{s != g} with an absorbing
/// goal. Returns the (state, goal) matrix of modified returns; independent of BFS.
std::vector<double> value_iteration(const Environment& env, double gamma, double tol = 1e-14,
                                    int max_sweeps = 100'000);

/// field(x) = d(x, g) - d(x, s) for every probe x in enumeration order.
std::vector<int> distance_field(const DistanceTable& table, StateIndex s, StateIndex g);

struct FieldInvarianceReport {
  std::size_t groups = 0;
  std::size_t singleton_groups = 0;
  std::size_t compared_member_pairs = 0;
  std::size_t compared_probes = 0;
  std::size_t skipped_infinite_probes = 0;
  double max_deviation = 0.0;
  std::vector<double> group_max_deviation;
  nlohmann::json to_json() const;
};

FieldInvarianceReport verify_field_invariance(const Environment& env, const DistanceTable& table);

struct ClosureReport {
  std::size_t groups = 0;
  std::size_t violating_groups = 0;
  std::size_t violating_pairs = 0;
  int max_spread = 0;
  nlohmann::json to_json() const;
};

ClosureReport verify_endogenous_closure(const Environment& env, const DistanceTable& endogenous_table);

struct QuasimetricReport {
  std::size_t nonzero_diagonal = 0;
  std::size_t triples_checked = 0;
  std::size_t triangle_violations = 0;
  std::size_t asymmetric_pairs = 0;
  std::vector<std::pair<StateIndex, StateIndex>> asymmetry_witnesses;  // first few
  bool ok() const { return nonzero_diagonal == 0 && triangle_violations == 0; }
  nlohmann::json to_json() const;
};

QuasimetricReport verify_quasimetric(const DistanceTable& table);

struct GreedyFieldReport {
  std::size_t pairs = 0;
  std::size_t optimal = 0;
  std::size_t suboptimal = 0;
  nlohmann::json to_json() const;
};

/// Greedy control on gamma^{field(s,g)(x')} * gamma^{d(x', s)} from every start
/// s towards every goal g; counts pairs whose path length equals d(s, g).
GreedyFieldReport verify_greedy_field_policy(const Environment& env, const DistanceTable& table,
                                             double gamma);

}  // namespace analogon
