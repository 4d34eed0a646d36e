#pragma once

// Deterministic, fully enumerable factored environments.
//
// Two families are supported. FactorChain is a product of independent 1-D
// chains (each action moves exactly one factor by +-1). GridScene places an
// agent on a grid together with toggleable objects; an object toggles when
// the agent interacts on its toggle cell and its guard (if any) is unlocked.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace analogon {

enum class FactorKind { AgentPosition, Object, Lock };
enum class EnvFamily { FactorChain, GridScene };

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

struct FactorSpec {
  std::string name;
  int domain_size = 2;
  FactorKind kind = FactorKind::Object;
  std::optional<Cell> toggle_cell;
  std::optional<int> guard;  // index of a Lock factor
};

struct EnvSpec {
  std::string env_id;
  EnvFamily family = EnvFamily::FactorChain;
  int width = 0;
  int height = 0;
  std::vector<FactorSpec> factors;
  int action_count = 0;
  int max_episode_steps = 50;
};

/// One value per factor, each in [0, domain_size).
using FactoredState = std::vector<int>;
using StateIndex = std::uint32_t;

struct EndogenousLabel {
  std::vector<bool> endogenous_mask;
  std::vector<int> state_tuple;  // s restricted to the mask
  std::vector<int> goal_tuple;   // g restricted to the mask
};

/// Lock value that permits guarded toggles.
inline constexpr int kUnlocked = 0;

namespace grid_action {
inline constexpr int kUp = 0;     // y - 1
inline constexpr int kDown = 1;   // y + 1
inline constexpr int kLeft = 2;   // x - 1
inline constexpr int kRight = 3;  // x + 1
inline constexpr int kInteract = 4;
inline constexpr int kNoop = 5;
inline constexpr int kCount = 6;
}  // namespace grid_action

class Environment {
 public:
  explicit Environment(EnvSpec spec);

  const EnvSpec& spec() const noexcept { return spec_; }
  const std::string& id() const noexcept { return spec_.env_id; }
  int factor_count() const noexcept { return static_cast<int>(spec_.factors.size()); }
  int action_count() const noexcept { return spec_.action_count; }
  std::size_t state_count() const noexcept { return state_count_; }

  StateIndex encode(const FactoredState& s) const;
  FactoredState decode(StateIndex index) const;
  int factor_value(StateIndex index, int factor) const;
  bool valid(const FactoredState& s) const;

  FactoredState step(const FactoredState& s, int action) const;
  /// Precomputed successor lookup; equivalent to encode(step(decode(s), a)).
  StateIndex next(StateIndex s, int action) const {
    return successors_[static_cast<std::size_t>(s) * spec_.action_count + action];
  }

  std::vector<FactoredState> enumerate_states() const;

  EndogenousLabel ground_truth_label(const FactoredState& s, const FactoredState& g) const;
  std::vector<bool> endogenous_mask(StateIndex s, StateIndex g) const;

  /// Network input width and encoding (one-hot per factor; the agent cell is
  /// split into x and y one-hots).
  int observation_width() const noexcept { return obs_width_; }
  void write_observation(StateIndex s, double* out) const;
  std::vector<double> observation(StateIndex s) const;

  int agent_factor() const noexcept { return agent_factor_; }
  Cell agent_cell(const FactoredState& s) const;
  std::string describe_action(int action) const;
  std::string describe_state(const FactoredState& s) const;

 private:
  FactoredState step_grid(FactoredState s, int action) const;
  FactoredState step_chain(FactoredState s, int action) const;

  EnvSpec spec_;
  std::size_t state_count_ = 0;
  std::vector<std::size_t> strides_;
  std::vector<StateIndex> successors_;
  int obs_width_ = 0;
  int agent_factor_ = -1;
};

/// Validates `spec` and throws SpecError naming the offending field.
void validate_spec(const EnvSpec& spec);

Environment make_env(const EnvSpec& spec);
/// Built-in presets: "factorchain-3", "gridscene-5".
EnvSpec preset_spec(const std::string& id);
std::vector<std::string> preset_ids();

nlohmann::json to_json(const EnvSpec& spec);
EnvSpec env_spec_from_json(const nlohmann::json& j);

inline constexpr std::size_t kMaxStates = 50'000;

}  // namespace analogon
