#pragma once

// Temporal-distance surrogate phi(s)^T varphi(g) trained with goal-conditioned
// IQL, and the dual analogy varphi(g) - varphi(s).

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "analogon/datagen.hpp"
#include "analogon/envsim.hpp"
#include "analogon/nn.hpp"
#include "analogon/oracle.hpp"

namespace analogon {

using tc::Matrix;

struct AnalogyConfig {
  int d = 32;
  std::vector<int> hidden = {64, 64};
  double gamma = 0.99;
  double expectile = 0.98;
  double learning_rate = 3e-4;
  double tau = 0.005;
  int batch_size = 256;
  int steps = 20000;
  /// Zero the bootstrap term once the goal is reached.
  bool absorbing_goal = true;
  GoalSamplerConfig goals = GoalSamplerConfig::value_default(0.99);
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static AnalogyConfig from_json(const nlohmann::json& j);
};

/// |iota - 1{x < 0}| * x^2. Throws UsageError unless iota is in (0, 1).
double expectile_loss(double x, double iota);

/// log_gamma(1 + (1 - gamma) * v), clipped to [0, d_max]. `clipped` is set
/// when v lies outside (-1/(1-gamma), 0].
double implied_distance(double v, double gamma, double d_max, bool* clipped = nullptr);

/// Row i is the network input for state i.
Matrix observation_matrix(const Environment& env);
Matrix one_hot_actions(const std::vector<int>& actions, int action_count);

class DualAnalogyModel {
 public:
  DualAnalogyModel() = default;
  DualAnalogyModel(int obs_width, int action_count, const AnalogyConfig& cfg);

  tc::Mlp& phi() { return phi_; }
  tc::Mlp& varphi() { return varphi_; }
  tc::Mlp& critic() { return q_; }
  const tc::Mlp& phi() const { return phi_; }
  const tc::Mlp& varphi() const { return varphi_; }
  const tc::Mlp& critic() const { return q_; }
  const tc::Mlp& phi_target() const { return phi_bar_; }
  const tc::Mlp& varphi_target() const { return varphi_bar_; }
  const tc::Mlp& critic_target() const { return q_bar_; }

  int d() const noexcept { return d_; }
  int obs_width() const noexcept { return obs_width_; }
  int action_count() const noexcept { return action_count_; }

  /// Row-wise phi(s)^T varphi(g).
  Matrix td_value(const Matrix& obs_s, const Matrix& obs_g) const;
  /// Row-wise varphi(g) - varphi(s).
  Matrix dual_analogy(const Matrix& obs_s, const Matrix& obs_g) const;

  void update_targets(double tau);
  void zero();

  void save(const std::filesystem::path& path, const nlohmann::json& sidecar) const;
  /// Reads the checkpoint and its JSON sidecar; returns the sidecar.
  nlohmann::json load(const std::filesystem::path& path);
  tc::NamedStores stores() const;
  tc::MutableNamedStores mutable_stores();

 private:
  int d_ = 0;
  int obs_width_ = 0;
  int action_count_ = 0;
  tc::Mlp phi_, varphi_, q_;
  tc::Mlp phi_bar_, varphi_bar_, q_bar_;
};

/// Embeddings of every environment state.
struct AnalogyTables {
  Matrix phi;     // n x d
  Matrix varphi;  // n x d
  static AnalogyTables build(const DualAnalogyModel& model, const Matrix& observations);
  double td_value(StateIndex s, StateIndex g) const { return phi.row(s).dot(varphi.row(g)); }
  tc::RowVector analogy(StateIndex s, StateIndex g) const { return varphi.row(g) - varphi.row(s); }
};

struct AnalogyBatch {
  std::vector<StateIndex> s, s_next, g;
  std::vector<int> a;
};

struct AnalogyLosses {
  double value = 0.0;
  double critic = 0.0;
};

class AnalogyTrainer {
 public:
  AnalogyTrainer(const Environment& env, const TransitionDataset& data, DualAnalogyModel& model,
                 const AnalogyConfig& cfg);

  AnalogyBatch sample_batch();
  /// Builds L(phi, varphi) + L(Q) on `g`; returns {total, value, critic}.
  std::array<tc::Var, 3> build_loss(tc::Graph& g, const AnalogyBatch& batch) const;
  /// One joint Adam step followed by the EMA update.
  AnalogyLosses step(const AnalogyBatch& batch);
  AnalogyLosses step() { return step(sample_batch()); }

  const Matrix& observations() const noexcept { return obs_; }
  std::int64_t steps_done() const noexcept { return adam_.step_count(); }

 private:
  const Environment& env_;
  const TransitionDataset& data_;
  DualAnalogyModel& model_;
  AnalogyConfig cfg_;
  Matrix obs_;
  tc::Adam adam_;
  std::mt19937_64 rng_;
};

struct DistanceFitReport {
  std::size_t pairs = 0;
  double mae = 0.0;
  double max_error = 0.0;
  std::size_t clipped = 0;
  nlohmann::json to_json() const;
};

/// Implied distance of phi^T varphi against the oracle over all finite pairs.
DistanceFitReport distance_fit(const AnalogyTables& tables, const DistanceTable& oracle, double gamma);

struct AnalogyStructureReport {
  std::size_t groups = 0;
  std::size_t within_pairs = 0;
  std::size_t across_pairs = 0;
  double within_cosine = 0.0;
  double across_cosine = 0.0;
  double gap() const { return within_cosine - across_cosine; }
  nlohmann::json to_json() const;
};

/// Mean cosine similarity of analogies that share an endogenous displacement
/// (same mask and masked tuples, different context) versus analogies from
/// different displacements. Pairs with s = g are skipped.
AnalogyStructureReport analogy_structure(const Environment& env, const AnalogyTables& tables, std::uint64_t seed,
                                         std::size_t max_pairs = 20000);

}  // namespace analogon
