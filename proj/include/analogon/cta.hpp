#pragma once

// CTA agent: compressed analogies, bilinear value and hierarchical policy
// heads trained with expectile value learning and advantage-weighted
// regression, plus the monolithic and flat baselines.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "analogon/analogy.hpp"
#include "analogon/datagen.hpp"
#include "analogon/nn.hpp"

namespace analogon {

enum class CtaVariant { Cta, HiqlDual, HiqlDualAnalogy, FlatAnalogy };

/// "cta", "hiql-dual", "hiql-dual-analogy", "flat-analogy"
std::string to_string(CtaVariant v);
CtaVariant cta_variant_from_string(const std::string& s);
std::vector<std::string> cta_variant_names();

struct CtaConfig {
  CtaVariant variant = CtaVariant::Cta;
  int e = 8;  // compressed analogy width
  int b = 8;  // bilinear bottleneck rows
  int p = 8;  // bilinear feature length
  std::vector<int> eta_hidden = {};
  std::vector<int> anchor_hidden = {32, 32};
  std::vector<int> displacement_hidden = {32, 32};
  std::vector<int> backbone_hidden = {32, 32};
  std::vector<int> monolithic_hidden = {64, 64, 64};
  double gamma = 0.99;
  double kappa = 0.7;
  double beta_h = 3.0;
  double beta_l = 3.0;
  double sigma_h = 0.1;
  double sigma_l = 0.1;
  double w_max = 100.0;
  double learning_rate = 3e-4;
  double tau = 0.005;
  int k = 8;
  int batch_size = 256;
  int steps = 50000;
  bool absorbing_goal = true;
  GoalSamplerConfig value_goals = GoalSamplerConfig::value_default(0.99);
  GoalSamplerConfig actor_goals = GoalSamplerConfig::actor_default();
  std::uint64_t seed = 0;

  bool hierarchical() const { return variant != CtaVariant::FlatAnalogy; }
  bool bilinear() const { return variant == CtaVariant::Cta || variant == CtaVariant::FlatAnalogy; }
  void validate() const;
  nlohmann::json to_json() const;
  static CtaConfig from_json(const nlohmann::json& j);
};

/// f(obs, cond). Bilinear: backbone(feature), feature_i = <anchor(obs) column i,
/// displacement(cond) column i> with both modules emitting b x p matrices.
/// Monolithic: one MLP on [obs, cond].
class ConditionalHead {
 public:
  ConditionalHead() = default;
  static ConditionalHead bilinear(const std::string& name, int obs_width, int cond_width, int b, int p,
                                  const std::vector<int>& anchor_hidden, const std::vector<int>& displacement_hidden,
                                  const std::vector<int>& backbone_hidden, int out, std::uint64_t seed);
  static ConditionalHead monolithic(const std::string& name, int obs_width, int cond_width,
                                    const std::vector<int>& hidden, int out, std::uint64_t seed);

  bool is_bilinear() const noexcept { return bilinear_; }
  tc::Var forward(tc::Graph& g, tc::Var obs, tc::Var cond);
  Matrix eval(const Matrix& obs, const Matrix& cond) const;
  /// Bilinear feature vectors (rows); bilinear heads only.
  Matrix features(const Matrix& obs, const Matrix& cond) const;

  std::vector<tc::Mlp*> modules();
  std::vector<const tc::Mlp*> modules() const;
  std::size_t parameter_count() const;
  int b() const noexcept { return b_; }
  int p() const noexcept { return p_; }

 private:
  bool bilinear_ = true;
  int b_ = 0;
  int p_ = 0;
  tc::Mlp anchor_, displacement_, backbone_, mono_;
};

class CtaAgent {
 public:
  CtaAgent() = default;
  CtaAgent(int obs_width, int action_count, int analogy_dim, const CtaConfig& cfg);

  const CtaConfig& config() const noexcept { return cfg_; }
  CtaVariant variant() const noexcept { return cfg_.variant; }
  int action_count() const noexcept { return action_count_; }
  int analogy_dim() const noexcept { return d_; }

  tc::Mlp& eta() { return eta_; }
  const tc::Mlp& eta() const { return eta_; }
  const tc::Mlp& eta_target() const { return eta_bar_; }
  ConditionalHead& value_head() { return value_; }
  const ConditionalHead& value_head() const { return value_; }
  const ConditionalHead& value_target() const { return value_bar_; }
  ConditionalHead& high_head() { return high_; }
  const ConditionalHead& high_head() const { return high_; }
  ConditionalHead& low_head() { return low_; }
  const ConditionalHead& low_head() const { return low_; }

  /// Input of eta for the pair (s, g): the dual analogy, or varphi(g) for HIQL-dual.
  Matrix conditioning(const AnalogyTables& tables, const std::vector<StateIndex>& s,
                      const std::vector<StateIndex>& g) const;
  Matrix compress(const Matrix& raw) const { return eta_.eval(raw); }
  Matrix value(const Matrix& obs, const AnalogyTables& tables, const std::vector<StateIndex>& s,
               const std::vector<StateIndex>& g) const;
  Matrix target_value(const Matrix& obs, const AnalogyTables& tables, const std::vector<StateIndex>& s,
                      const std::vector<StateIndex>& g) const;

  /// One action per row. `sigma_h` scales the high-level sampling noise
  /// (0: use the mean). Ties in the action mean resolve to the lowest index.
  std::vector<int> act(const Matrix& obs_table, const AnalogyTables& tables, const std::vector<StateIndex>& s,
                       const std::vector<StateIndex>& g, double sigma_h, std::mt19937_64& rng) const;

  void update_target(double tau);
  std::vector<tc::ParameterStore*> trainable_stores();
  std::size_t parameter_count() const;  // trainable parameters only
  tc::NamedStores stores() const;
  tc::MutableNamedStores mutable_stores();

  void save(const std::filesystem::path& path, const nlohmann::json& sidecar) const;
  nlohmann::json load(const std::filesystem::path& path);

 private:
  CtaConfig cfg_;
  int obs_width_ = 0;
  int action_count_ = 0;
  int d_ = 0;
  tc::Mlp eta_, eta_bar_;
  ConditionalHead value_, value_bar_, high_, low_;
};

struct CtaBatch {
  std::vector<StateIndex> s, s_next, s_k, g_value, g_actor;
  std::vector<int> a;
};

struct CtaLosses {
  double value = 0.0;
  double high = 0.0;  // negated weighted log-likelihood (minimized)
  double low = 0.0;
  double mean_weight_h = 0.0;
  double mean_weight_l = 0.0;
};

/// Overrides used by gradient checks: fixed AWR weights and a frozen copy of
/// eta for actor conditioning, so the loss is a pure function of the live
/// parameters.
struct CtaLossOptions {
  const Matrix* weights_h = nullptr;
  const Matrix* weights_l = nullptr;
  const tc::Mlp* frozen_eta = nullptr;
};

struct CtaLossVars {
  tc::Var total, value, high, low;
  Matrix weights_h, weights_l;
};

class CtaTrainer {
 public:
  CtaTrainer(const Environment& env, const TransitionDataset& data, const AnalogyTables& tables, CtaAgent& agent,
             const CtaConfig& cfg);

  CtaBatch sample_batch();
  CtaLossVars build_loss(tc::Graph& g, const CtaBatch& batch, const CtaLossOptions& opt = {}) const;
  /// AWR weights min(exp(beta * A), w_max) from the live value head.
  Matrix awr_weights(const std::vector<StateIndex>& from, const std::vector<StateIndex>& to,
                     const std::vector<StateIndex>& goal, double beta) const;
  CtaLosses step(const CtaBatch& batch);
  CtaLosses step() { return step(sample_batch()); }

  const Matrix& observations() const noexcept { return obs_; }
  std::int64_t steps_done() const noexcept { return adam_.step_count(); }

 private:
  const Environment& env_;
  const TransitionDataset& data_;
  const AnalogyTables& tables_;
  CtaAgent& agent_;
  CtaConfig cfg_;
  Matrix obs_;
  tc::Adam adam_;
  std::mt19937_64 rng_;
};

}  // namespace analogon
