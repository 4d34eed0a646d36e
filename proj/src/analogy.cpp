#include "analogon/analogy.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "analogon/errors.hpp"

namespace analogon {

using tc::Graph;
using tc::Var;

void AnalogyConfig::validate() const {
  if (d < 1) throw SpecError("analogy.d", "must be >= 1");
  for (int h : hidden) {
    if (h < 1) throw SpecError("analogy.hidden", "widths must be >= 1");
  }
  if (!(gamma > 0.0 && gamma < 1.0)) throw SpecError("analogy.gamma", "must lie in (0, 1)");
  if (!(expectile > 0.0 && expectile < 1.0)) throw SpecError("analogy.expectile", "must lie in (0, 1)");
  if (!(learning_rate > 0.0)) throw SpecError("analogy.learning_rate", "must be positive");
  if (!(tau > 0.0 && tau <= 1.0)) throw SpecError("analogy.tau", "must lie in (0, 1]");
  if (batch_size < 1) throw SpecError("analogy.batch_size", "must be >= 1");
  if (steps < 0) throw SpecError("analogy.steps", "must be >= 0");
  goals.validate();
}

nlohmann::json AnalogyConfig::to_json() const {
  return {{"d", d},
          {"hidden", hidden},
          {"gamma", gamma},
          {"expectile", expectile},
          {"learning_rate", learning_rate},
          {"tau", tau},
          {"batch_size", batch_size},
          {"steps", steps},
          {"absorbing_goal", absorbing_goal},
          {"goals", {{"p_cur", goals.p_cur}, {"p_traj", goals.p_traj}, {"p_rand", goals.p_rand}, {"geometric", goals.geometric}}},
          {"seed", seed}};
}

AnalogyConfig AnalogyConfig::from_json(const nlohmann::json& j) {
  AnalogyConfig c;
  c.d = j.value("d", c.d);
  c.hidden = j.value("hidden", c.hidden);
  c.gamma = j.value("gamma", c.gamma);
  c.expectile = j.value("expectile", c.expectile);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.tau = j.value("tau", c.tau);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.absorbing_goal = j.value("absorbing_goal", c.absorbing_goal);
  c.seed = j.value("seed", c.seed);
  c.goals.gamma = c.gamma;
  if (j.contains("goals")) {
    const auto& g = j.at("goals");
    c.goals.p_cur = g.value("p_cur", c.goals.p_cur);
    c.goals.p_traj = g.value("p_traj", c.goals.p_traj);
    c.goals.p_rand = g.value("p_rand", c.goals.p_rand);
    c.goals.geometric = g.value("geometric", c.goals.geometric);
  }
  c.validate();
  return c;
}

double expectile_loss(double x, double iota) {
  if (!(iota > 0.0 && iota < 1.0)) throw UsageError("expectile_loss: iota must lie in (0, 1)");
  return tc::kernel::expectile(x, iota);
}

double implied_distance(double v, double gamma, double d_max, bool* clipped) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw UsageError("implied_distance: gamma must lie in (0, 1)");
  const double arg = 1.0 + (1.0 - gamma) * v;
  bool clip = false;
  double d;
  if (v > 0.0) {
    d = 0.0;
    clip = true;
  } else if (arg <= 0.0) {
    d = d_max;
    clip = true;
  } else {
    d = std::log(arg) / std::log(gamma);
    if (d > d_max) {
      d = d_max;
      clip = true;
    }
  }
  if (clipped) *clipped = clip;
  return d;
}

Matrix observation_matrix(const Environment& env) {
  Matrix obs = Matrix::Zero(static_cast<Eigen::Index>(env.state_count()), env.observation_width());
  for (std::size_t s = 0; s < env.state_count(); ++s) {
    env.write_observation(static_cast<StateIndex>(s), obs.row(static_cast<Eigen::Index>(s)).data());
  }
  return obs;
}

Matrix one_hot_actions(const std::vector<int>& actions, int action_count) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), action_count);
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (actions[i] < 0 || actions[i] >= action_count) throw UsageError("action index out of range");
    m(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
  }
  return m;
}

DualAnalogyModel::DualAnalogyModel(int obs_width, int action_count, const AnalogyConfig& cfg)
    : d_(cfg.d), obs_width_(obs_width), action_count_(action_count) {
  cfg.validate();
  phi_ = tc::Mlp("phi", {obs_width, cfg.hidden, cfg.d, true}, cfg.seed * 7 + 1);
  varphi_ = tc::Mlp("varphi", {obs_width, cfg.hidden, cfg.d, true}, cfg.seed * 7 + 2);
  q_ = tc::Mlp("q", {2 * obs_width + action_count, cfg.hidden, 1, true}, cfg.seed * 7 + 3);
  phi_bar_ = phi_;
  varphi_bar_ = varphi_;
  q_bar_ = q_;
}

Matrix DualAnalogyModel::td_value(const Matrix& obs_s, const Matrix& obs_g) const {
  return (phi_.eval(obs_s).array() * varphi_.eval(obs_g).array()).rowwise().sum().matrix();
}

Matrix DualAnalogyModel::dual_analogy(const Matrix& obs_s, const Matrix& obs_g) const {
  return varphi_.eval(obs_g) - varphi_.eval(obs_s);
}

void DualAnalogyModel::update_targets(double tau) {
  tc::ema_update(phi_bar_.params(), phi_.params(), tau);
  tc::ema_update(varphi_bar_.params(), varphi_.params(), tau);
  tc::ema_update(q_bar_.params(), q_.params(), tau);
}

void DualAnalogyModel::zero() {
  for (auto* m : {&phi_, &varphi_, &q_, &phi_bar_, &varphi_bar_, &q_bar_}) m->zero();
}

tc::NamedStores DualAnalogyModel::stores() const {
  return {{"phi", &phi_.params()},         {"varphi", &varphi_.params()},         {"q", &q_.params()},
          {"phi_bar", &phi_bar_.params()}, {"varphi_bar", &varphi_bar_.params()}, {"q_bar", &q_bar_.params()}};
}

tc::MutableNamedStores DualAnalogyModel::mutable_stores() {
  return {{"phi", &phi_.params()},         {"varphi", &varphi_.params()},         {"q", &q_.params()},
          {"phi_bar", &phi_bar_.params()}, {"varphi_bar", &varphi_bar_.params()}, {"q_bar", &q_bar_.params()}};
}

void DualAnalogyModel::save(const std::filesystem::path& path, const nlohmann::json& sidecar) const {
  tc::save_checkpoint(path, stores());
  std::ofstream js(path.string() + ".json");
  if (!js) throw IoError("cannot write " + path.string() + ".json");
  js << sidecar.dump(2) << "\n";
}

nlohmann::json DualAnalogyModel::load(const std::filesystem::path& path) {
  tc::load_checkpoint(path, mutable_stores());
  std::ifstream js(path.string() + ".json");
  if (!js) return nlohmann::json::object();
  return nlohmann::json::parse(js);
}

AnalogyTables AnalogyTables::build(const DualAnalogyModel& model, const Matrix& observations) {
  return {model.phi().eval(observations), model.varphi().eval(observations)};
}

AnalogyTrainer::AnalogyTrainer(const Environment& env, const TransitionDataset& data, DualAnalogyModel& model,
                               const AnalogyConfig& cfg)
    : env_(env),
      data_(data),
      model_(model),
      cfg_(cfg),
      obs_(observation_matrix(env)),
      adam_({&model.phi().params(), &model.varphi().params(), &model.critic().params()},
            tc::AdamConfig{cfg.learning_rate}),
      rng_(cfg.seed ^ 0x5eedULL) {
  cfg_.validate();
  if (data.env_id() != env.id()) throw UsageError("dataset env '" + data.env_id() + "' does not match '" + env.id() + "'");
  if (data.transition_count() == 0) throw UsageError("dataset has no transitions");
  if (model.obs_width() != env.observation_width() || model.action_count() != env.action_count()) {
    throw UsageError("analogy model shape does not match the environment");
  }
  cfg_.goals.gamma = cfg_.gamma;
}

AnalogyBatch AnalogyTrainer::sample_batch() {
  AnalogyBatch b;
  const auto n = static_cast<std::size_t>(cfg_.batch_size);
  b.s.reserve(n);
  b.s_next.reserve(n);
  b.g.reserve(n);
  b.a.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [ep, t] = data_.transition(rng_() % data_.transition_count());
    const auto& e = data_.episodes()[ep];
    b.s.push_back(e.states[t]);
    b.s_next.push_back(e.states[t + 1]);
    b.a.push_back(e.actions[t]);
    b.g.push_back(sample_value_goal(data_, ep, t, cfg_.goals, rng_).goal);
  }
  return b;
}

std::array<Var, 3> AnalogyTrainer::build_loss(Graph& g, const AnalogyBatch& b) const {
  const auto n = static_cast<Eigen::Index>(b.s.size());
  const Matrix S = tc::gather_rows(obs_, b.s);
  const Matrix Sn = tc::gather_rows(obs_, b.s_next);
  const Matrix G = tc::gather_rows(obs_, b.g);
  Matrix SAG(n, 2 * obs_.cols() + env_.action_count());
  SAG << S, one_hot_actions(b.a, env_.action_count()), G;

  // Targets: EMA networks, no gradient.
  const Matrix q_bar = model_.critic_target().eval(SAG);
  const Matrix v_bar_next =
      (model_.phi_target().eval(Sn).array() * model_.varphi_target().eval(G).array()).rowwise().sum().matrix();
  Matrix y(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double not_goal = b.s[i] != b.g[i] ? 1.0 : 0.0;
    const double mask = cfg_.absorbing_goal ? not_goal : 1.0;
    y(i, 0) = -not_goal + cfg_.gamma * mask * v_bar_next(i, 0);
  }

  const Var v = g.rowwise_dot(model_.phi().forward(g, g.constant(S)), model_.varphi().forward(g, g.constant(G)));
  const Var value_loss = g.mean(g.expectile(g.sub(g.constant(q_bar), v), cfg_.expectile));
  const Var q = model_.critic().forward(g, g.constant(SAG));
  const Var critic_loss = g.mean(g.square(g.sub(q, g.constant(y))));
  return {g.add(value_loss, critic_loss), value_loss, critic_loss};
}

AnalogyLosses AnalogyTrainer::step(const AnalogyBatch& batch) {
  Graph g;
  const auto [total, value_loss, critic_loss] = build_loss(g, batch);
  AnalogyLosses out{g.scalar(value_loss), g.scalar(critic_loss)};
  if (!std::isfinite(out.value) || !std::isfinite(out.critic)) {
    std::string dump;
    for (std::size_t i = 0; i < std::min<std::size_t>(batch.s.size(), 8); ++i) {
      dump += " (" + std::to_string(batch.s[i]) + "," + std::to_string(batch.a[i]) + "," +
              std::to_string(batch.s_next[i]) + "," + std::to_string(batch.g[i]) + ")";
    }
    throw NumericError("analogy loss is not finite at step " + std::to_string(adam_.step_count() + 1) +
                       "; first batch rows (s,a,s',g):" + dump);
  }
  g.backward(total);
  adam_.step();
  model_.update_targets(cfg_.tau);
  return out;
}

nlohmann::json DistanceFitReport::to_json() const {
  return {{"pairs", pairs}, {"mae", mae}, {"max_error", max_error}, {"clipped", clipped}};
}

DistanceFitReport distance_fit(const AnalogyTables& tables, const DistanceTable& oracle, double gamma) {
  DistanceFitReport r;
  const auto n = oracle.state_count();
  const Matrix v = tables.phi * tables.varphi.transpose();
  const double d_max = static_cast<double>(n);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < n; ++g) {
      if (!oracle.finite(static_cast<StateIndex>(s), static_cast<StateIndex>(g))) continue;
      bool clipped = false;
      const double d = implied_distance(v(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(g)), gamma, d_max,
                                        &clipped);
      const double err = std::abs(d - oracle.at(static_cast<StateIndex>(s), static_cast<StateIndex>(g)));
      total += err;
      r.max_error = std::max(r.max_error, err);
      r.clipped += clipped;
      ++r.pairs;
    }
  }
  r.mae = r.pairs ? total / static_cast<double>(r.pairs) : 0.0;
  return r;
}

nlohmann::json AnalogyStructureReport::to_json() const {
  return {{"groups", groups},
          {"within_pairs", within_pairs},
          {"across_pairs", across_pairs},
          {"within_cosine", within_cosine},
          {"across_cosine", across_cosine},
          {"gap", gap()}};
}

AnalogyStructureReport analogy_structure(const Environment& env, const AnalogyTables& tables, std::uint64_t seed,
                                         std::size_t max_pairs) {
  // Group key: mask bits followed by the masked values of s and of g.
  std::map<std::vector<int>, std::vector<std::pair<StateIndex, StateIndex>>> groups;
  const auto n = env.state_count();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < n; ++g) {
      if (s == g) continue;
      const auto si = static_cast<StateIndex>(s);
      const auto gi = static_cast<StateIndex>(g);
      const auto mask = env.endogenous_mask(si, gi);
      std::vector<int> key;
      for (int f = 0; f < env.factor_count(); ++f) key.push_back(mask[f] ? 1 : 0);
      for (int f = 0; f < env.factor_count(); ++f) {
        if (mask[f]) key.push_back(env.factor_value(si, f));
      }
      for (int f = 0; f < env.factor_count(); ++f) {
        if (mask[f]) key.push_back(env.factor_value(gi, f));
      }
      groups[key].emplace_back(si, gi);
    }
  }
  std::vector<const std::vector<std::pair<StateIndex, StateIndex>>*> multi;
  std::vector<std::pair<StateIndex, StateIndex>> all;
  for (const auto& [key, members] : groups) {
    if (members.size() > 1) multi.push_back(&members);
    all.insert(all.end(), members.begin(), members.end());
  }
  auto cosine = [&](std::pair<StateIndex, StateIndex> a, std::pair<StateIndex, StateIndex> b) {
    const tc::RowVector u = tables.analogy(a.first, a.second);
    const tc::RowVector v = tables.analogy(b.first, b.second);
    const double nu = u.norm(), nv = v.norm();
    if (nu == 0.0 || nv == 0.0) return 0.0;
    return u.dot(v) / (nu * nv);
  };

  AnalogyStructureReport r;
  r.groups = multi.size();
  if (multi.empty()) return r;
  std::mt19937_64 rng(seed);
  double within = 0.0, across = 0.0;
  for (std::size_t i = 0; i < max_pairs; ++i) {
    const auto& members = *multi[rng() % multi.size()];
    const auto a = rng() % members.size();
    auto b = rng() % (members.size() - 1);
    if (b >= a) ++b;
    within += cosine(members[a], members[b]);
    ++r.within_pairs;
  }
  // Across: uniformly random pairs of pairs from different groups.
  std::map<std::pair<StateIndex, StateIndex>, const void*> owner;
  for (const auto& [key, members] : groups) {
    for (const auto& m : members) owner[m] = &members;
  }
  while (r.across_pairs < max_pairs) {
    const auto& a = all[rng() % all.size()];
    const auto& b = all[rng() % all.size()];
    if (owner[a] == owner[b]) continue;
    across += cosine(a, b);
    ++r.across_pairs;
  }
  r.within_cosine = within / static_cast<double>(r.within_pairs);
  r.across_cosine = across / static_cast<double>(r.across_pairs);
  return r;
}

}  // namespace analogon
