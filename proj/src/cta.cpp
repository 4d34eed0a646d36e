#include "analogon/cta.hpp"

#include <cmath>
#include <fstream>

#include "analogon/errors.hpp"

namespace analogon {

using tc::Graph;
using tc::Mlp;
using tc::Var;

namespace {

struct VariantName {
  CtaVariant v;
  const char* name;
};
constexpr VariantName kVariantNames[] = {{CtaVariant::Cta, "cta"},
                                         {CtaVariant::HiqlDual, "hiql-dual"},
                                         {CtaVariant::HiqlDualAnalogy, "hiql-dual-analogy"},
                                         {CtaVariant::FlatAnalogy, "flat-analogy"}};

void check_widths(const std::vector<int>& widths, const char* field) {
  for (int w : widths) {
    if (w < 1) throw SpecError(field, "widths must be >= 1");
  }
}

nlohmann::json goals_json(const GoalSamplerConfig& g) {
  return {{"p_cur", g.p_cur}, {"p_traj", g.p_traj}, {"p_rand", g.p_rand}, {"geometric", g.geometric}};
}

void goals_from_json(const nlohmann::json& j, GoalSamplerConfig& g) {
  g.p_cur = j.value("p_cur", g.p_cur);
  g.p_traj = j.value("p_traj", g.p_traj);
  g.p_rand = j.value("p_rand", g.p_rand);
  g.geometric = j.value("geometric", g.geometric);
}

}  // namespace

std::string to_string(CtaVariant v) {
  for (const auto& [variant, name] : kVariantNames) {
    if (variant == v) return name;
  }
  return "?";
}

CtaVariant cta_variant_from_string(const std::string& s) {
  for (const auto& [variant, name] : kVariantNames) {
    if (s == name) return variant;
  }
  throw UsageError("unknown agent variant '" + s + "' (expected cta, hiql-dual, hiql-dual-analogy or flat-analogy)");
}

std::vector<std::string> cta_variant_names() {
  std::vector<std::string> out;
  for (const auto& [variant, name] : kVariantNames) out.emplace_back(name);
  return out;
}

void CtaConfig::validate() const {
  if (e < 1) throw SpecError("cta.e", "must be >= 1");
  if (b < 1) throw SpecError("cta.b", "must be >= 1");
  if (p < 1) throw SpecError("cta.p", "must be >= 1");
  check_widths(eta_hidden, "cta.eta_hidden");
  check_widths(anchor_hidden, "cta.anchor_hidden");
  check_widths(displacement_hidden, "cta.displacement_hidden");
  check_widths(backbone_hidden, "cta.backbone_hidden");
  check_widths(monolithic_hidden, "cta.monolithic_hidden");
  if (!(gamma > 0.0 && gamma < 1.0)) throw SpecError("cta.gamma", "must lie in (0, 1)");
  if (!(kappa > 0.0 && kappa < 1.0)) throw SpecError("cta.kappa", "must lie in (0, 1)");
  if (!(beta_h >= 0.0)) throw SpecError("cta.beta_h", "must be >= 0");
  if (!(beta_l >= 0.0)) throw SpecError("cta.beta_l", "must be >= 0");
  if (!(sigma_h > 0.0)) throw SpecError("cta.sigma_h", "must be positive");
  if (!(sigma_l > 0.0)) throw SpecError("cta.sigma_l", "must be positive");
  if (!(w_max > 0.0)) throw SpecError("cta.w_max", "must be positive");
  if (!(learning_rate > 0.0)) throw SpecError("cta.learning_rate", "must be positive");
  if (!(tau > 0.0 && tau <= 1.0)) throw SpecError("cta.tau", "must lie in (0, 1]");
  if (k < 1) throw SpecError("cta.k", "must be >= 1");
  if (batch_size < 1) throw SpecError("cta.batch_size", "must be >= 1");
  if (steps < 0) throw SpecError("cta.steps", "must be >= 0");
  value_goals.validate();
  actor_goals.validate();
}

nlohmann::json CtaConfig::to_json() const {
  return {{"variant", to_string(variant)},
          {"e", e},
          {"b", b},
          {"p", p},
          {"eta_hidden", eta_hidden},
          {"anchor_hidden", anchor_hidden},
          {"displacement_hidden", displacement_hidden},
          {"backbone_hidden", backbone_hidden},
          {"monolithic_hidden", monolithic_hidden},
          {"gamma", gamma},
          {"kappa", kappa},
          {"beta_h", beta_h},
          {"beta_l", beta_l},
          {"sigma_h", sigma_h},
          {"sigma_l", sigma_l},
          {"w_max", w_max},
          {"learning_rate", learning_rate},
          {"tau", tau},
          {"k", k},
          {"batch_size", batch_size},
          {"steps", steps},
          {"absorbing_goal", absorbing_goal},
          {"value_goals", goals_json(value_goals)},
          {"actor_goals", goals_json(actor_goals)},
          {"seed", seed}};
}

CtaConfig CtaConfig::from_json(const nlohmann::json& j) {
  CtaConfig c;
  if (j.contains("variant")) c.variant = cta_variant_from_string(j.at("variant").get<std::string>());
  c.e = j.value("e", c.e);
  c.b = j.value("b", c.b);
  c.p = j.value("p", c.p);
  c.eta_hidden = j.value("eta_hidden", c.eta_hidden);
  c.anchor_hidden = j.value("anchor_hidden", c.anchor_hidden);
  c.displacement_hidden = j.value("displacement_hidden", c.displacement_hidden);
  c.backbone_hidden = j.value("backbone_hidden", c.backbone_hidden);
  c.monolithic_hidden = j.value("monolithic_hidden", c.monolithic_hidden);
  c.gamma = j.value("gamma", c.gamma);
  c.kappa = j.value("kappa", c.kappa);
  c.beta_h = j.value("beta_h", c.beta_h);
  c.beta_l = j.value("beta_l", c.beta_l);
  c.sigma_h = j.value("sigma_h", c.sigma_h);
  c.sigma_l = j.value("sigma_l", c.sigma_l);
  c.w_max = j.value("w_max", c.w_max);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.tau = j.value("tau", c.tau);
  c.k = j.value("k", c.k);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.absorbing_goal = j.value("absorbing_goal", c.absorbing_goal);
  c.seed = j.value("seed", c.seed);
  c.value_goals.gamma = c.gamma;
  c.actor_goals.gamma = c.gamma;
  if (j.contains("value_goals")) goals_from_json(j.at("value_goals"), c.value_goals);
  if (j.contains("actor_goals")) goals_from_json(j.at("actor_goals"), c.actor_goals);
  c.validate();
  return c;
}

ConditionalHead ConditionalHead::bilinear(const std::string& name, int obs_width, int cond_width, int b, int p,
                                          const std::vector<int>& anchor_hidden,
                                          const std::vector<int>& displacement_hidden,
                                          const std::vector<int>& backbone_hidden, int out, std::uint64_t seed) {
  ConditionalHead h;
  h.bilinear_ = true;
  h.b_ = b;
  h.p_ = p;
  h.anchor_ = Mlp(name + ".anchor", {obs_width, anchor_hidden, b * p, true}, seed * 5 + 1);
  h.displacement_ = Mlp(name + ".displacement", {cond_width, displacement_hidden, b * p, true}, seed * 5 + 2);
  h.backbone_ = Mlp(name + ".backbone", {p, backbone_hidden, out, true}, seed * 5 + 3);
  return h;
}

ConditionalHead ConditionalHead::monolithic(const std::string& name, int obs_width, int cond_width,
                                            const std::vector<int>& hidden, int out, std::uint64_t seed) {
  ConditionalHead h;
  h.bilinear_ = false;
  h.mono_ = Mlp(name + ".mlp", {obs_width + cond_width, hidden, out, true}, seed * 5 + 4);
  return h;
}

Var ConditionalHead::forward(Graph& g, Var obs, Var cond) {
  if (bilinear_) {
    const Var f = g.bilinear_columns(anchor_.forward(g, obs), displacement_.forward(g, cond), b_, p_);
    return backbone_.forward(g, f);
  }
  return mono_.forward(g, g.concat_cols({obs, cond}));
}

Matrix ConditionalHead::features(const Matrix& obs, const Matrix& cond) const {
  if (!bilinear_) throw UsageError("features: monolithic heads have no bilinear feature");
  return tc::kernel::bilinear_columns(anchor_.eval(obs), displacement_.eval(cond), b_, p_);
}

Matrix ConditionalHead::eval(const Matrix& obs, const Matrix& cond) const {
  if (bilinear_) return backbone_.eval(features(obs, cond));
  Matrix x(obs.rows(), obs.cols() + cond.cols());
  x << obs, cond;
  return mono_.eval(x);
}

std::vector<Mlp*> ConditionalHead::modules() {
  if (bilinear_) return {&anchor_, &displacement_, &backbone_};
  return {&mono_};
}

std::vector<const Mlp*> ConditionalHead::modules() const {
  if (bilinear_) return {&anchor_, &displacement_, &backbone_};
  return {&mono_};
}

std::size_t ConditionalHead::parameter_count() const {
  std::size_t n = 0;
  for (const auto* m : modules()) n += m->parameter_count();
  return n;
}

CtaAgent::CtaAgent(int obs_width, int action_count, int analogy_dim, const CtaConfig& cfg)
    : cfg_(cfg), obs_width_(obs_width), action_count_(action_count), d_(analogy_dim) {
  cfg_.validate();
  const std::uint64_t base = cfg.seed * 131 + 17;
  eta_ = Mlp("eta", {analogy_dim, cfg.eta_hidden, cfg.e, true}, base);
  auto make = [&](const std::string& name, int out, std::uint64_t seed) {
    if (cfg.bilinear()) {
      return ConditionalHead::bilinear(name, obs_width, cfg.e, cfg.b, cfg.p, cfg.anchor_hidden,
                                       cfg.displacement_hidden, cfg.backbone_hidden, out, seed);
    }
    return ConditionalHead::monolithic(name, obs_width, cfg.e, cfg.monolithic_hidden, out, seed);
  };
  value_ = make("value", 1, base + 1);
  if (cfg.hierarchical()) high_ = make("high", cfg.e, base + 2);
  low_ = make("low", action_count, base + 3);
  eta_bar_ = eta_;
  value_bar_ = value_;
}

Matrix CtaAgent::conditioning(const AnalogyTables& tables, const std::vector<StateIndex>& s,
                              const std::vector<StateIndex>& g) const {
  if (s.size() != g.size()) throw UsageError("conditioning: size mismatch");
  if (tables.varphi.cols() != d_) throw UsageError("conditioning: analogy width does not match the agent");
  Matrix out(static_cast<Eigen::Index>(s.size()), d_);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (cfg_.variant == CtaVariant::HiqlDual) {
      out.row(r) = tables.varphi.row(g[i]);
    } else {
      out.row(r) = tables.varphi.row(g[i]) - tables.varphi.row(s[i]);
    }
  }
  return out;
}

Matrix CtaAgent::value(const Matrix& obs, const AnalogyTables& tables, const std::vector<StateIndex>& s,
                       const std::vector<StateIndex>& g) const {
  return value_.eval(tc::gather_rows(obs, s), eta_.eval(conditioning(tables, s, g)));
}

Matrix CtaAgent::target_value(const Matrix& obs, const AnalogyTables& tables, const std::vector<StateIndex>& s,
                              const std::vector<StateIndex>& g) const {
  return value_bar_.eval(tc::gather_rows(obs, s), eta_bar_.eval(conditioning(tables, s, g)));
}

std::vector<int> CtaAgent::act(const Matrix& obs_table, const AnalogyTables& tables, const std::vector<StateIndex>& s,
                               const std::vector<StateIndex>& g, double sigma_h, std::mt19937_64& rng) const {
  const Matrix S = tc::gather_rows(obs_table, s);
  const Matrix cond = eta_.eval(conditioning(tables, s, g));
  Matrix low_cond;
  if (cfg_.hierarchical()) {
    low_cond = high_.eval(S, cond);
    if (sigma_h > 0.0) {
      std::normal_distribution<double> noise(0.0, sigma_h);
      for (Eigen::Index i = 0; i < low_cond.size(); ++i) low_cond.data()[i] += noise(rng);
    }
  } else {
    low_cond = cond;
  }
  const Matrix m = low_.eval(S, low_cond);
  std::vector<int> actions(s.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = c;
    }
    actions[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return actions;
}

void CtaAgent::update_target(double tau) {
  tc::ema_update(eta_bar_.params(), eta_.params(), tau);
  auto src = value_.modules();
  auto dst = value_bar_.modules();
  for (std::size_t i = 0; i < src.size(); ++i) tc::ema_update(dst[i]->params(), src[i]->params(), tau);
}

std::vector<tc::ParameterStore*> CtaAgent::trainable_stores() {
  std::vector<tc::ParameterStore*> out{&eta_.params()};
  for (auto* head : {&value_, &high_, &low_}) {
    if (head == &high_ && !cfg_.hierarchical()) continue;
    for (auto* m : head->modules()) out.push_back(&m->params());
  }
  return out;
}

std::size_t CtaAgent::parameter_count() const {
  std::size_t n = eta_.parameter_count() + value_.parameter_count() + low_.parameter_count();
  if (cfg_.hierarchical()) n += high_.parameter_count();
  return n;
}

tc::NamedStores CtaAgent::stores() const {
  tc::NamedStores out{{"eta", &eta_.params()}, {"eta_bar", &eta_bar_.params()}};
  auto add = [&](const char* prefix, const ConditionalHead& h) {
    for (const auto* m : h.modules()) out.emplace_back(std::string(prefix) + "/" + m->name(), &m->params());
  };
  add("value", value_);
  add("value_bar", value_bar_);
  if (cfg_.hierarchical()) add("high", high_);
  add("low", low_);
  return out;
}

tc::MutableNamedStores CtaAgent::mutable_stores() {
  tc::MutableNamedStores out{{"eta", &eta_.params()}, {"eta_bar", &eta_bar_.params()}};
  auto add = [&](const char* prefix, ConditionalHead& h) {
    for (auto* m : h.modules()) out.emplace_back(std::string(prefix) + "/" + m->name(), &m->params());
  };
  add("value", value_);
  add("value_bar", value_bar_);
  if (cfg_.hierarchical()) add("high", high_);
  add("low", low_);
  return out;
}

void CtaAgent::save(const std::filesystem::path& path, const nlohmann::json& sidecar) const {
  tc::save_checkpoint(path, stores());
  std::ofstream js(path.string() + ".json");
  if (!js) throw IoError("cannot write " + path.string() + ".json");
  js << sidecar.dump(2) << "\n";
}

nlohmann::json CtaAgent::load(const std::filesystem::path& path) {
  tc::load_checkpoint(path, mutable_stores());
  std::ifstream js(path.string() + ".json");
  if (!js) return nlohmann::json::object();
  return nlohmann::json::parse(js);
}

CtaTrainer::CtaTrainer(const Environment& env, const TransitionDataset& data, const AnalogyTables& tables,
                       CtaAgent& agent, const CtaConfig& cfg)
    : env_(env),
      data_(data),
      tables_(tables),
      agent_(agent),
      cfg_(cfg),
      obs_(observation_matrix(env)),
      adam_(agent.trainable_stores(), tc::AdamConfig{cfg.learning_rate}),
      rng_(cfg.seed ^ 0xc7a5eedULL) {
  cfg_.validate();
  if (data.env_id() != env.id()) throw UsageError("dataset env '" + data.env_id() + "' does not match '" + env.id() + "'");
  if (data.transition_count() == 0) throw UsageError("dataset has no transitions");
  if (tables.varphi.rows() != static_cast<Eigen::Index>(env.state_count())) {
    throw UsageError("analogy tables do not cover the environment's states");
  }
  cfg_.value_goals.gamma = cfg_.gamma;
  cfg_.actor_goals.gamma = cfg_.gamma;
}

CtaBatch CtaTrainer::sample_batch() {
  CtaBatch b;
  const auto n = static_cast<std::size_t>(cfg_.batch_size);
  for (auto* v : {&b.s, &b.s_next, &b.s_k, &b.g_value, &b.g_actor}) v->reserve(n);
  b.a.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [ep, t] = data_.transition(rng_() % data_.transition_count());
    const auto& e = data_.episodes()[ep];
    b.s.push_back(e.states[t]);
    b.s_next.push_back(e.states[t + 1]);
    b.s_k.push_back(e.states[subgoal_index(t, static_cast<std::size_t>(cfg_.k), e.last())]);
    b.a.push_back(e.actions[t]);
    b.g_value.push_back(sample_value_goal(data_, ep, t, cfg_.value_goals, rng_).goal);
    b.g_actor.push_back(sample_value_goal(data_, ep, t, cfg_.actor_goals, rng_).goal);
  }
  return b;
}

Matrix CtaTrainer::awr_weights(const std::vector<StateIndex>& from, const std::vector<StateIndex>& to,
                               const std::vector<StateIndex>& goal, double beta) const {
  const Matrix adv = agent_.value(obs_, tables_, to, goal) - agent_.value(obs_, tables_, from, goal);
  return adv.unaryExpr([&](double a) { return std::min(std::exp(beta * a), cfg_.w_max); });
}

CtaLossVars CtaTrainer::build_loss(Graph& g, const CtaBatch& b, const CtaLossOptions& opt) const {
  const auto n = static_cast<Eigen::Index>(b.s.size());
  const Matrix S = tc::gather_rows(obs_, b.s);
  const Var obs_s = g.constant(S);

  // Value: expectile regression on the EMA bootstrap target.
  const Var cond_v = agent_.eta().forward(g, g.constant(agent_.conditioning(tables_, b.s, b.g_value)));
  const Var v = agent_.value_head().forward(g, obs_s, cond_v);
  const Matrix v_bar_next = agent_.target_value(obs_, tables_, b.s_next, b.g_value);
  Matrix y(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double not_goal = b.s[i] != b.g_value[i] ? 1.0 : 0.0;
    const double mask = cfg_.absorbing_goal ? not_goal : 1.0;
    y(i, 0) = -not_goal + cfg_.gamma * mask * v_bar_next(i, 0);
  }
  const Var value_loss = g.mean(g.expectile(g.sub(g.constant(y), v), cfg_.kappa));

  // Actor conditioning never sends gradient into eta.
  auto compress_sg = [&](const std::vector<StateIndex>& s, const std::vector<StateIndex>& goal) {
    const Matrix raw = agent_.conditioning(tables_, s, goal);
    if (opt.frozen_eta) return g.constant(opt.frozen_eta->eval(raw));
    return g.stop_gradient(agent_.eta().forward(g, g.constant(raw)));
  };
  auto awr = [&](Var log_prob, const Matrix& w) { return g.scale(g.mean(g.mul(log_prob, g.constant(w))), -1.0); };

  CtaLossVars out;
  auto& agent = agent_;
  std::vector<int> actions(b.a.begin(), b.a.end());
  const Matrix a_target = one_hot_actions(actions, env_.action_count());
  if (cfg_.hierarchical()) {
    out.weights_h = opt.weights_h ? *opt.weights_h : awr_weights(b.s, b.s_k, b.g_actor, cfg_.beta_h);
    out.weights_l = opt.weights_l ? *opt.weights_l : awr_weights(b.s, b.s_next, b.s_k, cfg_.beta_l);
    const Var mu_h = agent.high_head().forward(g, obs_s, compress_sg(b.s, b.g_actor));
    out.high = awr(g.gaussian_log_prob(compress_sg(b.s, b.s_k), mu_h, cfg_.sigma_h), out.weights_h);
    const Var mu_l = agent.low_head().forward(g, obs_s, compress_sg(b.s, b.s_k));
    out.low = awr(g.gaussian_log_prob(g.constant(a_target), mu_l, cfg_.sigma_l), out.weights_l);
  } else {
    out.weights_h = Matrix::Zero(n, 1);
    out.weights_l = opt.weights_l ? *opt.weights_l : awr_weights(b.s, b.s_next, b.g_actor, cfg_.beta_l);
    out.high = g.constant(Matrix::Zero(1, 1));
    const Var mu_l = agent.low_head().forward(g, obs_s, compress_sg(b.s, b.g_actor));
    out.low = awr(g.gaussian_log_prob(g.constant(a_target), mu_l, cfg_.sigma_l), out.weights_l);
  }
  out.value = value_loss;
  out.total = g.add(g.add(value_loss, out.high), out.low);
  return out;
}

CtaLosses CtaTrainer::step(const CtaBatch& batch) {
  Graph g;
  const auto vars = build_loss(g, batch);
  CtaLosses out{g.scalar(vars.value), g.scalar(vars.high), g.scalar(vars.low), vars.weights_h.mean(),
                vars.weights_l.mean()};
  if (!std::isfinite(out.value) || !std::isfinite(out.high) || !std::isfinite(out.low)) {
    throw NumericError("agent loss is not finite at step " + std::to_string(adam_.step_count() + 1) +
                       " (value " + std::to_string(out.value) + ", high " + std::to_string(out.high) + ", low " +
                       std::to_string(out.low) + ")");
  }
  g.backward(vars.total);
  adam_.step();
  agent_.update_target(cfg_.tau);
  return out;
}

}  // namespace analogon
