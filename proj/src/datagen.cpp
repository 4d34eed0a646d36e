#include "analogon/datagen.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "analogon/binio.hpp"
#include "analogon/errors.hpp"
#include "analogon/oracle.hpp"

namespace analogon {

namespace {

constexpr char kDatasetMagic[9] = "ANLGDATA";
constexpr std::uint32_t kDatasetVersion = 1;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

int factor_index(const Environment& env, const nlohmann::json& j, const std::string& field) {
  if (j.is_number_integer()) {
    const int f = j.get<int>();
    if (f < 0 || f >= env.factor_count()) throw UsageError(field + ": unknown factor " + std::to_string(f));
    return f;
  }
  const auto name = j.get<std::string>();
  for (int f = 0; f < env.factor_count(); ++f) {
    if (env.spec().factors[f].name == name) return f;
  }
  throw UsageError(field + ": unknown factor '" + name + "'");
}

}  // namespace

bool ContextPredicate::holds(const Environment& env, StateIndex s) const {
  for (const auto& [f, v] : equals) {
    if (env.factor_value(s, f) != v) return false;
  }
  return true;
}

void HoldoutRule::validate(const Environment& env) const {
  auto check_factor = [&](int f, int v, const std::string& field) {
    if (f < 0 || f >= env.factor_count()) throw UsageError("holdout " + field + ": unknown factor " + std::to_string(f));
    if (v < 0 || v >= env.spec().factors[f].domain_size) {
      throw UsageError("holdout " + field + ": value " + std::to_string(v) + " out of range");
    }
  };
  for (const auto& [f, v] : context.equals) check_factor(f, v, "context");
  check_factor(event_factor, event_from, "event.from");
  check_factor(event_factor, event_to, "event.to");
  if (event_from == event_to) throw UsageError("holdout event: from and to are equal");
  if (window < 1) throw UsageError("holdout window must be >= 1");
}

nlohmann::json HoldoutRule::to_json(const Environment& env) const {
  nlohmann::json ctx = nlohmann::json::object();
  for (const auto& [f, v] : context.equals) ctx[env.spec().factors[f].name] = v;
  return {{"name", name},
          {"context", ctx},
          {"event", {{"factor", env.spec().factors[event_factor].name}, {"from", event_from}, {"to", event_to}}},
          {"window", window}};
}

HoldoutRule HoldoutRule::from_json(const nlohmann::json& j, const Environment& env) {
  HoldoutRule r;
  r.name = j.value("name", std::string("holdout"));
  if (j.contains("context")) {
    for (const auto& [key, value] : j.at("context").items()) {
      r.context.equals.emplace_back(factor_index(env, nlohmann::json(key), "holdout.context"), value.get<int>());
    }
    std::sort(r.context.equals.begin(), r.context.equals.end());
  }
  const auto& ev = j.at("event");
  r.event_factor = factor_index(env, ev.at("factor"), "holdout.event.factor");
  r.event_from = ev.at("from").get<int>();
  r.event_to = ev.at("to").get<int>();
  r.window = j.value("window", 15);
  r.validate(env);
  return r;
}

HoldoutRule gridscene_drawer_holdout(const Environment& env, int window) {
  nlohmann::json j = {{"name", "drawer-open|window-closed,unlocked"},
                      {"context", {{"window", 0}, {"drawer_lock", kUnlocked}}},
                      {"event", {{"factor", "drawer"}, {"from", 0}, {"to", 1}}},
                      {"window", window}};
  return HoldoutRule::from_json(j, env);
}

TransitionDataset::TransitionDataset(std::string env_id, nlohmann::json env_spec, std::uint64_t seed)
    : env_id_(std::move(env_id)), env_spec_(std::move(env_spec)), seed_(seed) {}

void TransitionDataset::add_episode(Episode e) {
  if (e.states.size() < 2) throw UsageError("episode needs at least two observations");
  if (e.actions.size() + 1 != e.states.size()) throw UsageError("episode needs one action per transition");
  const auto ei = static_cast<std::uint32_t>(episodes_.size());
  for (std::uint32_t t = 0; t + 1 < e.states.size(); ++t) transitions_.emplace_back(ei, t);
  for (std::uint32_t t = 0; t < e.states.size(); ++t) state_refs_.emplace_back(ei, t);
  episodes_.push_back(std::move(e));
}

StateIndex TransitionDataset::state_at(std::size_t i) const {
  const auto [e, t] = state_refs_[i];
  return episodes_[e].states[t];
}

std::size_t TransitionDataset::distinct_states() const {
  std::set<StateIndex> seen;
  for (const auto& e : episodes_) seen.insert(e.states.begin(), e.states.end());
  return seen.size();
}

nlohmann::json TransitionDataset::describe() const {
  return {{"format", "ANLGDATA"},
          {"version", kDatasetVersion},
          {"env_id", env_id_},
          {"env_spec", env_spec_},
          {"seed", seed_},
          {"meta", meta_},
          {"provenance", provenance_},
          {"episodes", episodes_.size()},
          {"transitions", transitions_.size()},
          {"distinct_states", distinct_states()}};
}

void TransitionDataset::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  binio::put_magic(os, kDatasetMagic);
  binio::put<std::uint32_t>(os, kDatasetVersion);
  binio::put_string(os, env_id_);
  binio::put_string(os, env_spec_.dump());
  binio::put<std::uint64_t>(os, seed_);
  binio::put_string(os, meta_.dump());
  binio::put_string(os, nlohmann::json(provenance_).dump());
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(episodes_.size()));
  for (const auto& e : episodes_) {
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.states.size()));
    for (auto s : e.states) binio::put<std::uint32_t>(os, s);
    for (auto a : e.actions) binio::put<std::uint8_t>(os, a);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

TransitionDataset TransitionDataset::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  binio::expect_magic(is, kDatasetMagic, "dataset");
  const auto version = binio::get<std::uint32_t>(is);
  if (version != kDatasetVersion) throw IoError("unsupported dataset version " + std::to_string(version));
  TransitionDataset ds;
  ds.env_id_ = binio::get_string(is);
  ds.env_spec_ = nlohmann::json::parse(binio::get_string(is));
  ds.seed_ = binio::get<std::uint64_t>(is);
  ds.meta_ = nlohmann::json::parse(binio::get_string(is));
  for (auto& p : nlohmann::json::parse(binio::get_string(is))) ds.provenance_.push_back(p);
  const auto count = binio::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    Episode e;
    const auto len = binio::get<std::uint32_t>(is);
    e.states.resize(len);
    for (auto& s : e.states) s = binio::get<std::uint32_t>(is);
    e.actions.resize(len ? len - 1 : 0);
    for (auto& a : e.actions) a = binio::get<std::uint8_t>(is);
    ds.add_episode(std::move(e));
  }
  return ds;
}

TransitionDataset generate_play(const Environment& env, const PlayConfig& cfg) {
  if (cfg.epsilon < 0.0 || cfg.epsilon > 1.0) throw UsageError("epsilon must be in [0, 1]");
  if (cfg.episodes < 1) throw UsageError("episodes must be >= 1");
  const int steps = cfg.max_steps > 0 ? cfg.max_steps : env.spec().max_episode_steps;
  if (steps < 1) throw UsageError("max_steps must be >= 1");

  // Distance to every (factor, value) target, computed once.
  std::vector<std::pair<int, int>> targets;
  std::vector<std::vector<int>> to_target;
  for (int f = 0; f < env.factor_count(); ++f) {
    for (int v = 0; v < env.spec().factors[f].domain_size; ++v) {
      targets.emplace_back(f, v);
      to_target.push_back(distances_to_factor_value(env, f, v));
    }
  }

  TransitionDataset ds(env.id(), to_json(env.spec()), cfg.seed);
  const int n_actions = env.action_count();
  std::vector<int> best;
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(ep))));
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    Episode e;
    auto s = static_cast<StateIndex>(rng() % env.state_count());
    e.states.push_back(s);
    int target = -1;
    for (int t = 0; t < steps; ++t) {
      if (target < 0 || to_target[target][s] == 0) {
        // New target among those not yet satisfied and reachable.
        std::vector<int> open;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const int d = to_target[i][s];
          if (d > 0 && d < DistanceTable::kInfinity) open.push_back(static_cast<int>(i));
        }
        target = open.empty() ? -1 : open[rng() % open.size()];
      }
      int action;
      if (target < 0 || coin(rng) < cfg.epsilon) {
        action = static_cast<int>(rng() % static_cast<std::uint64_t>(n_actions));
      } else {
        best.clear();
        const int here = to_target[target][s];
        for (int a = 0; a < n_actions; ++a) {
          if (to_target[target][env.next(s, a)] == here - 1) best.push_back(a);
        }
        action = best[rng() % best.size()];
      }
      s = env.next(s, action);
      e.actions.push_back(static_cast<std::uint8_t>(action));
      e.states.push_back(s);
    }
    ds.add_episode(std::move(e));
  }
  ds.add_provenance({{"op", "generate_play"},
                     {"episodes", cfg.episodes},
                     {"epsilon", cfg.epsilon},
                     {"max_steps", steps},
                     {"seed", cfg.seed}});
  return ds;
}

void GoalSamplerConfig::validate() const {
  for (double p : {p_cur, p_traj, p_rand}) {
    if (p < 0.0 || p > 1.0) throw UsageError("goal sampler probabilities must lie in [0, 1]");
  }
  if (std::abs(p_cur + p_traj + p_rand - 1.0) > 1e-9) throw UsageError("goal sampler probabilities must sum to 1");
  if (geometric && (gamma <= 0.0 || gamma >= 1.0)) throw UsageError("geometric goal sampling needs gamma in (0, 1)");
}

SampledGoal sample_value_goal(const TransitionDataset& ds, std::uint32_t episode, std::uint32_t t,
                              const GoalSamplerConfig& cfg, std::mt19937_64& rng) {
  const auto& e = ds.episodes()[episode];
  const std::size_t T = e.last();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  if (r < cfg.p_cur) return {e.states[t], GoalBranch::Current};
  if (r < cfg.p_cur + cfg.p_traj) {
    if (t >= T) return {e.states[T], GoalBranch::Trajectory};
    std::size_t offset;
    if (cfg.geometric) {
      std::geometric_distribution<long long> geo(1.0 - cfg.gamma);
      offset = 1 + static_cast<std::size_t>(geo(rng));
    } else {
      offset = 1 + rng() % (T - t);
    }
    return {e.states[std::min<std::size_t>(t + offset, T)], GoalBranch::Trajectory};
  }
  return {ds.state_at(rng() % ds.state_count()), GoalBranch::Random};
}

std::size_t subgoal_index(std::size_t t, std::size_t k, std::size_t T) {
  if (t > T) throw UsageError("subgoal_index: t beyond episode end");
  return std::min(t + k, T);
}

namespace {

// Transition indices (into the episode) removed by `rule`, as a sorted set.
std::vector<bool> removal_mask(const Episode& e, const Environment& env, const HoldoutRule& rule,
                               std::size_t* events) {
  const std::size_t T = e.last();
  std::vector<bool> drop(T, false);
  for (std::size_t step = 1; step <= T; ++step) {
    if (env.factor_value(e.states[step - 1], rule.event_factor) != rule.event_from) continue;
    if (env.factor_value(e.states[step], rule.event_factor) != rule.event_to) continue;
    const std::size_t start = step >= static_cast<std::size_t>(rule.window) ? step - rule.window : 0;
    // The context may hold anywhere in the window, including just before the
    // event; checking only the window start leaves direct occurrences behind.
    bool in_context = false;
    for (std::size_t i = start; i < step && !in_context; ++i) in_context = rule.context.holds(env, e.states[i]);
    if (!in_context) continue;
    if (events) ++*events;
    for (std::size_t i = start; i < step; ++i) drop[i] = true;
  }
  return drop;
}

}  // namespace

HoldoutResult apply_holdout(const TransitionDataset& ds, const Environment& env, const HoldoutRule& rule) {
  rule.validate(env);
  HoldoutResult result;
  std::vector<Episode> current = ds.episodes();
  std::size_t passes = 0;
  for (;;) {
    ++passes;
    std::vector<Episode> next;
    std::size_t removed_now = 0;
    for (const auto& e : current) {
      const auto drop = removal_mask(e, env, rule, &result.events);
      Episode piece;
      auto flush = [&]() {
        if (piece.states.size() >= 2) next.push_back(std::move(piece));
        piece = Episode{};
      };
      piece.states.push_back(e.states[0]);
      for (std::size_t i = 0; i < drop.size(); ++i) {
        if (drop[i]) {
          ++removed_now;
          flush();
          piece.states.push_back(e.states[i + 1]);
        } else {
          piece.actions.push_back(e.actions[i]);
          piece.states.push_back(e.states[i + 1]);
        }
      }
      flush();
    }
    current = std::move(next);
    result.removed += removed_now;
    if (removed_now == 0) break;
  }

  TransitionDataset out(ds.env_id(), ds.env_spec(), ds.seed());
  out.meta() = ds.meta();
  for (const auto& p : ds.provenance()) out.add_provenance(p);
  for (auto& e : current) out.add_episode(std::move(e));
  out.add_provenance({{"op", "apply_holdout"},
                      {"rule", rule.to_json(env)},
                      {"removed_transitions", result.removed},
                      {"events", result.events},
                      {"passes", passes},
                      {"overlap", "merged"},
                      {"event_step_removed", true}});
  result.dataset = std::move(out);
  return result;
}

std::size_t holdout_violations(const TransitionDataset& ds, const Environment& env, const HoldoutRule& rule) {
  std::size_t events = 0;
  for (const auto& e : ds.episodes()) removal_mask(e, env, rule, &events);
  return events;
}

}  // namespace analogon
