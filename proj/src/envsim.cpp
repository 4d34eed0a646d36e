#include "analogon/envsim.hpp"

#include <algorithm>
#include <sstream>

#include "analogon/errors.hpp"

namespace analogon {

namespace {

std::string factor_field(std::size_t i, const char* key) {
  return "factors[" + std::to_string(i) + "]." + key;
}

const char* kind_name(FactorKind k) {
  switch (k) {
    case FactorKind::AgentPosition: return "agent_position";
    case FactorKind::Object: return "object";
    case FactorKind::Lock: return "lock";
  }
  return "object";
}

FactorKind kind_from_name(const std::string& s) {
  if (s == "agent_position") return FactorKind::AgentPosition;
  if (s == "object") return FactorKind::Object;
  if (s == "lock") return FactorKind::Lock;
  throw SpecError("factors[].kind", "unknown kind '" + s + "'");
}

}  // namespace

void validate_spec(const EnvSpec& spec) {
  if (spec.env_id.empty()) throw SpecError("env_id", "must not be empty");
  if (spec.factors.empty()) throw SpecError("factors", "at least one factor is required");
  if (spec.max_episode_steps < 1) throw SpecError("max_episode_steps", "must be >= 1");

  const auto n = spec.factors.size();
  std::size_t total = 1;
  int agents = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = spec.factors[i];
    if (f.name.empty()) throw SpecError(factor_field(i, "name"), "must not be empty");
    if (f.domain_size < 2) throw SpecError(factor_field(i, "domain_size"), "must be >= 2");
    total *= static_cast<std::size_t>(f.domain_size);
    if (total > kMaxStates) {
      throw SpecError("factors", "state count exceeds " + std::to_string(kMaxStates));
    }
    if (f.kind == FactorKind::AgentPosition) ++agents;
    if (f.guard) {
      const int gi = *f.guard;
      if (gi < 0 || static_cast<std::size_t>(gi) >= n || static_cast<std::size_t>(gi) == i) {
        throw SpecError(factor_field(i, "guard"), "must reference another factor");
      }
      if (spec.factors[gi].kind != FactorKind::Lock) {
        throw SpecError(factor_field(i, "guard"), "must reference a lock factor");
      }
    }
  }
  // Guard chains must terminate.
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t hops = 0;
    auto cur = spec.factors[i].guard;
    while (cur) {
      if (++hops > n) throw SpecError(factor_field(i, "guard"), "guard cycle");
      cur = spec.factors[*cur].guard;
    }
  }

  if (spec.family == EnvFamily::GridScene) {
    if (spec.width < 1 || spec.height < 1) throw SpecError("grid", "width and height must be >= 1");
    if (agents != 1) throw SpecError("factors", "GridScene needs exactly one agent_position factor");
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = spec.factors[i];
      if (f.kind == FactorKind::AgentPosition) {
        if (f.domain_size != spec.width * spec.height) {
          throw SpecError(factor_field(i, "domain_size"), "agent_position must cover the grid");
        }
        continue;
      }
      if (!f.toggle_cell) throw SpecError(factor_field(i, "toggle_cell"), "required in GridScene");
      const Cell c = *f.toggle_cell;
      if (c.x < 0 || c.y < 0 || c.x >= spec.width || c.y >= spec.height) {
        throw SpecError(factor_field(i, "toggle_cell"), "outside the grid");
      }
    }
    if (spec.action_count != grid_action::kCount) {
      throw SpecError("action_count", "GridScene uses 6 actions (4 moves, interact, noop)");
    }
  } else {
    if (agents != 0) throw SpecError("factors", "FactorChain has no agent_position factor");
    for (std::size_t i = 0; i < n; ++i) {
      if (spec.factors[i].guard) throw SpecError(factor_field(i, "guard"), "not supported in FactorChain");
      if (spec.factors[i].toggle_cell) {
        throw SpecError(factor_field(i, "toggle_cell"), "not supported in FactorChain");
      }
    }
    if (spec.action_count != static_cast<int>(2 * n)) {
      throw SpecError("action_count", "FactorChain uses two actions (+1, -1) per factor");
    }
  }
}

Environment::Environment(EnvSpec spec) : spec_(std::move(spec)) {
  validate_spec(spec_);
  const auto n = spec_.factors.size();
  strides_.assign(n, 1);
  state_count_ = 1;
  // Last factor varies fastest.
  for (std::size_t i = n; i-- > 0;) {
    strides_[i] = state_count_;
    state_count_ *= static_cast<std::size_t>(spec_.factors[i].domain_size);
  }
  obs_width_ = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = spec_.factors[i];
    if (f.kind == FactorKind::AgentPosition) {
      agent_factor_ = static_cast<int>(i);
      obs_width_ += spec_.width + spec_.height;
    } else {
      obs_width_ += f.domain_size;
    }
  }
  successors_.resize(state_count_ * spec_.action_count);
  for (std::size_t s = 0; s < state_count_; ++s) {
    const auto st = decode(static_cast<StateIndex>(s));
    for (int a = 0; a < spec_.action_count; ++a) {
      successors_[s * spec_.action_count + a] = encode(step(st, a));
    }
  }
}

StateIndex Environment::encode(const FactoredState& s) const {
  if (!valid(s)) throw UsageError("encode: invalid state " + describe_state(s));
  std::size_t idx = 0;
  for (std::size_t i = 0; i < s.size(); ++i) idx += strides_[i] * static_cast<std::size_t>(s[i]);
  return static_cast<StateIndex>(idx);
}

FactoredState Environment::decode(StateIndex index) const {
  if (index >= state_count_) throw UsageError("decode: index out of range");
  FactoredState s(spec_.factors.size());
  std::size_t rest = index;
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = static_cast<int>(rest / strides_[i]);
    rest %= strides_[i];
  }
  return s;
}

int Environment::factor_value(StateIndex index, int factor) const {
  return static_cast<int>((index / strides_[factor]) % spec_.factors[factor].domain_size);
}

bool Environment::valid(const FactoredState& s) const {
  if (s.size() != spec_.factors.size()) return false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] < 0 || s[i] >= spec_.factors[i].domain_size) return false;
  }
  return true;
}

FactoredState Environment::step(const FactoredState& s, int action) const {
  if (action < 0 || action >= spec_.action_count) {
    throw UsageError("step: action " + std::to_string(action) + " out of range");
  }
  if (!valid(s)) throw UsageError("step: invalid state " + describe_state(s));
  return spec_.family == EnvFamily::GridScene ? step_grid(s, action) : step_chain(s, action);
}

FactoredState Environment::step_chain(FactoredState s, int action) const {
  const int f = action / 2;
  const int delta = (action % 2 == 0) ? 1 : -1;
  s[f] = std::clamp(s[f] + delta, 0, spec_.factors[f].domain_size - 1);
  return s;
}

FactoredState Environment::step_grid(FactoredState s, int action) const {
  Cell c = agent_cell(s);
  switch (action) {
    case grid_action::kUp: c.y = std::max(0, c.y - 1); break;
    case grid_action::kDown: c.y = std::min(spec_.height - 1, c.y + 1); break;
    case grid_action::kLeft: c.x = std::max(0, c.x - 1); break;
    case grid_action::kRight: c.x = std::min(spec_.width - 1, c.x + 1); break;
    case grid_action::kInteract: {
      const Cell here = c;
      for (std::size_t i = 0; i < spec_.factors.size(); ++i) {
        const auto& f = spec_.factors[i];
        if (f.kind == FactorKind::AgentPosition || !f.toggle_cell || !(*f.toggle_cell == here)) continue;
        if (f.guard && s[*f.guard] != kUnlocked) continue;
        s[i] = (s[i] + 1) % f.domain_size;
        // At most one object per cell toggles; the first declared wins.
        break;
      }
      return s;
    }
    default: return s;
  }
  s[agent_factor_] = c.y * spec_.width + c.x;
  return s;
}

std::vector<FactoredState> Environment::enumerate_states() const {
  std::vector<FactoredState> out;
  out.reserve(state_count_);
  for (std::size_t i = 0; i < state_count_; ++i) out.push_back(decode(static_cast<StateIndex>(i)));
  return out;
}

std::vector<bool> Environment::endogenous_mask(StateIndex s, StateIndex g) const {
  const auto n = spec_.factors.size();
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = spec_.factors[i].kind == FactorKind::AgentPosition ||
              factor_value(s, static_cast<int>(i)) != factor_value(g, static_cast<int>(i));
  }
  // A lock guarding an endogenous factor is endogenous too (transitively).
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& guard = spec_.factors[i].guard;
      if (guard && mask[i] && spec_.factors[i].kind != FactorKind::AgentPosition && !mask[*guard]) {
        mask[*guard] = true;
        changed = true;
      }
    }
  }
  return mask;
}

EndogenousLabel Environment::ground_truth_label(const FactoredState& s, const FactoredState& g) const {
  if (!valid(s) || !valid(g)) throw UsageError("ground_truth_label: states do not belong to " + id());
  EndogenousLabel label;
  label.endogenous_mask = endogenous_mask(encode(s), encode(g));
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!label.endogenous_mask[i]) continue;
    label.state_tuple.push_back(s[i]);
    label.goal_tuple.push_back(g[i]);
  }
  return label;
}

Cell Environment::agent_cell(const FactoredState& s) const {
  if (agent_factor_ < 0) return {};
  const int v = s[agent_factor_];
  return {v % spec_.width, v / spec_.width};
}

void Environment::write_observation(StateIndex s, double* out) const {
  std::fill(out, out + obs_width_, 0.0);
  int offset = 0;
  for (int i = 0; i < factor_count(); ++i) {
    const int v = factor_value(s, i);
    const auto& f = spec_.factors[i];
    if (f.kind == FactorKind::AgentPosition) {
      out[offset + v % spec_.width] = 1.0;
      out[offset + spec_.width + v / spec_.width] = 1.0;
      offset += spec_.width + spec_.height;
    } else {
      out[offset + v] = 1.0;
      offset += f.domain_size;
    }
  }
}

std::vector<double> Environment::observation(StateIndex s) const {
  std::vector<double> out(obs_width_);
  write_observation(s, out.data());
  return out;
}

std::string Environment::describe_action(int action) const {
  if (spec_.family == EnvFamily::GridScene) {
    static const char* names[] = {"up", "down", "left", "right", "interact", "noop"};
    return names[action];
  }
  return spec_.factors[action / 2].name + (action % 2 == 0 ? "+1" : "-1");
}

std::string Environment::describe_state(const FactoredState& s) const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

Environment make_env(const EnvSpec& spec) { return Environment(spec); }

std::vector<std::string> preset_ids() { return {"factorchain-3", "gridscene-5"}; }

EnvSpec preset_spec(const std::string& id) {
  EnvSpec spec;
  spec.env_id = id;
  if (id == "factorchain-3") {
    spec.family = EnvFamily::FactorChain;
    spec.factors = {{"f0", 4, FactorKind::Object, {}, {}},
                    {"f1", 4, FactorKind::Object, {}, {}},
                    {"f2", 3, FactorKind::Object, {}, {}}};
    spec.action_count = 6;
    spec.max_episode_steps = 50;
    return spec;
  }
  if (id == "gridscene-5") {
    spec.family = EnvFamily::GridScene;
    spec.width = 5;
    spec.height = 5;
    // drawer (index 1) is guarded by drawer_lock (index 3).
    spec.factors = {{"agent", 25, FactorKind::AgentPosition, {}, {}},
                    {"drawer", 2, FactorKind::Object, Cell{4, 4}, 3},
                    {"window", 2, FactorKind::Object, Cell{0, 4}, {}},
                    {"drawer_lock", 2, FactorKind::Lock, Cell{4, 0}, {}}};
    spec.action_count = grid_action::kCount;
    spec.max_episode_steps = 100;
    return spec;
  }
  throw SpecError("env", "unknown preset '" + id + "'");
}

nlohmann::json to_json(const EnvSpec& spec) {
  nlohmann::json j;
  j["env_id"] = spec.env_id;
  j["family"] = spec.family == EnvFamily::GridScene ? "GridScene" : "FactorChain";
  if (spec.family == EnvFamily::GridScene) j["grid"] = {spec.width, spec.height};
  j["action_count"] = spec.action_count;
  j["max_episode_steps"] = spec.max_episode_steps;
  auto& fs = j["factors"] = nlohmann::json::array();
  for (const auto& f : spec.factors) {
    nlohmann::json jf{{"name", f.name}, {"domain_size", f.domain_size}, {"kind", kind_name(f.kind)}};
    if (f.toggle_cell) jf["toggle_cell"] = {f.toggle_cell->x, f.toggle_cell->y};
    if (f.guard) jf["guard"] = *f.guard;
    fs.push_back(std::move(jf));
  }
  return j;
}

EnvSpec env_spec_from_json(const nlohmann::json& j) {
  EnvSpec spec;
  std::vector<std::string> guard_names;  // guards may be given by factor name
  try {
    spec.env_id = j.at("env_id").get<std::string>();
    const auto fam = j.at("family").get<std::string>();
    if (fam == "GridScene") {
      spec.family = EnvFamily::GridScene;
      spec.width = j.at("grid").at(0).get<int>();
      spec.height = j.at("grid").at(1).get<int>();
    } else if (fam == "FactorChain") {
      spec.family = EnvFamily::FactorChain;
    } else {
      throw SpecError("family", "unknown family '" + fam + "'");
    }
    spec.action_count = j.at("action_count").get<int>();
    spec.max_episode_steps = j.value("max_episode_steps", 50);
    for (const auto& jf : j.at("factors")) {
      FactorSpec f;
      f.name = jf.at("name").get<std::string>();
      f.domain_size = jf.at("domain_size").get<int>();
      f.kind = kind_from_name(jf.value("kind", std::string("object")));
      if (jf.contains("toggle_cell")) f.toggle_cell = Cell{jf["toggle_cell"].at(0), jf["toggle_cell"].at(1)};
      std::string guard_name;
      if (jf.contains("guard")) {
        if (jf["guard"].is_number_integer()) {
          f.guard = jf["guard"].get<int>();
        } else {
          guard_name = jf["guard"].get<std::string>();
        }
      }
      guard_names.push_back(std::move(guard_name));
      spec.factors.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SpecError("env_spec", e.what());
  }
  for (std::size_t i = 0; i < spec.factors.size(); ++i) {
    if (guard_names[i].empty()) continue;
    auto it = std::find_if(spec.factors.begin(), spec.factors.end(),
                           [&](const FactorSpec& o) { return o.name == guard_names[i]; });
    if (it == spec.factors.end()) {
      throw SpecError(factor_field(i, "guard"), "unknown factor '" + guard_names[i] + "'");
    }
    spec.factors[i].guard = static_cast<int>(it - spec.factors.begin());
  }
  validate_spec(spec);
  return spec;
}

}  // namespace analogon
