#include "analogon/config.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>

#include "analogon/errors.hpp"

namespace analogon {

namespace {

// Every key of `given` must exist in `known`; nested objects are checked
// recursively. Leaves (including arrays) are not inspected.
void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& path) {
  if (!given.is_object()) return;
  if (!known.is_object()) throw SpecError(path, "expected a value, got an object");
  for (const auto& [key, value] : given.items()) {
    const std::string field = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw SpecError(field, "unknown config key");
    reject_unknown(value, known.at(key), field);
  }
}

nlohmann::json data_json(const DataConfig& d) {
  return {{"episodes", d.episodes}, {"epsilon", d.epsilon}, {"max_steps", d.max_steps}};
}

nlohmann::json eval_json(const EvalConfig& e) {
  return {{"task_set", e.task_set},   {"tasks", e.tasks},           {"rollouts", e.rollouts},
          {"sigma_h", e.sigma_h},     {"full_state", e.full_state}, {"last_checkpoints", e.last_checkpoints}};
}

bool is_grid(const nlohmann::json& env) {
  if (env.is_string()) return preset_spec(env.get<std::string>()).family == EnvFamily::GridScene;
  return env_spec_from_json(env).family == EnvFamily::GridScene;
}

}  // namespace

RunConfig RunConfig::desk(const nlohmann::json& env) {
  RunConfig c;
  c.env = env;
  c.cta.k = is_grid(env) ? 8 : 4;
  c.apply_seed(0);
  return c;
}

RunConfig RunConfig::paper(const nlohmann::json& env) {
  RunConfig c = desk(env);
  c.analogy.d = 256;
  c.analogy.hidden = {512, 512, 512};
  c.analogy.expectile = 0.7;
  c.analogy.steps = 1'000'000;
  c.cta.e = 32;
  c.cta.b = 8;
  c.cta.p = 8;
  c.cta.eta_hidden = {256, 256};
  c.cta.anchor_hidden = {128, 128, 128};
  c.cta.displacement_hidden = {128, 128, 128};
  c.cta.backbone_hidden = {128, 128};
  c.cta.monolithic_hidden = {512, 512, 512};
  c.cta.kappa = 0.7;
  c.cta.k = 10;
  c.cta.steps = 1'000'000;
  c.checkpoint_every = 100'000;
  return c;
}

RunConfig RunConfig::from_json(const nlohmann::json& j, bool paper_scale) {
  if (!j.is_object()) throw SpecError("config", "expected a JSON object");
  const nlohmann::json env = j.contains("env") ? j.at("env") : nlohmann::json("gridscene-5");
  RunConfig base;
  try {
    base = paper_scale ? paper(env) : desk(env);
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception& e) {
    throw SpecError("env", e.what());
  }
  nlohmann::json known = base.to_json();
  known.erase("config_hash");
  nlohmann::json check = j;
  check.erase("env");
  check.erase("holdout");
  reject_unknown(check, known, "");

  nlohmann::json merged = known;
  merged.merge_patch(j);
  RunConfig c;
  try {
    c.env = merged.at("env");
    c.seed = merged.at("seed").get<std::uint64_t>();
    const auto& d = merged.at("data");
    c.data = {d.at("episodes").get<int>(), d.at("epsilon").get<double>(), d.at("max_steps").get<int>()};
    for (const auto& h : merged.at("holdout")) c.holdout.push_back(h);
    c.analogy = AnalogyConfig::from_json(merged.at("analogy"));
    c.cta = CtaConfig::from_json(merged.at("cta"));
    c.checkpoint_every = merged.at("checkpoint_every").get<int>();
    const auto& e = merged.at("eval");
    c.eval.task_set = e.at("task_set").get<std::string>();
    c.eval.tasks = e.at("tasks").get<int>();
    c.eval.rollouts = e.at("rollouts").get<int>();
    c.eval.sigma_h = e.at("sigma_h").get<double>();
    c.eval.full_state = e.at("full_state").get<bool>();
    c.eval.last_checkpoints = e.at("last_checkpoints").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw SpecError("config", ex.what());
  }
  // A top-level seed without module seeds seeds everything.
  if (j.contains("seed")) {
    const auto module_seed = [&](const char* block) { return j.contains(block) && j.at(block).contains("seed"); };
    if (!module_seed("analogy") && !module_seed("cta")) c.apply_seed(c.seed);
  }
  c.validate();
  return c;
}

EnvSpec RunConfig::env_spec() const {
  if (env.is_string()) return preset_spec(env.get<std::string>());
  return env_spec_from_json(env);
}

std::vector<HoldoutRule> RunConfig::holdout_rules(const Environment& e) const {
  std::vector<HoldoutRule> out;
  for (const auto& h : holdout) out.push_back(HoldoutRule::from_json(h, e));
  return out;
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  analogy.seed = s;
  cta.seed = s;
}

void RunConfig::validate() const {
  const auto spec = env_spec();
  validate_spec(spec);
  if (data.episodes < 1) throw SpecError("data.episodes", "must be >= 1");
  if (!(data.epsilon >= 0.0 && data.epsilon <= 1.0)) throw SpecError("data.epsilon", "must lie in [0, 1]");
  if (data.max_steps < 0) throw SpecError("data.max_steps", "must be >= 0");
  analogy.validate();
  cta.validate();
  if (checkpoint_every < 1) throw SpecError("checkpoint_every", "must be >= 1");
  if (eval.task_set != "random" && eval.task_set != "drawer-holdout") {
    throw SpecError("eval.task_set", "expected 'random' or 'drawer-holdout'");
  }
  if (eval.tasks < 1) throw SpecError("eval.tasks", "must be >= 1");
  if (eval.rollouts < 1) throw SpecError("eval.rollouts", "must be >= 1");
  if (!(eval.sigma_h >= 0.0)) throw SpecError("eval.sigma_h", "must be >= 0");
  if (eval.last_checkpoints < 1) throw SpecError("eval.last_checkpoints", "must be >= 1");
  if (!holdout.empty()) {
    const auto e = make_env(spec);
    for (const auto& r : holdout_rules(e)) r.validate(e);
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j{{"env", env},
                   {"seed", seed},
                   {"data", data_json(data)},
                   {"holdout", holdout},
                   {"analogy", analogy.to_json()},
                   {"cta", cta.to_json()},
                   {"checkpoint_every", checkpoint_every},
                   {"eval", eval_json(eval)}};
  return j;
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()).substr(0, 16); }

std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 failed");
  }
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    out += buf;
  }
  return out;
}

}  // namespace analogon
