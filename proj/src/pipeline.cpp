#include "analogon/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include "analogon/binio.hpp"
#include "analogon/errors.hpp"
#include "analogon/evalkit.hpp"
#include "analogon/oracle.hpp"

namespace analogon {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

nlohmann::json seeds_json(const RunConfig& c) {
  return {{"run", c.seed}, {"analogy", c.analogy.seed}, {"cta", c.cta.seed}};
}

// Fields every artifact carries so it can be traced back to its config.
nlohmann::json stamp(const RunConfig& c) { return {{"config_hash", c.hash()}, {"seeds", seeds_json(c)}}; }

void require(const fs::path& p, const std::string& command) {
  if (!fs::exists(p)) {
    throw UsageError("missing " + p.string() + "; run `analogon " + command + "` first");
  }
}

void progress(const RunContext& ctx, const std::string& line) {
  if (ctx.verbose) std::cerr << line << std::endl;
}

Environment run_env(const RunContext& ctx) { return make_env(ctx.config.env_spec()); }

DualAnalogyModel load_analogy(const RunContext& ctx, const Environment& env) {
  const auto path = analogy_path(ctx.out);
  require(path, "train-analogy");
  DualAnalogyModel model(env.observation_width(), env.action_count(), ctx.config.analogy);
  model.load(path);
  return model;
}

// Endogenous displacement as text, e.g. "drawer:0->1". With objects_only the
// agent factor is left out, which groups pairs by what they do to objects.
std::string task_label(const Environment& env, StateIndex s, StateIndex g, bool objects_only = false) {
  const auto mask = env.endogenous_mask(s, g);
  std::string out;
  for (int f = 0; f < env.factor_count(); ++f) {
    if (!mask[f] || (objects_only && f == env.agent_factor())) continue;
    if (!out.empty()) out += ",";
    out += env.spec().factors[f].name + ":" + std::to_string(env.factor_value(s, f)) + "->" +
           std::to_string(env.factor_value(g, f));
  }
  return out.empty() ? "none" : out;
}

bool compare(double lhs, const std::string& op, double rhs) {
  if (op == "<") return lhs < rhs;
  if (op == "<=") return lhs <= rhs;
  if (op == ">") return lhs > rhs;
  if (op == ">=") return lhs >= rhs;
  if (op == "==") return lhs == rhs;
  if (op == "!=") return lhs != rhs;
  throw SpecError("gate.op", "unknown comparison '" + op + "'");
}

}  // namespace

fs::path default_out_dir() {
  if (const char* env = std::getenv("ANALOGON_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return "analogon-out";
}

fs::path dataset_path(const fs::path& out, bool holdout) {
  return out / (holdout ? "dataset.holdout.bin" : "dataset.bin");
}
fs::path analogy_path(const fs::path& out) { return out / "analogy.ckpt"; }
fs::path cta_dir(const fs::path& out, CtaVariant v) { return out / "cta" / to_string(v); }
fs::path cta_checkpoint_path(const fs::path& out, CtaVariant v, std::int64_t step) {
  return cta_dir(out, v) / ("step_" + std::to_string(step) + ".ckpt");
}
fs::path eval_stem(const fs::path& out, CtaVariant v) { return out / "eval" / to_string(v); }

std::vector<std::int64_t> cta_checkpoints(const fs::path& out, CtaVariant v) {
  std::vector<std::int64_t> steps;
  const auto dir = cta_dir(out, v);
  if (!fs::is_directory(dir)) return steps;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("step_", 0) != 0 || entry.path().extension() != ".ckpt") continue;
    const auto digits = name.substr(5, name.size() - 10);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) continue;
    steps.push_back(std::stoll(digits));
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

void write_log(const RunContext& ctx, const std::string& command, const nlohmann::json& log) {
  fs::create_directories(ctx.out / "logs");
  const auto path = ctx.out / "logs" / (command + ".json");
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  nlohmann::json j = stamp(ctx.config);
  j["command"] = command;
  j["config"] = ctx.config.to_json();
  j["result"] = log;
  os << j.dump(2) << "\n";
}

TransitionDataset load_training_dataset(const RunContext& ctx) {
  const bool holdout = !ctx.config.holdout.empty();
  const auto path = dataset_path(ctx.out, holdout);
  require(path, holdout ? "ooc-holdout" : "gen-data");
  auto ds = TransitionDataset::load(path);
  const auto env = run_env(ctx);
  if (ds.env_id() != env.id()) {
    throw UsageError(path.string() + " was generated for " + ds.env_id() + ", config names " + env.id());
  }
  return ds;
}

CommandResult gen_data(const RunContext& ctx) {
  const auto& c = ctx.config;
  const auto env = run_env(ctx);
  auto ds = generate_play(env, PlayConfig{c.data.episodes, c.data.epsilon, c.data.max_steps, c.seed});
  ds.meta().update(stamp(c));
  fs::create_directories(ctx.out);
  const auto path = dataset_path(ctx.out, false);
  ds.save(path);
  CommandResult r;
  r.log = ds.describe();
  r.log["path"] = path.filename().string();
  r.summary = "gen-data: " + std::to_string(ds.episodes().size()) + " episodes, " +
              std::to_string(ds.transition_count()) + " transitions -> " + path.string();
  return r;
}

CommandResult ooc_holdout(const RunContext& ctx) {
  const auto env = run_env(ctx);
  const auto src = dataset_path(ctx.out, false);
  require(src, "gen-data");
  auto ds = TransitionDataset::load(src);
  auto rules = ctx.config.holdout_rules(env);
  if (rules.empty()) {
    if (env.spec().family != EnvFamily::GridScene) {
      throw UsageError("ooc-holdout: the config has no holdout rules and " + env.id() + " has no default rule");
    }
    rules.push_back(gridscene_drawer_holdout(env));
  }
  CommandResult r;
  r.log["rules"] = nlohmann::json::array();
  std::size_t removed = 0, events = 0;
  for (const auto& rule : rules) {
    auto res = apply_holdout(ds, env, rule);
    ds = std::move(res.dataset);
    removed += res.removed;
    events += res.events;
    r.log["rules"].push_back({{"rule", rule.to_json(env)}, {"removed", res.removed}, {"events", res.events}});
  }
  ds.meta().update(stamp(ctx.config));
  const auto path = dataset_path(ctx.out, true);
  ds.save(path);
  r.log["dataset"] = ds.describe();
  r.log["path"] = path.filename().string();
  r.summary = "ooc-holdout: " + std::to_string(rules.size()) + " rule(s), " + std::to_string(events) +
              " events, " + std::to_string(removed) + " transitions removed -> " + path.string();
  return r;
}

CommandResult train_analogy(const RunContext& ctx) {
  const auto& cfg = ctx.config.analogy;
  const auto env = run_env(ctx);
  const auto ds = load_training_dataset(ctx);
  DualAnalogyModel model(env.observation_width(), env.action_count(), cfg);
  AnalogyTrainer trainer(env, ds, model, cfg);
  const int log_every = std::max(1, cfg.steps / 20);
  AnalogyLosses acc;
  nlohmann::json curve = nlohmann::json::array();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 1; i <= cfg.steps; ++i) {
    const auto l = trainer.step();
    acc.value += l.value;
    acc.critic += l.critic;
    if (i % log_every == 0 || i == cfg.steps) {
      const int n = i % log_every == 0 ? log_every : i % log_every;
      curve.push_back({{"step", i}, {"value", acc.value / n}, {"critic", acc.critic / n}});
      progress(ctx, "train-analogy step " + std::to_string(i) + " value " + fmt("%.5g", acc.value / n));
      acc = {};
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  CommandResult r;
  nlohmann::json side = stamp(ctx.config);
  side["steps"] = cfg.steps;
  side["analogy"] = cfg.to_json();
  side["dataset_provenance"] = ds.provenance();
  model.save(analogy_path(ctx.out), side);

  const auto tables = AnalogyTables::build(model, trainer.observations());
  r.log["curve"] = curve;
  std::string tail;
  if (env.state_count() <= DistanceTable::kMaxStates) {
    const auto fit = distance_fit(tables, solve_distances(env, RewardMode::FullMatch), cfg.gamma);
    r.log["distance_fit"] = fit.to_json();
    tail += ", distance MAE " + fmt("%.3f", fit.mae);
  }
  const auto structure = analogy_structure(env, tables, ctx.config.seed);
  r.log["analogy_structure"] = structure.to_json();
  tail += ", cosine gap " + fmt("%.3f", structure.gap());
  r.summary = "train-analogy: " + std::to_string(cfg.steps) + " steps in " + fmt("%.1f", seconds) + " s" + tail + " -> " + analogy_path(ctx.out).string();
  return r;
}

CommandResult train_cta(const RunContext& ctx) {
  const auto& cfg = ctx.config.cta;
  const auto env = run_env(ctx);
  const auto ds = load_training_dataset(ctx);
  const auto model = load_analogy(ctx, env);
  const auto tables = AnalogyTables::build(model, observation_matrix(env));
  CtaAgent agent(env.observation_width(), env.action_count(), model.d(), cfg);
  CtaTrainer trainer(env, ds, tables, agent, cfg);

  const auto dir = cta_dir(ctx.out, cfg.variant);
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream csv(dir / "metrics.csv");
  if (!csv) throw IoError("cannot write " + (dir / "metrics.csv").string());
  csv << "step,value,high,low,weight_h,weight_l\n";

  const int every = ctx.config.checkpoint_every;
  const int log_every = std::max(1, std::min(every, cfg.steps) / 10);
  CtaLosses acc;
  int acc_n = 0;
  std::vector<std::int64_t> saved;
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 1; i <= cfg.steps; ++i) {
    const auto l = trainer.step();
    acc.value += l.value;
    acc.high += l.high;
    acc.low += l.low;
    acc.mean_weight_h += l.mean_weight_h;
    acc.mean_weight_l += l.mean_weight_l;
    ++acc_n;
    if (i % log_every == 0 || i == cfg.steps) {
      char line[256];
      std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", i, acc.value / acc_n, acc.high / acc_n,
                    acc.low / acc_n, acc.mean_weight_h / acc_n, acc.mean_weight_l / acc_n);
      csv << line;
      progress(ctx, "train-cta " + to_string(cfg.variant) + " step " + std::to_string(i) + " value " +
                        fmt("%.5g", acc.value / acc_n));
      acc = {};
      acc_n = 0;
    }
    if (i % every == 0 || i == cfg.steps) {
      nlohmann::json side = stamp(ctx.config);
      side["step"] = i;
      side["cta"] = cfg.to_json();
      agent.save(cta_checkpoint_path(ctx.out, cfg.variant, i), side);
      saved.push_back(i);
    }
  }
  CommandResult r;
  r.log["variant"] = to_string(cfg.variant);
  r.log["parameters"] = agent.parameter_count();
  r.log["checkpoints"] = saved;
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.summary = "train-cta: " + to_string(cfg.variant) + ", " + std::to_string(agent.parameter_count()) +
              " parameters, " + fmt("%.1f", seconds) + " s, " + std::to_string(saved.size()) + " checkpoints -> " + dir.string();
  return r;
}

CommandResult evaluate_run(const RunContext& ctx) {
  const auto& c = ctx.config;
  const auto env = run_env(ctx);
  const auto all = cta_checkpoints(ctx.out, c.cta.variant);
  if (all.empty()) {
    throw UsageError("no checkpoints under " + cta_dir(ctx.out, c.cta.variant).string() + "; run `analogon train-cta --variant " +
                     to_string(c.cta.variant) + "` first");
  }
  const std::size_t keep = std::min<std::size_t>(all.size(), static_cast<std::size_t>(c.eval.last_checkpoints));
  const std::vector<std::int64_t> steps(all.end() - static_cast<std::ptrdiff_t>(keep), all.end());

  const auto model = load_analogy(ctx, env);
  const Matrix obs = observation_matrix(env);
  const auto tables = AnalogyTables::build(model, obs);
  const auto tasks = c.eval.task_set == "drawer-holdout" ? drawer_holdout_tasks(env, c.eval.tasks, c.seed)
                                                           : sample_tasks(env, c.eval.tasks, c.seed, c.eval.full_state);

  std::vector<MetricsRow> rows;
  for (const auto step : steps) {
    CtaAgent agent(env.observation_width(), env.action_count(), model.d(), c.cta);
    agent.load(cta_checkpoint_path(ctx.out, c.cta.variant, step));
    const double sigma = c.eval.sigma_h;
    const BatchPolicy policy = [&](const std::vector<StateIndex>& s, const std::vector<StateIndex>& g,
                                   std::mt19937_64& rng) { return agent.act(obs, tables, s, g, sigma, rng); };
    auto part = evaluate(env, policy, tasks, c.eval.rollouts, step, c.seed + 1, ctx.jobs);
    const auto s = summarize(part);
    progress(ctx, "eval " + to_string(c.cta.variant) + " step " + std::to_string(step) + " success " +
                      fmt("%.3f", s.success) + " direct " + fmt("%.3f", s.direct));
    rows.insert(rows.end(), part.begin(), part.end());
  }

  // Provenance comes from the dataset the agent was trained on.
  nlohmann::json provenance = nlohmann::json::array();
  const auto ds_path = dataset_path(ctx.out, !c.holdout.empty());
  if (fs::exists(ds_path)) provenance = TransitionDataset::load(ds_path).provenance();

  nlohmann::json extra = stamp(c);
  extra["variant"] = to_string(c.cta.variant);
  extra["env"] = env.id();
  extra["task_set"] = c.eval.task_set;
  extra["checkpoints_evaluated"] = steps;
  extra["provenance"] = provenance;
  extra["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) extra["tasks"].push_back(t.to_json(env));
  const auto stem = eval_stem(ctx.out, c.cta.variant);
  fs::create_directories(stem.parent_path());
  write_report(rows, stem, extra);

  const auto s = summarize(rows);
  CommandResult r;
  r.log = s.to_json();
  r.log["report"] = "eval/" + to_string(c.cta.variant) + ".csv";
  r.summary = "eval: " + to_string(c.cta.variant) + " success " + fmt("%.3f", s.success) + " direct " +
              fmt("%.3f", s.direct) + " over checkpoints";
  for (const auto step : s.checkpoints) r.summary += " " + std::to_string(step);
  if (!s.warning.empty()) r.summary += " (" + s.warning + ")";
  return r;
}

CommandResult verify_theory(const RunContext& ctx) {
  const auto env = run_env(ctx);
  const auto t0 = std::chrono::steady_clock::now();
  const auto full = solve_distances(env, RewardMode::FullMatch);
  const auto endo = solve_distances(env, RewardMode::EndogenousMatch);
  const auto q = verify_quasimetric(full);
  const auto closure = verify_endogenous_closure(env, endo);
  const auto field = verify_field_invariance(env, full);
  const auto greedy = verify_greedy_field_policy(env, full, ctx.config.analogy.gamma);

  CommandResult r;
  r.ok = q.ok() && closure.violating_pairs == 0 && field.max_deviation == 0.0 && greedy.suboptimal == 0;
  r.log = {{"env", env.id()},
           {"states", env.state_count()},
           {"quasimetric", q.to_json()},
           {"endogenous_closure", closure.to_json()},
           {"field_invariance", field.to_json()},
           {"greedy_field_policy", greedy.to_json()},
           {"ok", r.ok}};
  r.log.update(stamp(ctx.config));
  fs::create_directories(ctx.out);
  std::ofstream os(ctx.out / "theory.json");
  if (!os) throw IoError("cannot write " + (ctx.out / "theory.json").string());
  os << r.log.dump(2) << "\n";
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.summary = "verify-theory: " + env.id() + " in " + fmt("%.1f", seconds) + " s, " + std::to_string(q.triples_checked) + " triples, " +
              std::to_string(q.triangle_violations) + " triangle violations, " +
              std::to_string(closure.violating_pairs) + " closure violations, field deviation " +
              fmt("%g", field.max_deviation) + (r.ok ? " [ok]" : " [FAILED]");
  return r;
}

CommandResult nn_probe(const RunContext& ctx, int pairs, int top) {
  if (pairs < 2) throw UsageError("nn-probe: --pairs must be >= 2");
  if (top < 1 || top >= pairs) throw UsageError("nn-probe: --top must lie in [1, pairs)");
  const auto env = run_env(ctx);
  const auto model = load_analogy(ctx, env);
  const auto tables = AnalogyTables::build(model, observation_matrix(env));
  const auto n = static_cast<StateIndex>(env.state_count());
  if (static_cast<std::size_t>(pairs) > env.state_count() * (env.state_count() - 1)) {
    throw UsageError("nn-probe: --pairs exceeds the number of distinct (s, g) pairs");
  }

  std::mt19937_64 rng(ctx.config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::pair<StateIndex, StateIndex>> sample;
  std::vector<std::uint64_t> seen;
  while (sample.size() < static_cast<std::size_t>(pairs)) {
    const StateIndex s = static_cast<StateIndex>(rng() % n), g = static_cast<StateIndex>(rng() % n);
    const std::uint64_t key = static_cast<std::uint64_t>(s) * n + g;
    if (s == g || std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
    seen.push_back(key);
    sample.emplace_back(s, g);
  }
  Matrix alpha(pairs, model.d());
  std::vector<std::string> labels, object_labels;
  for (int i = 0; i < pairs; ++i) {
    alpha.row(i) = tables.analogy(sample[i].first, sample[i].second);
    labels.push_back(task_label(env, sample[i].first, sample[i].second));
    object_labels.push_back(task_label(env, sample[i].first, sample[i].second, true));
  }

  nlohmann::json queries = nlohmann::json::array();
  std::size_t agree = 0, object_agree = 0;
  std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(pairs));
  for (int i = 0; i < pairs; ++i) {
    for (int j = 0; j < pairs; ++j) dist[j] = {j == i ? INFINITY : (alpha.row(j) - alpha.row(i)).norm(), j};
    std::partial_sort(dist.begin(), dist.begin() + top, dist.end());
    nlohmann::json nbrs = nlohmann::json::array();
    for (int k = 0; k < top; ++k) {
      const int j = dist[k].second;
      const bool same = labels[j] == labels[i];
      agree += same ? 1 : 0;
      object_agree += object_labels[j] == object_labels[i] ? 1 : 0;
      nbrs.push_back({{"s", sample[j].first}, {"g", sample[j].second}, {"distance", dist[k].first},
                      {"label", labels[j]}, {"object_label", object_labels[j]}, {"same_label", same}});
    }
    queries.push_back({{"s", sample[i].first}, {"g", sample[i].second}, {"label", labels[i]},
                       {"object_label", object_labels[i]}, {"neighbors", nbrs}});
  }
  // Chance level: probability that a random other sampled pair shares the label.
  const auto chance_of = [&](const std::vector<std::string>& ls) {
    std::map<std::string, std::size_t> counts;
    for (const auto& l : ls) ++counts[l];
    double c = 0.0;
    for (const auto& [l, m] : counts) c += static_cast<double>(m) * static_cast<double>(m - 1);
    return c / (static_cast<double>(pairs) * static_cast<double>(pairs - 1));
  };
  const double chance = chance_of(labels), object_chance = chance_of(object_labels);
  const double total = static_cast<double>(pairs) * top;
  const double rate = static_cast<double>(agree) / total;
  const double object_rate = static_cast<double>(object_agree) / total;

  CommandResult r;
  r.log = stamp(ctx.config);
  r.log["pairs"] = pairs;
  r.log["top"] = top;
  r.log["label_agreement"] = rate;
  r.log["chance_agreement"] = chance;
  r.log["object_label_agreement"] = object_rate;
  r.log["object_chance_agreement"] = object_chance;
  r.log["queries"] = queries;
  std::ofstream os(ctx.out / "nn_probe.json");
  if (!os) throw IoError("cannot write " + (ctx.out / "nn_probe.json").string());
  os << r.log.dump(1) << "\n";
  r.log.erase("queries");
  r.summary = "nn-probe: " + std::to_string(pairs) + " pairs, top " + std::to_string(top) +
              " neighbours share the task label " + fmt("%.3f", rate) + " of the time (chance " + fmt("%.3f", chance) +
              "), object label " + fmt("%.3f", object_rate) + " (chance " + fmt("%.3f", object_chance) + ") -> " +
              (ctx.out / "nn_probe.json").string();
  return r;
}

nlohmann::json describe_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  char magic[8] = {};
  is.read(magic, 8);
  const std::string m(magic, is.gcount() == 8 ? 8 : 0);
  if (m == "ANLGDATA") return TransitionDataset::load(path).describe();
  if (m != "ANLGCKPT") throw IoError(path.string() + " is neither a dataset nor a checkpoint");
  nlohmann::json j{{"format", "ANLGCKPT"}};
  j["version"] = binio::get<std::uint32_t>(is);
  const auto count = binio::get<std::uint32_t>(is);
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t params = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = binio::get_string(is);
    const auto rows = binio::get<std::uint32_t>(is);
    const auto cols = binio::get<std::uint32_t>(is);
    params += static_cast<std::size_t>(rows) * cols;
    manifest.push_back({{"name", name}, {"shape", {rows, cols}}});
  }
  j["tensors"] = manifest;
  j["values"] = params;
  std::ifstream side(path.string() + ".json");
  if (side) j["sidecar"] = nlohmann::json::parse(side);
  return j;
}

std::vector<GateOutcome> check_gates(const fs::path& manifest, const fs::path& out) {
  std::ifstream is(manifest);
  if (!is) throw IoError("cannot read gate manifest " + manifest.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw SpecError("gate", e.what());
  }
  if (!m.contains("gates") || !m["gates"].is_array()) throw SpecError("gates", "expected an array of gates");
  std::vector<GateOutcome> res;
  for (const auto& g : m["gates"]) {
    GateOutcome o;
    try {
      o.name = g.value("name", g.at("file").get<std::string>() + g.at("pointer").get<std::string>());
      const auto file = out / g.at("file").get<std::string>();
      std::ifstream js(file);
      if (!js) {
        o.detail = "missing " + file.string();
        res.push_back(o);
        continue;
      }
      const auto doc = nlohmann::json::parse(js);
      const nlohmann::json::json_pointer ptr(g.at("pointer").get<std::string>());
      if (!doc.contains(ptr) || !doc.at(ptr).is_number()) {
        o.detail = g.at("pointer").get<std::string>() + " is not a number in " + file.string();
        res.push_back(o);
        continue;
      }
      const double v = doc.at(ptr).get<double>();
      const auto op = g.at("op").get<std::string>();
      const double target = g.at("value").get<double>();
      o.passed = compare(v, op, target);
      o.detail = fmt("%.6g", v) + " " + op + " " + fmt("%.6g", target);
    } catch (const nlohmann::json::exception& e) {
      throw SpecError("gate", e.what());
    }
    res.push_back(o);
  }
  return res;
}

}  // namespace analogon
