#include "analogon/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "analogon/errors.hpp"

namespace analogon {

namespace {

int factor_named(const Environment& env, const std::string& name) {
  for (int i = 0; i < env.factor_count(); ++i) {
    if (env.spec().factors[i].name == name) return i;
  }
  throw UsageError(env.id() + " has no factor named '" + name + "'");
}

bool matches(const Environment& env, StateIndex s, StateIndex g, const std::vector<bool>& mask) {
  for (int f = 0; f < env.factor_count(); ++f) {
    if (mask[f] && env.factor_value(s, f) != env.factor_value(g, f)) return false;
  }
  return true;
}

int bfs_distance(const Environment& env, StateIndex start, StateIndex goal, const std::vector<bool>& mask) {
  std::vector<int> dist(env.state_count(), -1);
  std::deque<StateIndex> queue{start};
  dist[start] = 0;
  while (!queue.empty()) {
    const StateIndex s = queue.front();
    queue.pop_front();
    if (matches(env, s, goal, mask)) return dist[s];
    for (int a = 0; a < env.action_count(); ++a) {
      const StateIndex n = env.next(s, a);
      if (dist[n] < 0) {
        dist[n] = dist[s] + 1;
        queue.push_back(n);
      }
    }
  }
  return -1;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

nlohmann::json EvalTask::to_json(const Environment& env) const {
  nlohmann::json ex = nlohmann::json::array();
  for (int f : exogenous_reference) ex.push_back(env.spec().factors[f].name);
  return {{"id", id},
          {"start", env.describe_state(env.decode(start))},
          {"goal", env.describe_state(env.decode(goal))},
          {"optimal", optimal},
          {"budget", budget},
          {"exogenous_reference", ex}};
}

EvalTask make_task(const Environment& env, StateIndex start, StateIndex goal, std::string id, bool full_state) {
  if (start >= env.state_count() || goal >= env.state_count()) throw UsageError("make_task: state out of range");
  EvalTask t;
  t.id = std::move(id);
  t.start = start;
  t.goal = goal;
  const auto endogenous = env.endogenous_mask(start, goal);
  t.success_mask = full_state ? std::vector<bool>(env.factor_count(), true) : endogenous;
  for (int f = 0; f < env.factor_count(); ++f) {
    if (!endogenous[f]) t.exogenous_reference.push_back(f);
  }
  t.optimal = bfs_distance(env, start, goal, t.success_mask);
  if (t.optimal < 0) throw UsageError("make_task: goal of task '" + t.id + "' is unreachable");
  t.budget = std::max(10, 4 * t.optimal);
  return t;
}

std::vector<EvalTask> sample_tasks(const Environment& env, int count, std::uint64_t seed, bool full_state) {
  if (count < 1) throw UsageError("sample_tasks: count must be >= 1");
  std::mt19937_64 rng(seed ^ 0x7a5c5ULL);
  std::uniform_int_distribution<StateIndex> pick(0, static_cast<StateIndex>(env.state_count() - 1));
  std::set<std::pair<StateIndex, StateIndex>> seen;
  std::vector<EvalTask> out;
  for (int attempt = 0; static_cast<int>(out.size()) < count; ++attempt) {
    if (attempt > 1000 * count) throw UsageError("sample_tasks: not enough solvable pairs");
    const StateIndex s = pick(rng);
    const StateIndex g = pick(rng);
    if (!seen.insert({s, g}).second) continue;
    const auto mask = full_state ? std::vector<bool>(env.factor_count(), true) : env.endogenous_mask(s, g);
    const int d = bfs_distance(env, s, g, mask);
    if (d < 1) continue;
    out.push_back(make_task(env, s, g, "task" + std::to_string(out.size()), full_state));
  }
  return out;
}

std::vector<EvalTask> drawer_holdout_tasks(const Environment& env, int count, std::uint64_t seed) {
  if (env.spec().family != EnvFamily::GridScene) throw UsageError("drawer holdout tasks need a GridScene env");
  const int agent = env.agent_factor();
  const int drawer = factor_named(env, "drawer");
  const int window = factor_named(env, "window");
  const int lock = factor_named(env, "drawer_lock");
  const int cells = env.spec().factors[agent].domain_size;
  if (count < 1 || count > cells * cells) throw UsageError("drawer_holdout_tasks: bad count");
  std::mt19937_64 rng(seed ^ 0xd4a3e4ULL);
  std::uniform_int_distribution<int> pick(0, cells - 1);
  std::set<std::pair<int, int>> seen;
  std::vector<EvalTask> out;
  while (static_cast<int>(out.size()) < count) {
    const int a = pick(rng);
    const int b = pick(rng);
    if (!seen.insert({a, b}).second) continue;
    FactoredState s(env.factor_count(), 0);
    FactoredState g(env.factor_count(), 0);
    s[agent] = a;
    g[agent] = b;
    s[drawer] = 0;
    g[drawer] = 1;
    s[window] = g[window] = 0;
    s[lock] = g[lock] = kUnlocked;
    out.push_back(make_task(env, env.encode(s), env.encode(g), "holdout" + std::to_string(out.size())));
  }
  return out;
}

bool goal_reached(const Environment& env, const EvalTask& task, StateIndex s) {
  return matches(env, s, task.goal, task.success_mask);
}

std::vector<Trajectory> rollout(const Environment& env, const BatchPolicy& policy, const EvalTask& task, int n,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Trajectory> out(static_cast<std::size_t>(std::max(n, 0)));
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].states.push_back(task.start);
    if (!goal_reached(env, task, task.start)) live.push_back(i);
  }
  for (int t = 0; t < task.budget && !live.empty(); ++t) {
    std::vector<StateIndex> s, g;
    for (auto i : live) {
      s.push_back(out[i].states.back());
      g.push_back(task.goal);
    }
    const auto actions = policy(s, g, rng);
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < live.size(); ++r) {
      auto& tr = out[live[r]];
      const int a = actions.at(r);
      tr.actions.push_back(a);
      tr.states.push_back(env.next(tr.states.back(), a));
      if (!goal_reached(env, task, tr.states.back())) still.push_back(live[r]);
    }
    live = std::move(still);
  }
  return out;
}

Score score(const Environment& env, const Trajectory& traj, const EvalTask& task) {
  Score sc;
  if (traj.states.empty()) return sc;
  sc.success = goal_reached(env, task, traj.states.back()) &&
               static_cast<int>(traj.actions.size()) <= task.budget;
  if (!sc.success) return sc;
  sc.direct = true;
  for (StateIndex s : traj.states) {
    for (int f : task.exogenous_reference) {
      if (env.factor_value(s, f) != env.factor_value(task.start, f)) sc.direct = false;
    }
  }
  return sc;
}

BatchPolicy oracle_policy(const Environment& env, const DistanceTable& endogenous) {
  if (endogenous.reward_mode() != RewardMode::EndogenousMatch) {
    throw UsageError("oracle_policy needs an endogenous-match distance table");
  }
  return [&env, &endogenous](const std::vector<StateIndex>& s, const std::vector<StateIndex>& g, std::mt19937_64&) {
    std::vector<int> actions(s.size(), 0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      int best = 0;
      int best_d = std::numeric_limits<int>::max();
      for (int a = 0; a < env.action_count(); ++a) {
        const auto d = endogenous.at(env.next(s[i], a), g[i]);
        if (d < best_d) {
          best_d = d;
          best = a;
        }
      }
      actions[i] = best;
    }
    return actions;
  };
}

std::vector<MetricsRow> evaluate(const Environment& env, const BatchPolicy& policy, const std::vector<EvalTask>& tasks,
                                 int rollouts_per_task, std::int64_t checkpoint, std::uint64_t seed, int jobs) {
  if (rollouts_per_task < 1) throw UsageError("evaluate: rollouts per task must be >= 1");
  std::vector<MetricsRow> rows(tasks.size());
  auto run = [&](std::size_t i) {
    const auto trajs = rollout(env, policy, tasks[i], rollouts_per_task, seed * 1000003ULL + i);
    MetricsRow r;
    r.checkpoint = checkpoint;
    r.task = tasks[i].id;
    r.n = rollouts_per_task;
    for (const auto& tr : trajs) {
      const auto sc = score(env, tr, tasks[i]);
      r.success += sc.success;
      r.direct += sc.direct;
      r.length += static_cast<double>(tr.actions.size());
    }
    r.success /= r.n;
    r.direct /= r.n;
    r.length /= r.n;
    rows[i] = r;
  };
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) run(i);
    return rows;
  }
  std::vector<std::thread> workers;
  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = static_cast<std::size_t>(w); i < tasks.size(); i += static_cast<std::size_t>(jobs)) run(i);
    });
  }
  for (auto& t : workers) t.join();
  return rows;
}

nlohmann::json EvalSummary::to_json() const {
  nlohmann::json j{{"checkpoints", checkpoints}, {"success", success}, {"direct", direct}, {"length", length}};
  if (!warning.empty()) j["warning"] = warning;
  return j;
}

EvalSummary summarize(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) throw UsageError("summarize: no rows");
  struct Acc {
    double success = 0, direct = 0, length = 0;
    int tasks = 0;
  };
  std::map<std::int64_t, Acc> per;
  for (const auto& r : rows) {
    auto& a = per[r.checkpoint];
    a.success += r.success;
    a.direct += r.direct;
    a.length += r.length;
    ++a.tasks;
  }
  EvalSummary s;
  if (per.size() < 3) {
    s.warning = "only " + std::to_string(per.size()) + " checkpoint(s) available; averaging over those";
  }
  auto it = per.end();
  for (std::size_t k = 0; k < std::min<std::size_t>(3, per.size()); ++k) {
    --it;
    s.checkpoints.insert(s.checkpoints.begin(), it->first);
    s.success += it->second.success / it->second.tasks;
    s.direct += it->second.direct / it->second.tasks;
    s.length += it->second.length / it->second.tasks;
  }
  const double m = static_cast<double>(s.checkpoints.size());
  s.success /= m;
  s.direct /= m;
  s.length /= m;
  return s;
}

void write_report(const std::vector<MetricsRow>& rows, const std::filesystem::path& stem, const nlohmann::json& extra) {
  if (rows.empty()) throw UsageError("write_report: no rows");
  const auto csv_path = std::filesystem::path(stem.string() + ".csv");
  const auto json_path = std::filesystem::path(stem.string() + ".json");
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "checkpoint,task,success,direct,length,n\n";
  for (const auto& r : rows) {
    csv << r.checkpoint << ',' << r.task << ',' << fmt(r.success) << ',' << fmt(r.direct) << ',' << fmt(r.length)
        << ',' << r.n << '\n';
  }
  if (!csv) throw IoError("failed writing " + csv_path.string());
  nlohmann::json j = extra.is_object() ? extra : nlohmann::json::object();
  j["summary"] = summarize(rows).to_json();
  std::ofstream js(json_path);
  if (!js) throw IoError("cannot write " + json_path.string());
  js << j.dump(2) << '\n';
}

std::vector<MetricsRow> read_report_csv(const std::filesystem::path& csv) {
  std::ifstream is(csv);
  if (!is) throw IoError("cannot read " + csv.string());
  std::string line;
  std::getline(is, line);
  if (line != "checkpoint,task,success,direct,length,n") throw IoError(csv.string() + ": unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field[6];
    for (auto& f : field) std::getline(ss, f, ',');
    MetricsRow r;
    try {
      r.checkpoint = std::stoll(field[0]);
      r.task = field[1];
      r.success = std::stod(field[2]);
      r.direct = std::stod(field[3]);
      r.length = std::stod(field[4]);
      r.n = std::stoi(field[5]);
    } catch (const std::exception&) {
      throw IoError(csv.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace analogon
