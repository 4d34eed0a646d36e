// Acceptance suite. Each criterion prints one line:
//   A<n> PASS|FAIL <detail>
// Long-running criteria cache their artifacts under --out and reuse them
// when the config hash recorded next to a checkpoint matches.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "analogon/errors.hpp"
#include "analogon/evalkit.hpp"
#include "analogon/pipeline.hpp"

using namespace analogon;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path out = "acceptance-artifacts";
  int jobs = 1;
  bool verbose = false;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- A1

Outcome a1(const Options&) {
  const auto t0 = Clock::now();
  const auto env = make_env(preset_spec("factorchain-3"));
  const auto full = solve_distances(env, RewardMode::FullMatch);
  const auto endo = solve_distances(env, RewardMode::EndogenousMatch);
  const auto q = verify_quasimetric(full);
  const auto closure = verify_endogenous_closure(env, endo);
  const auto field = verify_field_invariance(env, full);
  const double sec = since(t0);
  Outcome o;
  o.pass = q.ok() && closure.violating_pairs == 0 && field.max_deviation == 0.0 && sec < 30.0;
  o.detail = std::to_string(q.triples_checked) + " triples, " + std::to_string(q.triangle_violations) +
             " triangle violations, " + std::to_string(closure.violating_pairs) + " closure violations, field deviation " +
             fmt("%g", field.max_deviation) + ", " + fmt("%.1f", sec) + " s (limit 30)";
  return o;
}

// ---------------------------------------------------------------- A2

struct FdStats {
  int checked = 0;
  double worst = 0.0;
  std::string worst_name;
};

// Central differences on a scalar loss; relative error is
// |analytic - numeric| / max(1, |numeric|).
void fd_check(const std::vector<tc::ParameterStore*>& stores, const std::function<tc::Var(tc::Graph&)>& loss,
              const std::string& label, std::mt19937_64& rng, int per_tensor, FdStats& st) {
  for (auto* s : stores) s->zero_grad();
  {
    tc::Graph g;
    g.backward(loss(g));
  }
  const auto value = [&] {
    tc::Graph g;
    return g.scalar(loss(g));
  };
  const double h = 1e-6;
  for (auto* s : stores) {
    for (auto& p : *s) {
      for (int k = 0; k < per_tensor; ++k) {
        const auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.value.size()));
        const double saved = p.value.data()[i];
        p.value.data()[i] = saved + h;
        const double up = value();
        p.value.data()[i] = saved - h;
        const double down = value();
        p.value.data()[i] = saved;
        const double fd = (up - down) / (2 * h);
        const double err = std::abs(p.grad.data()[i] - fd) / std::max(1.0, std::abs(fd));
        if (err > st.worst) {
          st.worst = err;
          st.worst_name = label + ":" + p.name;
        }
        ++st.checked;
      }
    }
  }
}

// A random point: every parameter shifted by N(0, 0.2). Zero-initialized
// biases would otherwise leave LayerNorm at zero variance on some rows.
void jitter(const std::vector<tc::ParameterStore*>& stores, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.2);
  for (auto* s : stores) {
    for (auto& p : *s) p.value = p.value.unaryExpr([&](double x) { return x + noise(rng); });
  }
}

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Matrix::NullaryExpr(rows, cols, [&]() { return n(rng); });
}

// Weighted sum of outputs so every output entry carries gradient.
tc::Var probe_loss(tc::Graph& g, tc::Var out, const Matrix& w) { return g.sum(g.mul(out, g.constant(w))); }

Outcome a2(const Options&) {
  const auto t0 = Clock::now();
  const auto env = make_env(preset_spec("gridscene-5"));
  const auto data = generate_play(env, PlayConfig{30, 0.2, 0, 3});
  const Matrix obs = observation_matrix(env);
  const int rows = 8;
  FdStats st;
  std::map<std::string, int> maps;

  for (int point = 0; point < 10; ++point) {
    std::mt19937_64 rng(1000 + point);
    // Alg. 1 maps and loss at desk width.
    AnalogyConfig acfg;
    acfg.batch_size = rows;
    acfg.seed = point;
    DualAnalogyModel model(env.observation_width(), env.action_count(), acfg);
    jitter({&model.phi().params(), &model.varphi().params(), &model.critic().params()}, rng);
    const Matrix x = obs.topRows(40).bottomRows(rows);
    for (auto* m : {&model.phi(), &model.varphi()}) {
      const Matrix w = random_matrix(rows, acfg.d, rng);
      fd_check({&m->params()}, [&](tc::Graph& g) { return probe_loss(g, m->forward(g, g.constant(x)), w); }, m->name(),
               rng, 6, st);
      ++maps[m->name()];
    }
    {
      Matrix in(rows, 2 * obs.cols() + env.action_count());
      std::vector<int> acts;
      for (int r = 0; r < rows; ++r) acts.push_back(static_cast<int>(rng() % env.action_count()));
      in << x, one_hot_actions(acts, env.action_count()), obs.middleRows(100, rows);
      const Matrix w = random_matrix(rows, 1, rng);
      fd_check({&model.critic().params()},
               [&](tc::Graph& g) { return probe_loss(g, model.critic().forward(g, g.constant(in)), w); }, "Q", rng, 6, st);
      ++maps["Q"];
    }
    {
      AnalogyTrainer tr(env, data, model, acfg);
      const auto batch = tr.sample_batch();
      fd_check({&model.phi().params(), &model.varphi().params(), &model.critic().params()},
               [&](tc::Graph& g) { return tr.build_loss(g, batch)[0]; }, "analogy-loss", rng, 3, st);
      ++maps["analogy-loss"];
    }

    // Alg. 2 maps and combined losses, every variant.
    const auto tables = AnalogyTables::build(model, obs);
    for (auto v : {CtaVariant::Cta, CtaVariant::HiqlDual, CtaVariant::HiqlDualAnalogy, CtaVariant::FlatAnalogy}) {
      CtaConfig cfg;
      cfg.variant = v;
      cfg.batch_size = rows;
      cfg.seed = point;
      CtaAgent agent(env.observation_width(), env.action_count(), acfg.d, cfg);
      jitter(agent.trainable_stores(), rng);
      const std::string vn = to_string(v);
      const int cond_width = cfg.e;
      {
        const Matrix raw = random_matrix(rows, acfg.d, rng);
        const Matrix w = random_matrix(rows, cfg.e, rng);
        fd_check({&agent.eta().params()}, [&](tc::Graph& g) { return probe_loss(g, agent.eta().forward(g, g.constant(raw)), w); },
                 vn + "/eta", rng, 6, st);
        ++maps[vn + "/eta"];
      }
      std::vector<std::pair<std::string, ConditionalHead*>> heads{{"value", &agent.value_head()},
                                                                  {"low", &agent.low_head()}};
      if (cfg.hierarchical()) heads.emplace_back("high", &agent.high_head());
      for (auto& [hn, head] : heads) {
        const Matrix cond = random_matrix(rows, cond_width, rng);
        const Matrix xo = obs.middleRows(60, rows);
        const int out = static_cast<int>(head->eval(xo, cond).cols());
        const Matrix w = random_matrix(rows, out, rng);
        std::vector<tc::ParameterStore*> stores;
        for (auto* m : head->modules()) stores.push_back(&m->params());
        fd_check(stores, [&](tc::Graph& g) { return probe_loss(g, head->forward(g, g.constant(xo), g.constant(cond)), w); },
                 vn + "/" + hn, rng, 4, st);
        ++maps[vn + "/" + hn];
        // Each module on its own, backbones included.
        for (auto* m : head->modules()) {
          const int in_width = m->config().input;
          const Matrix mi = random_matrix(rows, in_width, rng);
          const Matrix mw = random_matrix(rows, m->config().output, rng);
          fd_check({&m->params()}, [&](tc::Graph& g) { return probe_loss(g, m->forward(g, g.constant(mi)), mw); },
                   vn + "/" + m->name(), rng, 4, st);
          ++maps[vn + "/" + m->name()];
        }
      }
      // Combined loss. AWR weights and the actor's eta are stop-gradient
      // inputs, so they are held fixed while differencing.
      CtaTrainer tr(env, data, tables, agent, cfg);
      const auto b = tr.sample_batch();
      const tc::Mlp frozen = agent.eta();
      const Matrix wh = tr.awr_weights(b.s, b.s_k, b.g_actor, cfg.beta_h);
      const Matrix wl = tr.awr_weights(b.s, b.s_next, b.s_k, cfg.beta_l);
      const CtaLossOptions opt{&wh, &wl, &frozen};
      fd_check(agent.trainable_stores(), [&](tc::Graph& g) { return tr.build_loss(g, b, opt).total; }, vn + "/loss", rng, 2,
               st);
      ++maps[vn + "/loss"];
    }
  }
  const double sec = since(t0);
  bool every_map_ten = true;
  for (const auto& [name, count] : maps) every_map_ten = every_map_ten && count == 10;
  Outcome o;
  o.pass = st.worst <= 1e-4 && every_map_ten && sec < 60.0;
  o.detail = std::to_string(maps.size()) + " maps x 10 points, " + std::to_string(st.checked) +
             " entries, worst relative error " + fmt("%.2e", st.worst) + " (" + st.worst_name + "), " + fmt("%.1f", sec) +
             " s (limit 60)";
  return o;
}

// ---------------------------------------------------------------- shared training

RunContext context(const Options& opt, const fs::path& dir, const nlohmann::json& overlay) {
  RunContext ctx;
  ctx.config = RunConfig::from_json(overlay);
  ctx.out = opt.out / dir;
  ctx.jobs = opt.jobs;
  ctx.verbose = opt.verbose;
  return ctx;
}

bool cached(const fs::path& ckpt, const RunConfig& c) {
  std::ifstream js(ckpt.string() + ".json");
  if (!fs::exists(ckpt) || !js) return false;
  try {
    return nlohmann::json::parse(js).value("config_hash", "") == c.hash();
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

// Dataset and analogy model; returns the seconds spent training (0 if cached).
double ensure_analogy(const RunContext& ctx) {
  if (cached(analogy_path(ctx.out), ctx.config)) return 0.0;
  const auto t0 = Clock::now();
  gen_data(ctx);
  if (!ctx.config.holdout.empty()) ooc_holdout(ctx);
  train_analogy(ctx);
  return since(t0);
}

double ensure_cta(const RunContext& ctx) {
  const auto last = cta_checkpoint_path(ctx.out, ctx.config.cta.variant, ctx.config.cta.steps);
  if (cached(last, ctx.config)) return 0.0;
  const auto t0 = Clock::now();
  train_cta(ctx);
  return since(t0);
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot read " + p.string());
  return nlohmann::json::parse(is);
}

// ---------------------------------------------------------------- A3 / A4

struct AnalogyRun {
  double mae = 0.0;
  double gap = 0.0;
  double seconds = 0.0;
};

std::vector<AnalogyRun> analogy_runs(const Options& opt) {
  std::vector<AnalogyRun> runs;
  for (std::uint64_t seed : {0, 1, 2}) {
    auto ctx = context(opt, "analogy/seed" + std::to_string(seed), {{"env", "factorchain-3"}, {"seed", seed}});
    AnalogyRun r;
    r.seconds = ensure_analogy(ctx);
    const auto env = make_env(ctx.config.env_spec());
    DualAnalogyModel model(env.observation_width(), env.action_count(), ctx.config.analogy);
    model.load(analogy_path(ctx.out));
    const auto tables = AnalogyTables::build(model, observation_matrix(env));
    r.mae = distance_fit(tables, solve_distances(env, RewardMode::FullMatch), ctx.config.analogy.gamma).mae;
    r.gap = analogy_structure(env, tables, seed).gap();
    runs.push_back(r);
  }
  return runs;
}

Outcome a3(const Options& opt) {
  const auto runs = analogy_runs(opt);
  double mae = 0.0, worst_sec = 0.0;
  std::string per;
  for (const auto& r : runs) {
    mae += r.mae / runs.size();
    worst_sec = std::max(worst_sec, r.seconds);
    per += " " + fmt("%.3f", r.mae);
  }
  Outcome o;
  o.pass = mae <= 0.5 && worst_sec < 300.0;
  o.detail = "distance MAE " + fmt("%.3f", mae) + " (limit 0.5; seeds" + per + "), slowest seed " +
             (worst_sec == 0.0 ? std::string("cached") : fmt("%.0f", worst_sec) + " s") + " (limit 300)";
  return o;
}

Outcome a4(const Options& opt) {
  const auto runs = analogy_runs(opt);
  double gap = 0.0;
  std::string per;
  for (const auto& r : runs) {
    gap += r.gap / runs.size();
    per += " " + fmt("%.3f", r.gap);
  }
  Outcome o;
  o.pass = gap >= 0.2;
  o.detail = "within minus across cosine " + fmt("%.3f", gap) + " (limit 0.2; seeds" + per + ")";
  return o;
}

// ---------------------------------------------------------------- A5

Outcome a5(const Options& opt) {
  double success = 0.0, worst_sec = 0.0;
  std::string per;
  for (std::uint64_t seed : {0, 1, 2}) {
    auto ctx = context(opt, "control/seed" + std::to_string(seed), {{"env", "gridscene-5"}, {"seed", seed}});
    double sec = ensure_analogy(ctx) + ensure_cta(ctx);
    const auto t1 = Clock::now();
    evaluate_run(ctx);
    sec += since(t1);
    const auto report = read_json(eval_stem(ctx.out, CtaVariant::Cta).string() + ".json");
    const double s = report["summary"]["success"].get<double>();
    success += s / 3.0;
    worst_sec = std::max(worst_sec, sec);
    per += " " + fmt("%.3f", s);
  }
  Outcome o;
  o.pass = success >= 0.8 && worst_sec < 900.0;
  o.detail = "success " + fmt("%.3f", success) + " (limit 0.8; seeds" + per + "), slowest seed " + fmt("%.0f", worst_sec) +
             " s (limit 900)";
  return o;
}

// ---------------------------------------------------------------- A6

Outcome a6(const Options& opt) {
  const auto env = make_env(preset_spec("gridscene-5"));
  const auto rule = gridscene_drawer_holdout(env, 15).to_json(env);
  double cta_direct = 0.0, mono_direct = 0.0, mono_success = 0.0, cta_success = 0.0;
  std::string per;
  for (std::uint64_t seed : {0, 1, 2}) {
    std::map<CtaVariant, EvalSummary> got;
    for (auto v : {CtaVariant::Cta, CtaVariant::HiqlDualAnalogy}) {
      auto ctx = context(opt, "ooc/seed" + std::to_string(seed),
                         {{"env", "gridscene-5"},
                          {"seed", seed},
                          {"holdout", {rule}},
                          {"cta", {{"variant", to_string(v)}}},
                          {"eval", {{"task_set", "drawer-holdout"}}}});
      // The analogy model does not depend on the variant; share it.
      auto shared = ctx;
      shared.config.cta = RunConfig::desk("gridscene-5").cta;
      shared.config.cta.seed = seed;
      ensure_analogy(shared);
      ensure_cta(ctx);
      evaluate_run(ctx);
      const auto j = read_json(eval_stem(ctx.out, v).string() + ".json")["summary"];
      got[v].success = j["success"].get<double>();
      got[v].direct = j["direct"].get<double>();
    }
    cta_direct += got[CtaVariant::Cta].direct / 3.0;
    cta_success += got[CtaVariant::Cta].success / 3.0;
    mono_direct += got[CtaVariant::HiqlDualAnalogy].direct / 3.0;
    mono_success += got[CtaVariant::HiqlDualAnalogy].success / 3.0;
    per += " " + fmt("%.3f", got[CtaVariant::Cta].direct) + "/" + fmt("%.3f", got[CtaVariant::HiqlDualAnalogy].direct);
  }
  Outcome o;
  o.pass = cta_direct > mono_direct && mono_success >= mono_direct;
  o.detail = "direct success cta " + fmt("%.3f", cta_direct) + " vs hiql-dual-analogy " + fmt("%.3f", mono_direct) +
             " (must exceed); hiql-dual-analogy success " + fmt("%.3f", mono_success) + " >= direct; cta success " +
             fmt("%.3f", cta_success) + "; per seed cta/hiql direct" + per;
  return o;
}

// ---------------------------------------------------------------- A7

Outcome a7(const Options&) {
  const auto t0 = Clock::now();
  std::vector<std::string> failed;
  const auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  expect(std::abs(expectile_loss(-2.0, 0.7) - 1.2) < 1e-15, "expectile 1.2");
  expect(std::abs(expectile_loss(2.0, 0.7) - 2.8) < 1e-15, "expectile 2.8");
  expect(expectile_loss(0.0, 0.7) == 0.0, "expectile 0");
  for (int d = 0; d <= 20; ++d) {
    expect(std::abs(implied_distance(value_of(d, 0.99).modified_return, 0.99, 1e6) - d) < 1e-9,
           "round trip d=" + std::to_string(d));
  }

  const auto env = make_env(preset_spec("factorchain-3"));
  AnalogyConfig acfg;
  DualAnalogyModel model(env.observation_width(), env.action_count(), acfg);
  const auto tables = AnalogyTables::build(model, observation_matrix(env));
  std::mt19937_64 rng(5);
  double worst = 0.0;
  bool antisym = true;
  for (int i = 0; i < 1000; ++i) {
    const auto s = static_cast<StateIndex>(rng() % env.state_count());
    const auto g = static_cast<StateIndex>(rng() % env.state_count());
    const auto x = static_cast<StateIndex>(rng() % env.state_count());
    antisym = antisym && (tables.analogy(s, g) + tables.analogy(g, s)).isZero(0.0) && tables.analogy(s, s).isZero(0.0);
    worst = std::max(worst, std::abs(tables.td_value(x, g) - tables.td_value(x, s) -
                                     tables.phi.row(x).dot(tables.analogy(s, g))));
  }
  expect(antisym, "antisymmetry");
  expect(worst <= 1e-6, "linear identity " + fmt("%.2e", worst));

  const auto grid = make_env(preset_spec("gridscene-5"));
  const auto data = generate_play(grid, PlayConfig{20, 0.2, 0, 1});
  DualAnalogyModel gm(grid.observation_width(), grid.action_count(), acfg);
  const auto gt = AnalogyTables::build(gm, observation_matrix(grid));
  for (auto v : {CtaVariant::Cta, CtaVariant::HiqlDualAnalogy, CtaVariant::FlatAnalogy}) {
    CtaConfig cfg;
    cfg.variant = v;
    cfg.batch_size = 32;
    CtaAgent agent(grid.observation_width(), grid.action_count(), acfg.d, cfg);
    CtaTrainer tr(grid, data, gt, agent, cfg);
    const auto b = tr.sample_batch();
    tc::Graph g;
    const auto vars = tr.build_loss(g, b);
    g.backward(g.add(vars.high, vars.low));
    double norm = 0.0;
    for (const auto& p : agent.eta().params()) norm += p.grad.size() ? p.grad.squaredNorm() : 0.0;
    expect(norm == 0.0, "sg[eta] " + to_string(v));
  }
  const double sec = since(t0);
  Outcome o;
  o.pass = failed.empty() && sec < 10.0;
  std::string f;
  for (const auto& s : failed) f += " " + s;
  o.detail = failed.empty() ? "closed forms, round trip, antisymmetry, identity (worst " + fmt("%.1e", worst) +
                                  "), sg[eta] all hold, " + fmt("%.1f", sec) + " s (limit 10)"
                            : "failed:" + f;
  return o;
}

// ---------------------------------------------------------------- A8

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome a8(const Options& opt) {
  const nlohmann::json overlay = {{"env", "gridscene-5"},
                                  {"seed", 7},
                                  {"analogy", {{"steps", 2000}}},
                                  {"cta", {{"steps", 3000}}},
                                  {"checkpoint_every", 1000}};
  std::vector<RunContext> runs;
  for (const char* d : {"determinism/run1", "determinism/run2"}) {
    auto ctx = context(opt, d, overlay);
    fs::remove_all(ctx.out);
    gen_data(ctx);
    train_analogy(ctx);
    train_cta(ctx);
    evaluate_run(ctx);
    runs.push_back(ctx);
  }
  std::vector<fs::path> files{"dataset.bin", "analogy.ckpt", "cta/cta/metrics.csv", "eval/cta.csv"};
  for (auto step : cta_checkpoints(runs[0].out, CtaVariant::Cta)) {
    files.push_back(fs::relative(cta_checkpoint_path(runs[0].out, CtaVariant::Cta, step), runs[0].out));
  }
  std::string differing;
  for (const auto& f : files) {
    if (!fs::exists(runs[0].out / f) || slurp(runs[0].out / f) != slurp(runs[1].out / f)) differing += " " + f.string();
  }
  Outcome o;
  o.pass = differing.empty() && files.size() == 7;
  o.detail = differing.empty() ? std::to_string(files.size()) + " artifacts byte-identical across two runs"
                               : "differ:" + differing;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria A1-A8"};
  Options opt;
  std::vector<std::string> which;
  std::string out;
  app.add_option("criteria", which, "A1 ... A8 (default: all)");
  app.add_option("--out", out, "Artifact directory (default $ANALOGON_OUT_DIR/acceptance or ./acceptance-artifacts)");
  app.add_option("--jobs", opt.jobs, "Evaluation workers")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", opt.verbose, "Progress on stderr");
  CLI11_PARSE(app, argc, argv);
  if (!out.empty()) {
    opt.out = out;
  } else if (const char* e = std::getenv("ANALOGON_OUT_DIR"); e != nullptr && *e != '\0') {
    opt.out = fs::path(e) / "acceptance";
  }

  const std::map<std::string, std::function<Outcome(const Options&)>> suite{
      {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5}, {"A6", a6}, {"A7", a7}, {"A8", a8}};
  if (which.empty()) {
    for (const auto& [k, fn] : suite) which.push_back(k);
  }
  int failures = 0;
  for (const auto& id : which) {
    const auto it = suite.find(id);
    if (it == suite.end()) {
      std::cerr << "unknown criterion " << id << std::endl;
      return 2;
    }
    Outcome o;
    try {
      o = it->second(opt);
    } catch (const std::exception& e) {
      o.detail = std::string("error: ") + e.what();
    }
    std::cout << id << (o.pass ? " PASS " : " FAIL ") << o.detail << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
