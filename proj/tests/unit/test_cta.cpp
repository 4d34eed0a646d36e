#include <doctest.h>

#include <cmath>
#include <random>

#include "analogon/cta.hpp"
#include "analogon/errors.hpp"
#include "analogon/oracle.hpp"

using namespace analogon;

namespace {

struct Fixture {
  Environment env = make_env(preset_spec("gridscene-5"));
  TransitionDataset data = generate_play(env, PlayConfig{20, 0.2, 0, 4});
  Matrix obs = observation_matrix(env);
  AnalogyTables tables;

  Fixture() {
    AnalogyConfig acfg;
    acfg.d = 6;
    acfg.hidden = {16};
    acfg.seed = 2;
    DualAnalogyModel model(env.observation_width(), env.action_count(), acfg);
    tables = AnalogyTables::build(model, obs);
  }
};

CtaConfig tiny(CtaVariant v, std::uint64_t seed = 1) {
  CtaConfig c;
  c.variant = v;
  c.e = 3;
  c.b = 2;
  c.p = 3;
  c.anchor_hidden = {5};
  c.displacement_hidden = {4};
  c.backbone_hidden = {4};
  c.monolithic_hidden = {6};
  c.k = 4;
  c.batch_size = 6;
  c.seed = seed;
  return c;
}

double total_loss(const CtaTrainer& tr, const CtaBatch& b, const CtaLossOptions& opt) {
  tc::Graph g;
  return g.scalar(tr.build_loss(g, b, opt).total);
}

}  // namespace

TEST_CASE("variant names dispatch") {
  for (const auto& n : cta_variant_names()) CHECK(to_string(cta_variant_from_string(n)) == n);
  CHECK_THROWS_AS(cta_variant_from_string("hiql"), UsageError);
  CHECK(tiny(CtaVariant::Cta).hierarchical());
  CHECK_FALSE(tiny(CtaVariant::FlatAnalogy).hierarchical());
  CHECK_FALSE(tiny(CtaVariant::HiqlDual).bilinear());
}

TEST_CASE("cta config round trip and validation") {
  auto c = tiny(CtaVariant::HiqlDualAnalogy);
  CHECK(CtaConfig::from_json(c.to_json()).to_json() == c.to_json());
  c.kappa = 1.0;
  CHECK_THROWS_AS(c.validate(), SpecError);
}

TEST_CASE("scalar bilinear head") {
  auto h = ConditionalHead::bilinear("v", 1, 1, 1, 1, {}, {}, {}, 1, 0);
  for (auto* m : h.modules()) m->set_identity();
  CHECK(h.eval(Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 3.0))(0, 0) == 6.0);

  // Zero displacement: zero feature, value is backbone(0).
  auto v = ConditionalHead::bilinear("v", 4, 3, 2, 3, {5}, {}, {4}, 1, 1);
  v.modules()[1]->zero();
  const Matrix o = Matrix::Random(2, 4);
  const Matrix c = Matrix::Random(2, 3);
  CHECK(v.features(o, c).isZero(0.0));
  CHECK(v.eval(o, c)(0, 0) == v.modules()[2]->eval(Matrix::Zero(1, 3))(0, 0));
}

TEST_CASE("bilinear feature matrix rank is bounded by p") {
  Fixture f;
  auto head = ConditionalHead::bilinear("v", f.env.observation_width(), 5, 4, 3, {16}, {16}, {8}, 1, 9);
  Matrix obs(10000, f.env.observation_width());
  Matrix cond(10000, 5);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  Matrix analogies(100, 5);
  for (Eigen::Index i = 0; i < analogies.size(); ++i) analogies.data()[i] = n01(rng);
  for (int s = 0; s < 100; ++s) {
    for (int a = 0; a < 100; ++a) {
      obs.row(s * 100 + a) = f.obs.row(s);
      cond.row(s * 100 + a) = analogies.row(a);
    }
  }
  const Matrix feat = head.features(obs, cond);
  Eigen::JacobiSVD<Matrix> svd(feat);
  svd.setThreshold(1e-10);
  CHECK(svd.rank() <= 3);
}

TEST_CASE("cta has fewer parameters than the monolithic analogy baseline") {
  const auto env = make_env(preset_spec("gridscene-5"));
  const int w = env.observation_width();
  const int a = env.action_count();
  const auto desk_cta = CtaAgent(w, a, 32, CtaConfig{}).parameter_count();
  CtaConfig mono;
  mono.variant = CtaVariant::HiqlDualAnalogy;
  CHECK(desk_cta < CtaAgent(w, a, 32, mono).parameter_count());

  CtaConfig paper;
  paper.e = 32;
  paper.anchor_hidden = paper.displacement_hidden = {128, 128, 128};
  paper.backbone_hidden = {128, 128};
  paper.monolithic_hidden = {512, 512, 512};
  auto paper_mono = paper;
  paper_mono.variant = CtaVariant::HiqlDualAnalogy;
  CHECK(CtaAgent(w, a, 256, paper).parameter_count() < CtaAgent(w, a, 256, paper_mono).parameter_count());

  // HIQL-dual and HIQL-dual+analogy share every shape; only conditioning differs.
  auto dual = mono;
  dual.variant = CtaVariant::HiqlDual;
  CHECK(CtaAgent(w, a, 32, dual).parameter_count() == CtaAgent(w, a, 32, mono).parameter_count());
}

TEST_CASE("conditioning per variant") {
  Fixture f;
  const std::vector<StateIndex> s{3, 9}, g{9, 9};
  const CtaAgent analog(f.env.observation_width(), f.env.action_count(), 6, tiny(CtaVariant::Cta));
  const CtaAgent dual(f.env.observation_width(), f.env.action_count(), 6, tiny(CtaVariant::HiqlDual));
  const Matrix ca = analog.conditioning(f.tables, s, g);
  const Matrix cd = dual.conditioning(f.tables, s, g);
  CHECK((ca.row(0) - f.tables.analogy(3, 9)).isZero(0.0));
  CHECK(ca.row(1).isZero(0.0));
  CHECK((cd.row(0) - f.tables.varphi.row(9)).isZero(0.0));
  CHECK((cd.row(1) - f.tables.varphi.row(9)).isZero(0.0));
}

TEST_CASE("compress: zero and identity eta") {
  auto cfg = tiny(CtaVariant::Cta);
  cfg.e = 6;
  CtaAgent agent(10, 6, 6, cfg);
  const Matrix x = Matrix::Random(4, 6);
  agent.eta().set_identity();
  CHECK(agent.compress(x) == x);
  agent.eta().zero();
  CHECK(agent.compress(Matrix::Zero(1, 6)).isZero(0.0));
}

TEST_CASE("advantage of a null move is zero") {
  Fixture f;
  CtaAgent agent(f.env.observation_width(), f.env.action_count(), 6, tiny(CtaVariant::Cta));
  CtaTrainer tr(f.env, f.data, f.tables, agent, tiny(CtaVariant::Cta));
  const auto b = tr.sample_batch();
  CHECK((tr.awr_weights(b.s, b.s, b.g_actor, 3.0).array() == 1.0).all());
}

TEST_CASE("actor losses send no gradient into eta") {
  Fixture f;
  for (auto v : {CtaVariant::Cta, CtaVariant::HiqlDualAnalogy, CtaVariant::FlatAnalogy}) {
    CAPTURE(to_string(v));
    const auto cfg = tiny(v);
    CtaAgent agent(f.env.observation_width(), f.env.action_count(), 6, cfg);
    CtaTrainer tr(f.env, f.data, f.tables, agent, cfg);
    const auto b = tr.sample_batch();
    {
      tc::Graph g;
      const auto vars = tr.build_loss(g, b);
      g.backward(g.add(vars.high, vars.low));
      double norm = 0.0;
      for (const auto& p : agent.eta().params()) norm += p.grad.size() ? p.grad.squaredNorm() : 0.0;
      CHECK(norm == 0.0);
      for (auto* s : agent.trainable_stores()) s->zero_grad();
    }
    tc::Graph g;
    g.backward(tr.build_loss(g, b).value);
    double norm = 0.0;
    for (const auto& p : agent.eta().params()) norm += p.grad.size() ? p.grad.squaredNorm() : 0.0;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("combined loss matches finite differences") {
  Fixture f;
  for (auto v : {CtaVariant::Cta, CtaVariant::HiqlDual, CtaVariant::HiqlDualAnalogy, CtaVariant::FlatAnalogy}) {
    CAPTURE(to_string(v));
    const auto cfg = tiny(v, 5);
    CtaAgent agent(f.env.observation_width(), f.env.action_count(), 6, cfg);
    // Random point in parameter space: zero biases put LayerNorm at zero
    // variance for s = g rows, where central differences are unreliable.
    std::mt19937_64 jitter(13);
    std::normal_distribution<double> noise(0.0, 0.2);
    for (auto* store : agent.trainable_stores()) {
      for (auto& p : *store) p.value = p.value.unaryExpr([&](double x) { return x + noise(jitter); });
    }
    CtaTrainer tr(f.env, f.data, f.tables, agent, cfg);
    const auto b = tr.sample_batch();
    const tc::Mlp frozen = agent.eta();
    const Matrix wh = tr.awr_weights(b.s, b.s_k, b.g_actor, cfg.beta_h);
    const Matrix wl = tr.awr_weights(b.s, b.s_next, b.s_k, cfg.beta_l);
    const CtaLossOptions opt{&wh, &wl, &frozen};
    {
      tc::Graph g;
      g.backward(tr.build_loss(g, b, opt).total);
    }
    std::mt19937_64 rng(7);
    const double h = 1e-6;
    int checked = 0;
    for (auto* store : agent.trainable_stores()) {
      for (auto& p : *store) {
        for (int k = 0; k < 2; ++k) {
          const auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.value.size()));
          const double saved = p.value.data()[i];
          p.value.data()[i] = saved + h;
          const double up = total_loss(tr, b, opt);
          p.value.data()[i] = saved - h;
          const double down = total_loss(tr, b, opt);
          p.value.data()[i] = saved;
          const double fd = (up - down) / (2 * h);
          const double an = p.grad.data()[i];
          CAPTURE(p.name);
          CHECK(std::abs(fd - an) <= 1e-4 * std::max(1.0, std::abs(fd)));
          ++checked;
        }
      }
    }
    CHECK(checked > 10);
  }
}

TEST_CASE("action selection is seeded and sigma zero is deterministic") {
  Fixture f;
  for (auto v : {CtaVariant::Cta, CtaVariant::FlatAnalogy}) {
    const CtaAgent agent(f.env.observation_width(), f.env.action_count(), 6, tiny(v));
    std::vector<StateIndex> s, g;
    for (StateIndex i = 0; i < 50; ++i) {
      s.push_back(i);
      g.push_back(199 - i);
    }
    std::mt19937_64 r1(3), r2(3), r3(4);
    const auto a1 = agent.act(f.obs, f.tables, s, g, 0.5, r1);
    CHECK(a1 == agent.act(f.obs, f.tables, s, g, 0.5, r2));
    const auto d1 = agent.act(f.obs, f.tables, s, g, 0.0, r1);
    CHECK(d1 == agent.act(f.obs, f.tables, s, g, 0.0, r3));
    for (int a : a1) CHECK((a >= 0 && a < f.env.action_count()));
  }
}

TEST_CASE("oracle values are Bellman consistent along optimal paths") {
  const auto env = make_env(preset_spec("gridscene-5"));
  const auto table = solve_distances(env, RewardMode::FullMatch);
  const double gamma = 0.99;
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    StateIndex s = static_cast<StateIndex>(rng() % env.state_count());
    const StateIndex goal = static_cast<StateIndex>(rng() % env.state_count());
    while (s != goal) {
      StateIndex next = s;
      for (int a = 0; a < env.action_count(); ++a) {
        if (table.at(env.next(s, a), goal) + 1 == table.at(s, goal)) {
          next = env.next(s, a);
          break;
        }
      }
      REQUIRE(next != s);
      const double y = -1.0 + gamma * value_of(table, next, goal, gamma).modified_return;
      worst = std::max(worst, std::abs(y - value_of(table, s, goal, gamma).modified_return));
      s = next;
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("agent checkpoint round trip") {
  Fixture f;
  const auto cfg = tiny(CtaVariant::Cta, 1);
  CtaAgent a(f.env.observation_width(), f.env.action_count(), 6, cfg);
  CtaAgent b(f.env.observation_width(), f.env.action_count(), 6, tiny(CtaVariant::Cta, 2));
  const auto path = std::filesystem::temp_directory_path() / "analogon_cta.ckpt";
  a.save(path, {{"variant", "cta"}});
  CHECK(b.load(path)["variant"] == "cta");
  std::vector<StateIndex> s{1, 2, 3}, g{4, 5, 6};
  CHECK(a.value(f.obs, f.tables, s, g) == b.value(f.obs, f.tables, s, g));
  CtaAgent mono(f.env.observation_width(), f.env.action_count(), 6, tiny(CtaVariant::HiqlDual));
  CHECK_THROWS_AS(mono.load(path), IoError);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
