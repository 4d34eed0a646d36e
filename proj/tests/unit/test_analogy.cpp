#include <doctest.h>

#include <cmath>
#include <random>

#include "analogon/analogy.hpp"
#include "analogon/errors.hpp"

using namespace analogon;

namespace {

AnalogyConfig small_config(std::uint64_t seed = 3) {
  AnalogyConfig cfg;
  cfg.d = 6;
  cfg.hidden = {16};
  cfg.batch_size = 16;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("expectile loss closed form") {
  CHECK(expectile_loss(-2.0, 0.7) == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(expectile_loss(2.0, 0.7) == doctest::Approx(2.8).epsilon(1e-15));
  for (double iota : {0.1, 0.5, 0.7, 0.99}) CHECK(expectile_loss(0.0, iota) == 0.0);
  CHECK_THROWS_AS(expectile_loss(1.0, 0.0), UsageError);
  CHECK_THROWS_AS(expectile_loss(1.0, 1.0), UsageError);
}

TEST_CASE("implied distance inverts the discounted value") {
  CHECK(implied_distance(0.0, 0.99, 100) == 0.0);
  CHECK(implied_distance(-1.0, 0.99, 100) == doctest::Approx(1.0).epsilon(1e-12));
  for (int d = 0; d <= 20; ++d) {
    const double v = value_of(d, 0.99).modified_return;
    CHECK(std::abs(implied_distance(v, 0.99, 100) - d) < 1e-9);
  }
  bool clipped = false;
  CHECK(implied_distance(0.5, 0.99, 100, &clipped) == 0.0);
  CHECK(clipped);
  clipped = false;
  CHECK(implied_distance(-150.0, 0.99, 100, &clipped) == 100.0);
  CHECK(clipped);
}

TEST_CASE("scalar td value and zero encoders") {
  AnalogyTables t;
  t.phi = Matrix::Constant(1, 1, 2.0);
  t.varphi = Matrix::Constant(1, 1, -3.0);
  CHECK(t.td_value(0, 0) == -6.0);

  const auto env = make_env(preset_spec("factorchain-3"));
  DualAnalogyModel model(env.observation_width(), env.action_count(), small_config());
  model.zero();
  const Matrix obs = observation_matrix(env);
  CHECK(model.td_value(obs.topRows(5), obs.bottomRows(5)).isZero(0.0));
}

TEST_CASE("dual analogy identities on a random model") {
  const auto env = make_env(preset_spec("factorchain-3"));
  DualAnalogyModel model(env.observation_width(), env.action_count(), small_config());
  const Matrix obs = observation_matrix(env);
  const auto tables = AnalogyTables::build(model, obs);
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<StateIndex> pick(0, static_cast<StateIndex>(env.state_count() - 1));
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const StateIndex s = pick(rng), g = pick(rng), x = pick(rng);
    CHECK(tables.analogy(s, s).isZero(0.0));
    CHECK((tables.analogy(g, s) + tables.analogy(s, g)).isZero(0.0));
    const double lhs = tables.td_value(x, g) - tables.td_value(x, s);
    const double rhs = tables.phi.row(x).dot(tables.analogy(s, g));
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  CHECK(worst < 1e-6);

  // The batched model path agrees with the tables.
  const Matrix a = model.dual_analogy(obs.topRows(3), obs.middleRows(7, 3));
  for (int r = 0; r < 3; ++r) CHECK((a.row(r) - tables.analogy(r, 7 + r)).norm() < 1e-12);
}

TEST_CASE("critic target drops the reward when every goal is reached") {
  const auto env = make_env(preset_spec("factorchain-3"));
  const auto ds = generate_play(env, PlayConfig{10, 0.2, 0, 1});
  auto cfg = small_config();
  cfg.absorbing_goal = false;
  DualAnalogyModel model(env.observation_width(), env.action_count(), cfg);
  AnalogyTrainer trainer(env, ds, model, cfg);
  AnalogyBatch b;
  for (int i = 0; i < 8; ++i) {
    const auto [ep, t] = ds.transition(static_cast<std::size_t>(i * 13));
    const auto& e = ds.episodes()[ep];
    b.s.push_back(e.states[t]);
    b.s_next.push_back(e.states[t + 1]);
    b.g.push_back(e.states[t]);
    b.a.push_back(e.actions[t]);
  }
  tc::Graph g;
  const auto vars = trainer.build_loss(g, b);
  const Matrix& obs = trainer.observations();
  double expected = 0.0;
  for (std::size_t i = 0; i < b.s.size(); ++i) {
    Matrix in(1, 2 * obs.cols() + env.action_count());
    in << obs.row(b.s[i]), one_hot_actions({b.a[i]}, env.action_count()), obs.row(b.g[i]);
    const double q = model.critic().eval(in)(0, 0);
    const double target = cfg.gamma * model.phi_target().eval(obs.row(b.s_next[i])).row(0).dot(
                                          model.varphi_target().eval(obs.row(b.g[i])).row(0));
    expected += (q - target) * (q - target);
  }
  expected /= static_cast<double>(b.s.size());
  CHECK(g.scalar(vars[2]) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("expectile regression recovers the two-point expectile") {
  // 30% mass at 1, 70% at 0.
  const double iota = 0.9, q = 0.3, lo = 0.0, hi = 1.0;
  const double expected = (iota * q * hi + (1 - iota) * (1 - q) * lo) / (iota * q + (1 - iota) * (1 - q));
  Matrix samples(100, 1);
  for (int i = 0; i < 100; ++i) samples(i, 0) = i < 30 ? hi : lo;
  tc::Mlp model("c", {1, {}, 1, true}, 5);
  tc::Adam adam({&model.params()}, tc::AdamConfig{1e-2});
  const Matrix ones = Matrix::Ones(100, 1);
  for (int step = 0; step < 4000; ++step) {
    tc::Graph g;
    const auto pred = model.forward(g, g.constant(ones));
    g.backward(g.mean(g.expectile(g.sub(g.constant(samples), pred), iota)));
    adam.step();
  }
  const double got = model.eval(Matrix::Ones(1, 1))(0, 0);
  CHECK(std::abs(got - expected) < 0.01 * expected);
}

TEST_CASE("analogy config validation names the field") {
  auto cfg = small_config();
  cfg.expectile = 1.0;
  try {
    cfg.validate();
    FAIL("expected SpecError");
  } catch (const SpecError& e) {
    CHECK(std::string(e.what()).find("analogy.expectile") != std::string::npos);
  }
  const auto back = AnalogyConfig::from_json(small_config().to_json());
  CHECK(back.to_json() == small_config().to_json());
}

TEST_CASE("analogy checkpoint round trip") {
  const auto env = make_env(preset_spec("factorchain-3"));
  DualAnalogyModel a(env.observation_width(), env.action_count(), small_config(1));
  DualAnalogyModel b(env.observation_width(), env.action_count(), small_config(2));
  const auto path = std::filesystem::temp_directory_path() / "analogon_analogy.ckpt";
  a.save(path, {{"steps", 7}});
  CHECK(b.load(path)["steps"] == 7);
  const Matrix obs = observation_matrix(env);
  CHECK(a.td_value(obs, obs) == b.td_value(obs, obs));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
