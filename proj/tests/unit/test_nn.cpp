#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "analogon/errors.hpp"
#include "analogon/nn.hpp"

using namespace analogon::tc;

TEST_CASE("Mlp forward on the tape equals eval bit for bit") {
  Mlp net("net", {7, {16, 16}, 3, true}, 42);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Matrix x(5, 7);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  Graph g;
  const Var y = net.forward(g, g.constant(x));
  CHECK(g.value(y) == net.eval(x));
  CHECK(net.parameter_count() == (7 * 16 + 16 + 32) + (16 * 16 + 16 + 32) + (16 * 3 + 3));
  CHECK_THROWS_AS(net.eval(Matrix::Zero(1, 6)), analogon::UsageError);
}

TEST_CASE("Mlp construction is deterministic per seed") {
  Mlp a("a", {4, {8}, 2, true}, 7);
  Mlp b("b", {4, {8}, 2, true}, 7);
  Mlp c("c", {4, {8}, 2, true}, 8);
  CHECK(a.params()[0].value == b.params()[0].value);
  CHECK(a.params()[0].value != c.params()[0].value);
}

TEST_CASE("Adam first step moves each scalar by the learning rate") {
  // With bias correction, step 1 is lr * g / (|g| + eps') = lr * sign(g).
  ParameterStore store;
  store.add("w", Matrix::Zero(1, 3));
  Adam opt({&store}, AdamConfig{0.01, 0.9, 0.999, 1e-8});
  store[0].grad = Matrix(1, 3);
  store[0].grad << 2.0, -0.5, 0.0;
  opt.step();
  CHECK(store[0].value(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(store[0].value(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(store[0].value(0, 2) == 0.0);
  CHECK(store[0].grad.isZero());
  CHECK(opt.step_count() == 1);
  CHECK(opt.first_moment(0, 0)(0, 0) == doctest::Approx(0.2));
  CHECK(opt.second_moment(0, 0)(0, 0) == doctest::Approx(0.004));
}

TEST_CASE("Adam rejects non-finite gradients") {
  ParameterStore store;
  store.add("w", Matrix::Zero(1, 1));
  Adam opt({&store}, AdamConfig{});
  store[0].grad = Matrix::Constant(1, 1, std::nan(""));
  CHECK_THROWS_AS(opt.step(), analogon::NumericError);
  CHECK(opt.step_count() == 0);
}

TEST_CASE("Adam fits a linear regression") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  Matrix x(64, 3), w_true(3, 1);
  w_true << 1.0, -2.0, 0.5;
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  const Matrix y = x * w_true;
  Mlp lin("lin", {3, {}, 1, false}, 0);
  Adam opt({&lin.params()}, AdamConfig{0.05});
  double loss = 0;
  for (int it = 0; it < 800; ++it) {
    Graph g;
    const Var l = g.mean(g.square(g.sub(lin.forward(g, g.constant(x)), g.constant(y))));
    loss = g.scalar(l);
    g.backward(l);
    opt.step();
  }
  CHECK(loss < 1e-6);
}

TEST_CASE("EMA of a constant source halves the gap geometrically") {
  ParameterStore shadow, source;
  shadow.add("w", Matrix::Zero(1, 1));
  source.add("w", Matrix::Ones(1, 1));
  const double tau = 0.005;
  const int k = 200;
  for (int i = 0; i < k; ++i) ema_update(shadow, source, tau);
  CHECK(1.0 - shadow[0].value(0, 0) == doctest::Approx(std::pow(1.0 - tau, k)).epsilon(1e-12));

  ParameterStore wrong;
  wrong.add("w", Matrix::Ones(2, 1));
  CHECK_THROWS_AS(ema_update(shadow, wrong, tau), analogon::UsageError);
}

TEST_CASE("checkpoint round trip and manifest rejection") {
  const auto path = std::filesystem::temp_directory_path() / "analogon_ckpt_test.bin";
  Mlp a("a", {5, {8}, 2, true}, 1);
  Mlp b("b", {5, {8}, 2, true}, 2);
  save_checkpoint(path, {{"a", &a.params()}});
  load_checkpoint(path, {{"a", &b.params()}});
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value == b.params()[i].value);

  Mlp wider("a", {5, {9}, 2, true}, 1);
  CHECK_THROWS_AS(load_checkpoint(path, {{"a", &wider.params()}}), analogon::IoError);
  CHECK_THROWS_AS(load_checkpoint(path, {{"other", &b.params()}}), analogon::IoError);
  CHECK_THROWS_AS(load_checkpoint(path, {{"a", &b.params()}, {"c", &a.params()}}), analogon::IoError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path, {{"a", &b.params()}}), analogon::IoError);
}
