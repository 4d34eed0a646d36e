#include <doctest.h>

#include "analogon/config.hpp"
#include "analogon/errors.hpp"

using namespace analogon;

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("desk profile follows the env family") {
  CHECK(RunConfig::desk("gridscene-5").cta.k == 8);
  CHECK(RunConfig::desk("factorchain-3").cta.k == 4);
  const auto paper = RunConfig::paper();
  CHECK(paper.cta.k == 10);
  CHECK(paper.analogy.d == 256);
  CHECK(paper.analogy.hidden == std::vector<int>{512, 512, 512});
  CHECK(paper.cta.e == 32);
  CHECK(paper.cta.eta_hidden == std::vector<int>{256, 256});
  CHECK(paper.cta.kappa == 0.7);
  CHECK(paper.analogy.expectile == 0.7);
  CHECK(paper.cta.beta_h == 3.0);
  CHECK(paper.cta.learning_rate == 3e-4);
  CHECK(paper.cta.batch_size == 256);
  paper.validate();
}

TEST_CASE("config overlay, round trip and hash") {
  const auto c = RunConfig::from_json({{"env", "factorchain-3"}, {"cta", {{"steps", 10}}}, {"seed", 4}});
  CHECK(c.cta.steps == 10);
  CHECK(c.cta.k == 4);
  CHECK(c.cta.seed == 4);
  CHECK(c.analogy.seed == 4);
  CHECK(c.analogy.steps == AnalogyConfig{}.steps);
  const auto back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  CHECK(c.hash().size() == 16);
  auto other = c;
  other.cta.steps = 11;
  CHECK(other.hash() != c.hash());

  // Explicit module seeds are kept.
  const auto m = RunConfig::from_json({{"seed", 4}, {"cta", {{"seed", 9}}}});
  CHECK(m.cta.seed == 9);
}

TEST_CASE("config errors name the field") {
  const auto field_of = [](const nlohmann::json& j) {
    try {
      RunConfig::from_json(j);
    } catch (const SpecError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(field_of({{"cta", {{"bogus", 1}}}}).find("cta.bogus") != std::string::npos);
  CHECK(field_of({{"nope", 1}}).find("nope") != std::string::npos);
  CHECK(field_of({{"eval", {{"task_set", "x"}}}}).find("eval.task_set") != std::string::npos);
  CHECK(field_of({{"data", {{"epsilon", 2.0}}}}).find("data.epsilon") != std::string::npos);
  CHECK(field_of({{"analogy", {{"expectile", 1.0}}}}).find("analogy.expectile") != std::string::npos);
  CHECK(field_of({{"cta", {{"steps", "many"}}}}) != "");
  CHECK(field_of({{"env", "nowhere-1"}}) != "");
}

TEST_CASE("holdout rules come from the config") {
  const auto env = make_env(preset_spec("gridscene-5"));
  const auto rule = gridscene_drawer_holdout(env, 15);
  const auto c = RunConfig::from_json({{"holdout", {rule.to_json(env)}}});
  const auto rules = c.holdout_rules(env);
  REQUIRE(rules.size() == 1);
  CHECK(rules[0].to_json(env) == rule.to_json(env));
}
