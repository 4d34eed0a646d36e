import json

import numpy as np
import pytest

import analogon

TINY = {
    "env": "gridscene-5",
    "data": {"episodes": 20},
    "analogy": {"steps": 40, "batch_size": 16, "d": 8, "hidden": [16]},
    "cta": {"steps": 30, "batch_size": 16},
    "checkpoint_every": 10,
    "eval": {"tasks": 3, "rollouts": 4},
}


def test_environment_and_distances():
    env = analogon.make_env("factorchain-3")
    assert env.state_count == 48
    assert env.decode(env.encode([3, 0, 2])) == [3, 0, 2]
    d = analogon.distances(env)
    assert d.shape == (48, 48)
    assert np.all(np.diag(d) == 0)
    assert d[env.encode([0, 0, 0]), env.encode([3, 0, 2])] == 5
    assert env.observations().shape == (48, env.observation_width)


def test_closed_forms():
    assert analogon.expectile_loss(-2.0, 0.7) == pytest.approx(1.2, abs=1e-15)
    assert analogon.expectile_loss(2.0, 0.7) == pytest.approx(2.8, abs=1e-15)
    v = -(1 - 0.99**7) / (1 - 0.99)
    assert analogon.implied_distance(v, 0.99, 100) == pytest.approx(7, abs=1e-9)


def test_config_errors_surface_as_value_error():
    with pytest.raises(ValueError, match="cta.bogus"):
        analogon.resolve_config({"cta": {"bogus": 1}})
    cfg = analogon.resolve_config({"env": "factorchain-3"})
    assert cfg["cta"]["k"] == 4
    assert len(cfg["config_hash"]) == 16


def test_verify_theory(tmp_path):
    r = analogon.verify_theory({"env": "factorchain-3"}, tmp_path)
    assert r.ok
    assert r.log["endogenous_closure"]["violating_pairs"] == 0
    assert (tmp_path / "theory.json").exists()


def test_pipeline_end_to_end(tmp_path):
    with pytest.raises(ValueError, match="gen-data"):
        analogon.train_analogy(TINY, tmp_path)
    assert analogon.gen_data(TINY, tmp_path).ok
    analogon.train_analogy(TINY, tmp_path)
    r = analogon.train_cta(TINY, tmp_path)
    assert r.log["checkpoints"] == [10, 20, 30]
    e = analogon.evaluate(TINY, tmp_path, jobs=2)
    assert 0.0 <= e.log["direct"] <= e.log["success"] <= 1.0
    report = json.loads((tmp_path / "eval" / "cta.json").read_text())
    assert report["config_hash"] == analogon.resolve_config(TINY)["config_hash"]
    header = analogon.describe_file(tmp_path / "dataset.bin")
    assert header["episodes"] == 20
    probe = analogon.nn_probe(TINY, tmp_path, pairs=40, top=3)
    assert probe.log["pairs"] == 40

    manifest = tmp_path / "gates.json"
    manifest.write_text(json.dumps({"gates": [
        {"name": "range", "file": "eval/cta.json", "pointer": "/summary/success", "op": ">=", "value": 0}
    ]}))
    [(name, passed, _)] = analogon.check_gates(manifest, tmp_path)
    assert name == "range" and passed
