"""Analogy-conditioned goal reaching on factored gridworlds.

Each pipeline function takes a config dict (overlaid on the desk profile, or
the paper profile with ``paper_scale=True``) and an output directory, and
returns a :class:`Result`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any, Mapping, Optional

from . import _core
from ._core import (
    Environment,
    IoError,
    SpecError,
    UNREACHABLE,
    UsageError,
    distances,
    expectile_loss,
    implied_distance,
    make_env,
    preset_ids,
)

__all__ = [
    "Environment",
    "IoError",
    "Result",
    "SpecError",
    "UNREACHABLE",
    "UsageError",
    "check_gates",
    "describe_file",
    "distances",
    "evaluate",
    "expectile_loss",
    "gen_data",
    "implied_distance",
    "make_env",
    "nn_probe",
    "ooc_holdout",
    "preset_ids",
    "resolve_config",
    "train_analogy",
    "train_cta",
    "verify_theory",
]


@dataclass
class Result:
    ok: bool
    summary: str
    log: dict

    def __str__(self) -> str:
        return self.summary


def _dump(config: Optional[Mapping[str, Any]]) -> str:
    return json.dumps(dict(config)) if config else ""


def _run(fn, config, out, jobs, paper_scale) -> Result:
    ok, summary, log = fn(_dump(config), os.fspath(out) if out else "", jobs, paper_scale)
    return Result(ok, summary, json.loads(log))


def resolve_config(config: Optional[Mapping[str, Any]] = None, paper_scale: bool = False) -> dict:
    """The full config the pipeline would use, with its hash."""
    return json.loads(_core.resolve_config(_dump(config), paper_scale))


def gen_data(config=None, out=None, jobs=1, paper_scale=False) -> Result:
    return _run(_core.gen_data, config, out, jobs, paper_scale)


def ooc_holdout(config=None, out=None, jobs=1, paper_scale=False) -> Result:
    return _run(_core.ooc_holdout, config, out, jobs, paper_scale)


def train_analogy(config=None, out=None, jobs=1, paper_scale=False) -> Result:
    return _run(_core.train_analogy, config, out, jobs, paper_scale)


def train_cta(config=None, out=None, jobs=1, paper_scale=False) -> Result:
    return _run(_core.train_cta, config, out, jobs, paper_scale)


def evaluate(config=None, out=None, jobs=1, paper_scale=False) -> Result:
    return _run(_core.evaluate, config, out, jobs, paper_scale)


def verify_theory(config=None, out=None, jobs=1, paper_scale=False) -> Result:
    return _run(_core.verify_theory, config, out, jobs, paper_scale)


def nn_probe(config=None, out=None, pairs=2000, top=10) -> Result:
    ok, summary, log = _core.nn_probe(_dump(config), os.fspath(out) if out else "", pairs, top)
    return Result(ok, summary, json.loads(log))


def describe_file(path) -> dict:
    return json.loads(_core.describe_file(os.fspath(path)))


def check_gates(manifest, out) -> list:
    return _core.check_gates(os.fspath(manifest), os.fspath(out))
