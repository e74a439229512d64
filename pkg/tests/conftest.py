"""Shared fixtures: tiny synthetic worlds and a cached small pipeline run."""

from __future__ import annotations

import copy
from datetime import datetime, timedelta, timezone

import pytest

from commloc.config import load_config
from commloc.corpus import CheckIn
from commloc.pipeline import run_stage

T0 = datetime(2015, 3, 2, 12, 0, 0, tzinfo=timezone.utc)  # a Monday


def mk_checkin(uid: str, lat: float, lon: float, minutes: int = 0, hour: int | None = None,
               weekday: int | None = None) -> CheckIn:
    t = T0 + timedelta(minutes=minutes)
    if hour is not None:
        t = t.replace(hour=hour)
    if weekday is not None:
        t = t + timedelta(days=weekday - t.weekday())
    return CheckIn(uid, t, lat, lon, t.hour, t.weekday())


def small_config(**overrides) -> dict:
    """Default config shrunk to a 12-user world for fast pipeline tests."""
    cfg = load_config(environ={})
    cfg["synth"] = dict(cfg["synth"])
    cfg["synth"]["n_users"] = 12
    cfg["synth"]["checkins_per_user"] = 140
    for key, val in overrides.items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = val
    return cfg


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """One full pipeline run on the 12-user world, shared across tests."""
    out = tmp_path_factory.mktemp("small-run")
    cfg = small_config()
    run_stage("all", cfg, out)
    return copy.deepcopy(cfg), out
