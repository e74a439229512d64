"""Pipeline configuration: JSON file over defaults over env overrides.

Every tunable constant is a dotted key with a default.  A config file may
override any subset; environment variables override both, spelled
COMMLOC_<DOTTED_KEY_WITH_DOTS_AS_UNDERSCORES_UPPERCASED>, e.g.
COMMLOC_CLUSTERING_CUTOFF_M=250.  Unknown keys fail fast with the offending
key named.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

ENV_PREFIX = "COMMLOC_"

_KNOWN_MODELS = (
    "community",
    "sample-friends",
    "friends",
    "user",
    "user-community",
    "psmm",
)
_KNOWN_STRATEGIES = ("nearest", "max-size", "max-con", "random")
_WINDOW_KEYS = {"name", "kind", "weekdays", "hour_start", "hour_end", "bbox"}

DEFAULTS: dict[str, Any] = {
    "seed": 7,
    "city": {
        "name": "synthville",
        "bbox": [40.55, 40.85, -74.05, -73.75],
        "timezone": "UTC",
    },
    "corpus": {
        "source": "synthetic",  # synthetic | files
        "checkins": "corpus/checkins.tsv",
        "edges": "corpus/edges.tsv",
    },
    "filters": {"min_checkins": 100, "max_checkins": 2000},
    "edges": {"mode": "undirected"},
    "clustering": {"cutoff_m": 500.0},
    "grid": {"cell_deg": 0.001},
    "diversity": {"alpha": 10.0},
    "influence": {
        "cdf_resolution_m": 100.0,
        "cdf_max_m": 20000.0,
        "random_users_per_location": 20,
        "windows": [
            {
                "name": "lunch",
                "kind": "temporal",
                "weekdays": [0, 1, 2, 3, 4, 5, 6],
                "hour_start": 11,
                "hour_end": 13,
            },
            {
                "name": "dinner",
                "kind": "temporal",
                "weekdays": [0, 1, 2, 3, 4, 5, 6],
                "hour_start": 19,
                "hour_end": 21,
            },
        ],
    },
    "predict": {
        "models": [
            "community",
            "sample-friends",
            "friends",
            "user",
            "user-community",
            "psmm",
        ],
        "strategy": "nearest",
        "compare_strategies": ["random"],
        "learning_rate": 0.1,
        "l2": 1e-4,
        "epochs": 500,
        "grad_tol": 1e-6,
        "psmm_radius_m": 1000.0,
    },
    "evaluation": {
        "ratio": 0.8,
        "min_checkins": 5,
        "protocol": "chronological",  # chronological | kfold
        "kfolds": 10,
        "bucket_width": 0.2,
    },
    "synth": {
        "n_users": 200,
        "n_communities": 3,
        "p_in": 0.75,
        "p_out": 0.02,
        "hotspots_per_community": 2,
        "jitter_m": 45.0,
        "checkins_per_user": 170,
        "context_dependent": True,
    },
}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


def _leaf_paths(tree: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in tree.items():
        path = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.extend(_leaf_paths(v, path))
        else:
            out.append(path)
    return out


def _merge_into(base: dict, override: dict, prefix: str = "") -> None:
    for k, v in override.items():
        path = f"{prefix}.{k}" if prefix else k
        if k not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path} must be a table")
            _merge_into(base[k], v, path)
        else:
            base[k] = v


def config_get(cfg: dict, dotted: str) -> Any:
    node: Any = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    return node


def _set_by_path(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def _apply_env(cfg: dict, environ: dict[str, str]) -> None:
    env_to_path = {
        ENV_PREFIX + path.replace(".", "_").upper(): path for path in _leaf_paths(DEFAULTS)
    }
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in env_to_path:
            raise ConfigError(f"unknown config key: environment variable {name}")
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_by_path(cfg, env_to_path[name], value)


def _require(cond: bool, key: str, why: str) -> None:
    if not cond:
        raise ConfigError(f"invalid config key {key}: {why}")


def validate_config(cfg: dict) -> None:
    bbox = config_get(cfg, "city.bbox")
    _require(
        isinstance(bbox, (list, tuple)) and len(bbox) == 4,
        "city.bbox",
        "expected [lat_min, lat_max, lon_min, lon_max]",
    )
    _require(bbox[0] < bbox[1] and bbox[2] < bbox[3], "city.bbox", "mins must be below maxes")
    _require(
        config_get(cfg, "corpus.source") in ("synthetic", "files"),
        "corpus.source",
        "must be synthetic or files",
    )
    _require(
        config_get(cfg, "edges.mode") in ("directed", "undirected"),
        "edges.mode",
        "must be directed or undirected",
    )
    _require(config_get(cfg, "filters.min_checkins") >= 1, "filters.min_checkins", "must be >= 1")
    mx = config_get(cfg, "filters.max_checkins")
    _require(
        mx is None or mx >= config_get(cfg, "filters.min_checkins"),
        "filters.max_checkins",
        "must be null or >= filters.min_checkins",
    )
    _require(config_get(cfg, "clustering.cutoff_m") > 0, "clustering.cutoff_m", "must be positive")
    _require(config_get(cfg, "grid.cell_deg") > 0, "grid.cell_deg", "must be positive")
    alpha = config_get(cfg, "diversity.alpha")
    _require(alpha > 0 and alpha != 1.0, "diversity.alpha", "must be positive and not 1")
    _require(
        config_get(cfg, "influence.cdf_resolution_m") > 0,
        "influence.cdf_resolution_m",
        "must be positive",
    )
    _require(
        config_get(cfg, "influence.cdf_max_m") >= config_get(cfg, "influence.cdf_resolution_m"),
        "influence.cdf_max_m",
        "must be >= influence.cdf_resolution_m",
    )
    _require(
        config_get(cfg, "influence.random_users_per_location") >= 1,
        "influence.random_users_per_location",
        "must be >= 1",
    )
    for i, w in enumerate(config_get(cfg, "influence.windows")):
        key = f"influence.windows[{i}]"
        _require(isinstance(w, dict), key, "must be a table")
        extra = set(w) - _WINDOW_KEYS
        _require(not extra, key, f"unknown fields {sorted(extra)}")
        _require(w.get("kind") in ("temporal", "spatial"), key, "kind must be temporal or spatial")
        _require(bool(w.get("name")), key, "needs a name")
        if w["kind"] == "temporal":
            _require(
                0 <= w.get("hour_start", -1) <= 23 and 0 <= w.get("hour_end", -1) <= 24,
                key,
                "hour_start/hour_end must be hours",
            )
        else:
            bb = w.get("bbox")
            _require(
                isinstance(bb, (list, tuple)) and len(bb) == 4,
                key,
                "spatial window needs bbox",
            )
    for m in config_get(cfg, "predict.models"):
        _require(m in _KNOWN_MODELS, "predict.models", f"unknown model {m!r}")
    _require(
        config_get(cfg, "predict.strategy") in _KNOWN_STRATEGIES,
        "predict.strategy",
        "unknown strategy",
    )
    for s in config_get(cfg, "predict.compare_strategies"):
        _require(s in _KNOWN_STRATEGIES, "predict.compare_strategies", f"unknown strategy {s!r}")
    _require(config_get(cfg, "predict.learning_rate") > 0, "predict.learning_rate", "must be positive")
    _require(config_get(cfg, "predict.l2") >= 0, "predict.l2", "must be non-negative")
    _require(config_get(cfg, "predict.epochs") >= 1, "predict.epochs", "must be >= 1")
    _require(config_get(cfg, "predict.psmm_radius_m") > 0, "predict.psmm_radius_m", "must be positive")
    ratio = config_get(cfg, "evaluation.ratio")
    _require(0.0 < ratio < 1.0, "evaluation.ratio", "must be in (0, 1)")
    _require(
        config_get(cfg, "evaluation.min_checkins") >= 2,
        "evaluation.min_checkins",
        "must be >= 2",
    )
    _require(
        config_get(cfg, "evaluation.protocol") in ("chronological", "kfold"),
        "evaluation.protocol",
        "must be chronological or kfold",
    )
    _require(config_get(cfg, "evaluation.kfolds") >= 2, "evaluation.kfolds", "must be >= 2")
    _require(
        config_get(cfg, "evaluation.bucket_width") > 0,
        "evaluation.bucket_width",
        "must be positive",
    )
    _require(isinstance(config_get(cfg, "seed"), int), "seed", "must be an integer")


def load_config(
    path: str | Path | None = None, environ: dict[str, str] | None = None
) -> dict:
    """Defaults, then the JSON file at path, then COMMLOC_* env overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        _merge_into(cfg, data)
    _apply_env(cfg, os.environ if environ is None else environ)
    validate_config(cfg)
    return cfg
