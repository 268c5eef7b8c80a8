"""Run configuration: a JSON document with fixed sections and defaults.

Every key has a default below. Unknown sections or keys are rejected, and
the error lists all of them at once.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS = {
    "data": {
        "path": None,        # ATDS file for search; other commands take --data
        "n": 5,              # classes per episode
        "k": 1,              # support images per class
        "q": 15,             # query images per class
        "train_frac": 0.75,  # leading fraction of classes used for meta-training
        "pool_size": 1000,   # meta-training task pool size
        "val_tasks": 20,     # validation tasks used for fitness
    },
    "model": {
        "cells": 2,
        "channels": 8,
        "reduce_positions": None,  # None: default placement for the cell count
    },
    "meta": {
        "lambda_task": 0.01,
        "eta_meta": 0.001,
        "M": 5,
        "B_arch": 4,
        "B_task": 4,
        "E_warm": 1,
        "E_evo": 1,
        "cadence": 4,
        "steps_per_epoch": 8,
        "optimizer": "adam",
    },
    "evo": {
        "K": 128,
        "p_c": 0.5,
        "p_m": 0.5,
        "elite_frac": 0.25,
        "reevaluate": True,
        "val_tasks_per_eval": None,  # None: every validation task each round
    },
    "transfer": {
        "P": 16,
        "E_param": 1,
        "generations": None,  # None: halve until one member remains
        "batch_size": 25,
        "lr": 0.01,
        "p_c": 0.5,
        "p_m": 0.1,
        "train_shots": 5,
        "val_shots": 15,
    },
    "predictor": {
        "enabled": False,
        "trees": 100,
        "train_samples": 100,
        "holdout": 200,
        "repeats": 5,
        "sweep": [50, 100, 200, 300],
    },
    "parallel": {
        "workers": 1,
        "seed": 0,
    },
    "log": {
        "wallclock": True,  # False writes elapsed_s = 0 for byte-reproducible logs
    },
}

_NULLABLE = {("data", "path"), ("model", "reduce_positions"), ("transfer", "generations"),
             ("evo", "val_tasks_per_eval")}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


def _type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _type_name(section, key):
    default = DEFAULTS[section][key]
    if default is None:
        return {"path": "string", "reduce_positions": "list", "generations": "integer",
                "val_tasks_per_eval": "integer"}[key]
    return type(default).__name__


def merge(doc: dict) -> dict:
    """Defaults overlaid with ``doc``; raises listing every bad key."""
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    problems = []
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in doc.items():
        if section not in DEFAULTS:
            problems.append(f"unknown section '{section}'")
            continue
        if not isinstance(body, dict):
            problems.append(f"section '{section}' must be an object")
            continue
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                problems.append(f"unknown key '{section}.{key}'")
                continue
            default = DEFAULTS[section][key]
            if value is None and (section, key) in _NULLABLE:
                cfg[section][key] = None
            elif default is None:
                expected = {"string": str, "list": list, "integer": int}[_type_name(section, key)]
                if not isinstance(value, expected) or isinstance(value, bool):
                    problems.append(f"'{section}.{key}' must be a {_type_name(section, key)} or null")
                else:
                    cfg[section][key] = value
            elif not _type_ok(default, value):
                problems.append(f"'{section}.{key}' must be of type {_type_name(section, key)}")
            else:
                cfg[section][key] = float(value) if isinstance(default, float) else value
    problems += _range_problems(cfg) if not problems else []
    if problems:
        raise ConfigError(problems)
    return cfg


def _range_problems(cfg):
    out = []

    def need(cond, msg):
        if not cond:
            out.append(msg)

    d, m, meta, evo, tr, par = cfg["data"], cfg["model"], cfg["meta"], cfg["evo"], cfg["transfer"], cfg["parallel"]
    need(d["n"] >= 2 and d["k"] >= 1 and d["q"] >= 1, "data.n must be >= 2, data.k and data.q >= 1")
    need(0.0 < d["train_frac"] < 1.0, "data.train_frac must be in (0, 1)")
    need(d["pool_size"] >= 1 and d["val_tasks"] >= 1, "data.pool_size and data.val_tasks must be >= 1")
    need(m["cells"] >= 1 and m["channels"] >= 1, "model.cells and model.channels must be >= 1")
    if m["reduce_positions"] is not None:
        need(all(isinstance(r, int) and 0 <= r < m["cells"] for r in m["reduce_positions"]),
             "model.reduce_positions must be cell indices")
    need(meta["lambda_task"] > 0 and meta["eta_meta"] > 0, "meta learning rates must be positive")
    need(meta["M"] >= 0 and meta["B_arch"] >= 1 and meta["B_task"] >= 1, "meta.M >= 0, meta.B_arch and meta.B_task >= 1")
    need(meta["E_warm"] >= 0 and meta["E_evo"] >= 0, "meta.E_warm and meta.E_evo must be >= 0")
    need(meta["cadence"] >= 1 and meta["steps_per_epoch"] >= 1, "meta.cadence and meta.steps_per_epoch must be >= 1")
    need(meta["optimizer"] in ("adam", "sgd"), "meta.optimizer must be 'adam' or 'sgd'")
    need(evo["K"] >= 4, "evo.K must be >= 4")
    for key in ("p_c", "p_m"):
        need(0.0 <= evo[key] <= 1.0, f"evo.{key} must be in [0, 1]")
        need(0.0 <= tr[key] <= 1.0, f"transfer.{key} must be in [0, 1]")
    need(0.0 < evo["elite_frac"] <= 1.0, "evo.elite_frac must be in (0, 1]")
    need(tr["P"] >= 1 and tr["P"] & (tr["P"] - 1) == 0, "transfer.P must be a power of two")
    need(tr["E_param"] >= 1, "transfer.E_param must be >= 1")
    need(tr["train_shots"] >= 1 and tr["val_shots"] >= 1, "transfer shots must be >= 1")
    need(cfg["predictor"]["trees"] >= 1, "predictor.trees must be >= 1")
    need(par["workers"] >= 1, "parallel.workers must be >= 1")
    return out


def load(path=None) -> dict:
    if path is None:
        return merge({})
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: malformed JSON ({exc})"]) from exc
    return merge(doc)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
