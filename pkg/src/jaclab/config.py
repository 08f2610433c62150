"""JSON experiment configuration with per-environment defaults.

Every section is optional; missing keys fall back to the defaults for the
chosen environment, and unknown keys are rejected with the line they occur on.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .environments import EnvKind

FORMAT_VERSION = 1

ESTIMATOR_TYPES = ("true", "broyden", "llknn", "neural_jacobian", "neural_kinematics")


class ConfigError(ValueError):
    pass


_NETWORK_KEYS = {"hidden_layers", "hidden_width", "activation", "embedding"}
_TRAINING_KEYS = {"epochs", "learning_rate", "beta1", "beta2", "epsilon", "batch_size",
                  "weight_decay", "validation_fraction"}
_ESTIMATOR_KEYS = {
    "true": {"type"},
    "broyden": {"type", "alpha", "gate", "probe_angle"},
    "llknn": {"type", "k"},
    "neural_jacobian": {"type", "beta", "k", "network", "training"},
    "neural_kinematics": {"type", "network", "training"},
}
_TOP_KEYS = {"format_version", "env", "dt", "initial_q", "chain", "seeds", "collection",
             "estimators", "evaluation", "output_dir"}
_COLLECTION_KEYS = {"n_traj", "traj_len", "ou", "policy", "perturb_prob", "perturb_std"}
_OU_KEYS = {"sigma", "mu", "theta"}
_EVAL_KEYS = {"targets_per_seed", "gain", "max_steps", "null_space", "y", "thresholds",
              "buckets", "estimators"}
_THRESHOLD_KEYS = {"low", "high", "step"}
_CHAIN_ROW_KEYS = {"alpha", "a", "d", "theta_offset", "actuated"}

# per-environment values: (n_traj, hidden layers, epochs, threshold high, buckets, llknn k,
# weight decay tanh-NK, weight decay relu-NK)
_ENV_DEFAULTS = {
    EnvKind.SINGLE_POINT7: (1000, 2, 30, 0.1, [0.0, 0.5, 1.0, 1.5, 2.0], 128, 0.0, 1e-4),
    EnvKind.MULTI_POINT7: (2000, 4, 40, 0.25, [0.0, 1.0, 2.0, 3.0, 4.0], 128, 1e-6, 1e-5),
    EnvKind.PLANAR2: (100, 1, 45, 0.1, [0.0, 0.25, 0.5, 0.75, 1.0], 50, 0.0, 1e-4),
}


def default_config(env: str | EnvKind) -> dict[str, Any]:
    kind = EnvKind(env)
    n_traj, layers, epochs, high, buckets, llknn_k, wd_tanh, wd_relu = _ENV_DEFAULTS[kind]

    def training(wd=0.0):
        return {"epochs": epochs, "learning_rate": 0.001, "beta1": 0.9, "beta2": 0.999,
                "epsilon": 1e-8, "batch_size": 32, "weight_decay": wd,
                "validation_fraction": 0.15}

    def network(act):
        return {"hidden_layers": layers, "hidden_width": 100, "activation": act,
                "embedding": "trig"}

    return {
        "format_version": FORMAT_VERSION,
        "env": kind.value,
        "dt": 0.05,
        "initial_q": None,
        "chain": None,
        "seeds": [0],
        "collection": {"n_traj": n_traj, "traj_len": 100,
                       "ou": {"sigma": 1.0, "mu": 0.0, "theta": 0.15},
                       "policy": "ou", "perturb_prob": 0.05, "perturb_std": 0.1},
        "estimators": {
            "Broyden": {"type": "broyden", "alpha": 0.1, "gate": 0.01, "probe_angle": 0.1},
            "LL-KNN": {"type": "llknn", "k": llknn_k},
            "NJ": {"type": "neural_jacobian", "beta": 0.0, "k": 10,
                   "network": network("relu"), "training": training()},
            "Bi-NJ": {"type": "neural_jacobian", "beta": 1.0, "k": 10,
                      "network": network("relu"), "training": training()},
            "Relu-NK": {"type": "neural_kinematics", "network": network("relu"),
                        "training": training(wd_relu)},
            "Tanh-NK": {"type": "neural_kinematics", "network": network("tanh"),
                        "training": training(wd_tanh)},
            "TJ": {"type": "true"},
        },
        "evaluation": {"targets_per_seed": 110, "gain": 1.0, "max_steps": 200,
                       "null_space": False, "y": None,
                       "thresholds": {"low": 0.001, "high": high, "step": 0.001},
                       "buckets": buckets, "estimators": None},
        "output_dir": "results",
    }


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


@dataclass
class ExperimentConfig:
    data: dict[str, Any]
    source: str = "<defaults>"

    @property
    def env(self) -> EnvKind:
        return EnvKind(self.data["env"])

    @property
    def seeds(self) -> list[int]:
        return list(self.data["seeds"])

    @property
    def collection(self) -> dict:
        return self.data["collection"]

    @property
    def estimators(self) -> dict[str, dict]:
        return self.data["estimators"]

    @property
    def evaluation(self) -> dict:
        return self.data["evaluation"]

    def eval_estimators(self) -> list[str]:
        names = self.evaluation.get("estimators")
        return list(self.estimators) if names is None else list(names)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)


class _Validator:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source

    def fail(self, key: str, msg: str):
        line = _line_of(self.text, key) if self.text else 0
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: {msg}")

    def keys(self, obj, allowed: set[str], section: str):
        if not isinstance(obj, dict):
            self.fail(section, f"'{section}' must be an object")
        for k in obj:
            if k not in allowed:
                self.fail(k, f"unknown key '{k}' in {section}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "estimators":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _merge_estimators(defaults: dict, given: dict, val: _Validator) -> dict:
    """Estimators listed in the config replace the default set; their fields merge
    over the defaults of a same-named default estimator or of their type."""
    by_type = {}
    for spec in defaults.values():
        by_type.setdefault(spec["type"], spec)
    out = {}
    for name, spec in given.items():
        if not isinstance(spec, dict):
            val.fail(name, f"estimator '{name}' must be an object")
        etype = spec.get("type", defaults.get(name, {}).get("type"))
        if etype not in ESTIMATOR_TYPES:
            val.fail(name, f"estimator '{name}' has unknown type {etype!r}")
        base = defaults.get(name) if defaults.get(name, {}).get("type") == etype else by_type[etype]
        merged = _merge(base, spec)
        merged["type"] = etype
        out[name] = merged
    return out


def parse_config(raw: dict | None = None, text: str = "", source: str = "<dict>") -> ExperimentConfig:
    raw = dict(raw or {})
    val = _Validator(text, source)
    val.keys(raw, _TOP_KEYS, "config")
    version = raw.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        val.fail("format_version", f"unsupported format_version {version}")
    try:
        kind = EnvKind(raw.get("env", "planar2"))
    except ValueError:
        val.fail("env", f"unknown env {raw.get('env')!r}")
    defaults = default_config(kind)
    for section, allowed in (("collection", _COLLECTION_KEYS), ("evaluation", _EVAL_KEYS)):
        if section in raw:
            val.keys(raw[section], allowed, section)
    if "ou" in raw.get("collection", {}):
        val.keys(raw["collection"]["ou"], _OU_KEYS, "ou")
    if "thresholds" in raw.get("evaluation", {}):
        val.keys(raw["evaluation"]["thresholds"], _THRESHOLD_KEYS, "thresholds")
    estimators = raw.pop("estimators", None)
    data = _merge(defaults, raw)
    if estimators is not None:
        if not isinstance(estimators, dict) or not estimators:
            val.fail("estimators", "'estimators' must be a nonempty object")
        data["estimators"] = _merge_estimators(defaults["estimators"], estimators, val)
    for name, spec in data["estimators"].items():
        val.keys(spec, _ESTIMATOR_KEYS[spec["type"]], name)
        if "network" in spec:
            val.keys(spec["network"], _NETWORK_KEYS, "network")
        if "training" in spec:
            val.keys(spec["training"], _TRAINING_KEYS, "training")
    _check_values(data, val)
    return ExperimentConfig(data, source)


def _check_values(data: dict, val: _Validator) -> None:
    seeds = data["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        val.fail("seeds", "'seeds' must be a nonempty list of nonnegative integers")
    if not data["dt"] > 0:
        val.fail("dt", "'dt' must be positive")
    col = data["collection"]
    if int(col["n_traj"]) < 1 or int(col["traj_len"]) < 1:
        val.fail("n_traj", "n_traj and traj_len must be >= 1")
    if col["policy"] not in ("ou", "perturbed_true"):
        val.fail("policy", f"unknown collection policy {col['policy']!r}")
    ev = data["evaluation"]
    if int(ev["targets_per_seed"]) < 1 or int(ev["max_steps"]) < 1:
        val.fail("targets_per_seed", "targets_per_seed and max_steps must be >= 1")
    if not ev["gain"] > 0:
        val.fail("gain", "'gain' must be positive")
    names = ev.get("estimators")
    if names is not None:
        for n in names:
            if n not in data["estimators"]:
                val.fail("estimators", f"evaluation refers to unconfigured estimator '{n}'")
    chain = data.get("chain")
    if chain is not None:
        if data["env"] == EnvKind.PLANAR2.value:
            val.fail("chain", "custom DH chains apply to the 7-DOF environments only")
        if not isinstance(chain, list) or not chain:
            val.fail("chain", "'chain' must be a nonempty list of DH rows")
        for row in chain:
            val.keys(row, _CHAIN_ROW_KEYS, "chain")
            if not {"alpha", "a", "d"} <= set(row):
                val.fail("chain", "each DH row needs alpha, a and d")
        if sum(bool(r.get("actuated", True)) for r in chain) != 7:
            val.fail("chain", "7-DOF environments need exactly 7 actuated rows")
    for name, spec in data["estimators"].items():
        if spec["type"] in ("llknn", "neural_jacobian") and int(spec["k"]) < 2:
            val.fail(name, f"estimator '{name}': k must be >= 2")
        if spec["type"] == "neural_jacobian" and spec["beta"] < 0:
            val.fail(name, f"estimator '{name}': beta must be >= 0")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return parse_config(raw, text, str(path))
