"""Strict JSON run configuration.

Layout::

    {
      "seed": 0,
      "output_dir": "out",
      "encoder": {...EncoderConfig fields..., "dtype": "float64"},
      "attack":  {...AttackConfig fields...},
      "harness": {...TaskConfig fields..., "trials", "epsilons", "iterations",
                  "strategies", "alpha", "ratio", "include_clean", "include_random"}
    }

Every block is optional. Unknown keys, wrong types and invariant violations
raise :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, Init, Strategy, budget
from .encoder import AGGREGATIONS, EncoderConfig
from .harness import CONDITIONS, Condition, TaskConfig


class ConfigError(ValueError):
    pass


# kind tags: int, float, budget (number or "a/b"), bool, str, or a tuple of allowed strings
_ENCODER_KEYS = {
    "image_h": "int", "image_w": "int", "patch_size": "int", "embed_dim": "int",
    "num_blocks": "int", "num_heads": "int", "proj_dim": "int", "seed": "int",
    "mlp_ratio": "int", "proj_bias": "bool", "sincos_pos": "bool", "final_norm": "bool",
    "dtype": ("float64", "float32"),
}
_ATTACK_KEYS = {
    "epsilon": "budget", "alpha": "budget", "iterations": "int",
    "strategy": tuple(s.value for s in Strategy), "topk_ratio": "float",
    "init": tuple(i.value for i in Init), "gaussian_sigma": "budget", "loss_eps": "float",
    "seed": "int", "attention_block": "int", "aggregation": AGGREGATIONS,
    "recompute_mask_per_iter": "bool", "similarity": ("flat", "per_patch"),
}
_TASK_KEYS = {
    "max_steps": "int", "step_size": "float", "success_radius": "float", "margin": "float",
    "min_start_distance": "float", "num_distractors": "int", "goal": "point",
    "background": "float", "agent_radius": "float", "goal_radius": "float",
    "train_scenes": "int", "ridge": "float",
}
_SUITE_KEYS = {
    "trials": "int", "epsilons": "budget_list", "iterations": "int_list",
    "strategies": "condition_list", "alpha": "budget", "ratio": "float",
    "include_clean": "bool", "include_random": "bool",
}


def _coerce(block: str, key: str, kind, value):
    where = f"{block}.{key}" if block else key
    if isinstance(kind, tuple):
        if value not in kind:
            raise ConfigError(f"{where}: must be one of {list(kind)}, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if kind == "budget":
        if value is None and key == "gaussian_sigma":
            return None
        try:
            return budget(value)
        except (TypeError, ValueError, ZeroDivisionError):
            raise ConfigError(f"{where}: expected a number or fraction like \"4/255\", got {value!r}")
    if kind == "point":
        if value is None:
            return None
        if not isinstance(value, list) or len(value) != 2:
            raise ConfigError(f"{where}: expected [x, y] or null, got {value!r}")
        return tuple(_coerce(block, key + "[]", "float", v) for v in value)
    if kind.endswith("_list"):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        inner = kind[:-5]
        if inner == "condition":
            inner = CONDITIONS[2:]
        return [_coerce(block, key + "[]", inner, v) for v in value]
    raise AssertionError(kind)


def _parse_block(block: str, raw, schema: dict) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{block}: expected an object")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{block}: unknown key(s) {unknown}")
    return {k: _coerce(block, k, schema[k], v) for k, v in raw.items()}


@dataclass
class SuiteConfig:
    trials: int = 20
    epsilons: list[float] = field(default_factory=lambda: [2 / 255, 4 / 255, 8 / 255])
    iterations: list[int] = field(default_factory=lambda: [6])
    strategies: list[str] = field(default_factory=lambda: ["ADVLA", "AW", "TKM", "TKL"])
    alpha: float = 1 / 255
    ratio: float = 0.1
    include_clean: bool = True
    include_random: bool = True

    def conditions(self) -> list[Condition]:
        conds = [Condition("CLEAN")] if self.include_clean else []
        for e in self.epsilons:
            if self.include_random:
                conds.append(Condition("RANDOM", epsilon=e, alpha=0.0, iters=0))
            for t in self.iterations:
                conds += [Condition(s, epsilon=e, alpha=min(self.alpha, e), iters=t, ratio=self.ratio)
                          for s in self.strategies]
        return conds


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dtype: str = "float64"
    attack: AttackConfig = field(default_factory=AttackConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    output_dir: str = "out"
    seed: int = 0

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    top = {"seed", "output_dir", "encoder", "attack", "harness"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    seed = _coerce("", "seed", "int", raw.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed: must be >= 0")
    out_dir = _coerce("", "output_dir", "str", raw.get("output_dir", "out"))

    enc_kw = _parse_block("encoder", raw.get("encoder"), _ENCODER_KEYS)
    dtype = enc_kw.pop("dtype", "float64")
    atk_kw = _parse_block("attack", raw.get("attack"), _ATTACK_KEYS)
    atk_kw.setdefault("seed", seed)
    harness = raw.get("harness")
    if harness is not None and not isinstance(harness, dict):
        raise ConfigError("harness: expected an object")
    harness = harness or {}
    unknown = sorted(set(harness) - set(_TASK_KEYS) - set(_SUITE_KEYS))
    if unknown:
        raise ConfigError(f"harness: unknown key(s) {unknown}")
    task_kw = _parse_block("harness", {k: v for k, v in harness.items() if k in _TASK_KEYS}, _TASK_KEYS)
    suite_kw = _parse_block("harness", {k: v for k, v in harness.items() if k in _SUITE_KEYS}, _SUITE_KEYS)

    try:
        encoder = EncoderConfig(**enc_kw)
    except ValueError as exc:
        raise ConfigError(f"encoder: {exc}") from exc
    try:
        attack = AttackConfig(**atk_kw)
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from exc
    task = TaskConfig(**task_kw)
    _check_task(task)
    suite = SuiteConfig(**suite_kw)
    _check_suite(suite)
    return RunConfig(encoder, dtype, attack, task, suite, out_dir, seed)


def _check_task(t: TaskConfig) -> None:
    if t.max_steps < 0:
        raise ConfigError("harness.max_steps: must be >= 0")
    for key in ("step_size", "success_radius", "ridge"):
        if not getattr(t, key) > 0:
            raise ConfigError(f"harness.{key}: must be > 0")
    if not 0 <= t.margin < 0.5:
        raise ConfigError("harness.margin: must be in [0, 0.5)")
    if t.train_scenes < 200:
        raise ConfigError("harness.train_scenes: must be >= 200")
    if not 0.0 <= t.background <= 1.0:
        raise ConfigError("harness.background: must be in [0, 1]")
    for key in ("agent_radius", "goal_radius"):
        if getattr(t, key) < 2.0:
            raise ConfigError(f"harness.{key}: must be >= 2 pixels")
    if t.num_distractors < 0:
        raise ConfigError("harness.num_distractors: must be >= 0")


def _check_suite(s: SuiteConfig) -> None:
    if s.trials < 1:
        raise ConfigError("harness.trials: must be >= 1")
    if any(not 0 <= e <= 1 for e in s.epsilons):
        raise ConfigError("harness.epsilons: each must be in [0, 1]")
    if any(t < 0 for t in s.iterations):
        raise ConfigError("harness.iterations: each must be >= 0")
    if not 0 < s.ratio <= 1:
        raise ConfigError("harness.ratio: must be in (0, 1]")
    if s.alpha < 0:
        raise ConfigError("harness.alpha: must be >= 0")


def parse_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)
