"""Experiment configuration: a flat TOML document of typed keys.

Sweep axes (``c`` and ``p_c``) accept a number, a list, or an inclusive
range table such as ``c = {start = 0.1, stop = 10.0, step = 0.1}``.
See the README for the full key reference.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import ConfigError
from .network import MODES as DELAY_MODES, ChannelConfig
from .objective import ObjectiveSet, make_objective
from .runtime import (
    ACTIVATION_KINDS,
    DIVERGENCE_GUARD,
    SCHEDULE_KINDS,
    ActivationPolicy,
    StepSchedule,
)
from .seeding import cell_key, trial_seed

MAX_TOTAL_TRIALS = 10**6
EXPERIMENT_MODES = ("dspg", "consensus", "diagnostics")
OBJECTIVE_KINDS = ("quadratic-random", "quartic-1d")
REQUIRED = ("mode", "d", "objective", "c", "p_c", "schedule", "iterations", "trials", "master_seed")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    d: int
    objective: str
    c: tuple[float, ...]
    p_c: tuple[float, ...]
    schedule: str
    iterations: int
    trials: int
    master_seed: int
    objective_seed: int = 0
    objective_shift: Any = None
    activation: str = "all-active"
    p_active: float = 1.0
    gamma0: float = 0.001
    switch_tick: int = 5000
    decay_a: float = 1.0
    decay_b: float = 100.0
    decay_origin: str = "switch"
    subsample_stride: int = 100
    output_path: str = "results"
    delay_mode: str = "erasure-latest"
    max_queue_delay: int | None = None
    init: tuple[float, ...] | None = None
    init_low: float = -5.0
    init_high: float = 5.0
    seed_scope: str = "trial"
    shares: str = "sampled"
    divergence_guard: float = DIVERGENCE_GUARD
    diag_points: int = 5
    diag_radius: float = 1.0
    diag_samples: int = 10_000
    batch_rows: int = 4096
    verbose: bool = False

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def cells(self) -> list[tuple[float, float]]:
        """Grid cells in ``c``-major order."""
        return [(c, p) for c in self.c for p in self.p_c]

    @property
    def total_trials(self) -> int:
        return len(self.c) * len(self.p_c) * self.trials

    def objective_set(self) -> ObjectiveSet:
        return make_objective(self.objective, self.d, self.objective_seed, self.objective_shift)

    def step_schedule(self) -> StepSchedule:
        return StepSchedule(
            kind=self.schedule,
            gamma0=self.gamma0,
            switch_tick=self.switch_tick,
            a=self.decay_a,
            b=self.decay_b,
            decay_origin=self.decay_origin,
        )

    def activation_policy(self) -> ActivationPolicy:
        return ActivationPolicy(self.activation, self.p_active)

    def channel_config(self, p_c: float | None = None) -> ChannelConfig:
        return ChannelConfig(
            p_success=self.p_c[0] if p_c is None else p_c,
            mode=self.delay_mode,
            max_queue_delay=self.max_queue_delay,
        )

    def trial_seed(self, trial: int, c: float, p_c: float) -> int:
        key = cell_key(c, p_c) if self.seed_scope == "cell" else None
        return trial_seed(self.master_seed, trial, key)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _expand_axis(name: str, raw, errors: list[str]) -> tuple[float, ...] | None:
    if isinstance(raw, bool):
        errors.append(f"{name} must be a number, list or range table")
        return None
    if isinstance(raw, (int, float)):
        return (float(raw),)
    if isinstance(raw, list):
        if not raw:
            errors.append(f"{name} list must be nonempty")
            return None
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
            errors.append(f"{name} list must contain only numbers")
            return None
        return tuple(float(v) for v in raw)
    if isinstance(raw, dict):
        if set(raw) != {"start", "stop", "step"}:
            errors.append(f"{name} range table needs exactly start, stop and step")
            return None
        start, stop, step = (float(raw[k]) for k in ("start", "stop", "step"))
        if not step > 0 or stop < start:
            errors.append(f"{name} range needs step > 0 and stop >= start")
            return None
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + k * step, 12) for k in range(count))
    errors.append(f"{name} must be a number, list or range table")
    return None


def _want(kind, value) -> bool:
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is bool:
        return isinstance(value, bool)
    return isinstance(value, kind)


_TYPES = {
    "mode": str, "d": int, "objective": str, "schedule": str, "iterations": int, "trials": int,
    "master_seed": int, "objective_seed": int, "activation": str, "p_active": float,
    "gamma0": float, "switch_tick": int, "decay_a": float, "decay_b": float,
    "decay_origin": str, "subsample_stride": int, "output_path": str, "delay_mode": str,
    "max_queue_delay": int, "init_low": float, "init_high": float, "seed_scope": str,
    "shares": str, "divergence_guard": float, "diag_points": int, "diag_radius": float,
    "diag_samples": int, "batch_rows": int, "verbose": bool,
}

_CHOICES = {
    "mode": EXPERIMENT_MODES,
    "objective": OBJECTIVE_KINDS,
    "schedule": SCHEDULE_KINDS,
    "activation": ACTIVATION_KINDS,
    "decay_origin": ("switch", "zero"),
    "delay_mode": DELAY_MODES,
    "seed_scope": ("trial", "cell"),
    "shares": ("sampled", "mean"),
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate a parsed document; raises :class:`ConfigError` listing every problem."""
    errors: list[str] = []
    unknown = sorted(set(doc) - set(_FIELDS))
    for key in unknown:
        errors.append(f"unknown key {key!r}")
    for key in REQUIRED:
        if key not in doc:
            errors.append(f"missing required key {key!r}")

    values: dict[str, Any] = {}
    for key, raw in doc.items():
        if key in unknown:
            continue
        if key in ("c", "p_c"):
            values[key] = _expand_axis(key, raw, errors)
        elif key == "init":
            if not (isinstance(raw, list) and all(_want(float, v) for v in raw)):
                errors.append("init must be a list of numbers")
            else:
                values[key] = tuple(float(v) for v in raw)
        elif key == "objective_shift":
            values[key] = raw
        elif not _want(_TYPES[key], raw):
            errors.append(f"{key} must be of type {_TYPES[key].__name__}, got {raw!r}")
        else:
            values[key] = float(raw) if _TYPES[key] is float else raw
            if key in _CHOICES and raw not in _CHOICES[key]:
                errors.append(f"{key} must be one of {list(_CHOICES[key])}, got {raw!r}")

    def bad_range(key, ok, bounds):
        if key in values and values[key] is not None and not ok(values[key]):
            errors.append(f"{key} = {values[key]!r} out of range: {key} {bounds}")

    bad_range("d", lambda v: v >= 1, ">= 1")
    bad_range("iterations", lambda v: v >= 0, ">= 0")
    bad_range("trials", lambda v: v >= 1, ">= 1")
    bad_range("p_active", lambda v: 0 < v <= 1, "in (0, 1]")
    bad_range("gamma0", lambda v: 0 < v <= 1, "in (0, 1]")
    bad_range("switch_tick", lambda v: v >= 0, ">= 0")
    bad_range("decay_a", lambda v: v > 0, "> 0")
    bad_range("decay_b", lambda v: v >= 0, ">= 0")
    bad_range("subsample_stride", lambda v: v >= 1, ">= 1")
    bad_range("max_queue_delay", lambda v: v >= 1, ">= 1")
    bad_range("divergence_guard", lambda v: v > 0, "> 0")
    bad_range("diag_points", lambda v: v >= 1, ">= 1")
    bad_range("diag_radius", lambda v: v > 0, "> 0")
    bad_range("diag_samples", lambda v: v >= 2, ">= 2")
    bad_range("batch_rows", lambda v: v >= 1, ">= 1")
    bad_range("master_seed", lambda v: v >= 0, ">= 0")
    bad_range("objective_seed", lambda v: v >= 0, ">= 0")
    if values.get("c"):
        bad = [v for v in values["c"] if not (v > 0 and math.isfinite(v))]
        if bad:
            errors.append(f"c values {bad} out of range: c in (0, inf)")
    if values.get("p_c"):
        bad = [v for v in values["p_c"] if not 0 < v <= 1]
        if bad:
            errors.append(f"p_c values {bad} out of range: p_c in (0, 1]")
    if "init_low" in values and "init_high" in values and values["init_low"] >= values["init_high"]:
        errors.append("init_low must be below init_high")
    d = values.get("d")
    if isinstance(d, int) and values.get("init") is not None and len(values["init"]) != d:
        errors.append(f"init must have exactly d = {d} entries")
    if values.get("objective") == "quartic-1d" and isinstance(d, int) and d != 1:
        errors.append("objective quartic-1d requires d = 1")
    if values.get("delay_mode") == "delayed-queue" and values.get("max_queue_delay") is None:
        errors.append("delay_mode delayed-queue requires max_queue_delay")
    if values.get("delay_mode", "erasure-latest") == "erasure-latest" and values.get("max_queue_delay") is not None:
        errors.append("max_queue_delay is only allowed with delay_mode delayed-queue")
    shift = values.get("objective_shift")
    if shift is not None and isinstance(d, int):
        try:
            arr = np.asarray(shift, dtype=float)
        except (TypeError, ValueError):
            errors.append("objective_shift must be numeric")
        else:
            if arr.shape not in ((d,), (d, d)):
                errors.append(f"objective_shift must have shape ({d},) or ({d}, {d})")
            values["objective_shift"] = arr.tolist()
    if values.get("c") and values.get("p_c") and isinstance(values.get("trials"), int):
        total = len(values["c"]) * len(values["p_c"]) * values["trials"]
        if total > MAX_TOTAL_TRIALS:
            errors.append(f"grid has {total} trials; at most {MAX_TOTAL_TRIALS} are allowed")

    if not errors:
        try:
            cfg = ExperimentConfig(**values)
            cfg.step_schedule()
            cfg.activation_policy()
        except (TypeError, ValueError) as exc:
            errors.append(str(exc))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"malformed config: {exc}"]) from exc
    nested = [k for k, v in doc.items() if isinstance(v, dict) and k not in ("c", "p_c")]
    if nested:
        raise ConfigError([f"config must be flat; section or table {k!r} not allowed" for k in nested])
    return config_from_dict(doc)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
