"""Toolkit configuration: one TOML file supplies defaults, flags override.

Every source of randomness is a named seed in the config so each command
is reproducible from (config, flags) alone; nothing reads the clock.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .geometry import ArrayLayout, FingerChain, default_chain, preset_layout
from .models import TrainSpec
from .synth import PressScript, SensorModelParams, default_params, press_script, ramp_script


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2 in the CLI."""


DEFAULTS: dict = {
    "layout": {"preset": "fingertip"},
    "chain": {},
    "sensor": {"regime": "curved", "seed": 0},
    "scripts": {
        "default": {"type": "press", "duration": 150.0, "peak_force": 5.0,
                    "sites": 4, "seed": 0},
        "flat": {"type": "press", "duration": 150.0, "peak_force": 5.0,
                 "sites": 1, "seed": 0},
        "short": {"type": "press", "duration": 20.0, "peak_force": 5.0,
                  "sites": 2, "seed": 0},
        "ramp": {"type": "ramp", "duration": 10.0, "peak_force": 5.0},
    },
    "pipeline": {"cutoff_hz": 10.0},
    "train": {"batch_size": 256, "learning_rate": 2.5e-4, "epochs": 80,
              "seed": 0, "damping": 33.0},
    "controller": {"k_i": 4.0, "k_p": 0.5, "k_d": 0.02,
                   "f_d": [0.0, 0.0, -1.5], "torque_limit": 0.35,
                   "integral_rate_limit": 5.0, "integral_clamp": 10.0,
                   "control_rate": 100.0},
    "sim": {"duration": 16.0, "step_time": 1.5, "window": 13.0,
            "contact": "rigid", "seed": 0, "train_script": "default"},
    "seeds": {"split": 100},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class ToolConfig:
    data: dict
    source_hash: str

    @classmethod
    def load(cls, path: str | None = None) -> "ToolConfig":
        if path is None:
            blob = json.dumps(DEFAULTS, sort_keys=True).encode()
            return cls(DEFAULTS, hashlib.sha256(blob).hexdigest()[:16])
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            user = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls(_merge(DEFAULTS, user), hashlib.sha256(raw).hexdigest()[:16])

    # -- sections -----------------------------------------------------------

    def layout(self) -> ArrayLayout:
        sec = self.data["layout"]
        if "file" in sec:
            if not os.path.exists(sec["file"]):
                raise ConfigError(f"layout file not found: {sec['file']}")
            return ArrayLayout.load(sec["file"])
        try:
            return preset_layout(sec.get("preset", "fingertip"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def layout_for(self, array_id: str) -> ArrayLayout:
        """Layout matching a dataset/recording, preferring the preset by id."""
        try:
            return preset_layout(array_id)
        except ValueError:
            return self.layout()

    def chain(self) -> FingerChain:
        sec = self.data["chain"]
        if "file" in sec:
            if not os.path.exists(sec["file"]):
                raise ConfigError(f"chain file not found: {sec['file']}")
            return FingerChain.load(sec["file"])
        return default_chain()

    def sensor_params(self, layout: ArrayLayout,
                      seed: int | None = None) -> SensorModelParams:
        sec = dict(self.data["sensor"])
        regime = sec.pop("regime", "curved")
        if seed is None:
            seed = int(sec.pop("seed", 0))
        else:
            sec.pop("seed", None)
        try:
            params = default_params(layout, regime, seed=seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        overrides = {k: v for k, v in sec.items()
                     if k in {f.name for f in dataclasses.fields(SensorModelParams)}}
        return dataclasses.replace(params, **overrides) if overrides else params

    def script(self, name: str, layout: ArrayLayout,
               seed: int | None = None) -> PressScript:
        scripts = self.data["scripts"]
        if name not in scripts:
            raise ConfigError(f"unknown script {name!r}; available: {sorted(scripts)}")
        sec = dict(scripts[name])
        kind = sec.pop("type", "press")
        if seed is not None:
            sec["seed"] = seed
        if kind == "press":
            return press_script(layout, duration=float(sec.get("duration", 150.0)),
                                peak_force=float(sec.get("peak_force", 5.0)),
                                sites=int(sec.get("sites", 4)),
                                seed=int(sec.get("seed", 0)))
        if kind == "ramp":
            direction = sec.get("direction")
            if direction is None:
                i = layout.n // 2
                direction = layout.rotations[i, :, 2].tolist()
                contact = layout.taxel_positions[i]
            else:
                contact = np.asarray(sec.get("contact", [0.0, 0.0, 0.0]), dtype=float)
            return ramp_script(np.asarray(direction, dtype=float),
                               peak=float(sec.get("peak_force", 5.0)),
                               duration=float(sec.get("duration", 10.0)),
                               contact=contact)
        raise ConfigError(f"unknown script type {kind!r} (use 'press' or 'ramp')")

    def train_spec(self, seed: int | None = None,
                   epochs: int | None = None) -> TrainSpec:
        sec = self.data["train"]
        return TrainSpec(
            batch_size=int(sec["batch_size"]),
            learning_rate=float(sec["learning_rate"]),
            epochs=int(epochs if epochs is not None else sec["epochs"]),
            seed=int(seed if seed is not None else sec["seed"]),
        )

    def damping(self) -> float:
        return float(self.data["train"]["damping"])

    def cutoff_hz(self) -> float:
        return float(self.data["pipeline"]["cutoff_hz"])

    def controller_overrides(self) -> dict:
        sec = self.data["controller"]
        return {
            "k_i": np.full(3, float(sec["k_i"])),
            "k_p": np.full(4, float(sec["k_p"])),
            "k_d": np.full(4, float(sec["k_d"])),
            "f_d": np.asarray(sec["f_d"], dtype=float),
            "torque_limit": float(sec["torque_limit"]),
            "integral_rate_limit": float(sec["integral_rate_limit"]),
            "integral_clamp": float(sec["integral_clamp"]),
            "control_rate": float(sec["control_rate"]),
        }

    def sim_section(self) -> dict:
        return dict(self.data["sim"])

    def split_seed(self) -> int:
        return int(self.data["seeds"]["split"])

    def meta(self) -> dict:
        from . import __version__

        return {"toolkit_version": __version__, "config_hash": self.source_hash}
