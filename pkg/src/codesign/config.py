"""Run configuration: one YAML file with fixed sections, merged onto defaults.

Unknown keys are rejected. ``resolve`` turns the merged mapping into the
objects each stage needs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from . import controller as ctl
from .cost_model import EnergyTable, HardwareModel
from .design_space import (
    DEFAULT_DATAFLOWS,
    DEFAULT_GBUF_KB,
    DEFAULT_PE_ARRAYS,
    DEFAULT_RBUF_BYTES,
    AcceleratorConfig,
    DecisionSchema,
    SchemaError,
    build_schema,
)
from .network_lowering import MacroConfig, TensorShape
from .search import PRESETS, RewardSpec, SearchConfig, SearchConfigError
from .surrogate import DEFAULT_SIGMA2_GRID, DEFAULT_TAU_GRID

MODES = ("rl", "random", "two-stage")


class ConfigError(ValueError):
    """Schema violation in a run configuration."""


DEFAULTS: dict[str, Any] = {
    "space": {
        "B": 7,
        "n_cells": 4,
        "r_cells": 2,
        "pe_arrays": [list(p) for p in DEFAULT_PE_ARRAYS],
        "g_buf_kb": list(DEFAULT_GBUF_KB),
        "r_buf_bytes": list(DEFAULT_RBUF_BYTES),
        "dataflows": [d.name for d in DEFAULT_DATAFLOWS],
    },
    "macro": {
        "input_shape": [32, 32, 3],
        "stem_channels": 36,
        "num_classes": 10,
        "reduction_positions": None,
    },
    "hardware": {
        "clock_ghz": 1.0,
        "dram_bandwidth_gbps": 16.0,
        "bytes_per_element": 2,
        "energy_table": {"mac_pj": 1.0, "rf_access_pj": 1.0, "gbuf_access_pj": 6.0, "dram_access_pj": 200.0},
    },
    "surrogate": {
        "n_samples": 3600,
        "n_train": 3000,
        "seed": 0,
        "tau_grid": list(DEFAULT_TAU_GRID),
        "sigma2_grid": list(DEFAULT_SIGMA2_GRID),
        "log_target": True,
        "max_select_rows": 1000,
        "max_attempts": 100,
    },
    # alpha/omega left null are taken from the preset
    "reward": {
        "preset": "balanced",
        "alpha1": None,
        "omega1": None,
        "alpha2": None,
        "omega2": None,
        "t_lat": 1.2,
        "t_eer": 9.0,
        "entropy_weight": 1e-4,
    },
    "controller": {
        "lr": ctl.LEARNING_RATE,
        "temperature": ctl.TEMPERATURE,
        "tanh_c": ctl.TANH_C,
        "baseline_decay": ctl.BASELINE_DECAY,
        "batch_size": 5,
        "hidden": ctl.HIDDEN,
        "embed": ctl.EMBED,
    },
    "run": {
        "iterations": 12000,
        "seed": 0,
        "top_n": 10,
        "mode": "rl",
        "use_surrogate": True,
        "hard_screen": True,
        "oracle": "synthetic-default",
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then ``overrides`` (same nesting)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a mapping")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    resolve(cfg)
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


@dataclass(frozen=True)
class Resolved:
    schema: DecisionSchema
    macro: MacroConfig
    hw: HardwareModel
    search: SearchConfig
    mode: str
    surrogate: dict


def _reward(section: dict) -> RewardSpec:
    name = section["preset"]
    if name not in PRESETS:
        raise ConfigError(f"reward.preset must be one of {sorted(PRESETS)}, got {name!r}")
    consts = dict(zip(("alpha1", "omega1", "alpha2", "omega2"), PRESETS[name]))
    for k in consts:
        if section[k] is not None:
            consts[k] = float(section[k])
    return RewardSpec(**consts, t_lat=float(section["t_lat"]), t_eer=float(section["t_eer"]),
                      entropy_weight=float(section["entropy_weight"]))


def resolve(cfg: dict) -> Resolved:
    try:
        sp = cfg["space"]
        schema = build_schema(
            pe_arrays=[tuple(p) for p in sp["pe_arrays"]],
            g_buf_kb=sp["g_buf_kb"],
            r_buf_bytes=sp["r_buf_bytes"],
            dataflows=sp["dataflows"],
            B=int(sp["B"]),
            n_cells=int(sp["n_cells"]),
            r_cells=int(sp["r_cells"]),
        )
        mc = cfg["macro"]
        positions = mc["reduction_positions"]
        macro = MacroConfig(
            input_shape=TensorShape(*(int(v) for v in mc["input_shape"])),
            stem_channels=int(mc["stem_channels"]),
            num_classes=int(mc["num_classes"]),
            reduction_positions=None if positions is None else tuple(int(p) for p in positions),
        )
        hc = cfg["hardware"]
        first = AcceleratorConfig(schema.pe_arrays[0], schema.g_buf_kb[0], schema.r_buf_bytes[0], schema.dataflows[0])
        hw = HardwareModel(first, clock_ghz=float(hc["clock_ghz"]), dram_bandwidth_gbps=float(hc["dram_bandwidth_gbps"]),
                           bytes_per_element=int(hc["bytes_per_element"]),
                           energy_table=EnergyTable(**{k: float(v) for k, v in hc["energy_table"].items()}))
        cc, rc = cfg["controller"], cfg["run"]
        if rc["mode"] not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {rc['mode']!r}")
        search = SearchConfig(
            reward=_reward(cfg["reward"]),
            iterations=int(rc["iterations"]),
            batch_size=int(cc["batch_size"]),
            seed=int(rc["seed"]),
            oracle=str(rc["oracle"]),
            use_surrogate=bool(rc["use_surrogate"]),
            hard_screen=bool(rc["hard_screen"]),
            top_n=int(rc["top_n"]),
            lr=float(cc["lr"]),
            temperature=float(cc["temperature"]),
            tanh_c=float(cc["tanh_c"]),
            baseline_decay=float(cc["baseline_decay"]),
            hidden=int(cc["hidden"]),
            embed=int(cc["embed"]),
        )
        su = cfg["surrogate"]
        if int(su["n_samples"]) < 2 or int(su["n_train"]) < 2:
            raise ConfigError("surrogate.n_samples and surrogate.n_train must be >= 2")
    except ConfigError:
        raise
    except (SchemaError, SearchConfigError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    return Resolved(schema, macro, hw, search, rc["mode"], su)
