"""Pluggable accuracy oracles.

The default oracle is synthetic: it rewards capacity (MAC count, with
diminishing returns) and parametric operations, plus a small deterministic
per-genotype perturbation. Its outputs are not dataset accuracies.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, runtime_checkable

from .design_space import CellKind, OpKind
from .network_lowering import LayerGraph


class ConfigError(ValueError):
    """Bad oracle selection or parameters."""


class RegistrationError(ValueError):
    pass


@runtime_checkable
class AccuracyOracle(Protocol):
    def evaluate(self, graph: LayerGraph) -> float: ...


DEFAULT_OP_QUALITY = {
    OpKind.CONV5X5: 1.00,
    OpKind.CONV3X3: 0.97,
    OpKind.DWCONV5X5: 0.93,
    OpKind.DWCONV3X3: 0.90,
    OpKind.AVGPOOL: 0.60,
    OpKind.MAXPOOL: 0.58,
}


@dataclass(frozen=True)
class ProxyParams:
    a_min: float = 0.80
    a_max: float = 0.97
    op_quality: Mapping[OpKind, float] = field(default_factory=lambda: dict(DEFAULT_OP_QUALITY))
    # MAC count at which the capacity term reaches one half
    capacity_scale: float = 2.0e8
    # width of the capacity sigmoid, in decades of MACs
    capacity_slope: float = 0.25
    noise_amplitude: float = 0.005

    def __post_init__(self):
        if not 0.0 <= self.a_min < self.a_max <= 1.0:
            raise ConfigError("need 0 <= a_min < a_max <= 1")
        if not 0.0 <= self.noise_amplitude < (self.a_max - self.a_min) / 4:
            raise ConfigError("noise_amplitude must be below (a_max - a_min) / 4")
        if self.capacity_scale <= 0 or self.capacity_slope <= 0:
            raise ConfigError("capacity_scale and capacity_slope must be positive")
        missing = set(OpKind) - {OpKind(k) for k in self.op_quality}
        if missing:
            raise ConfigError(f"op_quality lacks {sorted(m.name for m in missing)}")
        if any(not 0.0 <= v <= 1.0 for v in self.op_quality.values()):
            raise ConfigError("op_quality weights must lie in [0, 1]")

    def __hash__(self):
        return hash((self.a_min, self.a_max, tuple(sorted((int(k), v) for k, v in self.op_quality.items())),
                     self.capacity_scale, self.capacity_slope, self.noise_amplitude))


def capacity_term(total_macs: int, params: ProxyParams) -> float:
    if total_macs <= 0:
        return 0.0
    z = (math.log10(total_macs) - math.log10(params.capacity_scale)) / params.capacity_slope
    return 1.0 / (1.0 + math.exp(-z))


def op_quality_mean(graph: LayerGraph, params: ProxyParams) -> float:
    """Mean op quality of each cell template, averaged over the two templates.

    Averaging per template (not per stacked instance) keeps the term
    independent of how many cells are stacked.
    """
    per_kind: dict[CellKind, list[float]] = {}
    first_cell: dict[CellKind, int] = {}
    for layer in graph.layers:
        if layer.op is None:
            continue
        # one stacked instance per template is enough
        if first_cell.setdefault(layer.cell_kind, layer.cell) != layer.cell:
            continue
        per_kind.setdefault(layer.cell_kind, []).append(params.op_quality[OpKind(layer.op)])
    if not per_kind:
        return 0.0
    return sum(sum(v) / len(v) for v in per_kind.values()) / len(per_kind)


def _perturbation(key: str) -> float:
    """Stable pseudo-random value in [-1, 1] derived from ``key``."""
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / (2**64 - 1) * 2.0 - 1.0


def proxy_accuracy(graph: LayerGraph, params: ProxyParams = ProxyParams()) -> float:
    span = params.a_max - params.a_min
    acc = params.a_min + span * capacity_term(graph.total_macs, params) * op_quality_mean(graph, params)
    if params.noise_amplitude:
        acc += params.noise_amplitude * _perturbation(graph.source or repr(graph.layers))
    return min(params.a_max, max(params.a_min, acc))


class SyntheticAccuracyOracle:
    def __init__(self, params: ProxyParams = ProxyParams()):
        self.params = params

    def evaluate(self, graph: LayerGraph) -> float:
        return proxy_accuracy(graph, self.params)

    def __repr__(self):
        return f"SyntheticAccuracyOracle({self.params!r})"


class ConstantOracle:
    def __init__(self, value: float):
        if not 0.0 <= value <= 1.0:
            raise ConfigError("constant accuracy must lie in [0, 1]")
        self.value = float(value)

    def evaluate(self, graph: LayerGraph) -> float:
        return self.value


_REGISTRY: dict[str, AccuracyOracle] = {}


def register_oracle(name: str, oracle: AccuracyOracle) -> None:
    if name in _REGISTRY:
        raise RegistrationError(f"oracle {name!r} already registered")
    if not isinstance(oracle, AccuracyOracle):
        raise RegistrationError("oracle must provide evaluate(graph) -> float")
    _REGISTRY[name] = oracle


def unregister_oracle(name: str) -> None:
    _REGISTRY.pop(name, None)


def get_oracle(name: str, params: ProxyParams | None = None) -> AccuracyOracle:
    """Look up an oracle by name; ``params`` customizes the synthetic default."""
    if name == "synthetic-default" and params is not None:
        return SyntheticAccuracyOracle(params)
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown accuracy oracle {name!r}; known: {sorted(_REGISTRY)}") from None


def available_oracles() -> list[str]:
    return sorted(_REGISTRY)


register_oracle("synthetic-default", SyntheticAccuracyOracle())
