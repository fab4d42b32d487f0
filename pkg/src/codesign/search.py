"""Reward, policy-driven and baseline searches, Pareto extraction, finalization."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import controller as ctl
from .accuracy_proxy import AccuracyOracle, get_oracle
from .cost_model import CapacityError, CostReport, HardwareModel, InfeasibleError, simulate
from .design_space import (
    AcceleratorConfig,
    DecisionSchema,
    DesignPoint,
    build_schema,
    encode,
    sample_sequences,
    validate,
)
from .network_lowering import LayerGraph, MacroConfig, derive_network_cached
from .surrogate import SurrogatePair

log = logging.getLogger(__name__)

PRESETS = {
    "balanced": (0.5, -0.4, 0.5, -0.4),
    "energy-tradeoff": (0.6, -0.4, 0.3, -0.2),
    "latency-tradeoff": (0.3, -0.3, 0.6, -0.4),
}


class RewardDomainError(ValueError):
    """Reward inputs outside the domain of the power terms."""


class SearchConfigError(ValueError):
    pass


class EmptyResultError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SearchAborted(RuntimeError):
    """Evaluation failed mid-run; ``history`` holds what was logged so far."""

    def __init__(self, message: str, history: "SearchHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class RewardSpec:
    alpha1: float = 0.5
    omega1: float = -0.4
    alpha2: float = 0.5
    omega2: float = -0.4
    t_lat: float = 1.2
    t_eer: float = 9.0
    entropy_weight: float = 1e-4

    def __post_init__(self):
        if not (self.t_lat > 0 and self.t_eer > 0):
            raise SearchConfigError("thresholds must be positive")
        if self.omega1 > 0 or self.omega2 > 0:
            raise SearchConfigError("penalty exponents must be <= 0")
        if self.entropy_weight < 0:
            raise SearchConfigError("entropy_weight must be >= 0")

    @classmethod
    def preset(cls, name: str, **overrides) -> "RewardSpec":
        try:
            a1, w1, a2, w2 = PRESETS[name]
        except KeyError:
            raise SearchConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
        return cls(alpha1=a1, omega1=w1, alpha2=a2, omega2=w2, **overrides)

    def accuracy_only(self) -> "RewardSpec":
        return replace(self, alpha1=0.0, alpha2=0.0)


def reward(accuracy: float, latency: float, energy: float, spec: RewardSpec) -> float:
    """Accuracy plus the two threshold-normalized power penalties.

    Infinite latency or energy (an unschedulable design) is allowed; with
    negative exponents its term vanishes.
    """
    if not 0.0 <= accuracy <= 1.0:
        raise RewardDomainError(f"accuracy {accuracy} outside [0, 1]")
    if not (latency > 0 and energy > 0):
        raise RewardDomainError(f"latency and energy must be positive, got {latency}, {energy}")
    return (accuracy
            + spec.alpha1 * (latency / spec.t_lat) ** spec.omega1
            + spec.alpha2 * (energy / spec.t_eer) ** spec.omega2)


def passes_thresholds(latency: float, energy: float, spec: RewardSpec) -> bool:
    return latency < spec.t_lat and energy < spec.t_eer


@dataclass(frozen=True)
class SearchConfig:
    reward: RewardSpec = RewardSpec()
    iterations: int = 12000
    batch_size: int = 5
    seed: int = 0
    oracle: str = "synthetic-default"
    use_surrogate: bool = True
    hard_screen: bool = True
    top_n: int = 10
    lr: float = ctl.LEARNING_RATE
    temperature: float = ctl.TEMPERATURE
    tanh_c: float = ctl.TANH_C
    baseline_decay: float = ctl.BASELINE_DECAY
    hidden: int = ctl.HIDDEN
    embed: int = ctl.EMBED

    def __post_init__(self):
        if self.iterations < 1:
            raise SearchConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise SearchConfigError("batch_size must be >= 1")
        if self.top_n < 1:
            raise SearchConfigError("top_n must be >= 1")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise SearchConfigError("baseline_decay must lie in [0, 1)")
        if self.temperature <= 0 or self.tanh_c <= 0 or self.lr <= 0:
            raise SearchConfigError("lr, temperature and tanh_c must be positive")


@dataclass
class Finalized:
    latency: float
    energy: float
    reward: float
    screened: bool
    report: CostReport | None = field(default=None, repr=False)
    winner: bool = False


@dataclass
class Candidate:
    point: DesignPoint
    sequence: tuple[int, ...]
    accuracy: float
    latency_pred: float | None
    energy_pred: float | None
    reward: float
    iteration: int
    slot: int = 0
    source: str = "rl"
    screened: bool = False
    exact: bool = False
    finalized: Finalized | None = None

    def to_record(self) -> dict:
        rec = {
            "iteration": self.iteration,
            "slot": self.slot,
            "source": self.source,
            "decisions": list(self.sequence),
            "accuracy": self.accuracy,
            "latency": self.latency_pred,
            "energy": self.energy_pred,
            "reward": self.reward,
            "screened": self.screened,
            "exact": self.exact,
        }
        if self.finalized is not None:
            f = self.finalized
            rec["finalized"] = {"latency": f.latency, "energy": f.energy, "reward": f.reward,
                                "screened": f.screened, "winner": f.winner}
        return rec

    @classmethod
    def from_record(cls, rec: dict, schema: DecisionSchema) -> "Candidate":
        seq = tuple(int(v) for v in rec["decisions"])
        fin = rec.get("finalized")
        return cls(
            point=validate(seq, schema),
            sequence=seq,
            accuracy=rec["accuracy"],
            latency_pred=rec["latency"],
            energy_pred=rec["energy"],
            reward=rec["reward"],
            iteration=rec["iteration"],
            slot=rec["slot"],
            source=rec["source"],
            screened=rec["screened"],
            exact=rec["exact"],
            finalized=Finalized(**fin) if fin else None,
        )


@dataclass
class SearchHistory:
    candidates: list[Candidate] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    winner: Candidate | None = None
    policy: ctl.PolicyState | None = field(default=None, repr=False)
    sink: TextIO | None = field(default=None, repr=False)

    def append(self, cand: Candidate) -> None:
        if self.candidates:
            last = self.candidates[-1]
            if (cand.iteration, cand.slot) <= (last.iteration, last.slot) and cand.source == last.source:
                raise ValueError("candidates must be appended in (iteration, slot) order")
        self.candidates.append(cand)
        if self.sink is not None:
            self.sink.write(json.dumps(cand.to_record()) + "\n")

    def __len__(self):
        return len(self.candidates)

    def rewards(self) -> np.ndarray:
        return np.array([c.reward for c in self.candidates], dtype=float)

    def best_so_far(self, unscreened_only: bool = False) -> np.ndarray:
        """Running maximum of the logged reward, one entry per candidate."""
        r = self.rewards()
        if unscreened_only:
            r = np.where([c.screened for c in self.candidates], -np.inf, r)
        return np.maximum.accumulate(r) if len(r) else r

    def best(self, unscreened_only: bool = False) -> Candidate | None:
        pool = [c for c in self.candidates if not (unscreened_only and c.screened)]
        if not pool:
            return None
        # first occurrence wins ties
        return max(pool, key=lambda c: (c.reward, -c.iteration, -c.slot))

    def best_per_iteration(self, unscreened_only: bool = False) -> list[tuple[int, float]]:
        out: dict[int, float] = {}
        run = -math.inf
        for c in self.candidates:
            if not (unscreened_only and c.screened):
                run = max(run, c.reward)
            out[c.iteration] = run
        return sorted(out.items())

    def to_jsonl(self) -> str:
        return "".join(json.dumps(c.to_record()) + "\n" for c in self.candidates)

    @classmethod
    def from_jsonl(cls, text: str, schema: DecisionSchema) -> "SearchHistory":
        return cls([Candidate.from_record(json.loads(line), schema) for line in text.splitlines() if line.strip()])


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    latency: float
    energy: float
    exact: bool
    report: CostReport | None = None


class Evaluator:
    """Accuracy oracle plus exact or surrogate hardware metrics, memoized per design."""

    def __init__(self, schema: DecisionSchema | None = None, oracle: AccuracyOracle | str = "synthetic-default",
                 macro: MacroConfig = MacroConfig(), hw: HardwareModel | None = None,
                 surrogate: SurrogatePair | None = None):
        self.schema = schema or build_schema()
        self.oracle = get_oracle(oracle) if isinstance(oracle, str) else oracle
        self.macro = macro
        first = self.schema
        self.hw = hw or HardwareModel(AcceleratorConfig(first.pe_arrays[0], first.g_buf_kb[0],
                                                        first.r_buf_bytes[0], first.dataflows[0]))
        self.surrogate = surrogate
        self._acc: dict = {}
        self._exact: dict[tuple[int, ...], Evaluation] = {}
        self._pred: dict[tuple[int, ...], Evaluation] = {}
        self.n_exact = 0
        self.n_predicted = 0

    def graph(self, point: DesignPoint) -> LayerGraph:
        return derive_network_cached(point.dnn, self.macro)

    def accuracy(self, point: DesignPoint) -> float:
        acc = self._acc.get(point.dnn)
        if acc is None:
            acc = float(self.oracle.evaluate(self.graph(point)))
            if not 0.0 <= acc <= 1.0:
                raise RewardDomainError(f"oracle returned accuracy {acc} outside [0, 1]")
            self._acc[point.dnn] = acc
        return acc

    def exact(self, seq: Sequence[int], point: DesignPoint | None = None) -> Evaluation:
        key = tuple(int(v) for v in seq)
        hit = self._exact.get(key)
        if hit is not None:
            return hit
        point = point or validate(key, self.schema)
        acc = self.accuracy(point)
        try:
            rep = simulate(self.graph(point), self.hw.with_accel(point.accel))
            ev = Evaluation(acc, rep.latency_ms, rep.energy_mj, True, rep)
        except (InfeasibleError, CapacityError):
            ev = Evaluation(acc, math.inf, math.inf, True, None)
        self.n_exact += 1
        self._exact[key] = ev
        return ev

    def predicted(self, seq: Sequence[int], point: DesignPoint | None = None) -> Evaluation:
        if self.surrogate is None:
            raise SearchConfigError("surrogate mode requires a fitted surrogate (run collect, then fit)")
        key = tuple(int(v) for v in seq)
        hit = self._pred.get(key)
        if hit is not None:
            return hit
        point = point or validate(key, self.schema)
        lat, en = self.surrogate.predict(point, self.graph(point))
        # a GP in linear space can dip below zero far from the data
        ev = Evaluation(self.accuracy(point), max(lat, 1e-9), max(en, 1e-9), False)
        self.n_predicted += 1
        self._pred[key] = ev
        return ev

    def evaluate(self, seq: Sequence[int], use_surrogate: bool, point: DesignPoint | None = None) -> Evaluation:
        return self.predicted(seq, point) if use_surrogate else self.exact(seq, point)


def make_candidate(seq: Sequence[int], ev: Evaluation, spec: RewardSpec, hard_screen: bool, iteration: int,
                   slot: int, source: str, point: DesignPoint) -> Candidate:
    return Candidate(
        point=point,
        sequence=tuple(int(v) for v in seq),
        accuracy=ev.accuracy,
        latency_pred=ev.latency,
        energy_pred=ev.energy,
        reward=reward(ev.accuracy, ev.latency, ev.energy, spec),
        iteration=iteration,
        slot=slot,
        source=source,
        screened=hard_screen and not passes_thresholds(ev.latency, ev.energy, spec),
        exact=ev.exact,
    )


def constraint_screen(candidate: Candidate, spec: RewardSpec, hard_screen: bool = True) -> bool:
    """True if the candidate is kept. Thresholds are strict."""
    if not hard_screen:
        return True
    return passes_thresholds(candidate.latency_pred, candidate.energy_pred, spec)


def reinforce(policy: ctl.PolicyState, score: Callable[[list[list[int]], int], Sequence[float]], iterations: int,
              batch_size: int, schema: DecisionSchema, lr: float = ctl.LEARNING_RATE,
              temperature: float = ctl.TEMPERATURE, tanh_c: float = ctl.TANH_C,
              baseline_decay: float = ctl.BASELINE_DECAY, entropy_weight: float = 0.0,
              start_iteration: int = 0) -> list[float]:
    """Policy-gradient loop; ``score`` maps canonical sequences to rewards.

    Returns the batch-mean reward of every iteration.
    """
    means = []
    for it in range(start_iteration, start_iteration + iterations):
        traces = ctl.sample_batch(policy, batch_size, temperature, tanh_c)
        seqs = [tr.sequence(schema) for tr in traces]
        r = np.asarray(score(seqs, it), dtype=float)
        shaped = r + entropy_weight * np.array([tr.entropy for tr in traces])
        ctl.update_baseline(policy, float(shaped.mean()), baseline_decay)
        grads = ctl.policy_gradient(policy, traces, shaped, temperature, tanh_c)
        ctl.adam_step(policy, grads, lr)
        means.append(float(r.mean()))
    return means


def _default_evaluator(config: SearchConfig) -> Evaluator:
    return Evaluator(build_schema(), config.oracle)


def _metadata(config: SearchConfig, evaluator: Evaluator, mode: str) -> dict:
    return {
        "mode": mode,
        "config": asdict(config),
        "seed": config.seed,
        "schema_digest": evaluator.schema.digest(),
        "oracle": repr(evaluator.oracle),
    }


def run_search(config: SearchConfig, evaluator: Evaluator | None = None, sink: TextIO | None = None,
               policy: ctl.PolicyState | None = None) -> SearchHistory:
    """Joint search driven by the recurrent policy."""
    evaluator = evaluator or _default_evaluator(config)
    if config.use_surrogate and evaluator.surrogate is None:
        raise SearchConfigError("surrogate mode is on but no surrogate was given; run collect and fit first")
    schema = evaluator.schema
    policy = policy or ctl.init_policy(schema, config.seed, config.hidden, config.embed)
    history = SearchHistory(metadata=_metadata(config, evaluator, "rl"), policy=policy, sink=sink)
    spec = config.reward

    def score(seqs, it):
        out = []
        for slot, seq in enumerate(seqs):
            try:
                point = validate(seq, schema)
                ev = evaluator.evaluate(seq, config.use_surrogate, point)
            except Exception as exc:
                raise SearchAborted(f"evaluation failed at iteration {it}: {exc}", history) from exc
            cand = make_candidate(seq, ev, spec, config.hard_screen, it, slot, "rl", point)
            history.append(cand)
            out.append(cand.reward)
        return out

    t0 = time.perf_counter()
    reinforce(policy, score, config.iterations, config.batch_size, schema, config.lr, config.temperature,
              config.tanh_c, config.baseline_decay, spec.entropy_weight)
    history.metadata["timings"] = {"search_s": time.perf_counter() - t0}
    return history


def random_search(config: SearchConfig, evaluator: Evaluator | None = None, sink: TextIO | None = None) -> SearchHistory:
    """Same pipeline with the uniform sampler in place of the policy."""
    evaluator = evaluator or _default_evaluator(config)
    if config.use_surrogate and evaluator.surrogate is None:
        raise SearchConfigError("surrogate mode is on but no surrogate was given; run collect and fit first")
    schema = evaluator.schema
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    history = SearchHistory(metadata=_metadata(config, evaluator, "random"), sink=sink)
    t0 = time.perf_counter()
    for it in range(config.iterations):
        for slot, seq in enumerate(sample_sequences(schema, config.batch_size, rng).tolist()):
            try:
                point = validate(seq, schema)
                ev = evaluator.evaluate(seq, config.use_surrogate, point)
            except Exception as exc:
                raise SearchAborted(f"evaluation failed at iteration {it}: {exc}", history) from exc
            history.append(make_candidate(seq, ev, config.reward, config.hard_screen, it, slot, "random", point))
    history.metadata["timings"] = {"search_s": time.perf_counter() - t0}
    return history


def accel_configs(schema: DecisionSchema) -> list[AcceleratorConfig]:
    return [AcceleratorConfig(pe, g, r, d) for pe in schema.pe_arrays for g in schema.g_buf_kb
            for r in schema.r_buf_bytes for d in schema.dataflows]


def two_stage_baseline(config: SearchConfig, evaluator: Evaluator | None = None, sink: TextIO | None = None,
                       stage1_iterations: int | None = None) -> SearchHistory:
    """Accuracy-only network search, then exhaustive hardware tuning for the winner.

    By default stage 1 runs ``iterations - ceil(|configs| / batch_size)``
    iterations so that the two stages together evaluate as many design
    points as a single-stage run of ``iterations``.
    """
    evaluator = evaluator or _default_evaluator(config)
    schema = evaluator.schema
    configs = accel_configs(schema)
    if stage1_iterations is None:
        stage1_iterations = max(1, config.iterations - math.ceil(len(configs) / config.batch_size))
    policy = ctl.init_policy(schema, config.seed, config.hidden, config.embed)
    history = SearchHistory(metadata=_metadata(config, evaluator, "two-stage"), policy=policy, sink=sink)
    history.metadata["stage1_iterations"] = stage1_iterations
    history.metadata["stage2_evaluations"] = len(configs)
    acc_spec = config.reward.accuracy_only()

    def score(seqs, it):
        out = []
        for slot, seq in enumerate(seqs):
            try:
                point = validate(seq, schema)
                acc = evaluator.accuracy(point)
            except Exception as exc:
                raise SearchAborted(f"evaluation failed at iteration {it}: {exc}", history) from exc
            # hardware is not evaluated in this stage; the reward is accuracy alone
            history.append(Candidate(point, tuple(seq), acc, None, None, acc, it, slot, "two-stage-1"))
            out.append(acc)
        return out

    t0 = time.perf_counter()
    reinforce(policy, score, stage1_iterations, config.batch_size, schema, config.lr, config.temperature,
              config.tanh_c, config.baseline_decay, acc_spec.entropy_weight)
    t1 = time.perf_counter()
    net = max(history.candidates, key=lambda c: (c.accuracy, -c.iteration, -c.slot))
    history.metadata["stage1_network"] = list(net.sequence[:schema.S])

    best = None
    for slot, accel in enumerate(configs):
        point = DesignPoint(net.point.dnn, accel)
        seq = encode(point, schema)
        ev = evaluator.exact(seq, point)
        cand = make_candidate(seq, ev, config.reward, config.hard_screen, stage1_iterations, slot, "two-stage-2", point)
        history.append(cand)
        if not cand.screened and (best is None or cand.reward > best.reward):
            best = cand
    history.winner = best
    history.metadata["timings"] = {"stage1_s": t1 - t0, "stage2_s": time.perf_counter() - t1}
    return history


def pareto_indices(accuracy: Sequence[float], metric: Sequence[float]) -> list[int]:
    """Indices not dominated under (max accuracy, min metric), sorted by metric.

    Points with identical coordinates are all kept.
    """
    a = np.asarray(accuracy, dtype=float)
    m = np.asarray(metric, dtype=float)
    order = np.lexsort((-a, m))
    keep = []
    best_prev = -np.inf
    i = 0
    n = len(order)
    while i < n:
        j = i
        while j < n and m[order[j]] == m[order[i]]:
            j += 1
        group = order[i:j]
        top = a[group].max()
        if top > best_prev:
            keep.extend(int(k) for k in group if a[k] == top)
            best_prev = top
        i = j
    return keep


def pareto_front(candidates: SearchHistory | Iterable[Candidate], metric: str = "energy",
                 exact: bool = False) -> list[Candidate]:
    """Non-dominated distinct designs, ordered by the hardware metric.

    ``exact`` uses finalized metrics where present. Candidates without
    hardware metrics are ignored.
    """
    if metric not in ("energy", "latency"):
        raise ValueError("metric must be 'energy' or 'latency'")
    pool = candidates.candidates if isinstance(candidates, SearchHistory) else list(candidates)
    seen = set()
    rows = []
    for c in pool:
        val = _metric(c, metric, exact)
        if val is None or c.sequence in seen:
            continue
        seen.add(c.sequence)
        rows.append((c, val))
    if not rows:
        raise EmptyResultError("no candidate carries hardware metrics")
    idx = pareto_indices([c.accuracy for c, _ in rows], [v for _, v in rows])
    return [rows[i][0] for i in idx]


def _metric(c: Candidate, metric: str, exact: bool) -> float | None:
    if exact and c.finalized is not None:
        return getattr(c.finalized, metric)
    return c.latency_pred if metric == "latency" else c.energy_pred


def finalize_top_n(history: SearchHistory, evaluator: Evaluator, spec: RewardSpec, n: int = 10,
                   hard_screen: bool = True) -> list[Candidate]:
    """Re-evaluate the best ``n`` distinct unscreened designs exactly and re-rank.

    The returned list is ordered by exact reward with exact-screened
    designs last; the first entry is flagged as the winner.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    best: dict[tuple[int, ...], Candidate] = {}
    for c in history.candidates:
        if c.screened or c.latency_pred is None:
            continue
        prev = best.get(c.sequence)
        if prev is None or c.reward > prev.reward:
            best[c.sequence] = c
    if not best:
        raise EmptyResultError("every candidate was screened", _diagnostics(history, spec))
    ranked = sorted(best.values(), key=lambda c: -c.reward)[:n]

    for c in ranked:
        ev = evaluator.exact(c.sequence, c.point)
        fr = reward(ev.accuracy, ev.latency, ev.energy, spec)
        screened = hard_screen and not passes_thresholds(ev.latency, ev.energy, spec)
        c.finalized = Finalized(ev.latency, ev.energy, fr, screened, ev.report)
        if not c.exact:
            log.info("finalize %s: latency %.4g -> %.4g, energy %.4g -> %.4g",
                     c.sequence, c.latency_pred, ev.latency, c.energy_pred, ev.energy)

    final = sorted(ranked, key=lambda c: (c.finalized.screened, -c.finalized.reward))
    if final[0].finalized.screened:
        raise EmptyResultError("every finalist violates the thresholds under exact evaluation",
                               _diagnostics(history, spec, final))
    final[0].finalized.winner = True
    history.winner = final[0]
    return final


def _diagnostics(history: SearchHistory, spec: RewardSpec, finalists: list[Candidate] | None = None) -> dict:
    lat = [c.latency_pred for c in history.candidates if c.latency_pred is not None]
    en = [c.energy_pred for c in history.candidates if c.energy_pred is not None]
    out = {
        "candidates": len(history.candidates),
        "t_lat": spec.t_lat,
        "t_eer": spec.t_eer,
        "min_latency": min(lat) if lat else None,
        "min_energy": min(en) if en else None,
    }
    if finalists:
        out["finalists"] = [(c.finalized.latency, c.finalized.energy) for c in finalists]
    return out


def final_reward(history: SearchHistory) -> float:
    """Exact reward of the run's winner, -inf if nothing survived screening."""
    w = history.winner
    if w is None:
        return -math.inf
    if w.finalized is not None:
        return w.finalized.reward
    if not w.exact:
        raise ValueError("winner has only predicted metrics; finalize first")
    return w.reward


def finalized_to_text(final: list[Candidate]) -> str:
    lines = ["rank\twinner\tdecisions\taccuracy\tlatency_pred\tenergy_pred\treward_pred"
             "\tlatency_exact\tenergy_exact\treward_exact\tscreened"]
    for i, c in enumerate(final):
        f = c.finalized
        lines.append(f"{i}\t{int(f.winner)}\t{' '.join(map(str, c.sequence))}\t{c.accuracy!r}\t{c.latency_pred!r}"
                     f"\t{c.energy_pred!r}\t{c.reward!r}\t{f.latency!r}\t{f.energy!r}\t{f.reward!r}\t{int(f.screened)}")
    return "\n".join(lines) + "\n"


def pareto_to_text(front: list[Candidate], metric: str, exact: bool = False) -> str:
    lines = [f"accuracy\t{metric}\tdecisions"]
    for c in front:
        lines.append(f"{c.accuracy!r}\t{_metric(c, metric, exact)!r}\t{' '.join(map(str, c.sequence))}")
    return "\n".join(lines) + "\n"


def curves_to_text(histories: dict[str, SearchHistory], unscreened_only: bool = False) -> str:
    """Best-so-far reward per iteration, one column per run."""
    names = list(histories)
    cols = {k: dict(h.best_per_iteration(unscreened_only)) for k, h in histories.items()}
    iters = sorted(set().union(*[c.keys() for c in cols.values()]))
    lines = ["iteration\t" + "\t".join(names)]
    last = {k: -math.inf for k in names}
    for it in iters:
        for k in names:
            last[k] = cols[k].get(it, last[k])
        lines.append(f"{it}\t" + "\t".join(repr(last[k]) for k in names))
    return "\n".join(lines) + "\n"
