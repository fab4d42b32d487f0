"""Autoregressive LSTM policy over a decision sequence, trained with REINFORCE.

Step ``t`` feeds the embedding of action ``t-1`` (a zero vector at step 0)
through a single-layer LSTM; a per-step linear head produces raw logits,
which are squashed as ``tanh_c * tanh(raw / temperature)`` before the
softmax. For each node, the second input decision masks out the first
input's index so that the two inputs always differ; the emitted design is
then canonicalized (inputs sorted, ops swapped along).

Gradients are hand-derived backpropagation through time, exact for this
architecture. Everything is float64 numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design_space import DecisionSchema, canonicalize_actions

HIDDEN = 120
EMBED = 16
INIT_RANGE = 0.1
TEMPERATURE = 1.1
TANH_C = 2.5
LEARNING_RATE = 0.0035
BASELINE_DECAY = 0.95
CHECKPOINT_VERSION = 1


class ProbabilityZeroError(ValueError):
    """An action lies outside the masked support of its step."""


@dataclass(frozen=True)
class StepLayout:
    """Vocabulary per step and the (first, second) step pairs that must differ."""

    vocabs: tuple[int, ...]
    distinct_pairs: tuple[tuple[int, int], ...] = ()
    schema: DecisionSchema | None = None

    @classmethod
    def from_schema(cls, schema: DecisionSchema) -> "StepLayout":
        pairs = tuple((t, t + 1) for t, _ in schema.node_input_steps())
        return cls(tuple(int(v) for v in schema.vocab_sizes), pairs, schema)

    def __len__(self):
        return len(self.vocabs)

    def digest(self) -> str:
        import hashlib

        base = self.schema.digest() if self.schema is not None else ""
        return hashlib.sha256(f"{base}|{self.vocabs}|{self.distinct_pairs}".encode()).hexdigest()[:16]


@dataclass
class PolicyState:
    layout: StepLayout
    hidden: int
    embed: int
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    baseline: float = 0.0
    baseline_set: bool = False
    masked_by: dict[int, int] = field(default_factory=dict)

    @property
    def flat_params(self) -> np.ndarray:
        return flat_vector(self.params)

    def param_names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class SampleTrace:
    actions: np.ndarray
    log_probs: np.ndarray
    entropies: np.ndarray
    logits: list = field(repr=False)
    # forward-pass record shared by a sampled batch, reused for the gradient
    _batch: object = field(default=None, repr=False, compare=False)

    @property
    def total_log_prob(self) -> float:
        return float(self.log_probs.sum())

    @property
    def entropy(self) -> float:
        return float(self.entropies.sum())

    def sequence(self, schema: DecisionSchema) -> list[int]:
        """Canonical decision sequence of the sampled design."""
        return canonicalize_actions(self.actions, schema)


def init_policy(schema: DecisionSchema | StepLayout, seed: int, hidden: int = HIDDEN, embed: int = EMBED) -> PolicyState:
    """Uniform[-0.1, 0.1] initialization of every parameter, deterministic in ``seed``."""
    layout = schema if isinstance(schema, StepLayout) else StepLayout.from_schema(schema)
    shapes = _param_shapes(layout, hidden, embed)
    size = sum(int(np.prod(s)) for s in shapes.values())
    flat = np.random.default_rng(seed).uniform(-INIT_RANGE, INIT_RANGE, size=size)
    return PolicyState(
        layout=layout,
        hidden=hidden,
        embed=embed,
        params=_views(flat, shapes),
        m=_views(np.zeros(size), shapes),
        v=_views(np.zeros(size), shapes),
        rng=np.random.default_rng(np.random.SeedSequence([seed, 1])),
        masked_by={second: first for first, second in layout.distinct_pairs},
    )


def _param_shapes(layout: StepLayout, hidden: int, embed: int) -> dict[str, tuple[int, ...]]:
    shapes = {"lstm_W": (4 * hidden, embed + hidden), "lstm_b": (4 * hidden,)}
    for t in range(1, len(layout)):
        shapes[f"emb_{t}"] = (layout.vocabs[t - 1], embed)
    for t, vocab in enumerate(layout.vocabs):
        shapes[f"proj_W_{t}"] = (vocab, hidden)
        shapes[f"proj_b_{t}"] = (vocab,)
    return shapes


def _views(flat: np.ndarray, shapes) -> dict[str, np.ndarray]:
    """Named reshaped views into one contiguous vector."""
    out, off = {}, 0
    for k, shape in shapes.items():
        n = int(np.prod(shape))
        out[k] = flat[off:off + n].reshape(shape)
        off += n
    return out


def flat_vector(named: dict[str, np.ndarray]) -> np.ndarray:
    """The contiguous buffer behind ``named``.

    If entries were rebound to standalone arrays, a fresh buffer is built
    and the dict is repointed at views into it (values are preserved).
    """
    first = next(iter(named.values()))
    base = first if first.base is None else first.base
    ok = base.ndim == 1 and base.size == sum(a.size for a in named.values())
    ok = ok and all(a.base is base for a in named.values())
    if ok:
        return base
    flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in named.values()])
    named.update(_views(flat, {k: np.shape(a) for k, a in named.items()}))
    return flat


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward(policy: PolicyState, n: int, temperature: float, tanh_c: float, actions=None, uniforms=None):
    """Run the policy for ``n`` sequences, forcing ``actions`` if given.

    Returns (actions, log_probs, entropies, squashed logits, cache).
    """
    p = policy.params
    H, E = policy.hidden, policy.embed
    T = len(policy.layout)
    Wt, b = np.ascontiguousarray(p["lstm_W"].T), p["lstm_b"]
    h = np.zeros((n, H))
    c = np.zeros((n, H))
    x = np.zeros((n, E))
    acts = np.zeros((n, T), dtype=np.int64) if actions is None else np.asarray(actions, dtype=np.int64)
    logps = np.zeros((n, T))
    ents = np.zeros((n, T))
    logits_out = []
    cache = []
    rows = np.arange(n)
    for t in range(T):
        if t > 0:
            x = p[f"emb_{t}"][acts[:, t - 1]]
        xh = np.concatenate([x, h], axis=1)
        z = xh @ Wt + b
        i_g = _sigmoid(z[:, :H])
        f_g = _sigmoid(z[:, H:2 * H])
        g_g = np.tanh(z[:, 2 * H:3 * H])
        o_g = _sigmoid(z[:, 3 * H:])
        c_new = f_g * c + i_g * g_g
        tc = np.tanh(c_new)
        h_new = o_g * tc

        raw = h_new @ p[f"proj_W_{t}"].T + p[f"proj_b_{t}"]
        th = np.tanh(raw / temperature)
        sq = tanh_c * th
        vocab = sq.shape[1]
        mask = np.ones((n, vocab), dtype=bool)
        if t in policy.masked_by:
            mask[rows, acts[:, policy.masked_by[t]]] = False
        masked = np.where(mask, sq, -np.inf)
        mx = masked.max(axis=1, keepdims=True)
        ex = np.exp(masked - mx)
        probs = ex / ex.sum(axis=1, keepdims=True)
        logp_all = np.where(mask, masked - mx - np.log(ex.sum(axis=1, keepdims=True)), 0.0)

        if actions is None:
            u = policy.rng.random(n) if uniforms is None else uniforms[:, t]
            cdf = np.cumsum(probs, axis=1)
            a = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), vocab - 1)
            # never land on a masked slot through round-off
            bad = ~mask[rows, a]
            if bad.any():
                a[bad] = np.argmax(np.where(mask[bad], probs[bad], -1.0), axis=1)
            acts[:, t] = a
        else:
            a = acts[:, t]
            if np.any(a < 0) or np.any(a >= vocab) or not mask[rows, a].all():
                raise ProbabilityZeroError(f"action outside the support at step {t}")
        logps[:, t] = logp_all[rows, a]
        ents[:, t] = -(probs * logp_all).sum(axis=1)
        logits_out.append(sq)
        cache.append((xh, c, i_g, f_g, g_g, o_g, tc, h_new, th, probs))
        h, c = h_new, c_new
    return acts, logps, ents, logits_out, cache


def sample_batch(policy: PolicyState, n: int, temperature: float = TEMPERATURE, tanh_c: float = TANH_C) -> list[SampleTrace]:
    if temperature <= 0 or tanh_c <= 0:
        raise ValueError("temperature and tanh_c must be positive")
    acts, logps, ents, logits, cache = _forward(policy, n, temperature, tanh_c)
    batch = _Batch(acts, cache, policy.step, id(policy), temperature, tanh_c)
    return [
        SampleTrace(acts[i].copy(), logps[i].copy(), ents[i].copy(), [lg[i].copy() for lg in logits], batch)
        for i in range(n)
    ]


@dataclass(eq=False)
class _Batch:
    actions: np.ndarray
    cache: list
    step: int
    owner: int
    temperature: float
    tanh_c: float


def sample_sequence(policy: PolicyState, temperature: float = TEMPERATURE, tanh_c: float = TANH_C) -> SampleTrace:
    return sample_batch(policy, 1, temperature, tanh_c)[0]


def sequence_log_prob(policy: PolicyState, actions: Sequence[int], temperature: float = TEMPERATURE,
                      tanh_c: float = TANH_C):
    """(log-prob, entropy, per-step log-probs) of a forced action path."""
    acts, logps, ents, _, _ = _forward(policy, 1, temperature, tanh_c, actions=np.asarray(actions)[None, :])
    return float(logps[0].sum()), float(ents[0].sum()), logps[0]


def policy_gradient(policy: PolicyState, traces: Sequence[SampleTrace] | np.ndarray, rewards: Sequence[float],
                    temperature: float = TEMPERATURE, tanh_c: float = TANH_C) -> dict[str, np.ndarray]:
    """Gradient of ``-(1/N) sum_i (R_i - b) log p(a_i)`` w.r.t. every parameter."""
    rewards = np.asarray(rewards, dtype=float)
    if len(rewards) == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("rewards contain NaN or Inf")
    actions = np.stack([tr.actions if isinstance(tr, SampleTrace) else np.asarray(tr) for tr in traces])
    n = len(actions)
    if n != len(rewards):
        raise ValueError("traces and rewards differ in length")
    b = policy.baseline if policy.baseline_set else 0.0
    coef = -(rewards - b) / n  # dL/dlogp_i

    p = policy.params
    H = policy.hidden
    T = len(policy.layout)
    W = p["lstm_W"]
    batch = getattr(traces[0], "_batch", None)
    reusable = (
        batch is not None and batch.owner == id(policy) and batch.step == policy.step
        and batch.temperature == temperature and batch.tanh_c == tanh_c
        and len(batch.actions) == n and all(getattr(tr, "_batch", None) is batch for tr in traces)
        and np.array_equal(batch.actions, actions)
    )
    cache = batch.cache if reusable else _forward(policy, n, temperature, tanh_c, actions=actions)[4]
    grads = _views(np.zeros(policy.n_params()), {k: v.shape for k, v in p.items()})
    dz_all = np.empty((T, n, 4 * H))
    xh_all = np.empty((T, n, W.shape[1]))
    dh_next = np.zeros((n, H))
    dc_next = np.zeros((n, H))
    rows = np.arange(n)
    for t in reversed(range(T)):
        xh, c_prev, i_g, f_g, g_g, o_g, tc, h_t, th, probs = cache[t]
        onehot = np.zeros_like(probs)
        onehot[rows, actions[:, t]] = 1.0
        d_sq = coef[:, None] * (onehot - probs)
        d_raw = d_sq * tanh_c * (1.0 - th * th) / temperature
        grads[f"proj_W_{t}"] += d_raw.T @ h_t
        grads[f"proj_b_{t}"] += d_raw.sum(axis=0)
        dh = d_raw @ p[f"proj_W_{t}"] + dh_next

        do = dh * tc
        dc = dh * o_g * (1.0 - tc * tc) + dc_next
        di = dc * g_g
        df = dc * c_prev
        dg = dc * i_g
        dz = np.concatenate([
            di * i_g * (1.0 - i_g),
            df * f_g * (1.0 - f_g),
            dg * (1.0 - g_g * g_g),
            do * o_g * (1.0 - o_g),
        ], axis=1)
        dz_all[t] = dz
        xh_all[t] = xh
        dxh = dz @ W
        dx = dxh[:, :policy.embed]
        dh_next = dxh[:, policy.embed:]
        dc_next = dc * f_g
        if t > 0:
            np.add.at(grads[f"emb_{t}"], actions[:, t - 1], dx)
    grads["lstm_W"] += dz_all.reshape(-1, 4 * H).T @ xh_all.reshape(-1, W.shape[1])
    grads["lstm_b"] += dz_all.sum(axis=(0, 1))
    return grads


def reinforce_loss(policy: PolicyState, actions, rewards, temperature=TEMPERATURE, tanh_c=TANH_C) -> float:
    """The scalar whose gradient ``policy_gradient`` returns."""
    actions = np.asarray(actions)
    _, logps, _, _, _ = _forward(policy, len(actions), temperature, tanh_c, actions=actions)
    b = policy.baseline if policy.baseline_set else 0.0
    return float(-np.mean((np.asarray(rewards, dtype=float) - b) * logps.sum(axis=1)))


def update_baseline(policy: PolicyState, batch_mean_reward: float, decay: float = BASELINE_DECAY) -> float:
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    if not policy.baseline_set:
        policy.baseline = float(batch_mean_reward)
        policy.baseline_set = True
    else:
        policy.baseline = decay * policy.baseline + (1.0 - decay) * float(batch_mean_reward)
    return policy.baseline


def adam_step(policy: PolicyState, grads: dict[str, np.ndarray], lr: float = LEARNING_RATE,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> PolicyState:
    if lr <= 0:
        raise ValueError("lr must be positive")
    policy.step += 1
    bc1 = 1.0 - beta1**policy.step
    bc2 = 1.0 - beta2**policy.step
    if set(grads) != set(policy.params):
        raise ValueError("gradient record does not match the policy parameters")
    g = np.concatenate([np.ravel(grads[k]) for k in policy.params]) if list(grads) != list(policy.params) \
        else flat_vector(grads)
    m, v, theta = flat_vector(policy.m), flat_vector(policy.v), policy.flat_params
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return policy



def save_checkpoint(policy: PolicyState, path) -> None:
    """npz layout: header JSON, then param/m/v tensors in ``param_names`` order."""
    names = policy.param_names()
    header = {
        "version": CHECKPOINT_VERSION,
        "layout_digest": policy.layout.digest(),
        "vocabs": list(policy.layout.vocabs),
        "distinct_pairs": [list(p) for p in policy.layout.distinct_pairs],
        "hidden": policy.hidden,
        "embed": policy.embed,
        "names": names,
        "step": policy.step,
        "baseline": policy.baseline,
        "baseline_set": policy.baseline_set,
        "rng_state": policy.rng.bit_generator.state,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for i, k in enumerate(names):
        arrays[f"p{i:03d}"] = policy.params[k]
        arrays[f"m{i:03d}"] = policy.m[k]
        arrays[f"v{i:03d}"] = policy.v[k]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, schema: DecisionSchema | StepLayout | None = None) -> PolicyState:
    z = np.load(path)
    header = json.loads(bytes(z["header"]).decode())
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    if schema is not None:
        layout = schema if isinstance(schema, StepLayout) else StepLayout.from_schema(schema)
        if layout.digest() != header["layout_digest"]:
            raise ValueError("checkpoint was written for a different decision schema")
    else:
        layout = StepLayout(tuple(header["vocabs"]), tuple(tuple(p) for p in header["distinct_pairs"]))
    names = header["names"]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    shapes = {k: z[f"p{i:03d}"].shape for i, k in enumerate(names)}

    def flat(prefix):
        return np.concatenate([z[f"{prefix}{i:03d}"].ravel() for i in range(len(names))])

    return PolicyState(
        layout=layout,
        hidden=header["hidden"],
        embed=header["embed"],
        params=_views(flat("p"), shapes),
        m=_views(flat("m"), shapes),
        v=_views(flat("v"), shapes),
        rng=rng,
        step=header["step"],
        baseline=header["baseline"],
        baseline_set=header["baseline_set"],
        masked_by={second: first for first, second in layout.distinct_pairs},
    )
