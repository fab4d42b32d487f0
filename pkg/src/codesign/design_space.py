"""Joint DNN-cell / systolic-accelerator search space.

A design point is a pair (genotype, accelerator config) and is serialized
as a flat integer decision sequence: for each of the two cell templates
(normal first, then reduction) and each node position ``i = 2 .. B-1``
four decisions ``(in1, in2, op1, op2)``, followed by four accelerator
decisions ``(pe_array, g_buf, r_buf, dataflow)``.

Node inputs are stored canonically with ``in1 < in2``; each op stays bound
to its own input.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np


class OpKind(enum.IntEnum):
    """Candidate cell operations. The integer value is the decision index."""

    CONV3X3 = 0
    CONV5X5 = 1
    DWCONV3X3 = 2
    DWCONV5X5 = 3
    MAXPOOL = 4
    AVGPOOL = 5

    @property
    def kernel(self) -> int:
        return 5 if self in (OpKind.CONV5X5, OpKind.DWCONV5X5) else 3

    @property
    def is_pool(self) -> bool:
        return self in (OpKind.MAXPOOL, OpKind.AVGPOOL)


class Dataflow(enum.IntEnum):
    WS = 0
    OS = 1
    RS = 2
    NLR = 3


class CellKind(enum.Enum):
    NORMAL = "normal"
    REDUCTION = "reduction"


N_OPS = len(OpKind)

# Value ranges a choice list may draw from.
PE_ROWS_RANGE = (8, 16)
PE_COLS_RANGE = (8, 32)
GBUF_KB_RANGE = (108, 1024)
RBUF_BYTES_RANGE = (64, 1024)

DEFAULT_PE_ARRAYS = ((8, 8), (8, 16), (14, 16), (16, 20), (16, 24), (16, 32))
DEFAULT_GBUF_KB = (108, 196, 256, 512, 1024)
DEFAULT_RBUF_BYTES = (64, 128, 256, 512, 1024)
DEFAULT_DATAFLOWS = (Dataflow.WS, Dataflow.OS, Dataflow.RS, Dataflow.NLR)


class SchemaError(ValueError):
    """Raised when a decision schema cannot be built."""


class ChoiceRangeError(SchemaError):
    """A choice-list value lies outside its permitted range."""


class EncodingError(ValueError):
    """A design point cannot be encoded under a schema."""


class SequenceLengthError(ValueError):
    """A decision sequence has the wrong number of entries."""


class InvalidSequenceError(ValueError):
    """A decision sequence breaks one or more schema rules.

    ``violations`` holds every ``Violation`` found, not only the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} violation(s): {msg}")


@dataclass(frozen=True)
class NodeSpec:
    in1: int
    in2: int
    op1: OpKind
    op2: OpKind

    def canonical(self) -> "NodeSpec":
        if self.in1 <= self.in2:
            return self
        return NodeSpec(self.in2, self.in1, self.op2, self.op1)


@dataclass(frozen=True)
class CellSpec:
    kind: CellKind
    nodes: tuple[NodeSpec, ...]

    @property
    def n_nodes(self) -> int:
        """Total node count B, including the two external inputs."""
        return len(self.nodes) + 2

    def loose_ends(self) -> list[int]:
        """Node positions not consumed by any later node."""
        used = {n.in1 for n in self.nodes} | {n.in2 for n in self.nodes}
        return [i for i in range(2, self.n_nodes) if i not in used]


@dataclass(frozen=True)
class Genotype:
    normal: CellSpec
    reduction: CellSpec
    n_cells: int = 4
    r_cells: int = 2

    def __post_init__(self):
        if self.normal.kind is not CellKind.NORMAL or self.reduction.kind is not CellKind.REDUCTION:
            raise ValueError("normal/reduction cell kinds are swapped")
        if self.n_cells < 1 or self.r_cells < 1:
            raise ValueError("need at least one normal and one reduction cell")


@dataclass(frozen=True)
class AcceleratorConfig:
    pe_array: tuple[int, int]
    g_buf_kb: int
    r_buf_bytes: int
    dataflow: Dataflow

    @property
    def pe_rows(self) -> int:
        return self.pe_array[0]

    @property
    def pe_cols(self) -> int:
        return self.pe_array[1]

    def label(self) -> str:
        r, c = self.pe_array
        return f"{r}*{c}/{self.g_buf_kb}Kb/{self.r_buf_bytes}b/{Dataflow(self.dataflow).name}"


@dataclass(frozen=True)
class DesignPoint:
    dnn: Genotype
    accel: AcceleratorConfig


@dataclass(frozen=True)
class Step:
    name: str
    vocab: int
    choices: tuple = ()


@dataclass(frozen=True)
class Violation:
    step: int
    rule: str

    def __str__(self):
        return f"step {self.step}: {self.rule}"


@dataclass(frozen=True)
class DecisionSchema:
    """Ordered decision steps for one fixed node count ``B``."""

    B: int
    pe_arrays: tuple[tuple[int, int], ...]
    g_buf_kb: tuple[int, ...]
    r_buf_bytes: tuple[int, ...]
    dataflows: tuple[Dataflow, ...]
    n_cells: int = 4
    r_cells: int = 2
    steps: tuple[Step, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        steps = []
        for cell in ("normal", "reduction"):
            for i in range(2, self.B):
                steps.append(Step(f"{cell}.node{i}.in1", i))
                steps.append(Step(f"{cell}.node{i}.in2", i))
                steps.append(Step(f"{cell}.node{i}.op1", N_OPS, tuple(o.name for o in OpKind)))
                steps.append(Step(f"{cell}.node{i}.op2", N_OPS, tuple(o.name for o in OpKind)))
        steps.append(Step("pe_array", len(self.pe_arrays), tuple(f"{r}x{c}" for r, c in self.pe_arrays)))
        steps.append(Step("g_buf_kb", len(self.g_buf_kb), self.g_buf_kb))
        steps.append(Step("r_buf_bytes", len(self.r_buf_bytes), self.r_buf_bytes))
        steps.append(Step("dataflow", len(self.dataflows), tuple(d.name for d in self.dataflows)))
        object.__setattr__(self, "steps", tuple(steps))

    @property
    def S(self) -> int:
        return 2 * (self.B - 2) * 4

    @property
    def L(self) -> int:
        return 4

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def vocab_sizes(self) -> np.ndarray:
        return np.array([s.vocab for s in self.steps], dtype=np.int64)

    def node_input_steps(self) -> list[tuple[int, int]]:
        """(step index of in1, node position i) for every node of both cells."""
        out = []
        for c in range(2):
            for k, i in enumerate(range(2, self.B)):
                out.append((c * (self.B - 2) * 4 + 4 * k, i))
        return out

    def digest(self) -> str:
        """Stable short hash identifying this schema's step layout and choices."""
        h = hashlib.sha256(describe_schema(self).encode())
        h.update(f"{self.n_cells},{self.r_cells}".encode())
        return h.hexdigest()[:16]


def build_schema(
    pe_arrays: Sequence[tuple[int, int]] = DEFAULT_PE_ARRAYS,
    g_buf_kb: Sequence[int] = DEFAULT_GBUF_KB,
    r_buf_bytes: Sequence[int] = DEFAULT_RBUF_BYTES,
    dataflows: Sequence[Dataflow | str | int] = DEFAULT_DATAFLOWS,
    B: int = 7,
    n_cells: int = 4,
    r_cells: int = 2,
) -> DecisionSchema:
    """Build the decision schema, checking every choice list."""
    if B < 3:
        raise SchemaError(f"B must be >= 3, got {B}")
    if n_cells < 1 or r_cells < 1:
        raise SchemaError("n_cells and r_cells must be >= 1")
    lists = {"pe_arrays": pe_arrays, "g_buf_kb": g_buf_kb, "r_buf_bytes": r_buf_bytes, "dataflows": dataflows}
    for name, values in lists.items():
        if len(values) == 0:
            raise SchemaError(f"choice list {name!r} is empty")
        if len(set(values)) != len(values):
            raise SchemaError(f"choice list {name!r} has duplicates")

    pe = tuple((int(r), int(c)) for r, c in pe_arrays)
    for r, c in pe:
        if not (PE_ROWS_RANGE[0] <= r <= PE_ROWS_RANGE[1] and PE_COLS_RANGE[0] <= c <= PE_COLS_RANGE[1]):
            raise ChoiceRangeError(f"PE array {r}x{c} outside 8x8..16x32")
    for v in g_buf_kb:
        if not GBUF_KB_RANGE[0] <= v <= GBUF_KB_RANGE[1]:
            raise ChoiceRangeError(f"g_buf {v} KB outside {GBUF_KB_RANGE}")
    for v in r_buf_bytes:
        if not RBUF_BYTES_RANGE[0] <= v <= RBUF_BYTES_RANGE[1]:
            raise ChoiceRangeError(f"r_buf {v} B outside {RBUF_BYTES_RANGE}")
    dfs = tuple(parse_dataflow(d) for d in dataflows)

    return DecisionSchema(
        B=B,
        pe_arrays=pe,
        g_buf_kb=tuple(int(v) for v in g_buf_kb),
        r_buf_bytes=tuple(int(v) for v in r_buf_bytes),
        dataflows=dfs,
        n_cells=n_cells,
        r_cells=r_cells,
    )


def parse_dataflow(value) -> Dataflow:
    if isinstance(value, Dataflow):
        return value
    if isinstance(value, str):
        try:
            return Dataflow[value.upper()]
        except KeyError:
            raise SchemaError(f"unknown dataflow {value!r}") from None
    return Dataflow(int(value))


def describe_schema(schema: DecisionSchema) -> str:
    """Tab-separated listing of the steps: index, name, vocab size, choices."""
    lines = ["index\tname\tvocab\tchoices"]
    for t, s in enumerate(schema.steps):
        choices = ",".join(str(c) for c in s.choices) if s.choices else f"0..{s.vocab - 1}"
        lines.append(f"{t}\t{s.name}\t{s.vocab}\t{choices}")
    return "\n".join(lines) + "\n"


def encode(point: DesignPoint, schema: DecisionSchema) -> list[int]:
    seq: list[int] = []
    for cell, kind in ((point.dnn.normal, CellKind.NORMAL), (point.dnn.reduction, CellKind.REDUCTION)):
        if cell.kind is not kind or len(cell.nodes) != schema.B - 2:
            raise EncodingError(f"step {len(seq)}: {kind.value} cell does not have {schema.B - 2} nodes")
        for k, node in enumerate(cell.nodes):
            i = k + 2
            if not (0 <= node.in1 < node.in2 < i):
                raise EncodingError(
                    f"step {len(seq)}: node {i} inputs ({node.in1},{node.in2}) are not canonical predecessors"
                )
            seq.extend((node.in1, node.in2, int(node.op1), int(node.op2)))

    accel = point.accel
    for name, value, choices in (
        ("pe_array", tuple(accel.pe_array), schema.pe_arrays),
        ("g_buf_kb", accel.g_buf_kb, schema.g_buf_kb),
        ("r_buf_bytes", accel.r_buf_bytes, schema.r_buf_bytes),
        ("dataflow", Dataflow(accel.dataflow), schema.dataflows),
    ):
        try:
            seq.append(choices.index(value))
        except ValueError:
            raise EncodingError(f"step {len(seq)}: {name}={value} not in choice list") from None
    return seq


def find_violations(seq: Sequence[int], schema: DecisionSchema) -> list[Violation]:
    """Every rule violation in ``seq``. Raises on a length mismatch."""
    if len(seq) != len(schema):
        raise SequenceLengthError(f"expected {len(schema)} decisions, got {len(seq)}")
    out = []
    for t, (v, step) in enumerate(zip(seq, schema.steps)):
        if not 0 <= v < step.vocab:
            out.append(Violation(t, f"vocabulary exceeded at step {t} ({step.name}: {v} not in 0..{step.vocab - 1})"))
    for t, i in schema.node_input_steps():
        a, b = seq[t], seq[t + 1]
        if a == b:
            out.append(Violation(t, f"node {i} inputs must differ (in1 == in2 == {a})"))
        elif a > b:
            out.append(Violation(t, f"node {i} inputs not canonical (in1={a} > in2={b})"))
    out.sort(key=lambda v: v.step)
    return out


def validate(seq: Sequence[int], schema: DecisionSchema) -> DesignPoint:
    """Decode ``seq`` into a design point.

    Raises ``SequenceLengthError`` for a wrong length and
    ``InvalidSequenceError`` (carrying the full violation list) otherwise.
    """
    violations = find_violations(seq, schema)
    if violations:
        raise InvalidSequenceError(violations)
    return _decode_unchecked([int(v) for v in seq], schema)


decode = validate


def _decode_unchecked(seq: list[int], schema: DecisionSchema) -> DesignPoint:
    per_cell = (schema.B - 2) * 4
    cells = []
    for c, kind in enumerate((CellKind.NORMAL, CellKind.REDUCTION)):
        chunk = seq[c * per_cell:(c + 1) * per_cell]
        nodes = tuple(
            NodeSpec(chunk[j], chunk[j + 1], OpKind(chunk[j + 2]), OpKind(chunk[j + 3]))
            for j in range(0, per_cell, 4)
        )
        cells.append(CellSpec(kind, nodes))
    p, g, r, d = seq[schema.S:]
    accel = AcceleratorConfig(schema.pe_arrays[p], schema.g_buf_kb[g], schema.r_buf_bytes[r], schema.dataflows[d])
    return DesignPoint(Genotype(cells[0], cells[1], schema.n_cells, schema.r_cells), accel)


def canonicalize_actions(actions: Sequence[int], schema: DecisionSchema) -> list[int]:
    """Swap (in1, op1) with (in2, op2) wherever in1 > in2."""
    seq = [int(a) for a in actions]
    for t, _ in schema.node_input_steps():
        if seq[t] > seq[t + 1]:
            seq[t], seq[t + 1] = seq[t + 1], seq[t]
            seq[t + 2], seq[t + 3] = seq[t + 3], seq[t + 2]
    return seq


def sample_sequences(schema: DecisionSchema, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` canonical decision sequences uniformly, as an (n, len) array.

    Node inputs at position i are a uniform 2-subset of {0..i-1}; each op is
    uniform over the six operations and independent of the other.
    """
    out = np.empty((n, len(schema)), dtype=np.int64)
    for t, i in schema.node_input_steps():
        a = rng.integers(0, i, size=n)
        b = rng.integers(0, i - 1, size=n)
        b = b + (b >= a)
        out[:, t] = np.minimum(a, b)
        out[:, t + 1] = np.maximum(a, b)
        out[:, t + 2] = rng.integers(0, N_OPS, size=n)
        out[:, t + 3] = rng.integers(0, N_OPS, size=n)
    for t in range(schema.S, len(schema)):
        out[:, t] = rng.integers(0, schema.steps[t].vocab, size=n)
    return out


def uniform_sample(schema: DecisionSchema, rng_seed: int) -> DesignPoint:
    seq = sample_sequences(schema, 1, np.random.default_rng(rng_seed))[0]
    return _decode_unchecked(seq.tolist(), schema)


def cell_count(B: int) -> int:
    """Distinct canonical cells with B nodes: prod_i C(i,2) * 36."""
    return math.prod(math.comb(i, 2) * N_OPS * N_OPS for i in range(2, B))


def accel_count(schema: DecisionSchema) -> int:
    return len(schema.pe_arrays) * len(schema.g_buf_kb) * len(schema.r_buf_bytes) * len(schema.dataflows)


def count_space(schema: DecisionSchema, include_accel: bool = True) -> int:
    n = cell_count(schema.B) ** 2
    return n * accel_count(schema) if include_accel else n


def formula_count(B: int) -> int:
    """The closed form (6 * (B-2)!)**4, kept for comparison with ``count_space``."""
    return (N_OPS * math.factorial(B - 2)) ** 4


def enumerate_cells(B: int, kind: CellKind = CellKind.NORMAL) -> Iterable[CellSpec]:
    """All canonical cells of B nodes, in lexicographic decision order."""
    per_node = [
        [(a, b, o1, o2) for a, b in combinations(range(i), 2) for o1 in OpKind for o2 in OpKind]
        for i in range(2, B)
    ]

    def rec(k, acc):
        if k == len(per_node):
            yield CellSpec(kind, tuple(NodeSpec(*x) for x in acc))
            return
        for choice in per_node[k]:
            yield from rec(k + 1, acc + [choice])

    yield from rec(0, [])


def format_sequence(seq: Iterable[int]) -> str:
    return ",".join(str(int(v)) for v in seq)


def parse_sequence(line: str) -> list[int]:
    """Integers separated by commas and/or whitespace."""
    try:
        return [int(tok) for tok in line.replace(",", " ").split()]
    except ValueError as exc:
        raise EncodingError(f"malformed decision line: {exc}") from None


def genotype_key(g: Genotype) -> str:
    """Canonical string for a genotype, stable across runs and platforms."""
    parts = []
    for cell in (g.normal, g.reduction):
        for n in cell.nodes:
            n = n.canonical()
            parts.append(f"{n.in1}{n.in2}{int(n.op1)}{int(n.op2)}")
    return f"{g.n_cells}/{g.r_cells}:" + ".".join(parts)
