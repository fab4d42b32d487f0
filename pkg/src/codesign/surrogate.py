"""Gaussian-process latency/energy predictor and its data pipeline.

``GPRegressor`` is an exact GP with a unit-variance RBF kernel
``k(x, x') = exp(-|x - x'|^2 / (2 tau^2))`` and Gaussian noise ``sigma^2``,
fitted by Cholesky factorization on standardized features and targets with
a zero prior mean. It follows the scikit-learn estimator protocol so it
drops into pipelines, ``clone`` and ``GridSearchCV``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cost_model import HardwareModel, InfeasibleError, clear_cache, simulate
from .design_space import DecisionSchema, DesignPoint, N_OPS, _decode_unchecked, encode, sample_sequences
from .network_lowering import MacroConfig, arch_summary, derive_network, derive_network_cached

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "log10_macs", "log10_params", "depth",
    "frac_conv3x3", "frac_conv5x5", "frac_dwconv3x3", "frac_dwconv5x5", "frac_maxpool", "frac_avgpool",
    "reductions", "pe_rows", "pe_cols", "log2_gbuf_kb", "log2_rbuf_bytes",
    "df_ws", "df_os", "df_rs", "df_nlr",
)
N_FEATURES = len(FEATURE_NAMES)
JITTER_FLOOR = 1e-10
MAX_TRAIN = 5000


class ConditioningError(np.linalg.LinAlgError):
    pass


class CollectionError(RuntimeError):
    pass


def featurize(point: DesignPoint, macro: MacroConfig = MacroConfig(), graph=None) -> np.ndarray:
    summary = arch_summary(graph if graph is not None else derive_network_cached(point.dnn, macro))
    a = point.accel
    onehot = [0.0] * 4
    onehot[int(a.dataflow)] = 1.0
    return np.array(
        [math.log10(summary.total_macs), math.log10(summary.total_params), float(summary.depth),
         *summary.op_fractions, float(summary.reduction_count),
         float(a.pe_rows), float(a.pe_cols), math.log2(a.g_buf_kb), math.log2(a.r_buf_bytes), *onehot],
        dtype=float,
    )


class DesignFeaturizer(TransformerMixin, BaseEstimator):
    """Map design points (or decision sequences) to the fixed feature vector."""

    def __init__(self, schema: DecisionSchema | None = None, macro: MacroConfig = MacroConfig()):
        self.schema = schema
        self.macro = macro

    def fit(self, X, y=None):
        self.n_features_out_ = N_FEATURES
        return self

    def transform(self, X) -> np.ndarray:
        rows = []
        for item in X:
            if not isinstance(item, DesignPoint):
                if self.schema is None:
                    raise ValueError("a schema is required to featurize raw decision sequences")
                item = _decode_unchecked([int(v) for v in item], self.schema)
            rows.append(featurize(item, self.macro))
        return np.vstack(rows) if rows else np.empty((0, N_FEATURES))

    def get_feature_names_out(self, input_features=None):
        return np.array(FEATURE_NAMES, dtype=object)


@dataclass
class Standardization:
    """Per-column mean/stdev; zero-variance columns get stdev 1 and a flag."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, a: np.ndarray) -> "Standardization":
        a = np.asarray(a, dtype=float)
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        # a rounded mean can leave a tiny nonzero std on identical values
        constant = (np.ptp(a, axis=0) == 0) | ~(std > 0)
        std = np.where(constant, 1.0, std)
        return cls(mean, std, np.atleast_1d(constant))

    def apply(self, a):
        return (np.asarray(a, dtype=float) - self.mean) / self.std

    def invert(self, a):
        return np.asarray(a, dtype=float) * self.std + self.mean


def rbf_kernel(A: np.ndarray, B: np.ndarray, length_scale: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * length_scale**2))


class GPRegressor(RegressorMixin, BaseEstimator):
    """Exact GP regression with an RBF kernel.

    Parameters
    ----------
    length_scale : float
        RBF length-scale tau (in standardized feature units when
        ``normalize_X``).
    noise : float
        Observation noise variance sigma^2 in standardized target units.
        Zero is replaced by a 1e-10 jitter floor.
    normalize_X, normalize_y : bool
        Standardize features / targets with training-split statistics.
    log_target : bool
        Model ``log(y)`` instead of ``y``; predictions are mapped back with
        ``exp``. Targets must then be positive.
    max_samples : int
        Refuse to fit more rows than this.
    """

    def __init__(self, length_scale=1.0, noise=1e-2, normalize_X=True, normalize_y=True,
                 log_target=False, max_samples=MAX_TRAIN):
        self.length_scale = length_scale
        self.noise = noise
        self.normalize_X = normalize_X
        self.normalize_y = normalize_y
        self.log_target = log_target
        self.max_samples = max_samples

    def _target(self, y):
        if self.log_target:
            if np.any(y <= 0):
                raise ValueError("log_target requires positive targets")
            return np.log(y)
        return y

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True, dtype=float)
        if self.length_scale <= 0:
            raise ValueError("length_scale must be > 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if X.shape[0] > self.max_samples:
            raise ValueError(f"{X.shape[0]} training rows exceeds max_samples={self.max_samples}")
        noise = self.noise
        if noise == 0:
            warnings.warn("noise=0 requested; using jitter floor 1e-10", RuntimeWarning, stacklevel=2)
            noise = JITTER_FLOOR
        t = self._target(y)
        self.x_scaling_ = Standardization.fit(X) if self.normalize_X else \
            Standardization(np.zeros(X.shape[1]), np.ones(X.shape[1]), np.zeros(X.shape[1], bool))
        self.y_scaling_ = Standardization.fit(t[:, None]) if self.normalize_y else \
            Standardization(np.zeros(1), np.ones(1), np.zeros(1, bool))
        self.X_train_ = self.x_scaling_.apply(X)
        self.y_train_ = self.y_scaling_.apply(t[:, None]).ravel()
        K = rbf_kernel(self.X_train_, self.X_train_, self.length_scale)
        K[np.diag_indices_from(K)] += noise
        try:
            self.L_ = linalg.cholesky(K, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise ConditioningError(
                f"kernel matrix not positive definite (noise={self.noise}); "
                f"raise noise or add a jitter floor above {JITTER_FLOOR}") from exc
        self.alpha_ = linalg.cho_solve((self.L_, True), self.y_train_, check_finite=False)
        self.noise_ = noise
        self.n_features_in_ = X.shape[1]
        return self

    def log_marginal_likelihood(self) -> float:
        """Log evidence of the standardized training targets."""
        check_is_fitted(self, "alpha_")
        n = self.y_train_.shape[0]
        return float(-0.5 * self.y_train_ @ self.alpha_ - np.log(np.diag(self.L_)).sum() - 0.5 * n * math.log(2 * math.pi))

    def _latent(self, X, return_var):
        check_is_fitted(self, "alpha_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        Ks = rbf_kernel(self.x_scaling_.apply(X), self.X_train_, self.length_scale)
        mean = Ks @ self.alpha_
        if not return_var:
            return mean, None
        v = linalg.solve_triangular(self.L_, Ks.T, lower=True, check_finite=False)
        var = 1.0 - (v * v).sum(axis=0)
        if np.any(var < 0):
            if np.any(var < -1e-8):
                warnings.warn("negative predictive variance clamped to 0", RuntimeWarning, stacklevel=3)
            var = np.maximum(var, 0.0)
        return mean, var

    def predict(self, X, return_var=False):
        """Posterior mean in target units; optionally the latent variance.

        The variance is returned in the modeled target scale (log units when
        ``log_target``), i.e. standardized variance times the target stdev
        squared.
        """
        mean, var = self._latent(X, return_var)
        out = self.y_scaling_.invert(mean[:, None]).ravel()
        if self.log_target:
            out = np.exp(out)
        if return_var:
            return out, var * float(self.y_scaling_.std[0]) ** 2
        return out


def gp_fit(X, y, tau: float, sigma2: float, **kw) -> GPRegressor:
    return GPRegressor(length_scale=tau, noise=sigma2, **kw).fit(X, y)


def gp_predict(model: GPRegressor, X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    mean, var = model.predict(np.atleast_2d(X), return_var=True)
    return (mean[0], var[0]) if single else (mean, var)


DEFAULT_TAU_GRID = (0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_SIGMA2_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


def select_hyperparams(X, y, tau_grid=DEFAULT_TAU_GRID, sigma2_grid=DEFAULT_SIGMA2_GRID, **kw) -> tuple[float, float]:
    """Grid point maximizing the log marginal likelihood.

    Ties go to the smaller tau, then the smaller sigma^2.
    """
    if not tau_grid or not sigma2_grid:
        raise ValueError("hyper-parameter grids must be non-empty")
    if min(tau_grid) <= 0 or min(sigma2_grid) <= 0:
        raise ValueError("grid values must be positive")
    best = None
    for tau in sorted(set(tau_grid)):
        for s2 in sorted(set(sigma2_grid)):
            try:
                lml = gp_fit(X, y, tau, s2, **kw).log_marginal_likelihood()
            except ConditioningError:
                log.debug("grid point tau=%s sigma2=%s failed to factorize", tau, s2)
                continue
            if best is None or lml > best[0]:
                best = (lml, tau, s2)
    if best is None:
        raise ConditioningError("no grid point could be factorized")
    return best[1], best[2]


@dataclass
class Dataset:
    """One target metric over a set of design points."""

    features: np.ndarray
    targets: np.ndarray
    sequences: np.ndarray
    metric: str

    def __post_init__(self):
        if len(self.features) < 2:
            raise ValueError("a dataset needs at least 2 rows")

    def __len__(self):
        return len(self.targets)

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        a = Dataset(self.features[:n_train], self.targets[:n_train], self.sequences[:n_train], self.metric)
        b = Dataset(self.features[n_train:], self.targets[n_train:], self.sequences[n_train:], self.metric)
        return a, b

    def standardization(self) -> tuple[Standardization, Standardization]:
        return Standardization.fit(self.features), Standardization.fit(self.targets[:, None])


@dataclass
class Collection:
    sequences: np.ndarray
    features: np.ndarray
    latency: np.ndarray
    energy: np.ndarray
    redraws: list[tuple[int, int, str]] = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.latency)

    def datasets(self) -> tuple[Dataset, Dataset]:
        return (Dataset(self.features, self.latency, self.sequences, "latency_ms"),
                Dataset(self.features, self.energy, self.sequences, "energy_mj"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_dec = self.sequences.shape[1]
        w.writerow([f"d{i}" for i in range(n_dec)] + list(FEATURE_NAMES) + ["latency_ms", "energy_mj"])
        for seq, feat, lat, en in zip(self.sequences, self.features, self.latency, self.energy):
            w.writerow([int(v) for v in seq] + [repr(float(v)) for v in feat] + [repr(float(lat)), repr(float(en))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Collection":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty dataset file")
        header = rows[0]
        n_dec = sum(1 for h in header if h.startswith("d") and h[1:].isdigit())
        if header[n_dec:] != list(FEATURE_NAMES) + ["latency_ms", "energy_mj"]:
            raise ValueError("dataset header does not match the feature layout")
        data = rows[1:]
        seq = np.array([[int(v) for v in r[:n_dec]] for r in data], dtype=np.int64)
        num = np.array([[float(v) for v in r[n_dec:]] for r in data], dtype=float)
        return cls(seq, num[:, :N_FEATURES], num[:, N_FEATURES], num[:, N_FEATURES + 1])


def derived_seed(seed: int, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1)[0])


def collect_dataset(n: int, seed: int, schema: DecisionSchema, macro: MacroConfig = MacroConfig(),
                    hw: HardwareModel | None = None, max_attempts: int = 100) -> Collection:
    """Sample ``n`` design points and measure them with the cost model.

    Point ``j`` is drawn with a seed derived from ``(seed, j, attempt)``;
    points the cost model cannot map are redrawn and logged in ``redraws``.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    seqs, feats, lats, ens, redraws = [], [], [], [], []
    for j in range(n):
        for attempt in range(max_attempts):
            seq = sample_sequences(schema, 1, np.random.default_rng(derived_seed(seed, j, attempt)))[0]
            point = _decode_unchecked(seq.tolist(), schema)
            graph = derive_network_cached(point.dnn, macro)
            hw_j = HardwareModel(point.accel) if hw is None else hw.with_accel(point.accel)
            try:
                report = simulate(graph, hw_j)
            except InfeasibleError as exc:
                redraws.append((j, attempt, str(exc)))
                log.info("index %d attempt %d redrawn: %s", j, attempt, exc)
                continue
            break
        else:
            raise CollectionError(f"index {j}: no feasible design after {max_attempts} attempts")
        seqs.append(seq)
        feats.append(featurize(point, macro, graph))
        lats.append(report.latency_ms)
        ens.append(report.energy_mj)
    return Collection(np.array(seqs), np.array(feats), np.array(lats), np.array(ens), redraws, seed)


def mdape(y_true, y_pred) -> float:
    """Median absolute percentage error, as a fraction."""
    y_true = np.asarray(y_true, dtype=float)
    return float(np.median(np.abs(np.asarray(y_pred) - y_true) / np.abs(y_true)))


def default_regressors(tau=None, sigma2=None, log_target=True) -> dict[str, BaseEstimator]:
    from sklearn.linear_model import Ridge
    from sklearn.neighbors import KNeighborsRegressor
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    gp = GPRegressor(length_scale=tau or 1.0, noise=sigma2 or 1e-2, log_target=log_target)
    return {
        "gp": gp,
        "knn5": make_pipeline(StandardScaler(), KNeighborsRegressor(n_neighbors=5)),
        "ridge": make_pipeline(StandardScaler(), Ridge(alpha=1.0)),
    }


@dataclass
class HarnessRow:
    name: str
    mse: float
    mdape: float
    fit_seconds: float
    predict_per_second: float


def mse_harness(train: Dataset, test: Dataset, regressors: dict[str, BaseEstimator] | None = None) -> list[HarnessRow]:
    from sklearn.base import clone

    regressors = regressors or default_regressors()
    rows = []
    for name, est in regressors.items():
        est = clone(est)
        t0 = time.perf_counter()
        est.fit(train.features, train.targets)
        fit_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        pred = est.predict(test.features)
        pred_s = max(time.perf_counter() - t0, 1e-9)
        mse = float(np.mean((pred - test.targets) ** 2))
        rows.append(HarnessRow(name, mse, mdape(test.targets, pred), fit_s, len(test) / pred_s))
    return rows


def simulator_throughput(sequences: Sequence[Sequence[int]], schema: DecisionSchema,
                         macro: MacroConfig = MacroConfig(), hw: HardwareModel | None = None) -> float:
    """Designs per second the cost model sustains from a cold cache.

    Network lowering is excluded; the timed part is the tiling search and
    roll-up that the surrogate replaces.
    """
    graphs = []
    for seq in sequences:
        p = _decode_unchecked([int(v) for v in seq], schema)
        graphs.append((derive_network(p.dnn, macro), HardwareModel(p.accel) if hw is None else hw.with_accel(p.accel)))
    clear_cache()
    t0 = time.perf_counter()
    for g, h in graphs:
        simulate(g, h, use_cache=False)
    return len(graphs) / (time.perf_counter() - t0)


def harness_to_text(rows: list[HarnessRow], simulator_rate: float | None = None) -> str:
    lines = ["regressor\tmse\tmdape\tfit_seconds\tpredict_per_second\tspeedup_vs_simulator"]
    for r in rows:
        ratio = "" if simulator_rate is None else repr(r.predict_per_second / simulator_rate)
        lines.append(f"{r.name}\t{r.mse!r}\t{r.mdape!r}\t{r.fit_seconds!r}\t{r.predict_per_second!r}\t{ratio}")
    return "\n".join(lines) + "\n"


@dataclass
class SurrogatePair:
    """Fitted latency and energy predictors sharing one featurizer."""

    latency: GPRegressor
    energy: GPRegressor
    macro: MacroConfig = MacroConfig()

    def predict(self, point: DesignPoint, graph=None) -> tuple[float, float]:
        x = featurize(point, self.macro, graph)[None, :]
        return float(self.latency.predict(x)[0]), float(self.energy.predict(x)[0])

    def save(self, path) -> None:
        arrays = {}
        for tag, m in (("latency", self.latency), ("energy", self.energy)):
            arrays.update({
                f"{tag}_X": m.X_train_, f"{tag}_y": m.y_train_, f"{tag}_L": m.L_, f"{tag}_alpha": m.alpha_,
                f"{tag}_xmean": m.x_scaling_.mean, f"{tag}_xstd": m.x_scaling_.std,
                f"{tag}_xconst": m.x_scaling_.constant,
                f"{tag}_ymean": m.y_scaling_.mean, f"{tag}_ystd": m.y_scaling_.std,
                f"{tag}_params": np.array([m.length_scale, m.noise, m.noise_, float(m.log_target),
                                           float(m.normalize_X), float(m.normalize_y)]),
            })
        arrays["format_version"] = np.array([1])
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, macro: MacroConfig = MacroConfig()) -> "SurrogatePair":
        z = np.load(path)
        if int(z["format_version"][0]) != 1:
            raise ValueError("unsupported surrogate file version")
        models = []
        for tag in ("latency", "energy"):
            tau, noise, noise_, logt, nx, ny = z[f"{tag}_params"]
            m = GPRegressor(length_scale=float(tau), noise=float(noise), normalize_X=bool(nx),
                            normalize_y=bool(ny), log_target=bool(logt))
            m.X_train_ = z[f"{tag}_X"]
            m.y_train_ = z[f"{tag}_y"]
            m.L_ = z[f"{tag}_L"]
            m.alpha_ = z[f"{tag}_alpha"]
            m.x_scaling_ = Standardization(z[f"{tag}_xmean"], z[f"{tag}_xstd"], z[f"{tag}_xconst"])
            m.y_scaling_ = Standardization(z[f"{tag}_ymean"], z[f"{tag}_ystd"], np.zeros(1, bool))
            m.noise_ = float(noise_)
            m.n_features_in_ = m.X_train_.shape[1]
            models.append(m)
        return cls(models[0], models[1], macro)


def fit_surrogates(collection: Collection, n_train: int | None = None, tau_grid=DEFAULT_TAU_GRID,
                   sigma2_grid=DEFAULT_SIGMA2_GRID, log_target=True, macro: MacroConfig = MacroConfig(),
                   max_select_rows: int = 1000) -> SurrogatePair:
    """Select hyper-parameters on (a prefix of) the training split and fit both GPs."""
    lat, en = collection.datasets()
    n_train = n_train or len(collection)
    models = []
    for ds in (lat, en):
        train, _ = ds.split(n_train)
        m = min(max_select_rows, len(train))
        tau, s2 = select_hyperparams(train.features[:m], train.targets[:m], tau_grid, sigma2_grid, log_target=log_target)
        log.info("%s: tau=%s sigma2=%s", ds.metric, tau, s2)
        models.append(gp_fit(train.features, train.targets, tau, s2, log_target=log_target))
    return SurrogatePair(models[0], models[1], macro)
