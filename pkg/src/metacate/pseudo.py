"""Nuisance outcome models and regression-adjusted pseudo-outcomes.

For each task we fit two nuisance regressions of the observed outcome on
covariates, one per arm: mu0 on controls, mu1 on treated units. Both are
cross-fitted: units are split into folds and each fold's predictions come
from a model that never saw that unit; queries for unknown units use the
full-data fit. Pseudo-outcomes and evaluation scores only ever query the
opposite arm's model, so no unit is scored by a model trained on it.

Pseudo-outcome target for the meta-learner, per task:
    treated unit:  tau~ = y - mu0(x)
    control unit:  tau~ = mu1(x) - y        (only in "all_units" mode)
The default "treated_only" mode uses just the treated rows.

Evaluation scores (consumed by the ranking metrics):
    treated unit:  gamma = y - mu0(x)
    control unit:  gamma = mu1(x) - y
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import _kernels
from .errors import ConfigError, DataError, ShapeMismatchError, StateError
from .synthgen import GroundTruth, true_cate_many
from .tasks import MetaDataset, Sample, TaskDataset

NUISANCE_KINDS = ("knn", "mlp", "oracle")
PSEUDO_MODES = ("treated_only", "all_units")
ARMS = ("control", "treated")


@dataclass(frozen=True)
class NuisanceConfig:
    kind: str = "knn"
    n_folds: int = 5
    knn_k: int = 10
    mlp_hidden: int = 32
    mlp_blocks: int = 1
    mlp_steps: int = 400
    mlp_lr: float = 0.02
    mlp_batch: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in NUISANCE_KINDS:
            raise ConfigError(f"nuisance kind must be one of {NUISANCE_KINDS}, got {self.kind!r}")
        if self.n_folds < 2:
            raise ConfigError(f"n_folds must be >= 2, got {self.n_folds}")
        if self.knn_k < 1:
            raise ConfigError(f"knn_k must be >= 1, got {self.knn_k}")
        for name in ("mlp_hidden", "mlp_steps", "mlp_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mlp_blocks < 0:
            raise ConfigError(f"mlp_blocks must be >= 0, got {self.mlp_blocks}")
        if not self.mlp_lr > 0:
            raise ConfigError(f"mlp_lr must be > 0, got {self.mlp_lr}")


@dataclass
class PseudoOutcomeBatch:
    """Pseudo-outcomes for one task, aligned with td.adapt_units(mode)."""

    task_id: int
    values: NDArray[np.float64]
    mode: str


class _KNNRegressor:
    """Mean of the k nearest training outcomes, deterministic tie-break."""

    def __init__(self, k: int):
        self.k = k
        self._X = None
        self._y = None

    def fit(self, X: NDArray[np.float64], y: NDArray[np.float64], rng=None) -> "_KNNRegressor":
        if X.shape[0] < 1:
            raise DataError("knn needs at least one training point")
        self._X = np.ascontiguousarray(X, dtype=np.float64)
        self._y = np.ascontiguousarray(y, dtype=np.float64)
        return self

    def predict(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        if self._X is None:
            raise StateError("knn model is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        k = min(self.k, self._X.shape[0])
        out = np.empty(X.shape[0])
        # chunked pairwise distances; ties broken by training index (stable sort)
        chunk = max(1, min(X.shape[0], 2_000_000 // max(1, self._X.shape[0])))
        for lo in range(0, X.shape[0], chunk):
            Q = X[lo : lo + chunk]
            d2 = (
                np.sum(Q * Q, axis=1)[:, None]
                - 2.0 * (Q @ self._X.T)
                + np.sum(self._X * self._X, axis=1)[None, :]
            )
            nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
            out[lo : lo + chunk] = self._y[nearest].mean(axis=1)
        return out


class _MLPRegressor:
    """Small residual MLP trained with minibatch SGD on squared error."""

    def __init__(self, in_dim: int, hidden: int, blocks: int, steps: int, lr: float, batch: int):
        self.dims = (in_dim, hidden, blocks, 1)
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self._flat = None

    def _init(self, rng: np.random.Generator) -> NDArray[np.float64]:
        i, h, n, o = self.dims
        chunks = []
        for out_d, in_d in [(h, i)] + [(h, h)] * n + [(o, h)]:
            bound = 1.0 / np.sqrt(in_d)
            chunks.append(rng.uniform(-bound, bound, size=out_d * in_d))
            chunks.append(rng.uniform(-bound, bound, size=out_d))
        return np.concatenate(chunks)

    def fit(self, X: NDArray[np.float64], y: NDArray[np.float64], rng: np.random.Generator) -> "_MLPRegressor":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        n = X.shape[0]
        if n < 1:
            raise DataError("mlp nuisance needs at least one training point")
        flat = self._init(rng)
        grad = np.zeros_like(flat)
        for _ in range(self.steps):
            idx = rng.integers(0, n, size=min(self.batch, n))
            Xb, yb = X[idx], y[idx]
            grad[...] = 0.0
            out, acts, pre = _kernels._mlp_forward(flat, 0, self.dims, Xb)
            diff = out[:, 0] - yb
            d_out = (2.0 / idx.size) * diff[:, None]
            _kernels._mlp_backward(flat, grad, 0, self.dims, Xb, acts, pre, d_out)
            flat -= self.lr * grad
        self._flat = flat
        return self

    def predict(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        if self._flat is None:
            raise StateError("mlp model is not fitted")
        X = np.atleast_2d(np.ascontiguousarray(X, dtype=np.float64))
        out, _, _ = _kernels._mlp_forward(self._flat, 0, self.dims, X)
        return out[:, 0]


class _OracleRegressor:
    """Evaluates a known response function; nothing is estimated."""

    def __init__(self, fn):
        self.fn = fn

    def fit(self, X, y, rng=None) -> "_OracleRegressor":
        return self

    def predict(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.asarray(self.fn(np.atleast_2d(np.asarray(X, dtype=np.float64))), dtype=np.float64)


class NuisanceModel:
    """A full-data model plus per-fold models for leave-fold-out prediction.

    predict(X, ids): rows whose id was in the training data are predicted
    by the model of every fold except their own; unknown ids (or ids=None)
    fall back to the full-data model. ``is_crossfit`` is True when fold
    models exist (or for oracle models, which estimate nothing).
    """

    def __init__(self, kind: str, target_arm: str, full, fold_models: list, fold_of: dict[str, int]):
        self.kind = kind
        self.target_arm = target_arm
        self._full = full
        self._fold_models = fold_models
        self._fold_of = fold_of

    @property
    def n_folds(self) -> int:
        return len(self._fold_models)

    @property
    def is_crossfit(self) -> bool:
        return self.kind == "oracle" or self.n_folds >= 2

    def fold_of(self, sample_id: str) -> int | None:
        return self._fold_of.get(sample_id)

    def predict(self, X: NDArray[np.float64], ids: list[str] | None = None) -> NDArray[np.float64]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if ids is None or not self._fold_models:
            return self._full.predict(X)
        if len(ids) != X.shape[0]:
            raise ShapeMismatchError(f"{len(ids)} ids for {X.shape[0]} rows")
        out = np.empty(X.shape[0])
        folds = np.array([self._fold_of.get(i, -1) for i in ids])
        for f in np.unique(folds):
            mask = folds == f
            model = self._full if f < 0 else self._fold_models[f]
            out[mask] = model.predict(X[mask])
        return out


def _make_base(x_dim: int, cfg: NuisanceConfig, oracle_fn=None):
    if cfg.kind == "knn":
        return lambda: _KNNRegressor(cfg.knn_k)
    if cfg.kind == "mlp":
        return lambda: _MLPRegressor(
            x_dim, cfg.mlp_hidden, cfg.mlp_blocks, cfg.mlp_steps, cfg.mlp_lr, cfg.mlp_batch
        )
    if oracle_fn is None:
        raise ConfigError("oracle nuisance requires ground truth")
    return lambda: _OracleRegressor(oracle_fn)


def _fit_crossfit(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    ids: list[str],
    cfg: NuisanceConfig,
    seed: int,
    kind_label: str,
    arm: str,
    oracle_fn=None,
) -> NuisanceModel:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0] or X.shape[0] != len(ids):
        raise ShapeMismatchError(
            f"inconsistent nuisance data: {X.shape[0]} rows, {y.shape[0]} outcomes, {len(ids)} ids"
        )
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids in nuisance data")

    make = _make_base(X.shape[1], cfg, oracle_fn)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 0x6E75]))
    full = make().fit(X, y, rng)
    if cfg.kind == "oracle":
        return NuisanceModel(kind_label, arm, full, [], {})

    n = X.shape[0]
    # every fold needs at least one point, and leaving a fold out must not
    # empty the training set
    n_folds = min(cfg.n_folds, n // 2) if n >= 2 else 0
    if n_folds < 2:
        return NuisanceModel(kind_label, arm, full, [], {})
    perm = rng.permutation(n)
    fold_ids = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, n_folds)):
        fold_ids[chunk] = f
    fold_models = []
    for f in range(n_folds):
        keep = fold_ids != f
        fold_models.append(make().fit(X[keep], y[keep], rng))
    fold_of = {sid: int(fold_ids[i]) for i, sid in enumerate(ids)}
    return NuisanceModel(kind_label, arm, full, fold_models, fold_of)


def fit_nuisance(
    samples: list[Sample],
    arm: str,
    cfg: NuisanceConfig,
    seed: int,
    gt: GroundTruth | None = None,
    w: NDArray[np.float64] | None = None,
) -> NuisanceModel:
    """Fit a cross-fitted outcome regression E[Y | X] on one arm.

    ``samples`` may mix arms; only the requested arm is used. The oracle
    kind needs ground truth, and for the treated arm also the task's
    intervention vector (its response is baseline plus effect).
    """
    cfg.validate()
    if arm not in ARMS:
        raise ConfigError(f"arm must be one of {ARMS}, got {arm!r}")
    keep = [s for s in samples if s.treated == (arm == "treated")]
    if not keep:
        raise DataError(f"no samples in the {arm} arm")
    if len(keep) < 2:
        raise DataError(f"need at least 2 samples in the {arm} arm, got {len(keep)}")

    oracle_fn = None
    if cfg.kind == "oracle":
        if gt is None:
            raise ConfigError("oracle nuisance requires ground truth")
        if arm == "control":
            oracle_fn = lambda X: X @ gt.baseline_coeffs
        else:
            if w is None:
                raise ConfigError("oracle nuisance for the treated arm needs the intervention vector")
            w_arr = np.asarray(w, dtype=np.float64)
            oracle_fn = lambda X: X @ gt.baseline_coeffs + true_cate_many(gt, w_arr, X)

    X = np.stack([s.x for s in keep])
    y = np.asarray([s.y for s in keep], dtype=np.float64)
    ids = [s.sample_id for s in keep]
    return _fit_crossfit(X, y, ids, cfg, seed, cfg.kind, arm, oracle_fn)


def fit_task_nuisances(
    td: TaskDataset,
    cfg: NuisanceConfig,
    gt: GroundTruth | None = None,
) -> tuple[NuisanceModel, NuisanceModel]:
    """(mu0, mu1) for one task: control-arm and treated-arm outcome models."""
    mu0 = fit_nuisance(
        td.controls, "control", cfg, seed=_task_seed(cfg.seed, td.task_id, 0), gt=gt
    )
    mu1 = fit_nuisance(
        td.treated, "treated", cfg, seed=_task_seed(cfg.seed, td.task_id, 1), gt=gt, w=td.w
    )
    return mu0, mu1


def _task_seed(seed: int, task_id: int, arm: int) -> int:
    return int(np.random.SeedSequence([seed & 0x7FFFFFFF, task_id, arm]).generate_state(1)[0])


def ra_pseudo_outcomes(
    td: TaskDataset,
    mu0: NuisanceModel,
    mu1: NuisanceModel | None = None,
    mode: str = "treated_only",
) -> PseudoOutcomeBatch:
    """Regression-adjusted pseudo-outcomes for one task."""
    if mode not in PSEUDO_MODES:
        raise ConfigError(f"mode must be one of {PSEUDO_MODES}, got {mode!r}")
    treated_part = td.treated_y() - mu0.predict(
        td.treated_x(), [s.sample_id for s in td.treated]
    )
    if mode == "treated_only":
        return PseudoOutcomeBatch(td.task_id, treated_part, mode)
    if mu1 is None:
        raise ConfigError("all_units mode needs the treated-arm model")
    control_part = mu1.predict(td.control_x(), [s.sample_id for s in td.controls]) - td.control_y()
    return PseudoOutcomeBatch(td.task_id, np.concatenate([treated_part, control_part]), mode)


def gamma_scores(
    td: TaskDataset,
    m_hat0: NuisanceModel,
    m_hat1: NuisanceModel,
) -> NDArray[np.float64]:
    """Per-unit effect scores for ranking metrics, treated rows first.

    treated: y - m0(x); control: m1(x) - y, each from a model that never
    trained on the unit (opposite arm plus fold bookkeeping).
    """
    for m in (m_hat0, m_hat1):
        if not isinstance(m, NuisanceModel):
            raise StateError("gamma_scores needs fitted nuisance models")
        if not m.is_crossfit:
            raise StateError("gamma_scores requires cross-fitted nuisance models")
    g_treated = td.treated_y() - m_hat0.predict(td.treated_x(), [s.sample_id for s in td.treated])
    g_control = m_hat1.predict(td.control_x(), [s.sample_id for s in td.controls]) - td.control_y()
    return np.concatenate([g_treated, g_control])


def attach_pseudo_outcomes(
    md: MetaDataset,
    cfg: NuisanceConfig,
    mode: str = "treated_only",
    gt: GroundTruth | None = None,
) -> MetaDataset:
    """Fill tau_pseudo on treated samples (and control_pseudo per task).

    Works task by task using only that task's own data, so held-out tasks
    stay untouched by training information. Returns the same MetaDataset.
    """
    if mode not in PSEUDO_MODES:
        raise ConfigError(f"mode must be one of {PSEUDO_MODES}, got {mode!r}")
    for td in md.tasks:
        mu0, mu1 = fit_task_nuisances(td, cfg, gt)
        batch = ra_pseudo_outcomes(td, mu0, mu1, mode)
        for s, v in zip(td.treated, batch.values[: td.n_treated]):
            s.tau_pseudo = float(v)
        if mode == "all_units":
            td.control_pseudo = batch.values[td.n_treated :]
        td.invalidate_cache()
    return md
