"""Meta-training loop: task sampling, inner adaptation, outer update.

One outer iteration: draw a train task uniformly, copy the current
parameters, run k SGD steps on minibatches of that task's pseudo-outcomes,
then move the meta-parameters toward the adapted copy by beta_meta. With
k = 1 and beta_meta = 1 the trajectory collapses to plain SGD over task
minibatches, which is the no-meta-learning ablation.

The same loop also trains the outcome-regression baselines: an S-flavor
model mu(x, w) fit on all units (controls get a null intervention vector)
and a T-flavor pair with separate treated/control models. Their effect
prediction is mu(x, w) - mu(x, w_null).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from . import nn
from .errors import ConfigError, DataError, ShapeMismatchError
from .synthgen import GroundTruth, true_cate_many
from .tasks import MetaDataset, TaskDataset

MODEL_KINDS = ("caml", "caml_erm", "s_meta", "t_meta")
BASELINE_FLAVORS = ("s_learner", "t_learner")
NULL_KINDS = ("zero", "train_mean")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    adapt_steps: int = 10
    batch_size: int = 64
    inner_lr: float = 0.05
    meta_lr: float = 0.5
    adapt_scope: str = "treated_only"
    l1_coeff: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.adapt_steps < 1:
            raise ConfigError(f"adapt_steps must be >= 1, got {self.adapt_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.inner_lr > 0:
            raise ConfigError(f"inner_lr must be > 0, got {self.inner_lr}")
        if not self.meta_lr > 0:
            raise ConfigError(f"meta_lr must be > 0, got {self.meta_lr}")
        if self.adapt_scope not in ("treated_only", "all_units"):
            raise ConfigError(f"unknown adapt_scope {self.adapt_scope!r}")
        if self.l1_coeff < 0:
            raise ConfigError(f"l1_coeff must be >= 0, got {self.l1_coeff}")


@dataclass
class RunRecord:
    model_kind: str
    config: dict
    losses: list[float] = field(default_factory=list)
    task_ids: list[int] = field(default_factory=list)
    wall_time_s: float = 0.0
    n_params: int = 0
    backend: str = ""
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def loop_rng(seed: int) -> np.random.Generator:
    """The RNG stream used by the outer loop (task picks and minibatches).

    Kept separate from the parameter-init stream so the two never alias;
    exposed so equivalence tests can replay the exact draw sequence.
    """
    return np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 1]))


def _task_training_arrays(td: TaskDataset, scope: str):
    """(X, targets) for the inner loop, cached on the task."""
    key = f"adapt_{scope}"
    if key not in td._cache:
        if scope == "treated_only":
            X = td.treated_x()
            t = td.treated_tau_pseudo()
        else:
            if td.control_pseudo is None:
                raise DataError(
                    f"task {td.task_id} has no control pseudo-outcomes; "
                    "run the pseudo stage in all_units mode"
                )
            X = np.concatenate([td.treated_x(), td.control_x()])
            t = np.concatenate([td.treated_tau_pseudo(), td.control_pseudo])
        td._cache[key] = (np.ascontiguousarray(X), np.ascontiguousarray(t))
    return td._cache[key]


def adapt(
    params: nn.MetaModelParams,
    td: TaskDataset,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    loss_sink: list | None = None,
    inputs: str = "pseudo",
    w_override: NDArray[np.float64] | None = None,
) -> nn.MetaModelParams:
    """k SGD steps on one task's minibatches; returns an adapted copy.

    ``inputs`` selects the regression target: "pseudo" trains on
    pseudo-outcomes with the task's w; "outcome_w" and "outcome_null" are
    the baseline modes, regressing observed y with the task's w or a null
    vector (``w_override``) as the intervention input. The incoming params
    are never mutated.
    """
    cfg.validate()
    if rng is None:
        rng = loop_rng(cfg.seed)
    if inputs == "pseudo":
        X, targets = _task_training_arrays(td, cfg.adapt_scope)
        w_vec = td.w
    elif inputs == "outcome_w":
        X, targets = td.treated_x(), td.treated_y()
        w_vec = td.w
    elif inputs == "outcome_null":
        X, targets = td.control_x(), td.control_y()
        if w_override is None:
            raise DataError("outcome_null adaptation needs a null vector")
        w_vec = np.asarray(w_override, dtype=np.float64)
    else:
        raise ConfigError(f"unknown adapt inputs {inputs!r}")
    n = X.shape[0]
    if n == 0:
        raise DataError(f"task {td.task_id} has no in-scope samples")

    work = params.copy()
    Wb = np.ascontiguousarray(np.broadcast_to(w_vec, (cfg.batch_size, w_vec.size)))
    for _ in range(cfg.adapt_steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        loss, grad = nn.loss_and_grad(work, (Wb, X[idx], targets[idx]), l1=cfg.l1_coeff)
        work.flat -= cfg.inner_lr * grad
        if loss_sink is not None:
            loss_sink.append(loss)
    return work


def _train_tasks(md: MetaDataset) -> list[TaskDataset]:
    tasks = md.tasks_in("train") if md.split_of is not None else md.tasks
    if not tasks:
        raise ConfigError("no training tasks available")
    return tasks


def train_caml(
    md: MetaDataset,
    spec: nn.FusionSpec,
    cfg: TrainConfig,
) -> tuple[nn.MetaModelParams, RunRecord]:
    """Reptile over uniformly sampled train tasks with pseudo-outcome targets."""
    cfg.validate()
    tasks = _train_tasks(md)
    for td in tasks:
        if td.treated and td.treated[0].tau_pseudo is None:
            raise ConfigError(f"task {td.task_id} is missing pseudo-outcomes")

    params = nn.init_params(spec, cfg.seed)
    rng = loop_rng(cfg.seed)
    record = RunRecord(
        model_kind="caml" if cfg.adapt_steps > 1 else "caml_erm",
        config=asdict(cfg),
        n_params=spec.n_params,
        backend=nn.active_backend(),
    )
    start = time.perf_counter()
    for _ in range(cfg.iterations):
        j = int(rng.integers(0, len(tasks)))
        step_losses: list[float] = []
        adapted = adapt(params, tasks[j], cfg, rng, loss_sink=step_losses)
        params = nn.reptile_step(params, adapted, cfg.meta_lr)
        record.task_ids.append(tasks[j].task_id)
        record.losses.append(float(np.mean(step_losses)))
    record.wall_time_s = time.perf_counter() - start
    return params, record


@dataclass
class BaselineModel:
    """Outcome-regression baseline; effect = mu(x, w) - mu(x, w_null)."""

    flavor: str
    null_w: NDArray[np.float64]
    mu: nn.MetaModelParams | None = None  # s_learner
    mu1: nn.MetaModelParams | None = None  # t_learner, treated arm
    mu0: nn.MetaModelParams | None = None  # t_learner, control arm


def _null_vector(tasks: list[TaskDataset], e: int, null_kind: str) -> NDArray[np.float64]:
    if null_kind == "zero":
        return np.zeros(e)
    if null_kind == "train_mean":
        return np.mean([td.w for td in tasks], axis=0)
    raise ConfigError(f"unknown null_kind {null_kind!r}")


def train_meta_outcome_baseline(
    md: MetaDataset,
    spec: nn.FusionSpec,
    cfg: TrainConfig,
    flavor: str = "s_learner",
    null_kind: str = "zero",
) -> tuple[BaselineModel, RunRecord]:
    """Fit mu(x, w) on observed outcomes with the same meta loop.

    s_learner: one model; each task's adaptation set is its treated units
    (input w) plus the controls (input w_null). t_learner: separate models
    for the treated and control arms.
    """
    cfg.validate()
    if flavor not in BASELINE_FLAVORS:
        raise ConfigError(f"flavor must be one of {BASELINE_FLAVORS}, got {flavor!r}")
    tasks = _train_tasks(md)
    e = spec.w_dim
    null_w = _null_vector(tasks, e, null_kind)

    rng = loop_rng(cfg.seed)
    record = RunRecord(
        model_kind="s_meta" if flavor == "s_learner" else "t_meta",
        config={**asdict(cfg), "null_kind": null_kind},
        n_params=spec.n_params,
        backend=nn.active_backend(),
    )
    start = time.perf_counter()

    if flavor == "s_learner":
        params = nn.init_params(spec, cfg.seed)
        for _ in range(cfg.iterations):
            j = int(rng.integers(0, len(tasks)))
            td = tasks[j]
            X, targets, Wrows = _s_learner_arrays(td, null_w)
            losses: list[float] = []
            work = params.copy()
            for _ in range(cfg.adapt_steps):
                idx = rng.integers(0, X.shape[0], size=cfg.batch_size)
                loss, grad = nn.loss_and_grad(
                    work, (Wrows[idx], X[idx], targets[idx]), l1=cfg.l1_coeff
                )
                work.flat -= cfg.inner_lr * grad
                losses.append(loss)
            params = nn.reptile_step(params, work, cfg.meta_lr)
            record.task_ids.append(td.task_id)
            record.losses.append(float(np.mean(losses)))
        record.wall_time_s = time.perf_counter() - start
        return BaselineModel(flavor, null_w, mu=params), record

    # t_learner: the control model sees one "task" (the pool) every iteration
    for td in tasks:
        if td.n_controls == 0:
            raise DataError(f"t_learner needs controls; task {td.task_id} has none")
    params1 = nn.init_params(spec, cfg.seed)
    params0 = nn.init_params(spec, cfg.seed + 1)
    for _ in range(cfg.iterations):
        j = int(rng.integers(0, len(tasks)))
        td = tasks[j]
        losses: list[float] = []
        adapted1 = adapt(params1, td, cfg, rng, loss_sink=losses, inputs="outcome_w")
        params1 = nn.reptile_step(params1, adapted1, cfg.meta_lr)
        adapted0 = adapt(
            params0, td, cfg, rng, loss_sink=losses, inputs="outcome_null", w_override=null_w
        )
        params0 = nn.reptile_step(params0, adapted0, cfg.meta_lr)
        record.task_ids.append(td.task_id)
        record.losses.append(float(np.mean(losses)))
    record.wall_time_s = time.perf_counter() - start
    return BaselineModel(flavor, null_w, mu1=params1, mu0=params0), record


def _s_learner_arrays(td: TaskDataset, null_w: NDArray[np.float64]):
    key = "s_learner"
    if key not in td._cache:
        X = np.concatenate([td.treated_x(), td.control_x()])
        y = np.concatenate([td.treated_y(), td.control_y()])
        Wrows = np.concatenate(
            [
                np.broadcast_to(td.w, (td.n_treated, td.w.size)),
                np.broadcast_to(null_w, (td.n_controls, null_w.size)),
            ]
        )
        td._cache[key] = (
            np.ascontiguousarray(X),
            np.ascontiguousarray(y),
            np.ascontiguousarray(Wrows),
        )
    return td._cache[key]


class ZeroPredictor:
    """Predicts a zero effect everywhere; the floor every model must beat."""


class OraclePredictor:
    """Predicts the ground-truth effect; the ceiling (PEHE exactly 0)."""

    def __init__(self, gt: GroundTruth):
        self.gt = gt


def predict_cate_many(model, w, X) -> NDArray[np.float64]:
    """Effect predictions for one intervention against many covariate rows.

    Accepts trained meta-model parameters, a BaselineModel, or the
    Zero/Oracle reference predictors. Returns shape (n,) for scalar heads,
    else (n, m).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    n = X.shape[0]
    if isinstance(model, ZeroPredictor):
        return np.zeros(n)
    if isinstance(model, OraclePredictor):
        return true_cate_many(model.gt, w, X)
    if isinstance(model, nn.MetaModelParams):
        _check_dims(model, w, X)
        out = nn.forward_batch(model, np.broadcast_to(w, (n, w.size)), X)
        return out[:, 0] if model.spec.out_dim == 1 else out
    if isinstance(model, BaselineModel):
        if model.flavor == "s_learner":
            mu_w, mu_0 = model.mu, model.mu
        else:
            mu_w, mu_0 = model.mu1, model.mu0
        _check_dims(mu_w, w, X)
        at_w = nn.forward_batch(mu_w, np.broadcast_to(w, (n, w.size)), X)
        at_null = nn.forward_batch(mu_0, np.broadcast_to(model.null_w, (n, w.size)), X)
        out = at_w - at_null
        return out[:, 0] if mu_w.spec.out_dim == 1 else out
    raise ConfigError(f"cannot predict with model of type {type(model).__name__}")


def predict_cate(model, w, x) -> NDArray[np.float64]:
    """Effect prediction for a single (w, x) pair; shape (out_dim,)."""
    x = np.asarray(x, dtype=np.float64)
    out = predict_cate_many(model, w, x[None, :])
    return np.atleast_1d(out[0])


def _check_dims(params: nn.MetaModelParams, w, X):
    if w.shape != (params.spec.w_dim,):
        raise ShapeMismatchError(f"w has shape {w.shape}, model wants ({params.spec.w_dim},)")
    if X.shape[1] != params.spec.x_dim:
        raise ShapeMismatchError(f"x has dim {X.shape[1]}, model wants {params.spec.x_dim}")


def erm_config(cfg: TrainConfig) -> TrainConfig:
    """The no-meta-learning ablation: force single-step adaptation."""
    return replace(cfg, adapt_steps=1)
