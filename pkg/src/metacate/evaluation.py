"""Zero-shot evaluation: PEHE, ranking metrics, and the per-split driver.

PEHE is the mean squared difference between true and predicted effects.
The ranking metrics rate a model's ability to prioritize units: sort by
the model's predicted effect, keep the top ceil((1-u)*N), and compare
their mean effect score (gamma) against the population mean. Gammas come
either from cross-fitted nuisance models (the realistic pipeline) or, on
synthetic data, from ground truth plus fresh noise (isolating metric noise
from estimator noise).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DataError, LeakageError, ShapeMismatchError
from .pseudo import NuisanceConfig, fit_task_nuisances, gamma_scores
from .synthgen import GroundTruth
from .tasks import MetaDataset
from .trainer import predict_cate_many

DEFAULT_US = (0.999, 0.998, 0.995, 0.99)
GAMMA_SOURCES = ("oracle", "estimated")


def pehe(tau_true, tau_hat) -> float:
    """Mean squared error between effect vectors (not rooted).

    Multi-outcome inputs are averaged over outcome dimensions too.
    """
    t = np.asarray(tau_true, dtype=np.float64)
    h = np.asarray(tau_hat, dtype=np.float64)
    if t.shape != h.shape:
        raise ShapeMismatchError(f"shapes differ: {t.shape} vs {h.shape}")
    if t.size == 0:
        raise DataError("pehe needs at least one sample")
    return float(np.mean((t - h) ** 2))


def _top_group(scores: NDArray[np.float64], u: float) -> NDArray[np.int64]:
    if not 0.0 < u < 1.0:
        raise ConfigError(f"u must be in (0, 1), got {u}")
    n = scores.shape[0]
    if n == 0:
        raise DataError("empty score list")
    # ceil((1-u)*n) with a guard against float fuzz in (1-u);
    # mathematically the group is never empty for 0 < u < 1
    size = max(1, int(np.ceil((1.0 - u) * n - 1e-9)))
    order = np.argsort(-scores, kind="stable")
    return order[:size]


def rate_at_u(scores, gammas, u: float) -> float:
    """Mean gamma of the top-ranked group minus the overall mean gamma.

    The group holds the ceil((1-u)*N) highest-scored units; score ties are
    broken by original index so the metric is deterministic.
    """
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gammas, dtype=np.float64)
    if s.shape != g.shape or s.ndim != 1:
        raise ShapeMismatchError(f"scores and gammas must be equal-length 1-d, got {s.shape} vs {g.shape}")
    top = _top_group(s, u)
    return float(g[top].mean() - g.mean())


def precision_recall_at_u(scores, labels, u: float) -> tuple[float, float]:
    """Fraction of the top group that is positive, and of positives captured."""
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    if s.shape != lab.shape or s.ndim != 1:
        raise ShapeMismatchError(f"scores and labels must be equal-length 1-d, got {s.shape} vs {lab.shape}")
    n_pos = int(lab.sum())
    if n_pos == 0:
        raise DataError("recall is undefined: no positive labels")
    top = _top_group(s, u)
    hits = int(lab[top].sum())
    return hits / top.size, hits / n_pos


@dataclass
class TaskMetrics:
    task_id: int
    n_treated: int
    pehe: float
    rate_at: dict[float, float]
    precision_at: dict[float, float]
    recall_at: dict[float, float]


@dataclass
class EvalReport:
    split: str
    model_id: str
    gamma_source: str
    us: list[float]
    seed: int
    tasks: list[TaskMetrics] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv_rows(self) -> list[tuple]:
        """Flat rows (task_id, metric, u, value); aggregates use task_id=-1."""
        rows = []
        for t in self.tasks:
            rows.append((t.task_id, "pehe", "", t.pehe))
            for u in self.us:
                rows.append((t.task_id, "rate", u, t.rate_at[u]))
                if u in t.precision_at:
                    rows.append((t.task_id, "precision", u, t.precision_at[u]))
                    rows.append((t.task_id, "recall", u, t.recall_at[u]))
        for name, val in sorted(self.aggregates.items()):
            rows.append((-1, name, "", val))
        return rows


def _aggregate(tasks: list[TaskMetrics], us) -> dict:
    out = {}
    per = {
        "pehe": [t.pehe for t in tasks],
    }
    for u in us:
        per[f"rate@{u}"] = [t.rate_at[u] for t in tasks]
        # precision/recall aggregate over the tasks that define them
        per[f"precision@{u}"] = [t.precision_at[u] for t in tasks if u in t.precision_at]
        per[f"recall@{u}"] = [t.recall_at[u] for t in tasks if u in t.recall_at]
    for name, vals in per.items():
        if not vals:
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[f"{name}_mean"] = float(arr.mean())
        out[f"{name}_std"] = float(arr.std(ddof=0))
    return out


def evaluate_zero_shot(
    model,
    md: MetaDataset,
    split: str = "test",
    us=DEFAULT_US,
    gamma_source: str = "estimated",
    gt: GroundTruth | None = None,
    nuisance: NuisanceConfig | None = None,
    tau_threshold: float = 0.0,
    seed: int = 0,
    model_id: str = "model",
    trained_on: set[int] | None = None,
) -> EvalReport:
    """Score a model on every task of a held-out split.

    Per task, predictions are made for the treated units; PEHE and the
    label threshold use stored ground-truth effects; gammas are either the
    true effect plus fresh noise ("oracle", synthetic only) or estimated
    from cross-fitted outcome models ("estimated"). ``trained_on`` is the
    set of task ids the model saw in training; overlap with the requested
    split is a protocol violation.
    """
    us = [float(u) for u in us]
    for u in us:
        if not 0.0 < u < 1.0:
            raise ConfigError(f"u must be in (0, 1), got {u}")
    if gamma_source not in GAMMA_SOURCES:
        raise ConfigError(f"gamma_source must be one of {GAMMA_SOURCES}, got {gamma_source!r}")
    tasks = md.tasks_in(split)
    if not tasks:
        raise DataError(f"split {split!r} has no tasks")
    if trained_on is not None:
        overlap = trained_on & {td.task_id for td in tasks}
        if overlap:
            raise LeakageError(
                f"model was trained on tasks {sorted(overlap)} in the {split!r} split"
            )
    if gamma_source == "oracle" and gt is None:
        raise ConfigError("oracle gammas need ground truth")
    if gamma_source == "estimated" and nuisance is None:
        nuisance = NuisanceConfig()

    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 0xE7A1]))
    report = EvalReport(
        split=split,
        model_id=model_id,
        gamma_source=gamma_source,
        us=list(us),
        seed=seed,
    )
    for td in sorted(tasks, key=lambda t: t.task_id):
        X = td.treated_x()
        tau_true = td.treated_tau_true()
        tau_hat = predict_cate_many(model, td.w, X)
        if tau_hat.ndim != 1:
            tau_hat = tau_hat.mean(axis=1)
        task_pehe = pehe(tau_true, tau_hat)

        if gamma_source == "oracle":
            gammas = tau_true + rng.normal(0.0, gt.noise_sd, size=tau_true.shape)
        else:
            mu0, mu1 = fit_task_nuisances(td, nuisance, gt)
            gammas = gamma_scores(td, mu0, mu1)[: td.n_treated]

        labels = tau_true > tau_threshold
        rates, precs, recs = {}, {}, {}
        for u in us:
            rates[u] = rate_at_u(tau_hat, gammas, u)
            if labels.any():
                p, r = precision_recall_at_u(tau_hat, labels, u)
                precs[u] = p
                recs[u] = r
            # tasks with no positive units report rate only; recall is
            # undefined there and precision would always be zero
        report.tasks.append(
            TaskMetrics(
                task_id=td.task_id,
                n_treated=td.n_treated,
                pehe=task_pehe,
                rate_at=rates,
                precision_at=precs,
                recall_at=recs,
            )
        )
    report.aggregates = _aggregate(report.tasks, us)
    return report
