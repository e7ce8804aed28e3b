"""Synthetic multi-intervention data generator.

Outcome model:
    treated unit i of task j:  y = b(x_i) + tau(w_j, x_i) + eps_i
    control unit i:            y = b(x_i) + eps_i
with x ~ N(0, I_d), eps ~ N(0, noise_sd^2), b(x) = c^T x and
tau(w, x) = w^T M x (kind "linear") or tanh(w^T M x) (kind "tanh").

Intervention vectors are drawn uniformly on the unit sphere in R^e.
Treatment assignment within a task is confounded: a candidate is accepted
into the treated group with probability clip(sigmoid(cs * theta_j^T x),
0.1, 0.9), and candidates are drawn until the task is full, so the treated
covariate distribution is tilted while outcome noise plays no role in who
gets treated.

Scaling: M = G / sqrt(d) with G standard normal, so Var(tau) is close to 1
for unit-sphere w; the baseline coefficient vector has unit norm, so
Var(b(x)) is exactly 1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, NumericError, ShapeMismatchError
from .tasks import Sample

EFFECT_KINDS = ("linear", "tanh")

# Candidates are drawn in fixed-size blocks so the RNG stream, and hence the
# generated population, does not depend on how many candidates a task needs.
_ASSIGN_BLOCK = 1024

# Acceptance probabilities are clipped away from 0 and 1 so every unit has a
# real chance of either arm.
_PROPENSITY_LO = 0.1
_PROPENSITY_HI = 0.9


@dataclass(frozen=True)
class DGPConfig:
    d: int
    e: int
    n_interventions: int
    m_per_task: int
    n_controls: int
    noise_sd: float
    effect_kind: str = "linear"
    confounding_strength: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.e < 1:
            raise ConfigError(f"e must be >= 1, got {self.e}")
        if self.n_interventions < 2:
            raise ConfigError(f"n_interventions must be >= 2, got {self.n_interventions}")
        if self.m_per_task < 2:
            raise ConfigError(f"m_per_task must be >= 2, got {self.m_per_task}")
        if self.n_controls < 0:
            raise ConfigError(f"n_controls must be >= 0, got {self.n_controls}")
        if not self.noise_sd >= 0.0:
            raise ConfigError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.effect_kind not in EFFECT_KINDS:
            raise ConfigError(f"effect_kind must be one of {EFFECT_KINDS}, got {self.effect_kind!r}")
        if not self.confounding_strength >= 0.0:
            raise ConfigError(f"confounding_strength must be >= 0, got {self.confounding_strength}")


@dataclass
class GroundTruth:
    """Everything needed to recompute true effects and oracle quantities."""

    effect_matrix: NDArray[np.float64]  # (e, d)
    baseline_coeffs: NDArray[np.float64]  # (d,), unit norm
    propensity_coeffs: NDArray[np.float64]  # (n_tasks, d), unit rows
    interventions: NDArray[np.float64]  # (n_tasks, e), unit rows
    effect_kind: str
    noise_sd: float
    confounding_strength: float
    # candidates examined per task before it filled; assignment diagnostic
    assignment_draws: NDArray[np.int64]

    @property
    def d(self) -> int:
        return self.effect_matrix.shape[1]

    @property
    def e(self) -> int:
        return self.effect_matrix.shape[0]

    def to_json(self) -> str:
        payload = asdict(self)
        for key in (
            "effect_matrix",
            "baseline_coeffs",
            "propensity_coeffs",
            "interventions",
            "assignment_draws",
        ):
            payload[key] = np.asarray(payload[key]).tolist()
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        raw = json.loads(text)
        return cls(
            effect_matrix=np.asarray(raw["effect_matrix"], dtype=np.float64),
            baseline_coeffs=np.asarray(raw["baseline_coeffs"], dtype=np.float64),
            propensity_coeffs=np.asarray(raw["propensity_coeffs"], dtype=np.float64),
            interventions=np.asarray(raw["interventions"], dtype=np.float64),
            effect_kind=raw["effect_kind"],
            noise_sd=float(raw["noise_sd"]),
            confounding_strength=float(raw["confounding_strength"]),
            assignment_draws=np.asarray(raw["assignment_draws"], dtype=np.int64),
        )


def _sigmoid(z: NDArray[np.float64]) -> NDArray[np.float64]:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def propensity(gt: GroundTruth, task_id: int, x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Acceptance probability of covariate rows for one task."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = gt.confounding_strength * (x @ gt.propensity_coeffs[task_id])
    return np.clip(_sigmoid(z), _PROPENSITY_LO, _PROPENSITY_HI)


def true_cate(gt: GroundTruth, w: NDArray[np.float64], x: NDArray[np.float64]) -> float:
    """tau(w, x) for a single intervention/covariate pair."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != (gt.e,):
        raise ShapeMismatchError(f"w has shape {w.shape}, expected ({gt.e},)")
    if x.shape != (gt.d,):
        raise ShapeMismatchError(f"x has shape {x.shape}, expected ({gt.d},)")
    if not (np.isfinite(w).all() and np.isfinite(x).all()):
        raise NumericError("true_cate requires finite inputs")
    z = float(w @ gt.effect_matrix @ x)
    return z if gt.effect_kind == "linear" else float(np.tanh(z))


def true_cate_many(gt: GroundTruth, w: NDArray[np.float64], X: NDArray[np.float64]) -> NDArray[np.float64]:
    """tau(w, x) for one intervention against many covariate rows."""
    w = np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if w.shape != (gt.e,):
        raise ShapeMismatchError(f"w has shape {w.shape}, expected ({gt.e},)")
    if X.ndim != 2 or X.shape[1] != gt.d:
        raise ShapeMismatchError(f"X has shape {X.shape}, expected (n, {gt.d})")
    z = X @ (gt.effect_matrix.T @ w)
    return z if gt.effect_kind == "linear" else np.tanh(z)


def effect_w_gradient(gt: GroundTruth, w: NDArray[np.float64], X: NDArray[np.float64]) -> NDArray[np.float64]:
    """d tau / d w, one row per covariate vector; shape (n, e)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Mx = X @ gt.effect_matrix.T  # (n, e)
    if gt.effect_kind == "linear":
        return Mx
    z = Mx @ np.asarray(w, dtype=np.float64)
    return (1.0 - np.tanh(z) ** 2)[:, None] * Mx


def effect_smoothness_sq(gt: GroundTruth, w: NDArray[np.float64], X: NDArray[np.float64]) -> float:
    """Mean squared L2 norm of d tau / d w over the given covariate rows."""
    g = effect_w_gradient(gt, w, X)
    val = float(np.mean(np.sum(g * g, axis=1)))
    if not np.isfinite(val):
        raise NumericError("non-finite smoothness estimate")
    return val


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> NDArray[np.float64]:
    g = rng.standard_normal((n, dim))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # A zero draw has probability zero; guard anyway.
    norms[norms == 0.0] = 1.0
    return g / norms


def _draw_ground_truth(cfg: DGPConfig, rng: np.random.Generator) -> GroundTruth:
    return GroundTruth(
        effect_matrix=rng.standard_normal((cfg.e, cfg.d)) / np.sqrt(cfg.d),
        baseline_coeffs=_unit_rows(rng, 1, cfg.d)[0],
        propensity_coeffs=_unit_rows(rng, cfg.n_interventions, cfg.d),
        interventions=_unit_rows(rng, cfg.n_interventions, cfg.e),
        effect_kind=cfg.effect_kind,
        noise_sd=cfg.noise_sd,
        confounding_strength=cfg.confounding_strength,
        assignment_draws=np.zeros(cfg.n_interventions, dtype=np.int64),
    )


def generate_task_samples(
    gt: GroundTruth,
    w: NDArray[np.float64],
    task_id: int,
    m: int,
    rng: np.random.Generator,
    id_prefix: str = "t",
    propensity_vec: NDArray[np.float64] | None = None,
) -> tuple[list[Sample], int]:
    """Rejection-sample m treated units for one intervention.

    Returns the samples and the number of candidates examined. Acceptance
    depends only on covariates and the uniform draw, never on the outcome
    noise, so redrawing noise cannot change who is treated. Pass
    ``propensity_vec`` for tasks that are not part of the stored ground
    truth (e.g. synthetic combination tasks).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (gt.e,):
        raise ShapeMismatchError(f"w has shape {w.shape}, expected ({gt.e},)")
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    if propensity_vec is None:
        if not 0 <= task_id < gt.propensity_coeffs.shape[0]:
            raise ShapeMismatchError(
                f"task {task_id} has no stored propensity vector; pass propensity_vec"
            )
        propensity_vec = gt.propensity_coeffs[task_id]
    propensity_vec = np.asarray(propensity_vec, dtype=np.float64)

    samples: list[Sample] = []
    candidates_seen = 0
    while len(samples) < m:
        xs = rng.standard_normal((_ASSIGN_BLOCK, gt.d))
        z = gt.confounding_strength * (xs @ propensity_vec)
        p = np.clip(_sigmoid(z), _PROPENSITY_LO, _PROPENSITY_HI)
        u = rng.uniform(size=_ASSIGN_BLOCK)
        eps = rng.normal(0.0, gt.noise_sd, size=_ASSIGN_BLOCK)
        taus = true_cate_many(gt, w, xs)
        base = xs @ gt.baseline_coeffs
        used_in_block = _ASSIGN_BLOCK
        for i in np.flatnonzero(u < p):
            samples.append(
                Sample(
                    sample_id=f"{id_prefix}{task_id}_{len(samples):05d}",
                    x=xs[i],
                    y=float(base[i] + taus[i] + eps[i]),
                    treated=True,
                    task_id=task_id,
                    tau_true=float(taus[i]),
                )
            )
            if len(samples) == m:
                used_in_block = int(i) + 1
                break
        candidates_seen += used_in_block
    return samples, candidates_seen


def generate_population(cfg: DGPConfig) -> tuple[list[Sample], GroundTruth]:
    """Draw ground truth, treated units for every intervention, and controls.

    The sample list holds the task 0..n-1 treated blocks in order, then the
    control pool. Identical configs reproduce the list bit for bit.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    gt = _draw_ground_truth(cfg, rng)

    samples: list[Sample] = []
    draws = np.zeros(cfg.n_interventions, dtype=np.int64)
    for j in range(cfg.n_interventions):
        task_samples, seen = generate_task_samples(
            gt, gt.interventions[j], j, cfg.m_per_task, rng
        )
        samples.extend(task_samples)
        draws[j] = seen
    gt.assignment_draws = draws

    if cfg.n_controls > 0:
        xs = rng.standard_normal((cfg.n_controls, cfg.d))
        eps = rng.normal(0.0, cfg.noise_sd, size=cfg.n_controls)
        ys = xs @ gt.baseline_coeffs + eps
        for i in range(cfg.n_controls):
            samples.append(Sample(sample_id=f"c{i:06d}", x=xs[i], y=float(ys[i]), treated=False))
    return samples, gt


def iter_unit_sphere(rng: np.random.Generator, e: int) -> Iterator[NDArray[np.float64]]:
    """Endless stream of uniform unit vectors in R^e."""
    while True:
        yield _unit_rows(rng, 1, e)[0]
