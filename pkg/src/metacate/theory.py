"""Numerical checks for the generalization-bound machinery.

Three tools: a Monte-Carlo estimator of the zero-shot Rademacher
complexity (expected sup over a function family of the sign-correlation
with n interventions times m units each), an exact enumerator over all
sign patterns for tiny cases (the oracle for the MC estimator), and an
evaluator of the excess-risk bound with its monotonicity structure. A
fourth utility checks the Gaussian Poincare inequality empirically, since
the bound's constant C comes from it.

For the linear family {f(w,x) = a^T w + b^T x : ||a|| <= B1, ||b|| <= B2}
the sup has a closed form: B1*||sum_ij s_ij w_j|| + B2*||sum_ij s_ij x_ij||,
and the complexity is bounded by (B1+B2)/sqrt(nm) for unit-norm inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DataError, NumericError, ShapeMismatchError


@dataclass(frozen=True)
class LinearFamily:
    """Linear functions of (w, x) with coefficient norms capped by B1, B2."""

    B1: float = 1.0
    B2: float = 1.0

    def validate(self) -> None:
        if self.B1 < 0 or self.B2 < 0:
            raise ConfigError("coefficient bounds must be >= 0")

    def sup_given_signs(self, signs, W, X) -> float:
        """Closed-form sup of sum_ij s_ij f(w_j, x_ij) over the family."""
        sw = np.einsum("jm,je->e", signs, W)
        sx = np.einsum("jm,jmd->d", signs, X)
        return self.B1 * float(np.linalg.norm(sw)) + self.B2 * float(np.linalg.norm(sx))

    def sup_given_signs_batch(self, signs, W, X) -> NDArray[np.float64]:
        """Same, vectorized over a leading replicate axis of ``signs``."""
        sw = np.einsum("rjm,je->re", signs, W)
        sx = np.einsum("rjm,jmd->rd", signs, X)
        return self.B1 * np.linalg.norm(sw, axis=1) + self.B2 * np.linalg.norm(sx, axis=1)


@dataclass(frozen=True)
class FiniteSetFamily:
    """An explicit finite set of functions f(w, x) -> scalar."""

    fns: tuple

    def validate(self) -> None:
        if len(self.fns) == 0:
            raise ConfigError("finite family needs at least one function")

    def _table(self, W, X) -> NDArray[np.float64]:
        """Values f_k(w_j, x_ij), shape (k, n, m)."""
        n, m = X.shape[0], X.shape[1]
        out = np.empty((len(self.fns), n, m))
        for k, f in enumerate(self.fns):
            for j in range(n):
                for i in range(m):
                    out[k, j, i] = f(W[j], X[j, i])
        return out

    def sup_given_signs(self, signs, W, X) -> float:
        table = self._table(W, X)
        return float(np.max(np.einsum("jm,kjm->k", signs, table)))

    def sup_given_signs_batch(self, signs, W, X) -> NDArray[np.float64]:
        table = self._table(W, X)
        return np.max(np.einsum("rjm,kjm->rk", signs, table), axis=1)


def unit_sphere_dists(e: int, d: int):
    """Default samplers: uniform unit vectors for both inputs."""

    def sample_w(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
        g = rng.standard_normal((n, e))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def sample_x(rng: np.random.Generator, n: int, m: int) -> NDArray[np.float64]:
        g = rng.standard_normal((n, m, d))
        return g / np.linalg.norm(g, axis=2, keepdims=True)

    return sample_w, sample_x


def _check_normalized(W, X) -> None:
    wn = np.linalg.norm(W, axis=1)
    xn = np.linalg.norm(X, axis=2)
    if wn.max() > 1.0 + 1e-9 or xn.max() > 1.0 + 1e-9:
        raise DataError(
            "linear-family complexity requires ||w|| <= 1 and ||x|| <= 1; "
            f"got max norms {wn.max():.6f}, {xn.max():.6f}"
        )


def zs_rademacher_mc(
    family,
    n: int,
    m: int,
    dists=None,
    replicates: int = 1000,
    seed: int = 0,
    fixed_draws: tuple[NDArray[np.float64], NDArray[np.float64]] | None = None,
) -> tuple[float, float]:
    """Monte-Carlo zero-shot Rademacher complexity; returns (mean, stderr).

    Each replicate draws n intervention vectors, m covariate vectors per
    intervention, and one sign per (intervention, unit) pair, then
    evaluates sup_f (1/nm) sum_ij s_ij f(w_j, x_ij). Pass ``fixed_draws``
    = (W, X) to freeze the inputs and randomize signs only, which is the
    setting the exact enumerator can verify.
    """
    family.validate()
    if replicates < 1:
        raise ConfigError(f"replicates must be >= 1, got {replicates}")
    if n < 1 or m < 1:
        raise ConfigError(f"n and m must be >= 1, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    if fixed_draws is not None:
        Wf = np.asarray(fixed_draws[0], dtype=np.float64)
        Xf = np.asarray(fixed_draws[1], dtype=np.float64)
        if Wf.shape[0] != n or Xf.shape[:2] != (n, m):
            raise ShapeMismatchError(
                f"fixed draws have shapes {Wf.shape}, {Xf.shape}; expected ({n}, e) and ({n}, {m}, d)"
            )
        if isinstance(family, LinearFamily):
            _check_normalized(Wf, Xf)
    if dists is None and fixed_draws is None:
        raise ConfigError("either dists or fixed_draws is required")

    vals = np.empty(replicates)
    # replicates are chunked; signs dominate memory at n*m per replicate
    chunk = max(1, min(replicates, 4_000_000 // max(1, n * m)))
    pos = 0
    while pos < replicates:
        r = min(chunk, replicates - pos)
        if fixed_draws is not None:
            signs = rng.integers(0, 2, size=(r, n, m)) * 2.0 - 1.0
            vals[pos : pos + r] = family.sup_given_signs_batch(signs, Wf, Xf) / (n * m)
        else:
            sample_w, sample_x = dists
            for i in range(r):
                W = sample_w(rng, n)
                X = sample_x(rng, n, m)
                if isinstance(family, LinearFamily):
                    _check_normalized(W, X)
                signs = rng.integers(0, 2, size=(n, m)) * 2.0 - 1.0
                vals[pos + i] = family.sup_given_signs(signs, W, X) / (n * m)
        pos += r
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else float("inf")
    return mean, stderr


def exact_rademacher_small(
    family,
    n: int,
    m: int,
    fixed_draws: tuple[NDArray[np.float64], NDArray[np.float64]],
) -> float:
    """Exact E_s sup_f (1/nm) sum_ij s_ij f for fixed inputs, nm <= 16."""
    family.validate()
    nm = n * m
    if nm > 16:
        raise ConfigError(f"exact enumeration needs n*m <= 16, got {nm}")
    W = np.asarray(fixed_draws[0], dtype=np.float64)
    X = np.asarray(fixed_draws[1], dtype=np.float64)
    if W.shape[0] != n or X.shape[:2] != (n, m):
        raise ShapeMismatchError(
            f"fixed draws have shapes {W.shape}, {X.shape}; expected ({n}, e) and ({n}, {m}, d)"
        )
    codes = np.arange(2**nm, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(nm)[None, :]) & 1
    signs = (bits * 2.0 - 1.0).reshape(-1, n, m)
    sups = family.sup_given_signs_batch(signs, W, X)
    return float(sups.mean() / (n * m))


@dataclass(frozen=True)
class BoundInputs:
    n: int
    m: int
    epsilon: float
    delta: float
    beta_smooth: float
    poincare_C: float
    rademacher: float

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")
        if self.beta_smooth < 0:
            raise ConfigError(f"beta_smooth must be >= 0, got {self.beta_smooth}")
        if self.poincare_C < 0:
            raise ConfigError(f"poincare_C must be >= 0, got {self.poincare_C}")
        if self.rademacher < 0:
            raise ConfigError(f"rademacher must be >= 0, got {self.rademacher}")


def theorem1_terms(b: BoundInputs) -> dict[str, float]:
    """The four additive terms of the excess-risk bound."""
    b.validate()
    ln_inv_delta = math.log(1.0 / b.delta)
    one_eps = 1.0 + b.epsilon
    t1 = 8.0 * one_eps * b.rademacher
    t2 = 8.0 * math.sqrt(one_eps * b.rademacher * ln_inv_delta / b.n)
    t3 = 2.0 * ln_inv_delta / (3.0 * b.n)
    t4 = one_eps * math.sqrt(
        (32.0 * b.poincare_C * b.beta_smooth**2 + 2.0 * one_eps**2 / b.m)
        * ln_inv_delta
        / b.n
    )
    return {
        "complexity": t1,
        "complexity_deviation": t2,
        "concentration": t3,
        "smoothness_deviation": t4,
    }


def theorem1_bound(b: BoundInputs) -> float:
    """Excess-risk bound: the sum of the four terms."""
    return float(sum(theorem1_terms(b).values()))


class LinearFn:
    """F(w) = a^T w with its exact gradient; the tight Poincare case."""

    def __init__(self, a: NDArray[np.float64]):
        self.a = np.asarray(a, dtype=np.float64)

    def value(self, W: NDArray[np.float64]) -> NDArray[np.float64]:
        return W @ self.a

    def grad(self, W: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.broadcast_to(self.a, W.shape).copy()


class PolyTanhFn:
    """F(w) = sum_k alpha_k tanh(q_k(w)) for quadratics q_k; analytic grad."""

    def __init__(self, alphas, consts, lins, quads):
        self.alphas = np.asarray(alphas, dtype=np.float64)  # (K,)
        self.consts = np.asarray(consts, dtype=np.float64)  # (K,)
        self.lins = np.asarray(lins, dtype=np.float64)  # (K, e)
        self.quads = np.asarray(quads, dtype=np.float64)  # (K, e, e)

    def value(self, W: NDArray[np.float64]) -> NDArray[np.float64]:
        q = self._q(W)
        return np.tanh(q) @ self.alphas

    def grad(self, W: NDArray[np.float64]) -> NDArray[np.float64]:
        q = self._q(W)  # (N, K)
        sech2 = 1.0 - np.tanh(q) ** 2
        # dq_k/dw = lin_k + (A_k + A_k^T) w
        sym = self.quads + np.transpose(self.quads, (0, 2, 1))  # (K, e, e)
        dq = self.lins[None, :, :] + np.einsum("kef,nf->nke", sym, W)
        return np.einsum("k,nk,nke->ne", self.alphas, sech2, dq)

    def _q(self, W: NDArray[np.float64]) -> NDArray[np.float64]:
        lin = W @ self.lins.T
        quad = np.einsum("ne,kef,nf->nk", W, self.quads, W)
        return self.consts[None, :] + lin + quad


def make_poly_tanh_fns(e: int, count: int, seed: int, terms: int = 3) -> list[PolyTanhFn]:
    """Random smooth test functions for the Poincare check."""
    rng = np.random.default_rng(seed)
    fns = []
    for _ in range(count):
        fns.append(
            PolyTanhFn(
                alphas=rng.uniform(-1.5, 1.5, size=terms),
                consts=rng.uniform(-0.5, 0.5, size=terms),
                lins=rng.standard_normal((terms, e)) / np.sqrt(e),
                quads=rng.standard_normal((terms, e, e)) / (2.0 * e),
            )
        )
    return fns


@dataclass
class PoincareCheck:
    fn_index: int
    variance: float
    variance_stderr: float
    bound: float
    bound_stderr: float
    holds: bool

    def to_dict(self) -> dict:
        return asdict(self)


def poincare_check_gaussian(
    cov: NDArray[np.float64],
    test_fns: list,
    draws: int = 100_000,
    seed: int = 0,
) -> list[PoincareCheck]:
    """Check Var[F(w)] <= ||cov||_2 * E||grad F(w)||^2 for w ~ N(0, cov).

    Both sides are Monte-Carlo estimates; "holds" allows 3 combined
    standard errors of slack. Functions must expose value(W) and grad(W).
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ConfigError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ConfigError("covariance must be symmetric")
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() < -1e-10 * max(1.0, abs(eigvals.max())):
        raise ConfigError(f"covariance is not PSD (min eigenvalue {eigvals.min():.3e})")
    if draws < 2:
        raise ConfigError(f"draws must be >= 2, got {draws}")
    c_norm = float(eigvals.max())  # spectral norm of a PSD matrix
    root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))

    rng = np.random.default_rng(seed)
    W = rng.standard_normal((draws, cov.shape[0])) @ root.T
    out = []
    for i, fn in enumerate(test_fns):
        vals = np.asarray(fn.value(W), dtype=np.float64)
        grads = np.asarray(fn.grad(W), dtype=np.float64)
        if not (np.isfinite(vals).all() and np.isfinite(grads).all()):
            raise NumericError(f"test function {i} produced non-finite values")
        var = float(vals.var(ddof=1))
        centered = vals - vals.mean()
        sq = centered**2
        # asymptotic stderr of the variance estimate
        var_se = float(np.sqrt(max(sq.var(ddof=1), 0.0) / draws))
        gn = np.sum(grads * grads, axis=1)
        bound = c_norm * float(gn.mean())
        bound_se = c_norm * float(gn.std(ddof=1) / np.sqrt(draws))
        slack = 3.0 * float(np.hypot(var_se, bound_se))
        out.append(
            PoincareCheck(
                fn_index=i,
                variance=var,
                variance_stderr=var_se,
                bound=bound,
                bound_stderr=bound_se,
                holds=var <= bound + slack,
            )
        )
    return out
