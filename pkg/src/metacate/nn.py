"""Fusion model: two encoders plus a head, with exact analytic gradients.

Architecture: psi(w, x) = Head(concat(EncW(w), EncX(x))). Every component
is a residual MLP (input linear, n residual ReLU blocks, output linear);
the head's last layer is linear, so outputs are unbounded. All parameters
live in one flat float64 vector, which keeps SGD and the meta update as
plain vector arithmetic and makes checkpoints trivial to round-trip.

Two interchangeable compute backends exist: a compiled one and the numpy
reference. Selection happens at import; set METACATE_BACKEND=numpy or
=cython to pin one.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray

from . import _kernels as _np_kernels
from .errors import (
    ConfigError,
    IncompatibilityError,
    MissingInputError,
    NumericError,
    ShapeMismatchError,
)

try:
    from . import _kernels_cy as _cy_kernels
except ImportError:  # pragma: no cover - depends on build environment
    _cy_kernels = None


def _pick_backend():
    forced = os.environ.get("METACATE_BACKEND", "").strip().lower()
    if forced == "numpy":
        return _np_kernels
    if forced == "cython":
        if _cy_kernels is None:
            raise ImportError(
                "METACATE_BACKEND=cython but the compiled kernels are not built"
            )
        return _cy_kernels
    if forced:
        raise ConfigError(f"unknown METACATE_BACKEND {forced!r}")
    return _cy_kernels if _cy_kernels is not None else _np_kernels


_backend = _pick_backend()


def active_backend() -> str:
    """Name of the kernel backend in use, 'cython' or 'numpy'."""
    return _backend.BACKEND_NAME


def set_backend(name: str) -> None:
    """Switch backends at runtime (mainly for parity tests and benchmarks)."""
    global _backend
    if name == "numpy":
        _backend = _np_kernels
    elif name == "cython":
        if _cy_kernels is None:
            raise ConfigError("compiled kernels are not available")
        _backend = _cy_kernels
    else:
        raise ConfigError(f"unknown backend {name!r}")


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_dim: int
    n_residual_blocks: int
    output_dim: int

    def validate(self) -> None:
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_residual_blocks < 0:
            raise ConfigError(f"n_residual_blocks must be >= 0, got {self.n_residual_blocks}")

    @property
    def n_params(self) -> int:
        return _np_kernels.mlp_param_count(
            self.input_dim, self.hidden_dim, self.n_residual_blocks, self.output_dim
        )

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) per linear layer, in parameter order."""
        dims = [(self.hidden_dim, self.input_dim)]
        dims += [(self.hidden_dim, self.hidden_dim)] * self.n_residual_blocks
        dims.append((self.output_dim, self.hidden_dim))
        return dims


@dataclass(frozen=True)
class FusionSpec:
    enc_w: MLPSpec
    enc_x: MLPSpec
    head: MLPSpec

    def validate(self) -> None:
        for part in (self.enc_w, self.enc_x, self.head):
            part.validate()
        expected = self.enc_w.output_dim + self.enc_x.output_dim
        if self.head.input_dim != expected:
            raise ConfigError(
                f"head input_dim {self.head.input_dim} != "
                f"enc_w.output_dim + enc_x.output_dim = {expected}"
            )

    @property
    def n_params(self) -> int:
        return self.enc_w.n_params + self.enc_x.n_params + self.head.n_params

    @property
    def w_dim(self) -> int:
        return self.enc_w.input_dim

    @property
    def x_dim(self) -> int:
        return self.enc_x.input_dim

    @property
    def out_dim(self) -> int:
        return self.head.output_dim

    def layout(self) -> NDArray[np.int64]:
        return np.array(
            [
                self.enc_w.input_dim,
                self.enc_w.hidden_dim,
                self.enc_w.n_residual_blocks,
                self.enc_w.output_dim,
                self.enc_x.input_dim,
                self.enc_x.hidden_dim,
                self.enc_x.n_residual_blocks,
                self.enc_x.output_dim,
                self.head.hidden_dim,
                self.head.n_residual_blocks,
                self.head.output_dim,
            ],
            dtype=np.int64,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "FusionSpec":
        return cls(
            enc_w=MLPSpec(**raw["enc_w"]),
            enc_x=MLPSpec(**raw["enc_x"]),
            head=MLPSpec(**raw["head"]),
        )


def default_fusion_spec(
    w_dim: int,
    x_dim: int,
    hidden_dim: int = 64,
    n_residual_blocks: int = 2,
    enc_out_dim: int | None = None,
    out_dim: int = 1,
) -> FusionSpec:
    enc_out = hidden_dim if enc_out_dim is None else enc_out_dim
    spec = FusionSpec(
        enc_w=MLPSpec(w_dim, hidden_dim, n_residual_blocks, enc_out),
        enc_x=MLPSpec(x_dim, hidden_dim, n_residual_blocks, enc_out),
        head=MLPSpec(2 * enc_out, hidden_dim, n_residual_blocks, out_dim),
    )
    spec.validate()
    return spec


@dataclass
class MetaModelParams:
    """Flat parameter vector plus the spec that gives it shape."""

    spec: FusionSpec
    flat: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise ShapeMismatchError(
                f"flat has shape {self.flat.shape}, spec wants ({self.spec.n_params},)"
            )

    def copy(self) -> "MetaModelParams":
        return MetaModelParams(self.spec, self.flat.copy())

    def _part(self, which: str):
        spec = self.spec
        offs = {
            "enc_w": (0, spec.enc_w),
            "enc_x": (spec.enc_w.n_params, spec.enc_x),
            "head": (spec.enc_w.n_params + spec.enc_x.n_params, spec.head),
        }
        off, part = offs[which]
        W_in, b_in, blocks, W_out, b_out, _ = _np_kernels.unpack_mlp(
            self.flat, off, part.input_dim, part.hidden_dim, part.n_residual_blocks, part.output_dim
        )
        return [(W_in, b_in), *blocks, (W_out, b_out)]

    @property
    def enc_w(self):
        """(W, b) views per layer of the intervention encoder."""
        return self._part("enc_w")

    @property
    def enc_x(self):
        return self._part("enc_x")

    @property
    def head(self):
        return self._part("head")

    @property
    def encoder_size(self) -> int:
        return self.spec.enc_w.n_params + self.spec.enc_x.n_params


def init_params(spec: FusionSpec, seed: int) -> MetaModelParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer, seeded."""
    spec.validate()
    rng = np.random.default_rng(seed)
    chunks = []
    for part in (spec.enc_w, spec.enc_x, spec.head):
        for out_d, in_d in part.layer_dims():
            bound = 1.0 / np.sqrt(in_d)
            chunks.append(rng.uniform(-bound, bound, size=out_d * in_d))
            chunks.append(rng.uniform(-bound, bound, size=out_d))
    return MetaModelParams(spec, np.concatenate(chunks))


def _check_batch_arrays(spec: FusionSpec, W, X, T=None):
    W = np.ascontiguousarray(W, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != spec.w_dim:
        raise ShapeMismatchError(f"W has shape {W.shape}, expected (b, {spec.w_dim})")
    if X.ndim != 2 or X.shape[1] != spec.x_dim:
        raise ShapeMismatchError(f"X has shape {X.shape}, expected (b, {spec.x_dim})")
    if W.shape[0] != X.shape[0]:
        raise ShapeMismatchError(f"batch sizes differ: {W.shape[0]} vs {X.shape[0]}")
    if W.shape[0] == 0:
        raise ShapeMismatchError("empty batch")
    if not (np.isfinite(W).all() and np.isfinite(X).all()):
        raise NumericError("non-finite values in model inputs")
    if T is None:
        return W, X, None
    T = np.ascontiguousarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    if T.shape != (W.shape[0], spec.out_dim):
        raise ShapeMismatchError(f"targets have shape {T.shape}, expected ({W.shape[0]}, {spec.out_dim})")
    if not np.isfinite(T).all():
        raise NumericError("non-finite values in targets")
    return W, X, T


def _batch_to_arrays(spec: FusionSpec, batch):
    """Accepts (W, X, T) arrays or a list of (w, x, target) triples."""
    if isinstance(batch, tuple) and len(batch) == 3 and not isinstance(batch[0], (list, tuple)):
        return _check_batch_arrays(spec, batch[0], batch[1], batch[2])
    ws, xs, ts = [], [], []
    for w, x, t in batch:
        ws.append(np.asarray(w, dtype=np.float64))
        xs.append(np.asarray(x, dtype=np.float64))
        ts.append(np.atleast_1d(np.asarray(t, dtype=np.float64)))
    return _check_batch_arrays(spec, np.stack(ws), np.stack(xs), np.stack(ts))


def forward_batch(params: MetaModelParams, W, X) -> NDArray[np.float64]:
    W, X, _ = _check_batch_arrays(params.spec, W, X)
    out = np.empty((W.shape[0], params.spec.out_dim))
    _backend.fused_forward(params.spec.layout(), params.flat, W, X, out)
    return out


def forward(params: MetaModelParams, w, x) -> NDArray[np.float64]:
    """Model output for one (w, x) pair; shape (out_dim,)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != (params.spec.w_dim,):
        raise ShapeMismatchError(f"w has shape {w.shape}, expected ({params.spec.w_dim},)")
    if x.shape != (params.spec.x_dim,):
        raise ShapeMismatchError(f"x has shape {x.shape}, expected ({params.spec.x_dim},)")
    return forward_batch(params, w[None, :], x[None, :])[0]


def loss_and_grad(params: MetaModelParams, batch, l1: float = 0.0):
    """Mean squared error over the batch and its exact parameter gradient.

    ``batch`` is either a list of (w, x, target) triples or a tuple of
    stacked arrays (W, X, T). With l1 > 0 an L1 penalty on the encoder
    parameters (both encoders, all layers) is added; its subgradient at 0
    is taken as 0. Returns (loss, grad) with grad shaped like params.flat.
    """
    W, X, T = _batch_to_arrays(params.spec, batch)
    grad = np.empty_like(params.flat)
    loss = _backend.fused_loss_grad(params.spec.layout(), params.flat, W, X, T, grad)
    if l1 < 0.0:
        raise ConfigError(f"l1 must be >= 0, got {l1}")
    if l1 > 0.0:
        enc = params.flat[: params.encoder_size]
        loss += l1 * float(np.abs(enc).sum())
        grad[: params.encoder_size] += l1 * np.sign(enc)
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise NumericError("non-finite loss or gradient")
    return loss, grad


def sgd_step(params: MetaModelParams, grad: NDArray[np.float64], lr: float) -> MetaModelParams:
    if grad.shape != params.flat.shape:
        raise ShapeMismatchError(f"grad has shape {grad.shape}, params have {params.flat.shape}")
    if not lr > 0.0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    return MetaModelParams(params.spec, params.flat - lr * grad)


def reptile_step(params: MetaModelParams, adapted: MetaModelParams, beta: float) -> MetaModelParams:
    """Move params toward the adapted copy: theta <- theta - beta*(theta - theta').

    Computed as theta' + (1-beta)*(theta - theta'), which is exact at the
    endpoints: beta=1 returns the adapted vector bit for bit, and an
    adapted vector equal to theta returns theta bit for bit.
    """
    if params.spec != adapted.spec:
        raise ShapeMismatchError("cannot mix parameters from different specs")
    if not beta > 0.0:
        raise ConfigError(f"meta step size must be > 0, got {beta}")
    new = adapted.flat + (1.0 - beta) * (params.flat - adapted.flat)
    return MetaModelParams(params.spec, new)


def grad_wrt_inputs(params: MetaModelParams, w, x):
    """Jacobians of the output w.r.t. w and x (numpy path, any backend).

    Returns (dy_dw, dy_dx); for a scalar head these are 1-d of length e
    and d, otherwise (m, e) and (m, d).
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if w.shape != (params.spec.w_dim,) or x.shape != (params.spec.x_dim,):
        raise ShapeMismatchError(
            f"expected shapes ({params.spec.w_dim},) and ({params.spec.x_dim},), "
            f"got {w.shape} and {x.shape}"
        )
    _, dy_dw, dy_dx = _np_kernels.fused_input_grads(params.spec.layout(), params.flat, w, x)
    if params.spec.out_dim == 1:
        return dy_dw[0], dy_dx[0]
    return dy_dw, dy_dx


CHECKPOINT_MAGIC = b"MCCKPT1\n"
CHECKPOINT_SCHEMA = 1


def save_checkpoint_blocks(
    path, blocks: dict[str, MetaModelParams], meta: dict | None = None
) -> None:
    """Write named parameter blocks plus a shape manifest.

    Identical inputs produce identical bytes (sorted-key JSON manifest,
    raw little-endian float64 data, no timestamps).
    """
    if not blocks:
        raise ConfigError("checkpoint needs at least one parameter block")
    names = sorted(blocks)
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "blocks": [
            {
                "name": name,
                "spec": blocks[name].spec.to_dict(),
                "n_params": int(blocks[name].spec.n_params),
            }
            for name in names
        ],
        "dtype": "<f8",
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(blob).to_bytes(8, "little"))
    buf.write(blob)
    for name in names:
        buf.write(np.ascontiguousarray(blocks[name].flat, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint_blocks(path) -> tuple[dict[str, MetaModelParams], dict]:
    """Read named parameter blocks; validates manifest against the data."""
    if not os.path.exists(path):
        raise MissingInputError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise IncompatibilityError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    blob_len = int.from_bytes(raw[pos : pos + 8], "little")
    pos += 8
    manifest = json.loads(raw[pos : pos + blob_len].decode("utf-8"))
    pos += blob_len
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise IncompatibilityError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    blocks: dict[str, MetaModelParams] = {}
    for entry in manifest["blocks"]:
        spec = FusionSpec.from_dict(entry["spec"])
        spec.validate()
        count = int(entry["n_params"])
        if count != spec.n_params:
            raise IncompatibilityError(
                f"block {entry['name']!r} declares {count} params, spec wants {spec.n_params}"
            )
        nbytes = count * 8
        if pos + nbytes > len(raw):
            raise IncompatibilityError(f"checkpoint truncated in block {entry['name']!r}")
        flat = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").copy()
        pos += nbytes
        blocks[entry["name"]] = MetaModelParams(spec, flat)
    if pos != len(raw):
        raise IncompatibilityError("checkpoint has trailing bytes beyond its manifest")
    return blocks, manifest.get("meta", {})


def save_checkpoint(path, params: MetaModelParams, meta: dict | None = None) -> None:
    """Write a single-model checkpoint."""
    save_checkpoint_blocks(path, {"params": params}, meta)


def load_checkpoint(path) -> tuple[MetaModelParams, dict]:
    """Read a single-model checkpoint; returns (params, meta)."""
    blocks, meta = load_checkpoint_blocks(path)
    if set(blocks) != {"params"}:
        raise IncompatibilityError(
            f"expected a single-model checkpoint, found blocks {sorted(blocks)}"
        )
    return blocks["params"], meta
