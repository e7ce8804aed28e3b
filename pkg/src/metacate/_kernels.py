"""Reference numpy kernels for the fusion model.

The model is three residual MLPs: an intervention encoder, a covariate
encoder, and a head applied to the concatenated encodings. Each MLP is

    a0 = W_in x + b_in
    a_k = a_{k-1} + relu(W_k a_{k-1} + b_k)      k = 1..n_blocks
    out = W_out a_n + b_out

All parameters live in one flat float64 vector; the layout is fixed by the
dimension table (see ``layout`` below). The compiled backend implements the
same three entry points and must agree with these to float tolerance.

Layout vector (int64, length 11):
    [e, hw, nw, ow,  d, hx, nx, ox,  hh, nh, m]
where (input, hidden, blocks, output) for the intervention encoder is
(e, hw, nw, ow), for the covariate encoder (d, hx, nx, ox), and the head
maps ow+ox -> m through hidden width hh with nh blocks. Flat parameter
order is intervention encoder, covariate encoder, head; inside an MLP:
W_in, b_in, then each block's W, b, then W_out, b_out, all row-major.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def mlp_param_count(i: int, h: int, n: int, o: int) -> int:
    return h * i + h + n * (h * h + h) + o * h + o


def unpack_mlp(flat: np.ndarray, off: int, i: int, h: int, n: int, o: int):
    """Views into ``flat`` for one MLP: (W_in, b_in, blocks, W_out, b_out, end)."""
    W_in = flat[off : off + h * i].reshape(h, i)
    off += h * i
    b_in = flat[off : off + h]
    off += h
    blocks = []
    for _ in range(n):
        Wk = flat[off : off + h * h].reshape(h, h)
        off += h * h
        bk = flat[off : off + h]
        off += h
        blocks.append((Wk, bk))
    W_out = flat[off : off + o * h].reshape(o, h)
    off += o * h
    b_out = flat[off : off + o]
    off += o
    return W_in, b_in, blocks, W_out, b_out, off


def _mlp_forward(flat, off, dims, X):
    """Returns (out, activations, preacts); activations[k] is the block-k input."""
    i, h, n, o = dims
    W_in, b_in, blocks, W_out, b_out, _ = unpack_mlp(flat, off, i, h, n, o)
    A = X @ W_in.T + b_in
    acts = [A]
    pre = []
    for Wk, bk in blocks:
        Z = A @ Wk.T + bk
        pre.append(Z)
        A = A + np.maximum(Z, 0.0)
        acts.append(A)
    out = A @ W_out.T + b_out
    return out, acts, pre


def _mlp_backward(flat, gflat, off, dims, X, acts, pre, d_out):
    """Accumulates parameter grads into ``gflat`` and returns dL/dX."""
    i, h, n, o = dims
    W_in, _, blocks, W_out, _, _ = unpack_mlp(flat, off, i, h, n, o)
    gW_in, gb_in, gblocks, gW_out, gb_out, _ = unpack_mlp(gflat, off, i, h, n, o)

    gW_out += d_out.T @ acts[-1]
    gb_out += d_out.sum(axis=0)
    dA = d_out @ W_out
    for k in range(n - 1, -1, -1):
        dZ = dA * (pre[k] > 0.0)
        gWk, gbk = gblocks[k]
        gWk += dZ.T @ acts[k]
        gbk += dZ.sum(axis=0)
        dA = dA + dZ @ blocks[k][0]
    gW_in += dA.T @ X
    gb_in += dA.sum(axis=0)
    return dA @ W_in


def _dims(layout):
    e, hw, nw, ow, d, hx, nx, ox, hh, nh, m = (int(v) for v in layout)
    dims_w = (e, hw, nw, ow)
    dims_x = (d, hx, nx, ox)
    dims_h = (ow + ox, hh, nh, m)
    off_w = 0
    off_x = mlp_param_count(*dims_w)
    off_h = off_x + mlp_param_count(*dims_x)
    return dims_w, dims_x, dims_h, off_w, off_x, off_h


def fused_forward(layout, flat, W, X, out):
    """Model outputs for a batch; fills ``out`` with shape (b, m)."""
    dims_w, dims_x, dims_h, off_w, off_x, off_h = _dims(layout)
    ew, _, _ = _mlp_forward(flat, off_w, dims_w, W)
    ex, _, _ = _mlp_forward(flat, off_x, dims_x, X)
    H = np.concatenate([ew, ex], axis=1)
    y, _, _ = _mlp_forward(flat, off_h, dims_h, H)
    out[...] = y


def fused_loss_grad(layout, flat, W, X, T, grad):
    """Mean-squared-error loss and its gradient in ``grad`` (zeroed here)."""
    dims_w, dims_x, dims_h, off_w, off_x, off_h = _dims(layout)
    grad[...] = 0.0

    ew, acts_w, pre_w = _mlp_forward(flat, off_w, dims_w, W)
    ex, acts_x, pre_x = _mlp_forward(flat, off_x, dims_x, X)
    H = np.concatenate([ew, ex], axis=1)
    y, acts_h, pre_h = _mlp_forward(flat, off_h, dims_h, H)

    diff = y - T
    b, m = diff.shape
    loss = float(np.sum(diff * diff) / (b * m))
    d_y = (2.0 / (b * m)) * diff

    dH = _mlp_backward(flat, grad, off_h, dims_h, H, acts_h, pre_h, d_y)
    ow = dims_w[3]
    _mlp_backward(flat, grad, off_w, dims_w, W, acts_w, pre_w, dH[:, :ow])
    _mlp_backward(flat, grad, off_x, dims_x, X, acts_x, pre_x, dH[:, ow:])
    return loss


def fused_input_grads(layout, flat, w, x):
    """Jacobians of the outputs w.r.t. both inputs for a single pair.

    Returns (y, dy_dw, dy_dx) with shapes (m,), (m, e), (m, d).
    """
    dims_w, dims_x, dims_h, off_w, off_x, off_h = _dims(layout)
    W = np.asarray(w, dtype=np.float64).reshape(1, -1)
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)

    ew, acts_w, pre_w = _mlp_forward(flat, off_w, dims_w, W)
    ex, acts_x, pre_x = _mlp_forward(flat, off_x, dims_x, X)
    H = np.concatenate([ew, ex], axis=1)
    y, acts_h, pre_h = _mlp_forward(flat, off_h, dims_h, H)

    m = dims_h[3]
    ow = dims_w[3]
    scratch = np.zeros_like(flat)
    dy_dw = np.zeros((m, dims_w[0]))
    dy_dx = np.zeros((m, dims_x[0]))
    for r in range(m):
        seed = np.zeros((1, m))
        seed[0, r] = 1.0
        dH = _mlp_backward(flat, scratch, off_h, dims_h, H, acts_h, pre_h, seed)
        dy_dw[r] = _mlp_backward(flat, scratch, off_w, dims_w, W, acts_w, pre_w, dH[:, :ow])[0]
        dy_dx[r] = _mlp_backward(flat, scratch, off_x, dims_x, X, acts_x, pre_x, dH[:, ow:])[0]
    return y[0], dy_dw, dy_dx
