# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the fusion model.

Implements the same layout and entry points as the numpy reference
module. Matrix products go straight to BLAS (same engine numpy uses,
called via scipy's Cython bindings) while everything around them (bias
adds, residual relu, masking, gradient accumulation bookkeeping) is
fused C, so the per-layer Python dispatch and temporary arrays of
the reference disappear. Results agree with the reference to float
tolerance; summation order inside BLAS is shape-dependent, so bitwise
equality is not guaranteed.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

BACKEND_NAME = "cython"


def mlp_param_count(i, h, n, o):
    return h * i + h + n * (h * h + h) + o * h + o


cdef void _gemm_rm(char ta, char tb, int m, int n, int k, double alpha,
                   double *A, int lda, double *B, int ldb,
                   double beta, double *C, int ldc) noexcept nogil:
    # Row-major C(m,n) = alpha*op(A)@op(B) + beta*C. Fortran dgemm is
    # column-major, so compute C^T by swapping the operands and dims.
    dgemm(&tb, &ta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef void _linear_nt(double[:, ::1] A, double[:, ::1] Wt, double[::1] bias,
                     double[:, ::1] out) noexcept nogil:
    # out = A @ Wt.T + bias; A is (b, k), Wt is (r, k), out is (b, r)
    cdef int b = <int> A.shape[0], k = <int> A.shape[1], r = <int> Wt.shape[0]
    cdef Py_ssize_t i, j
    _gemm_rm(b'N', b'T', b, r, k, 1.0, &A[0, 0], k, &Wt[0, 0], k, 0.0, &out[0, 0], r)
    for i in range(b):
        for j in range(r):
            out[i, j] += bias[j]


cdef void _relu_residual(double[:, ::1] prev, double[:, ::1] Z,
                         double[:, ::1] nxt) noexcept nogil:
    # nxt = prev + max(Z, 0)
    cdef Py_ssize_t b = prev.shape[0], h = prev.shape[1]
    cdef Py_ssize_t i, j
    cdef double z
    for i in range(b):
        for j in range(h):
            z = Z[i, j]
            nxt[i, j] = prev[i, j] + (z if z > 0.0 else 0.0)


cdef void _accum_layer_grads(double[:, ::1] D, double[:, ::1] A,
                             double[:, ::1] gW, double[::1] gb) noexcept nogil:
    # gW += D.T @ A and gb += column sums of D; D is (b, r), A is (b, c)
    cdef int b = <int> D.shape[0], r = <int> D.shape[1], c = <int> A.shape[1]
    cdef Py_ssize_t i, j
    _gemm_rm(b'T', b'N', r, c, b, 1.0, &D[0, 0], r, &A[0, 0], c, 1.0, &gW[0, 0], c)
    for i in range(b):
        for j in range(r):
            gb[j] += D[i, j]


cdef void _matmul_nn(double[:, ::1] D, double[:, ::1] Wk, double[:, ::1] out,
                     bint accumulate) noexcept nogil:
    # out (+)= D @ Wk; D is (b, r), Wk is (r, c), out is (b, c)
    cdef int b = <int> D.shape[0], r = <int> D.shape[1], c = <int> Wk.shape[1]
    _gemm_rm(b'N', b'N', b, c, r, 1.0, &D[0, 0], r, &Wk[0, 0], c,
             1.0 if accumulate else 0.0, &out[0, 0], c)


cdef void _relu_mask(double[:, ::1] dA, double[:, ::1] pre,
                     double[:, ::1] dZ) noexcept nogil:
    # dZ = dA where the block pre-activation was positive, else 0
    cdef Py_ssize_t b = dA.shape[0], h = dA.shape[1]
    cdef Py_ssize_t i, j
    for i in range(b):
        for j in range(h):
            dZ[i, j] = dA[i, j] if pre[i, j] > 0.0 else 0.0


# Scratch buffers keyed by (layout bytes, batch size). Training loops call
# with constant shapes, so this makes repeated calls allocation-free. Not
# safe for concurrent calls sharing a key, matching the reference's usage.
_WS = {}


def _ws_for(bytes layout_key, dims_w, dims_x, dims_h, Py_ssize_t b):
    key = (layout_key, b)
    ws = _WS.get(key)
    if ws is not None:
        return ws
    if len(_WS) > 32:
        _WS.clear()
    ws = {}
    for tag, dims in (("w", dims_w), ("x", dims_x), ("h", dims_h)):
        i, h, n, o = dims
        ws[tag] = (
            [np.empty((b, h)) for _ in range(n + 1)],  # block inputs
            [np.empty((b, h)) for _ in range(n)],      # pre-activations
            np.empty((b, o)),                          # mlp output
            np.empty((b, h)),                          # dA
            np.empty((b, h)),                          # dZ
            np.empty((b, i)),                          # dX
        )
    ws["H"] = np.empty((b, dims_h[0]))
    ws["dHw"] = np.empty((b, dims_w[3]))
    ws["dHx"] = np.empty((b, dims_x[3]))
    _WS[key] = ws
    return ws


def _views(flat, Py_ssize_t off, Py_ssize_t i, Py_ssize_t h, Py_ssize_t n, Py_ssize_t o):
    """Parameter views for one MLP at ``off``: (W_in, b_in, blocks, W_out, b_out)."""
    W_in = flat[off:off + h * i].reshape(h, i)
    off += h * i
    b_in = flat[off:off + h]
    off += h
    blocks = []
    for _ in range(n):
        Wk = flat[off:off + h * h].reshape(h, h)
        off += h * h
        bk = flat[off:off + h]
        off += h
        blocks.append((Wk, bk))
    W_out = flat[off:off + o * h].reshape(o, h)
    off += o * h
    b_out = flat[off:off + o]
    return W_in, b_in, blocks, W_out, b_out


def _forward_mlp(flat, Py_ssize_t off, dims, X, bufs):
    """Forward pass into the scratch buffers; returns the output buffer."""
    cdef Py_ssize_t i = dims[0], h = dims[1], n = dims[2], o = dims[3]
    cdef Py_ssize_t k
    W_in, b_in, blocks, W_out, b_out = _views(flat, off, i, h, n, o)
    acts, pre, out = bufs[0], bufs[1], bufs[2]
    _linear_nt(X, W_in, b_in, acts[0])
    for k in range(n):
        _linear_nt(acts[k], blocks[k][0], blocks[k][1], pre[k])
        _relu_residual(acts[k], pre[k], acts[k + 1])
    _linear_nt(acts[n], W_out, b_out, out)
    return out


def _backward_mlp(flat, grad, Py_ssize_t off, dims, X, bufs, d_out):
    """Accumulates parameter grads into ``grad`` and returns dL/dX."""
    cdef Py_ssize_t i = dims[0], h = dims[1], n = dims[2], o = dims[3]
    cdef Py_ssize_t k
    W_in, _, blocks, W_out, _ = _views(flat, off, i, h, n, o)
    gW_in, gb_in, gblocks, gW_out, gb_out = _views(grad, off, i, h, n, o)

    acts, pre, _, dA, dZ, dX = bufs
    _accum_layer_grads(d_out, acts[n], gW_out, gb_out)
    _matmul_nn(d_out, W_out, dA, False)
    for k in range(n - 1, -1, -1):
        _relu_mask(dA, pre[k], dZ)
        _accum_layer_grads(dZ, acts[k], gblocks[k][0], gblocks[k][1])
        _matmul_nn(dZ, blocks[k][0], dA, True)
    _accum_layer_grads(dA, X, gW_in, gb_in)
    _matmul_nn(dA, W_in, dX, False)
    return dX


def _split_dims(layout):
    l = [int(v) for v in layout]
    dims_w = tuple(l[0:4])
    dims_x = tuple(l[4:8])
    dims_h = (l[3] + l[7], l[8], l[9], l[10])
    off_w = 0
    off_x = mlp_param_count(*dims_w)
    off_h = off_x + mlp_param_count(*dims_x)
    return dims_w, dims_x, dims_h, off_w, off_x, off_h


def fused_forward(layout, flat, W, X, out):
    """Model outputs for a batch; fills ``out`` with shape (b, m)."""
    dims_w, dims_x, dims_h, off_w, off_x, off_h = _split_dims(layout)
    ws = _ws_for(bytes(np.asarray(layout).tobytes()), dims_w, dims_x, dims_h, W.shape[0])
    ew = _forward_mlp(flat, off_w, dims_w, W, ws["w"])
    ex = _forward_mlp(flat, off_x, dims_x, X, ws["x"])
    H = ws["H"]
    H[:, : dims_w[3]] = ew
    H[:, dims_w[3] :] = ex
    out[...] = _forward_mlp(flat, off_h, dims_h, H, ws["h"])


def fused_loss_grad(layout, flat, W, X, T, grad):
    """Mean-squared-error loss and its gradient in ``grad`` (zeroed here)."""
    dims_w, dims_x, dims_h, off_w, off_x, off_h = _split_dims(layout)
    ws = _ws_for(bytes(np.asarray(layout).tobytes()), dims_w, dims_x, dims_h, W.shape[0])
    grad[...] = 0.0

    ew = _forward_mlp(flat, off_w, dims_w, W, ws["w"])
    ex = _forward_mlp(flat, off_x, dims_x, X, ws["x"])
    ow = dims_w[3]
    H = ws["H"]
    H[:, :ow] = ew
    H[:, ow:] = ex
    y = _forward_mlp(flat, off_h, dims_h, H, ws["h"])

    diff = y - T
    b, m = diff.shape
    loss = float(np.sum(diff * diff) / (b * m))
    d_y = (2.0 / (b * m)) * diff

    dH = _backward_mlp(flat, grad, off_h, dims_h, H, ws["h"], d_y)
    dHw, dHx = ws["dHw"], ws["dHx"]
    dHw[...] = dH[:, :ow]
    dHx[...] = dH[:, ow:]
    _backward_mlp(flat, grad, off_w, dims_w, W, ws["w"], dHw)
    _backward_mlp(flat, grad, off_x, dims_x, X, ws["x"], dHx)
    return loss
