"""Small dense kernels used by the association and identity code.

Matrices are plain 2-D ``float64`` numpy arrays.  The products here do not
call into BLAS: every output element is accumulated over the inner
dimension strictly left to right, so results are bit-reproducible across
machines and thread settings and can be compared exactly against a naive
triple loop.
"""

import numpy as np


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array, rejecting anything else."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    """Matrix product with a fixed left-to-right inner summation order."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    n, k = a.shape
    m = b.shape[1]
    if k == 0:
        return np.zeros((n, m))
    out = a[:, 0:1] * b[0:1, :]
    for j in range(1, k):
        out += a[:, j:j + 1] * b[j:j + 1, :]
    return out


def softmax_rows(a):
    a = as_matrix(a)
    if a.size == 0:
        raise ValueError("softmax_rows needs a nonempty matrix")
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    # explicit left-to-right row sums, same reasoning as matmul
    s = e[:, 0].copy()
    for j in range(1, e.shape[1]):
        s += e[:, j]
    return e / s[:, None]


def attention(q, k, v):
    """Single-head scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``."""
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key/value count mismatch: {k.shape} vs {v.shape}")
    logits = matmul(q, k.T) / np.sqrt(q.shape[1])
    return matmul(softmax_rows(logits), v)


def linear(x, w):
    """Per-location linear map (a 1x1 convolution on a flattened grid)."""
    return matmul(x, w)


def block_mean(x, grid, stride):
    """Average ``stride x stride`` blocks of a row-major ``H*W x C`` map."""
    if stride == 1:
        return x
    h, w = grid
    if h % stride or w % stride:
        raise ValueError(f"grid {h}x{w} not divisible by stride {stride}")
    c = x.shape[1]
    blocks = x.reshape(h // stride, stride, w // stride, stride, c)
    acc = np.zeros((h // stride, w // stride, c))
    for i in range(stride):
        for j in range(stride):
            acc += blocks[:, i, :, j, :]
    return (acc / (stride * stride)).reshape(-1, c)


def block_repeat(x, grid, stride):
    """Inverse layout of :func:`block_mean`: copy each token to its block."""
    if stride == 1:
        return x
    h, w = grid
    c = x.shape[1]
    t = x.reshape(h // stride, w // stride, c)
    return np.repeat(np.repeat(t, stride, axis=0), stride, axis=1).reshape(-1, c)
