"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time. Setting ADASHIFT_BACKEND=numpy
forces the fallback (useful on machines where numba is unavailable or its
compile latency is unwanted); ADASHIFT_BACKEND=numba insists on numba and
fails loudly if it cannot be imported. Results of the two paths agree to
~1e-12; see benchmarks/bench_backends.py for a timing comparison.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "ADASHIFT_BACKEND"


def _numpy_mean_kernel(X: np.ndarray, gamma: float, chunk_size: int) -> np.ndarray:
    """Row means of the RBF kernel matrix, built chunk by chunk.

    Uses the |a-b|^2 = |a|^2 + |b|^2 - 2ab expansion so the inner product is
    a single BLAS call per chunk; peak extra memory is one chunk of the
    kernel matrix.
    """
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    XT = np.ascontiguousarray(X.T)
    mu = np.empty(n, dtype=np.float64)
    buf = np.empty((min(chunk_size, n), n), dtype=np.float64)
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        G = buf[: stop - start]
        np.dot(X[start:stop], XT, out=G)
        G *= -2.0
        G += sq[start:stop, None]
        G += sq[None, :]
        np.maximum(G, 0.0, out=G)
        G *= -gamma
        np.exp(G, out=G)
        mu[start:stop] = G.mean(axis=1)
    return mu


def _numpy_kernel_row(X: np.ndarray, index: int, gamma: float) -> np.ndarray:
    diff = X - X[index]
    return np.exp(-gamma * np.einsum("ij,ij->i", diff, diff))


def _numpy_kernel_cross(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq_a = np.einsum("ij,ij->i", A, A)
    sq_b = np.einsum("ij,ij->i", B, B)
    D = sq_a[:, None] + sq_b[None, :] - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    D *= -gamma
    np.exp(D, out=D)
    return D


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def _mean_kernel_chunk(Xc, XT, sq_c, sq, gamma, out):
        # BLAS product for the chunk, then one fused pass for exp + reduce
        G = np.dot(Xc, XT)
        rows, n = G.shape
        for i in range(rows):
            acc = 0.0
            for j in range(n):
                d2 = sq_c[i] + sq[j] - 2.0 * G[i, j]
                if d2 < 0.0:
                    d2 = 0.0
                acc += np.exp(-gamma * d2)
            out[i] = acc / n

    @njit(cache=True)
    def _kernel_row(X, index, gamma, out):
        n, d = X.shape
        for i in range(n):
            d2 = 0.0
            for k in range(d):
                diff = X[i, k] - X[index, k]
                d2 += diff * diff
            out[i] = np.exp(-gamma * d2)

    @njit(cache=True)
    def _kernel_cross(A, B, gamma, out):
        na, d = A.shape
        nb = B.shape[0]
        for i in range(na):
            for j in range(nb):
                d2 = 0.0
                for k in range(d):
                    diff = A[i, k] - B[j, k]
                    d2 += diff * diff
                out[i, j] = np.exp(-gamma * d2)

    def mean_kernel(X, gamma, chunk_size):
        n = X.shape[0]
        sq = np.einsum("ij,ij->i", X, X)
        XT = np.ascontiguousarray(X.T)
        mu = np.empty(n, dtype=np.float64)
        for start in range(0, n, chunk_size):
            stop = min(start + chunk_size, n)
            _mean_kernel_chunk(
                np.ascontiguousarray(X[start:stop]), XT, sq[start:stop], sq, gamma, mu[start:stop]
            )
        return mu

    def kernel_row(X, index, gamma):
        out = np.empty(X.shape[0], dtype=np.float64)
        _kernel_row(X, index, gamma, out)
        return out

    def kernel_cross(A, B, gamma):
        out = np.empty((A.shape[0], B.shape[0]), dtype=np.float64)
        _kernel_cross(np.ascontiguousarray(A), np.ascontiguousarray(B), gamma, out)
        return out

    return mean_kernel, kernel_row, kernel_cross


def _select_backend() -> str:
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested and requested not in ("numba", "numpy"):
        raise RuntimeError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise
        return "numpy"
    return "numba"


_BACKEND_NAME = _select_backend()
if _BACKEND_NAME == "numba":
    mean_kernel_to_pool, kernel_row, kernel_cross = _build_numba()
else:
    mean_kernel_to_pool = _numpy_mean_kernel
    kernel_row = _numpy_kernel_row
    kernel_cross = _numpy_kernel_cross

numpy_backend = (_numpy_mean_kernel, _numpy_kernel_row, _numpy_kernel_cross)


def backend_name() -> str:
    return _BACKEND_NAME
