"""Dense rank-4 tensor algebra and Tucker-2 factorization of conv kernels.

Kernels are stored in (C, N, R, S) order: input channels, output channels,
filter rows, filter columns. Only the two channel modes are ever truncated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a {ndim}-way tensor")


def mode_n_matricize(t: np.ndarray, mode: int) -> np.ndarray:
    """Unfold ``t`` so that rows index ``mode``.

    Columns flatten the remaining modes in ascending order, last fastest.
    """
    t = np.asarray(t)
    _check_mode(t.ndim, mode)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def fold(m: np.ndarray, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`mode_n_matricize`."""
    dims = tuple(int(d) for d in dims)
    _check_mode(len(dims), mode)
    rest = dims[:mode] + dims[mode + 1:]
    return np.moveaxis(np.asarray(m).reshape((dims[mode],) + rest), 0, mode)


def _fix_signs(u: np.ndarray, v: np.ndarray | None = None):
    # first nonzero entry of each left vector made nonnegative
    nz = np.abs(u) > 0
    first = np.argmax(nz, axis=0)
    signs = np.sign(u[first, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    if v is not None:
        v = v * signs
    return u, v


def truncated_svd(m: np.ndarray, k: int):
    """Rank-``k`` SVD of a matrix.

    Returns
    -------
    U : ndarray, shape (rows, k)
    s : ndarray, shape (k,)
        Singular values, descending.
    V : ndarray, shape (cols, k)
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("truncated_svd expects a matrix")
    if not 1 <= k <= min(m.shape):
        raise ValueError(f"rank {k} outside [1, {min(m.shape)}]")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD did not converge: {exc}") from exc
    u, v = _fix_signs(u[:, :k], vt[:k].T)
    return u, s[:k], v


@dataclass
class TuckerFactors:
    """Tucker-2 factorization of a (C, N, R, S) kernel.

    ``core`` has shape (d1, d2, R, S); ``u1`` is C x d1 and ``u2`` is N x d2.
    """

    u1: np.ndarray
    u2: np.ndarray
    core: np.ndarray

    def __post_init__(self):
        self.u1 = np.asarray(self.u1, dtype=np.float64)
        self.u2 = np.asarray(self.u2, dtype=np.float64)
        self.core = np.asarray(self.core, dtype=np.float64)
        if self.u1.ndim != 2 or self.u2.ndim != 2 or self.core.ndim != 4:
            raise ValueError("u1, u2 must be matrices and core a 4-way tensor")
        if self.core.shape[:2] != (self.u1.shape[1], self.u2.shape[1]):
            raise ValueError(
                f"core {self.core.shape} does not match ranks "
                f"({self.u1.shape[1]}, {self.u2.shape[1]})")

    @property
    def d1(self) -> int:
        return self.u1.shape[1]

    @property
    def d2(self) -> int:
        return self.u2.shape[1]

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.u1.shape[0], self.u2.shape[0]) + self.core.shape[2:]


def _check_ranks(shape, d1: int, d2: int) -> None:
    c, n = shape[0], shape[1]
    if not (1 <= d1 <= c and 1 <= d2 <= n):
        raise ValueError(f"ranks ({d1}, {d2}) outside bounds (1..{c}, 1..{n})")


def tucker2_decompose(k: np.ndarray, d1: int, d2: int) -> TuckerFactors:
    """Truncated HOSVD of a kernel along its two channel modes."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 4:
        raise ValueError("kernel must be 4-way (C, N, R, S)")
    _check_ranks(k.shape, d1, d2)
    u1 = _leading_left_vectors(mode_n_matricize(k, 0), d1)
    u2 = _leading_left_vectors(mode_n_matricize(k, 1), d2)
    core = np.einsum("ca,nb,cnrs->abrs", u1, u2, k, optimize=True)
    return TuckerFactors(u1, u2, core)


def _leading_left_vectors(m: np.ndarray, k: int) -> np.ndarray:
    # only U is needed; rows <= cols is the common case so this is cheap
    if not 1 <= k <= m.shape[0]:
        raise ValueError(f"rank {k} outside [1, {m.shape[0]}]")
    u, _, _ = np.linalg.svd(m, full_matrices=False)
    if u.shape[1] < k:
        # fewer columns than rows: pad with an orthonormal complement
        q, _ = np.linalg.qr(np.hstack([u, np.eye(m.shape[0])]))
        u = np.hstack([u, q[:, u.shape[1]:k]])
    return _fix_signs(u[:, :k])[0]


def tucker2_reconstruct(f: TuckerFactors) -> np.ndarray:
    return np.einsum("abrs,ca,nb->cnrs", f.core, f.u1, f.u2, optimize=True)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ref = np.linalg.norm(a)
    if ref == 0:
        raise ValueError("reference tensor has zero norm")
    return float(np.linalg.norm(a - b) / ref)


def tucker2_project(t: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """Nearest-in-practice tensor with channel ranks at most (d1, d2)."""
    return tucker2_reconstruct(tucker2_decompose(t, d1, d2))
