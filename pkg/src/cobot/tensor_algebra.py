"""Dense third-order tensor kernels: unfold/fold, bcirc, T-product, mode-3 product.

Tensors are float64 numpy arrays of shape ``(n1, n2, n3)``; frontal slice ``i``
is ``A[:, :, i]``. Matrices are accepted wherever ``n3 == 1`` makes sense.
"""

from __future__ import annotations

import io
import logging
import warnings

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class TransformResidualError(ArithmeticError):
    """The transform-domain path left a non-negligible imaginary part."""


def as_tensor3(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"expected a rank-2 or rank-3 array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError("tensor entries must be finite")
    return a


def unfold3(a) -> np.ndarray:
    """Stack frontal slices vertically: ``(n1, n2, n3) -> (n1*n3, n2)``."""
    a = as_tensor3(a)
    n1, n2, n3 = a.shape
    return np.ascontiguousarray(a.transpose(2, 0, 1).reshape(n1 * n3, n2))


def fold3(m, shape) -> np.ndarray:
    n1, n2, n3 = shape
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (n1 * n3, n2):
        raise ShapeError(f"cannot fold {m.shape} into {tuple(shape)}")
    return np.ascontiguousarray(m.reshape(n3, n1, n2).transpose(1, 2, 0))


def bcirc(a) -> np.ndarray:
    """Block-circulant matrix; block ``(i, j)`` is slice ``(i - j) mod n3``."""
    a = as_tensor3(a)
    n1, n2, n3 = a.shape
    out = np.empty((n1 * n3, n2 * n3))
    for i in range(n3):
        for j in range(n3):
            out[i * n1 : (i + 1) * n1, j * n2 : (j + 1) * n2] = a[:, :, (i - j) % n3]
    return out


def t_product(a, b) -> np.ndarray:
    a, b = as_tensor3(a), as_tensor3(b)
    n1, n2, n3 = a.shape
    if b.shape[0] != n2 or b.shape[2] != n3:
        raise ShapeError(f"t_product dimension mismatch: {a.shape} * {b.shape}")
    return fold3(bcirc(a) @ unfold3(b), (n1, b.shape[1], n3))


def identity_tensor(n: int, n3: int) -> np.ndarray:
    out = np.zeros((n, n, n3))
    out[:, :, 0] = np.eye(n)
    return out


def mode3_product(t, s) -> np.ndarray:
    """Mix frontal slices: output slice ``k`` is ``sum_l s[k, l] * t[:, :, l]``."""
    t = as_tensor3(t)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != t.shape[2]:
        raise ShapeError(f"mode-3 product needs s with {t.shape[2]} columns, got {s.shape}")
    return np.tensordot(t, s, axes=([2], [1]))


def slicewise_product(a, b) -> np.ndarray:
    """Frontal-slice-wise matrix product ``C[:, :, i] = A[:, :, i] @ B[:, :, i]``.

    Complex inputs are allowed (the transform-domain path uses them).
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim == 2:
        a = a[:, :, None]
    if b.ndim == 2:
        b = b[:, :, None]
    if a.ndim != 3 or b.ndim != 3 or a.shape[1] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"slicewise product dimension mismatch: {a.shape} . {b.shape}")
    return np.einsum("ijk,jlk->ilk", a, b)


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def transform_domain_tproduct(a, b, s_dft=None, residual_tol: float = 1e-9) -> np.ndarray:
    """T-product evaluated as ``S^-1(S(A) . S(B))`` through a mode-3 DFT transform."""
    a, b = as_tensor3(a), as_tensor3(b)
    n3 = a.shape[2]
    if b.shape[0] != a.shape[1] or b.shape[2] != n3:
        raise ShapeError(f"t_product dimension mismatch: {a.shape} * {b.shape}")
    if s_dft is None:
        s_dft = dft_matrix(n3)
    s_inv = np.linalg.inv(s_dft)
    a_bar = np.tensordot(a, s_dft, axes=([2], [1]))
    b_bar = np.tensordot(b, s_dft, axes=([2], [1]))
    c = np.tensordot(slicewise_product(a_bar, b_bar), s_inv, axes=([2], [1]))
    scale = max(1.0, float(np.max(np.abs(c.real))) if c.size else 1.0)
    residual = float(np.max(np.abs(c.imag))) / scale if c.size else 0.0
    if residual > residual_tol:
        raise TransformResidualError(f"imaginary residue {residual:.3e} exceeds {residual_tol:g}")
    return np.ascontiguousarray(c.real)


class RelationMatrix:
    """Square cross-block mixing matrix; starts as the identity (a diagonal init)."""

    def __init__(self, s):
        s = np.asarray(s, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ShapeError(f"relation matrix must be square, got {s.shape}")
        self.s = s

    @classmethod
    def identity(cls, n_blocks: int) -> "RelationMatrix":
        return cls(np.eye(n_blocks))

    @property
    def n_blocks(self) -> int:
        return self.s.shape[0]

    def condition(self) -> float:
        return condition_estimate(self.s)

    def mix(self, base) -> np.ndarray:
        """Mixed coefficient vectors ``S @ base`` for ``base`` of shape ``(L, V)``."""
        return mix_diagonals(self.s, base)


def mix_diagonals(s, base) -> np.ndarray:
    """Coefficient mixing for diagonal slices, without materializing the V x V x L tensor.

    Equal to the diagonals of ``mode3_product(stack(diag(base[k])), s)``.
    """
    s = np.asarray(s, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if s.ndim != 2 or base.ndim != 2 or s.shape[1] != base.shape[0]:
        raise ShapeError(f"cannot mix {base.shape} coefficient sets with {s.shape} matrix")
    return s @ base


def diagonal_stack(base) -> np.ndarray:
    """``(L, V)`` coefficient vectors -> ``(V, V, L)`` tensor of diagonal slices."""
    base = np.asarray(base, dtype=np.float64)
    n, v = base.shape
    out = np.zeros((v, v, n))
    idx = np.arange(v)
    out[idx, idx, :] = base.T
    return out


def condition_estimate(s) -> float:
    """2-norm condition number; ``inf`` with a warning when rank-deficient at machine precision."""
    sv = np.linalg.svd(np.asarray(s, dtype=np.float64), compute_uv=False)
    if sv.size == 0:
        return 1.0
    if sv[-1] <= sv[0] * s.shape[0] * np.finfo(np.float64).eps:
        warnings.warn("relation matrix is rank-deficient to machine precision", RuntimeWarning, stacklevel=2)
        return float("inf")
    return float(sv[0] / sv[-1])


def matrix_to_csv(m) -> str:
    """Row-major CSV with 17 significant digits (round-trips float64 exactly)."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    buf = io.StringIO()
    for row in m:
        buf.write(",".join(f"{x:.17g}" for x in row))
        buf.write("\n")
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [[float(x) for x in line.split(",")] for line in text.strip().splitlines() if line.strip()]
    return np.array(rows, dtype=np.float64)
