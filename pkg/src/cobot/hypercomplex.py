"""Quaternion (4-dim hypercomplex) algebra and orthogonal projection-weight generation.

Components are stored as ``(a0, a1, a2, a3)`` for ``a0 + a1 j1 + a2 j2 + a3 j3``
with ``j1 j2 = j3``, ``j2 j3 = j1``, ``j3 j1 = j2`` and ``j_i^2 = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_NORM_FLOOR = 1e-30


class HypercomplexError(ValueError):
    """Raised on dimension mismatch or degenerate hypercomplex input."""


@dataclass(frozen=True)
class Hypercomplex:
    components: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.components, dtype=np.float64).reshape(-1).copy()
        if c.size not in (4, 8):
            raise HypercomplexError(f"unsupported hypercomplex dimension {c.size}")
        if not np.all(np.isfinite(c)):
            raise HypercomplexError("hypercomplex components must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    @property
    def n(self) -> int:
        return self.components.size

    def __iter__(self):
        return iter(self.components.tolist())

    def __mul__(self, other: "Hypercomplex") -> "Hypercomplex":
        return hamilton_product(self, other)

    def __add__(self, other: "Hypercomplex") -> "Hypercomplex":
        return Hypercomplex(self.components + other.components)

    def __rmul__(self, scale: float) -> "Hypercomplex":
        return Hypercomplex(float(scale) * self.components)

    def __eq__(self, other):
        if not isinstance(other, Hypercomplex):
            return NotImplemented
        return np.array_equal(self.components, other.components)

    def __hash__(self):
        return hash(self.components.tobytes())

    def __repr__(self):
        return f"Hypercomplex({self.components.tolist()})"


def _check4(*qs: Hypercomplex) -> None:
    for q in qs:
        if q.n != 4:
            raise HypercomplexError(f"expected a 4-dim hypercomplex number, got N={q.n}")


def hamilton_product(a: Hypercomplex, b: Hypercomplex) -> Hypercomplex:
    """Non-commutative product ``a ⊗ b``.

    N=4 is the Hamilton product. N=8 goes through the Cayley-Dickson
    doubling of quaternions (octonions); that path is an extension hook and
    is not part of the verified suite.
    """
    if a.n != b.n:
        raise HypercomplexError(f"dimension mismatch: {a.n} vs {b.n}")
    if a.n == 8:
        return Hypercomplex(_cayley_dickson(a.components, b.components))
    a0, a1, a2, a3 = a.components
    b0, b1, b2, b3 = b.components
    return Hypercomplex(
        np.array(
            [
                a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
                a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
                a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
                a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
            ]
        )
    )


def _cayley_dickson(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # (p, q)(r, s) = (pr - s* q, s p + q r*)
    p, q = Hypercomplex(x[:4]), Hypercomplex(x[4:])
    r, s = Hypercomplex(y[:4]), Hypercomplex(y[4:])
    first = hamilton_product(p, r).components - hamilton_product(conjugate(s), q).components
    second = hamilton_product(s, p).components + hamilton_product(q, conjugate(r)).components
    return np.concatenate([first, second])


def conjugate(a: Hypercomplex) -> Hypercomplex:
    c = -a.components
    c[0] = a.components[0]
    return Hypercomplex(c)


def norm(a: Hypercomplex) -> float:
    return float(np.sqrt(np.sum(a.components**2)))


def normalize(a: Hypercomplex) -> Hypercomplex:
    n = norm(a)
    if n <= _NORM_FLOOR:
        raise HypercomplexError("cannot normalize a (near-)zero hypercomplex number")
    return Hypercomplex(a.components / n)


def random_unit_quaternion(rng: np.random.Generator) -> Hypercomplex:
    """Uniform sample on the 3-sphere: four i.i.d. Gaussians, normalized."""
    while True:
        g = rng.standard_normal(4)
        if np.sqrt(np.sum(g**2)) > 1e-12:
            return normalize(Hypercomplex(g))


# basis[c] is the matrix E_c such that M(q) = sum_c q_c E_c
_LEFT_BASIS = np.array(
    [
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]],
        [[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]],
        [[0, 0, -1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, -1, 0, 0]],
        [[0, 0, 0, -1], [0, 0, -1, 0], [0, 1, 0, 0], [1, 0, 0, 0]],
    ],
    dtype=np.float64,
)
_LEFT_BASIS.setflags(write=False)


def left_mul_basis() -> np.ndarray:
    """The four constant 4x4 matrices whose q-weighted sum is ``left_mul_matrix(q)``."""
    return _LEFT_BASIS


def left_mul_matrix(q: Hypercomplex) -> np.ndarray:
    """Real 4x4 matrix ``M(q)`` with ``M(q) @ b == (q ⊗ b)`` for every quaternion ``b``."""
    _check4(q)
    return np.tensordot(q.components, _LEFT_BASIS, axes=1)


@dataclass
class QuaternionBank:
    """Store of ``V/4`` quaternions that realify into a ``V x V`` projection head."""

    elements: list

    def __post_init__(self):
        for q in self.elements:
            _check4(q)

    @property
    def hidden_dim(self) -> int:
        return 4 * len(self.elements)

    def as_array(self) -> np.ndarray:
        return np.stack([q.components for q in self.elements]) if self.elements else np.zeros((0, 4))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "QuaternionBank":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise HypercomplexError(f"quaternion bank array must be (k, 4), got {arr.shape}")
        return cls([Hypercomplex(row) for row in arr])

    @classmethod
    def random(cls, hidden_dim: int, rng: np.random.Generator) -> "QuaternionBank":
        if hidden_dim % 4:
            raise HypercomplexError(f"hidden dimension {hidden_dim} is not a multiple of 4")
        return cls([random_unit_quaternion(rng) for _ in range(hidden_dim // 4)])


def projection_weights_from_array(bank: np.ndarray) -> np.ndarray:
    """Block-diagonal ``V x V`` matrix of left-multiplication blocks for a ``(V/4, 4)`` array."""
    bank = np.asarray(bank, dtype=np.float64)
    k = bank.shape[0]
    blocks = np.einsum("kc,cij->kij", bank, _LEFT_BASIS)
    w = np.zeros((4 * k, 4 * k))
    for i in range(k):
        w[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = blocks[i]
    return w


def projection_weights_pullback(grad_w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the ``(V/4, 4)`` bank given the gradient w.r.t. ``W``."""
    k = grad_w.shape[0] // 4
    diag = np.stack([grad_w[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] for i in range(k)])
    return np.einsum("kij,cij->kc", diag, _LEFT_BASIS)


def build_projection_weights(bank: QuaternionBank, hidden_dim: int) -> np.ndarray:
    if hidden_dim % 4:
        raise HypercomplexError(f"hidden dimension {hidden_dim} is not a multiple of 4")
    if len(bank.elements) != hidden_dim // 4:
        raise HypercomplexError(
            f"bank holds {len(bank.elements)} quaternions, need {hidden_dim // 4} for V={hidden_dim}"
        )
    return projection_weights_from_array(bank.as_array())
