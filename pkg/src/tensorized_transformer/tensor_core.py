"""Dense kernels for matrices and 3-order tensors.

Tensors are plain ``numpy.ndarray`` objects (C order, so entry ``(a, b, c)``
lives at flat offset ``(a * n2 + b) * n3 + c``).  Modes and axes are
0-based: mode 0 is the first index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, DimensionError


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ArgumentError(f"{what} contains non-finite entries")
    return x


def as_tensor3(T) -> np.ndarray:
    T = np.asarray(T)
    if T.ndim != 3 or min(T.shape) < 1:
        raise DimensionError(f"expected a non-empty 3-order tensor, got shape {T.shape}")
    return _finite(T, "tensor")


def as_matrix(M) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or min(M.shape) < 1:
        raise DimensionError(f"expected a non-empty matrix, got shape {M.shape}")
    return _finite(M, "matrix")


def _vector(v, what: str) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"{what} must be a non-empty vector, got shape {v.shape}")
    return _finite(v, what)


def outer3(u, v, w) -> np.ndarray:
    """Rank-one 3-order tensor ``u ∘ v ∘ w``."""
    u, v, w = _vector(u, "u"), _vector(v, "v"), _vector(w, "w")
    return u[:, None, None] * v[None, :, None] * w[None, None, :]


def mode_product(T, M, mode: int) -> np.ndarray:
    """Multiply ``T`` along ``mode`` by ``M``: ``out[.., p, ..] = sum_q M[p, q] T[.., q, ..]``."""
    T, M = as_tensor3(T), as_matrix(M)
    if mode not in (0, 1, 2):
        raise ArgumentError(f"mode must be 0, 1 or 2, got {mode}")
    if M.shape[1] != T.shape[mode]:
        raise DimensionError(
            f"mode-{mode} product needs {T.shape[mode]} matrix columns, got {M.shape[1]}"
        )
    return np.moveaxis(np.tensordot(M, T, axes=(1, mode)), 0, mode)


def tucker3(G, X1, X2, X3) -> np.ndarray:
    """Tucker reconstruction ``G x_0 X1 x_1 X2 x_2 X3``."""
    G = as_tensor3(G)
    out = G
    for mode, X in enumerate((X1, X2, X3)):
        X = as_matrix(X)
        if X.shape[1] != G.shape[mode]:
            raise DimensionError(
                f"factor {mode} has {X.shape[1]} columns but core mode {mode} has size {G.shape[mode]}"
            )
        out = mode_product(out, X, mode)
    return out


def superdiagonal(weights, size: int | None = None) -> np.ndarray:
    """Cubic tensor with ``weights`` on the superdiagonal and zeros elsewhere."""
    weights = _vector(weights, "weights")
    n = weights.size if size is None else size
    if n < weights.size:
        raise DimensionError(f"cannot place {weights.size} weights in a tensor of side {n}")
    G = np.zeros((n, n, n), dtype=np.result_type(weights, np.float64))
    idx = np.arange(weights.size)
    G[idx, idx, idx] = weights
    return G


@dataclass(frozen=True)
class BlockTerm:
    core: np.ndarray
    factors: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        core = as_tensor3(self.core)
        if len(self.factors) != 3:
            raise DimensionError("a block term needs exactly three factor matrices")
        factors = tuple(as_matrix(X) for X in self.factors)
        for k, X in enumerate(factors):
            if X.shape[1] != core.shape[k]:
                raise DimensionError(
                    f"factor {k} shape {X.shape} does not match core rank {core.shape[k]}"
                )
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "factors", factors)

    @property
    def outer_shape(self) -> tuple[int, int, int]:
        return tuple(X.shape[0] for X in self.factors)


@dataclass(frozen=True)
class BlockTermFactors:
    """``P`` Tucker terms with identical core and factor shapes."""

    blocks: tuple[BlockTerm, ...]

    def __post_init__(self):
        blocks = tuple(
            b if isinstance(b, BlockTerm) else BlockTerm(b[0], tuple(b[1])) for b in self.blocks
        )
        if not blocks:
            raise ArgumentError("a block-term decomposition needs at least one block")
        first = blocks[0]
        for i, b in enumerate(blocks[1:], start=1):
            if b.core.shape != first.core.shape or b.outer_shape != first.outer_shape:
                raise DimensionError(
                    f"block {i} has core {b.core.shape}/outer {b.outer_shape}, "
                    f"expected {first.core.shape}/{first.outer_shape}"
                )
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def equal_rank(cls, blocks: Sequence) -> "BlockTermFactors":
        """Build and additionally require ``R1 == R2 == R3``."""
        f = cls(tuple(blocks))
        R = f.blocks[0].core.shape
        if len(set(R)) != 1:
            raise DimensionError(f"equal-rank decomposition required, core shape is {R}")
        return f

    @property
    def P(self) -> int:
        return len(self.blocks)


def btd3(f: BlockTermFactors) -> np.ndarray:
    """Sum of the Tucker reconstructions of every block."""
    out = None
    for b in f.blocks:
        term = tucker3(b.core, *b.factors)
        out = term if out is None else out + term
    return out


def tensor_slice(T, axis: int, index: int) -> np.ndarray:
    """Matrix obtained by fixing ``index`` on ``axis``; other axes keep their order."""
    T = as_tensor3(T)
    if axis not in (0, 1, 2):
        raise ArgumentError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < T.shape[axis]:
        raise IndexError(f"index {index} out of bounds for axis {axis} of size {T.shape[axis]}")
    return np.take(T, index, axis=axis)


def stack_slices(slices: Sequence[np.ndarray], axis: int) -> np.ndarray:
    """Inverse of taking every slice along ``axis``."""
    return np.stack([as_matrix(s) for s in slices], axis=axis)


def chunk_bounds(n: int, h: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into ``h`` contiguous chunks; the first ``n % h`` get one extra."""
    if not 1 <= h <= n:
        raise ArgumentError(f"chunk count must satisfy 1 <= h <= {n}, got {h}")
    base, extra = divmod(n, h)
    bounds, start = [], 0
    for i in range(h):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def split_concat(T, h: int) -> np.ndarray:
    """Chunk-sum ``T`` (N, n2, m) along its second axis and concatenate chunks column-wise.

    Returns an ``(N, h*m)`` matrix.  ``h = 1`` is the plain sum over the second
    axis; ``h = n2`` concatenates the unsummed slices.
    """
    T = as_tensor3(T)
    parts = [T[:, s:e, :].sum(axis=1) for s, e in chunk_bounds(T.shape[1], h)]
    return np.concatenate(parts, axis=1)


def softmax_rows(M) -> np.ndarray:
    M = as_matrix(M)
    z = M - M.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
