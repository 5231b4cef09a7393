"""Attention forms as plain numpy functions over single sequences.

Everything here works on ``(N, d)`` matrices in whatever precision the caller
supplies.  These are the reference paths; the differentiable batched layers
used for training live in :mod:`tensorized_transformer.layers`.

Two 3-order tensors appear:

``single_block_tensor``
    ``T[a, b, c] = sum_r w_r Qp[a, r] Kp[b, r] Vp[c, r]`` -- the Tucker product
    of a superdiagonal core with the three projected factor matrices.

``row_coupled_tensor``
    ``T[a, b, m] = sum_r w_r Qp[a, r] Kp[b, r] Vp[b, m]`` -- value rows indexed
    by key position.  Summing it over ``b`` gives ``Qp diag(w) Kp^T Vp``
    exactly, which is the form the trainable layer evaluates without ever
    materialising the tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError
from .tensor_core import as_matrix, chunk_bounds, softmax_rows, split_concat

Mode = Literal["chunked", "sum"]


def _softmax_vec(g: np.ndarray) -> np.ndarray:
    z = np.exp(g - g.max())
    return z / z.sum()


@dataclass
class DiagonalCore:
    """Raw core vector ``g``; the forward pass always uses ``softmax(g)``."""

    g: np.ndarray

    def __post_init__(self):
        self.g = np.asarray(self.g)
        if self.g.ndim != 1 or self.g.size < 1:
            raise ArgumentError("core vector must be 1-D with at least one entry")

    @property
    def R(self) -> int:
        return self.g.size

    def weights(self) -> np.ndarray:
        return _softmax_vec(self.g)


def init_core(R: int, seed=None) -> DiagonalCore:
    """Core with entries drawn uniformly from (0, 1)."""
    if R < 1:
        raise ArgumentError(f"rank must be >= 1, got {R}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.random(R)
    # random() samples [0, 1); reject an exact 0 to keep the open interval
    while np.any(g == 0.0):
        g[g == 0.0] = rng.random(int(np.sum(g == 0.0)))
    return DiagonalCore(g)


def xavier_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


@dataclass
class AttentionParams:
    """Shared projections, ``h`` diagonal cores and the output map."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    cores: list[DiagonalCore]
    Wo: np.ndarray
    mode: Mode = "chunked"

    def __post_init__(self):
        d_model, d = self.Wq.shape
        for name in ("Wk", "Wv"):
            if getattr(self, name).shape != (d_model, d):
                raise DimensionError(f"{name} must have shape {(d_model, d)}")
        if not self.cores:
            raise ArgumentError("at least one core is required")
        ranks = {c.R for c in self.cores}
        if len(ranks) != 1 or ranks.pop() > d:
            raise ArgumentError("cores must share one rank R <= d")
        if self.mode not in ("chunked", "sum"):
            raise ArgumentError(f"unknown mode {self.mode!r}")
        rows = self.h * d if self.mode == "chunked" else d
        if self.Wo.shape != (rows, d_model):
            raise DimensionError(f"Wo must have shape {(rows, d_model)}, got {self.Wo.shape}")

    @property
    def h(self) -> int:
        return len(self.cores)

    @property
    def d(self) -> int:
        return self.Wq.shape[1]

    @property
    def R(self) -> int:
        return self.cores[0].R

    def mean_weights(self) -> np.ndarray:
        return np.mean([c.weights() for c in self.cores], axis=0)

    def arrays(self) -> list[np.ndarray]:
        return [self.Wq, self.Wk, self.Wv, *(c.g for c in self.cores), self.Wo]

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    @classmethod
    def init(cls, d_model, d, h, R=None, mode: Mode = "chunked", seed=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        R = d if R is None else R
        Wq, Wk, Wv = (xavier_normal(rng, d_model, d) for _ in range(3))
        cores = [init_core(R, rng) for _ in range(h)]
        rows = h * d if mode == "chunked" else d
        return cls(Wq, Wk, Wv, cores, xavier_normal(rng, rows, d_model), mode)


@dataclass
class MultiHeadParams:
    Wq: list[np.ndarray]
    Wk: list[np.ndarray]
    Wv: list[np.ndarray]
    Wo: np.ndarray

    def __post_init__(self):
        if not (len(self.Wq) == len(self.Wk) == len(self.Wv) >= 1):
            raise ArgumentError("need the same positive number of Wq, Wk, Wv matrices")
        shape = self.Wq[0].shape
        for W in (*self.Wq, *self.Wk, *self.Wv):
            if W.shape != shape:
                raise DimensionError("all head projections must share one shape")
        if self.Wo.shape != (self.h * shape[1], shape[0]):
            raise DimensionError(f"Wo must have shape {(self.h * shape[1], shape[0])}")

    @property
    def h(self) -> int:
        return len(self.Wq)

    def arrays(self) -> list[np.ndarray]:
        return [*self.Wq, *self.Wk, *self.Wv, self.Wo]

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    @classmethod
    def init(cls, d_model, d, h, seed=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        heads = [[xavier_normal(rng, d_model, d) for _ in range(h)] for _ in range(3)]
        return cls(*heads, xavier_normal(rng, h * d, d_model))


@dataclass
class BasisSet:
    """Orthonormal basis vectors stored as the columns of ``E`` (m, n).

    The optional coefficient matrices (n, N) generate row-wise representations
    ``Q = (E alpha)^T``, ``K = (E beta)^T``, ``V = (E xi)^T``: every row of Q, K
    and V is a linear combination of the basis vectors.
    """

    E: np.ndarray
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    xi: np.ndarray | None = None

    def __post_init__(self):
        self.E = as_matrix(self.E)
        gram = self.E.T @ self.E
        if not np.allclose(gram, np.eye(gram.shape[0]), rtol=0.0, atol=1e-8):
            raise ArgumentError("basis columns are not orthonormal")

    @classmethod
    def random(cls, m: int, n: int, N: int, rng: np.random.Generator) -> "BasisSet":
        E, _ = np.linalg.qr(rng.normal(size=(m, n)))
        return cls(E, *(rng.normal(size=(n, N)) for _ in range(3)))

    def qkv(self):
        return tuple((self.E @ c).T for c in (self.alpha, self.beta, self.xi))


# ------------------------------------------------------------------- baselines


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``(n, n)`` matrix, True where key position <= query position."""
    return np.tril(np.ones((n, n), dtype=bool))


def scaled_dot_attention(Q, K, V, causal: bool = False) -> np.ndarray:
    Q, K, V = as_matrix(Q), as_matrix(K), as_matrix(V)
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise DimensionError(f"incompatible shapes Q{Q.shape} K{K.shape} V{V.shape}")
    scores = Q @ K.T / np.sqrt(Q.shape[1])
    if causal:
        if Q.shape[0] != K.shape[0]:
            raise DimensionError("causal masking needs equal query and key lengths")
        scores = np.where(causal_mask(Q.shape[0]), scores, -np.inf)
        z = np.exp(scores - scores.max(axis=1, keepdims=True))
        return (z / z.sum(axis=1, keepdims=True)) @ V
    return softmax_rows(scores) @ V


def multi_head_attention(p: MultiHeadParams, Q, K, V, causal: bool = False) -> np.ndarray:
    Q, K, V = as_matrix(Q), as_matrix(K), as_matrix(V)
    d_model = p.Wq[0].shape[0]
    for X in (Q, K, V):
        if X.shape[1] != d_model:
            raise DimensionError(f"inputs must have {d_model} columns, got {X.shape[1]}")
    heads = [
        scaled_dot_attention(Q @ wq, K @ wk, V @ wv, causal)
        for wq, wk, wv in zip(p.Wq, p.Wk, p.Wv)
    ]
    return np.concatenate(heads, axis=1) @ p.Wo


# ---------------------------------------------------------- tensorised forms


def _check_factors(w, Qp, Kp, Vp):
    w = np.asarray(w)
    Qp, Kp, Vp = as_matrix(Qp), as_matrix(Kp), as_matrix(Vp)
    if w.ndim != 1:
        raise DimensionError("core weights must be a vector")
    if Qp.shape[1] != Kp.shape[1]:
        raise DimensionError(f"Qp{Qp.shape} and Kp{Kp.shape} need equal widths")
    if Kp.shape[0] != Vp.shape[0]:
        raise DimensionError(f"Kp{Kp.shape} and Vp{Vp.shape} need equal lengths")
    R = w.size
    if R > min(Qp.shape[1], Vp.shape[1]):
        raise ArgumentError(f"rank {R} exceeds factor width")
    return w, Qp, Kp, Vp, R


def single_block_tensor(w, Qp, Kp, Vp) -> np.ndarray:
    """``(N, N, N)`` tensor ``sum_r w_r Qp[:, r] ∘ Kp[:, r] ∘ Vp[:, r]``."""
    w, Qp, Kp, Vp, R = _check_factors(w, Qp, Kp, Vp)
    return np.einsum("r,ar,br,cr->abc", w, Qp[:, :R], Kp[:, :R], Vp[:, :R])


def row_coupled_tensor(w, Qp, Kp, Vp) -> np.ndarray:
    """``(N, N, m)`` tensor ``T[a, b, m] = sum_r w_r Qp[a, r] Kp[b, r] Vp[b, m]``."""
    w, Qp, Kp, Vp, R = _check_factors(w, Qp, Kp, Vp)
    scores = (Qp[:, :R] * w) @ Kp[:, :R].T
    return scores[:, :, None] * Vp[None, :, :]


def sum_second_index(T) -> np.ndarray:
    T = np.asarray(T)
    if T.ndim != 3:
        raise DimensionError(f"expected a 3-order tensor, got shape {T.shape}")
    return T.sum(axis=1)


def linear_attention(w, Qp, Kp, Vp, causal: bool = False) -> np.ndarray:
    """``Qp diag(w) Kp^T Vp`` using only the first ``len(w)`` columns of Qp, Kp."""
    w, Qp, Kp, Vp, R = _check_factors(w, Qp, Kp, Vp)
    scores = (Qp[:, :R] * w) @ Kp[:, :R].T
    if causal:
        scores = scores * causal_mask(scores.shape[0])
    return scores @ Vp


def multi_linear_attention(p: AttentionParams, Q, K, V, causal: bool = False) -> np.ndarray:
    """Shared-projection block-term attention followed by the output map.

    The average of ``h`` single-block terms that share factor matrices is one
    term whose core is the mean of the ``h`` simplex weights, so only that mean
    is contracted.  ``mode="chunked"`` sums key positions inside ``h``
    contiguous chunks and concatenates the chunks; ``mode="sum"`` sums over all
    keys.  The causal mask drops key positions after the query position.
    """
    Q, K, V = as_matrix(Q), as_matrix(K), as_matrix(V)
    d_model = p.Wq.shape[0]
    for X in (Q, K, V):
        if X.shape[1] != d_model:
            raise DimensionError(f"inputs must have {d_model} columns, got {X.shape[1]}")
    N = K.shape[0]
    if V.shape[0] != N:
        raise DimensionError(f"K and V need equal lengths, got {N} and {V.shape[0]}")
    if causal and Q.shape[0] != N:
        raise DimensionError("causal masking needs equal query and key lengths")
    if p.mode == "chunked" and p.h > N:
        raise ArgumentError(f"chunked mode needs h <= N, got h={p.h}, N={N}")
    Qp, Kp, Vp = Q @ p.Wq, K @ p.Wk, V @ p.Wv
    w = p.mean_weights()
    R = w.size
    scores = (Qp[:, :R] * w) @ Kp[:, :R].T
    if causal:
        scores = scores * causal_mask(N)
    if p.mode == "sum":
        mixed = scores @ Vp
    else:
        mixed = np.concatenate(
            [scores[:, s:e] @ Vp[s:e] for s, e in chunk_bounds(N, p.h)], axis=1
        )
    return mixed @ p.Wo


def multi_linear_attention_materialized(p: AttentionParams, Q, K, V) -> np.ndarray:
    """Same as :func:`multi_linear_attention` (unmasked) but via the explicit
    ``(N, N, d)`` tensor; verification scale only."""
    Qp, Kp, Vp = Q @ p.Wq, K @ p.Wk, V @ p.Wv
    terms = [row_coupled_tensor(c.weights(), Qp, Kp, Vp) for c in p.cores]
    T = np.mean(terms, axis=0)
    mixed = sum_second_index(T) if p.mode == "sum" else split_concat(T, p.h)
    return mixed @ p.Wo


def span_residual(Y, basis: BasisSet) -> float:
    """Frobenius norm of the part of Y's rows lying outside span(basis vectors).

    Zero exactly when every row of ``Y`` is a linear combination of the basis.
    """
    Y = as_matrix(Y)
    E = basis.E
    if Y.shape[1] != E.shape[0]:
        raise DimensionError(f"Y rows have length {Y.shape[1]}, basis vectors {E.shape[0]}")
    return float(np.linalg.norm(Y - (Y @ E) @ E.T))


# ---------------------------------------------------------------- accounting


def compression_ratio(h: int, d_model: int) -> float:
    if h < 1 or d_model < 1:
        raise ArgumentError("h and d_model must be positive")
    return 3 * h * d_model / (3 * d_model + h)


def compression_ratio_rank(h: int, d_model: int, d: int, R: int) -> float:
    if min(h, d_model, d, R) < 1:
        raise ArgumentError("all arguments must be positive")
    if R > d:
        raise ArgumentError(f"rank {R} exceeds width {d}")
    return 3 * h * d_model * d / (3 * d_model * d + R * h)


def count_attention_params(
    kind: str, d_model: int, d: int, h: int, R: int | None = None,
    include_Wo: bool = True, mode: Mode = "chunked",
) -> int:
    """Parameter count of one attention sublayer.

    ``mode="sum"`` only affects multi-linear attention, whose output map then
    has ``d`` rather than ``h*d`` rows.
    """
    R = d if R is None else R
    if kind == "multi_head":
        n = 3 * h * d_model * d
        wo_rows = h * d
    elif kind == "multi_linear":
        n = 3 * d_model * d + h * R
        wo_rows = h * d if mode == "chunked" else d
    else:
        raise ArgumentError(f"unknown attention kind {kind!r}")
    return n + (wo_rows * d_model if include_Wo else 0)
