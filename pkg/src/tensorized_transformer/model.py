"""Decoder-only language model with multi-linear or multi-head attention.

Parameters live in one flat ``dict`` of numpy arrays keyed by dotted names
(``layers.0.attn.wq``), which is also what checkpoints store.  A forward pass
wraps them as tape leaves, so the same code path gives logits and gradients.

Block layout (norm after the residual add, dropout on each sublayer output)::

    x = LayerNorm(x + Dropout(Attention(x)))
    x = LayerNorm(x + Dropout(FFN(x)))
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Literal

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionParams,
    DiagonalCore,
    MultiHeadParams,
    count_attention_params,
    xavier_normal,
)
from .errors import ConfigError, InputError
from .layers import multi_head_attention, multi_linear_attention


@dataclass
class ModelConfig:
    L: int = 3
    d_model: int = 256
    d: int = 40
    h: int = 2
    R: int | None = None  # None means R = d
    d_ff: int = 2100
    vocab_size: int = 10000
    N_max: int = 64
    dropout: float = 0.3
    attention_kind: Literal["multi_linear", "multi_head"] = "multi_linear"
    attention_mode: Literal["chunked", "sum"] = "chunked"
    tie_embeddings: bool = False
    scale_embeddings: bool = True
    seed: int = 0

    @property
    def rank(self) -> int:
        return self.d if self.R is None else self.R

    def violations(self) -> list[str]:
        out = []
        for name in ("L", "d_model", "d", "h", "d_ff", "vocab_size", "N_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                out.append(f"{name} must be a positive integer, got {v!r}")
        if self.R is not None and (not isinstance(self.R, int) or self.R < 1):
            out.append(f"R must be a positive integer, got {self.R!r}")
        elif isinstance(self.d, int) and self.rank > self.d:
            out.append(f"R={self.rank} must not exceed d={self.d}")
        if not (0.0 <= self.dropout < 1.0):
            out.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.attention_kind not in ("multi_linear", "multi_head"):
            out.append(f"unknown attention_kind {self.attention_kind!r}")
        if self.attention_mode not in ("chunked", "sum"):
            out.append(f"unknown attention_mode {self.attention_mode!r}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError([f"unknown model config key {k!r}" for k in sorted(unknown)])
        return cls(**data)

    def twin(self, kind: str) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), "attention_kind": kind})


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["embedding"].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def attention_params(self, layer: int):
        """Numpy-level view of one layer's attention parameters."""
        p, cfg = self.params, self.config
        pre = f"layers.{layer}.attn."
        if cfg.attention_kind == "multi_linear":
            cores = [DiagonalCore(p[f"{pre}core.{j}"]) for j in range(cfg.h)]
            return AttentionParams(p[pre + "wq"], p[pre + "wk"], p[pre + "wv"], cores,
                                   p[pre + "wo"], cfg.attention_mode)
        return MultiHeadParams(
            *[[p[f"{pre}{n}.{j}"] for j in range(cfg.h)] for n in ("wq", "wk", "wv")],
            p[pre + "wo"],
        )


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    """Deterministically initialise every parameter from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D, d, h = cfg.d_model, cfg.d, cfg.h
    p: dict[str, np.ndarray] = {}
    p["embedding"] = rng.normal(0.0, D ** -0.5, size=(cfg.vocab_size, D))
    for i in range(cfg.L):
        pre = f"layers.{i}."
        if cfg.attention_kind == "multi_linear":
            for n in ("wq", "wk", "wv"):
                p[f"{pre}attn.{n}"] = xavier_normal(rng, D, d)
            for j in range(h):
                p[f"{pre}attn.core.{j}"] = rng.random(cfg.rank)
            rows = h * d if cfg.attention_mode == "chunked" else d
            p[f"{pre}attn.wo"] = xavier_normal(rng, rows, D)
        else:
            for n in ("wq", "wk", "wv"):
                for j in range(h):
                    p[f"{pre}attn.{n}.{j}"] = xavier_normal(rng, D, d)
            p[f"{pre}attn.wo"] = xavier_normal(rng, h * d, D)
        p[f"{pre}ln1.gain"] = np.ones(D)
        p[f"{pre}ln1.bias"] = np.zeros(D)
        p[f"{pre}ffn.w1"] = xavier_normal(rng, D, cfg.d_ff)
        p[f"{pre}ffn.b1"] = np.zeros(cfg.d_ff)
        p[f"{pre}ffn.w2"] = xavier_normal(rng, cfg.d_ff, D)
        p[f"{pre}ffn.b2"] = np.zeros(D)
        p[f"{pre}ln2.gain"] = np.ones(D)
        p[f"{pre}ln2.bias"] = np.zeros(D)
    if not cfg.tie_embeddings:
        p["output.weight"] = xavier_normal(rng, D, cfg.vocab_size)
    return Model(cfg, {k: v.astype(dtype) for k, v in p.items()})


def positional_encoding(N: int, d_model: int) -> np.ndarray:
    """Sinusoids: ``sin`` on even columns, ``cos`` on odd columns."""
    pos = np.arange(N)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((N, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise InputError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    N = tokens.shape[-1]
    if not 1 <= N <= cfg.N_max:
        raise InputError(f"sequence length {N} outside [1, {cfg.N_max}]")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    return tokens


def lm_logits(cfg: ModelConfig, pv: dict[str, ad.Var], tokens, rng=None) -> ad.Var:
    """Build the forward graph; ``rng`` enables dropout (train mode)."""
    tokens = check_tokens(cfg, tokens)
    N = tokens.shape[-1]
    emb = pv["embedding"]
    dtype = emb.dtype
    x = ad.embedding(emb, tokens)
    if cfg.scale_embeddings:
        x = x * math.sqrt(cfg.d_model)
    x = x + positional_encoding(N, cfg.d_model).astype(dtype)
    p_drop = cfg.dropout if rng is not None else 0.0
    for i in range(cfg.L):
        pre = f"layers.{i}."
        if cfg.attention_kind == "multi_linear":
            cores = [pv[f"{pre}attn.core.{j}"] for j in range(cfg.h)]
            a = multi_linear_attention(
                x, x, x, pv[pre + "attn.wq"], pv[pre + "attn.wk"], pv[pre + "attn.wv"],
                cores, pv[pre + "attn.wo"], mode=cfg.attention_mode, causal=True,
                allow_short=True,
            )
        else:
            heads = [[pv[f"{pre}attn.{n}.{j}"] for j in range(cfg.h)] for n in ("wq", "wk", "wv")]
            a = multi_head_attention(x, x, x, *heads, pv[pre + "attn.wo"], causal=True)
        a = ad.dropout(a, p_drop, rng)
        x = ad.layer_norm(x + a, pv[pre + "ln1.gain"], pv[pre + "ln1.bias"])
        f = ad.relu(x @ pv[pre + "ffn.w1"] + pv[pre + "ffn.b1"])
        f = f @ pv[pre + "ffn.w2"] + pv[pre + "ffn.b2"]
        f = ad.dropout(f, p_drop, rng)
        x = ad.layer_norm(x + f, pv[pre + "ln2.gain"], pv[pre + "ln2.bias"])
    out_w = ad.swapaxes(emb, 0, 1) if cfg.tie_embeddings else pv["output.weight"]
    return x @ out_w


def forward_lm(m: Model, tokens, train_mode: bool = False, rng=None) -> np.ndarray:
    """Logits ``(..., N, vocab_size)``.  Dropout is active only in ``train_mode``."""
    tape = ad.Tape()
    pv = tape.params_from(m.params)
    if train_mode and rng is None:
        rng = np.random.default_rng(m.config.seed)
    return lm_logits(m.config, pv, tokens, rng if train_mode else None).value


# ------------------------------------------------------------------- audits


def _group(name: str) -> str:
    if name == "embedding":
        return "embedding"
    if name.startswith("output."):
        return "output"
    part = name.split(".")[2]
    return {"attn": "attention", "ffn": "ffn", "ln1": "norms", "ln2": "norms"}[part]


def count_parameters(m: Model) -> dict[str, int]:
    """Allocated parameter counts by component, plus ``total``."""
    out = {"embedding": 0, "attention": 0, "ffn": 0, "norms": 0, "output": 0}
    for name, arr in m.params.items():
        out[_group(name)] += int(arr.size)
    out["total"] = sum(out.values())
    return out


def flops_breakdown(cfg: ModelConfig, N: int) -> dict[str, int]:
    """Dense-multiply FLOPs (``2*m*k*n`` per ``(m,k)x(k,n)``) for one sequence.

    Attention is counted on the efficient path: score matrix then value mix,
    ``O(N^2 d)``, never the ``N^3`` tensor.  Elementwise work, softmax, layer
    norm and embedding lookups are not counted.
    """
    D, d, h, R, L = cfg.d_model, cfg.d, cfg.h, cfg.rank, cfg.L

    def mm(a, b, c):
        return 2 * a * b * c

    if cfg.attention_kind == "multi_linear":
        proj = 3 * mm(N, D, d)
        mix = mm(N, R, N) + mm(N, N, d)
        rows = h * d if cfg.attention_mode == "chunked" else d
        out_map = mm(N, rows, D)
    else:
        proj = h * 3 * mm(N, D, d)
        mix = h * (mm(N, d, N) + mm(N, N, d))
        out_map = mm(N, h * d, D)
    return {
        "attention_proj": L * (proj + out_map),
        "attention_mix": L * mix,
        "ffn": L * (mm(N, D, cfg.d_ff) + mm(N, cfg.d_ff, D)),
        "output": mm(N, D, cfg.vocab_size),
    }


def estimate_flops(m: Model | ModelConfig, N: int) -> int:
    cfg = m.config if isinstance(m, Model) else m
    if not 1 <= N <= cfg.N_max:
        raise InputError(f"sequence length {N} outside [1, {cfg.N_max}]")
    return int(sum(flops_breakdown(cfg, N).values()))


def attention_param_count(cfg: ModelConfig, include_Wo: bool = True) -> int:
    """Closed-form attention parameters for the whole stack."""
    return cfg.L * count_attention_params(
        cfg.attention_kind, cfg.d_model, cfg.d, cfg.h, cfg.rank,
        include_Wo=include_Wo, mode=cfg.attention_mode,
    )
