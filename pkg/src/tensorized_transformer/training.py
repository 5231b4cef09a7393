"""Corpus handling, optimisation and perplexity evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, ConfigError, InputError, NumericError
from .model import Model, check_tokens, lm_logits

log = logging.getLogger(__name__)

PAD, UNK, EOS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<eos>")


@dataclass
class Vocabulary:
    tokens: list[str]
    level: str = "char"

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            self.tokens = list(RESERVED) + [t for t in self.tokens if t not in RESERVED]
        if self.level not in ("char", "word"):
            raise ArgumentError(f"unknown vocabulary level {self.level!r}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ArgumentError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks) -> np.ndarray:
        get = self.index.get
        return np.fromiter((get(t, UNK) for t in toks), dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def fingerprint(self) -> str:
        blob = json.dumps({"level": self.level, "tokens": self.tokens}, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"level": self.level, "tokens": self.tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["tokens"]), d["level"])


def tokenize(text: str, level: str) -> list[str]:
    if level == "char":
        return list(text)
    out = []
    for line in text.splitlines():
        out.extend(line.split())
        out.append(RESERVED[EOS])
    return out


def build_vocab(toks, level: str, cutoff: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken by token order, rare tokens dropped."""
    counts = Counter(t for t in toks if t not in RESERVED)
    ranked = sorted((t for t, c in counts.items() if c >= cutoff), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + ranked, level)


def load_corpus(path, level: str = "char", cutoff: int = 1,
                vocab: Vocabulary | None = None) -> tuple[Vocabulary, np.ndarray]:
    """Read UTF-8 text and map it to ids, building a vocabulary unless one is given."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise InputError(f"corpus {path} is empty")
    if vocab is not None:
        level = vocab.level
    toks = tokenize(text, level)
    if vocab is None:
        vocab = build_vocab(toks, level, cutoff)
    return vocab, vocab.encode(toks)


def batches(ids, batch_size: int, N: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Contiguous LM blocks.

    The stream is cut into ``batch_size`` equal lanes; each lane is walked in
    steps of ``N`` and the target block is the input block shifted by one.
    A lane of length ``n`` yields ``n // (N + 1)`` blocks, so a block is emitted
    only when the lane could hold it plus one spare token; the tail is dropped.
    """
    ids = np.asarray(ids)
    need = batch_size * (N + 1)
    if len(ids) < need:
        raise InputError(f"corpus has {len(ids)} tokens, need at least {need} for "
                         f"batch_size={batch_size}, N={N}")
    lane = len(ids) // batch_size
    data = ids[: lane * batch_size].reshape(batch_size, lane)
    for i in range(lane // (N + 1)):
        s = i * N
        yield data[:, s:s + N], data[:, s + 1:s + N + 1]


def label_smoothed_ce(logits, targets, eps: float = 0.0, pad_id: int | None = PAD) -> float:
    """Numpy entry point to the smoothed loss used in training."""
    if not 0.0 <= eps < 1.0:
        raise ArgumentError(f"label smoothing must lie in [0, 1), got {eps}")
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise InputError("target id out of range")
    tape = ad.Tape()
    return float(ad.label_smoothed_ce(tape.const(logits), targets, eps, pad_id).value)


def lr_at(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """Inverse-square-root schedule with linear warmup, peaking at ``step == warmup``."""
    if step < 1:
        raise ArgumentError(f"step must be >= 1, got {step}")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class TrainConfig:
    batch_size: int = 16
    seq_len: int = 64
    epochs: int = 1
    warmup_steps: int = 4000
    base_lr_scale: float = 1.0
    label_smoothing: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float | None = 0.25
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 0  # steps between validation passes, 0 = once per epoch

    def violations(self, N_max: int | None = None) -> list[str]:
        out = []
        for name in ("batch_size", "seq_len", "warmup_steps"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            out.append("label_smoothing must lie in [0, 1)")
        if N_max is not None and self.seq_len > N_max:
            out.append(f"seq_len {self.seq_len} exceeds model N_max {N_max}")
        return out

    def validate(self, N_max: int | None = None) -> "TrainConfig":
        problems = self.violations(N_max)
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError([f"unknown train config key {k!r}" for k in sorted(unknown)])
        return cls(**data)


@dataclass
class MetricsRow:
    step: int
    lr: float
    train_loss: float
    val_ppl: float | None
    elapsed_s: float


METRICS_HEADER = ["step", "lr", "train_loss", "val_ppl", "elapsed_s"]


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.step, repr(r.lr), repr(r.train_loss),
                        "" if r.val_ppl is None else repr(r.val_ppl), f"{r.elapsed_s:.3f}"])


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict, lr: float) -> None:
        self.step += 1
        b1, b2, t = self.beta1, self.beta2, self.step
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for name, g in grads.items():
            p = params[name]
            g = g.astype(p.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def lm_loss(model: Model, tape: ad.Tape, inputs, targets, eps: float, rng=None):
    pv = tape.params_from(model.params)
    logits = lm_logits(model.config, pv, inputs, rng)
    return ad.label_smoothed_ce(logits, targets, eps, PAD)


def _offender(params: dict, grads: dict) -> str:
    # a bad value poisons every gradient downstream of it, so look at values first
    for name in params:
        if not np.all(np.isfinite(params[name])):
            return f"{name} (value)"
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            return f"{name} (gradient)"
    return "unknown"


def train(model: Model, ids, tc: TrainConfig, *, val_ids=None, optimizer: Adam | None = None,
          max_steps: int | None = None, max_seconds: float | None = None,
          on_epoch_end: Callable | None = None) -> tuple[Model, list[MetricsRow]]:
    """Train a copy of ``model``; ``optimizer`` (if given) is updated in place.

    ``max_steps`` and ``max_seconds`` cap the run inside the epoch budget.
    ``on_epoch_end(epoch, model, optimizer, metrics)`` runs after every epoch.
    """
    tc.validate(model.config.N_max)
    model = model.copy()
    opt = optimizer if optimizer is not None else Adam(tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    rng = np.random.default_rng(tc.seed)
    metrics: list[MetricsRow] = []
    start = time.perf_counter()
    D = model.config.d_model
    stop = False
    for epoch in range(tc.epochs):
        for inputs, targets in batches(ids, tc.batch_size, tc.seq_len):
            step = opt.step + 1
            lr = lr_at(step, D, tc.warmup_steps, tc.base_lr_scale)
            tape = ad.Tape()
            loss = lm_loss(model, tape, inputs, targets, tc.label_smoothing, rng)
            loss_value = float(loss.value)
            grads = ad.backward(tape, loss)
            if not np.isfinite(loss_value):
                raise NumericError(f"non-finite loss at step {step} (lr={lr:.3g}); "
                                   f"offending parameter: {_offender(model.params, grads)}")
            if tc.grad_clip:
                clip_global_norm(grads, tc.grad_clip)
            opt.update(model.params, grads, lr)
            val = None
            if val_ids is not None and tc.eval_every and step % tc.eval_every == 0:
                val = evaluate_ppl(model, val_ids, tc.seq_len)
            metrics.append(MetricsRow(step, lr, loss_value, val, time.perf_counter() - start))
            if (max_steps is not None and opt.step >= max_steps) or (
                max_seconds is not None and time.perf_counter() - start >= max_seconds
            ):
                stop = True
                break
        if val_ids is not None and metrics and metrics[-1].val_ppl is None:
            metrics[-1].val_ppl = evaluate_ppl(model, val_ids, tc.seq_len)
        if metrics:
            log.info("epoch %d step %d loss %.4f val_ppl %s", epoch, metrics[-1].step,
                     metrics[-1].train_loss, metrics[-1].val_ppl)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, opt, metrics)
        if stop:
            break
    return model, metrics


def nll_windows(model: Model, ids, N: int, batch_size: int = 32) -> tuple[float, int]:
    """Total unsmoothed NLL and token count over non-overlapping windows."""
    ids = np.asarray(ids)
    if len(ids) < N + 1:
        raise InputError(f"need at least {N + 1} tokens to evaluate, got {len(ids)}")
    n_win = (len(ids) - 1) // N
    inputs = ids[: n_win * N].reshape(n_win, N)
    targets = ids[1: n_win * N + 1].reshape(n_win, N)
    check_tokens(model.config, inputs)
    total, count = 0.0, 0
    for s in range(0, n_win, batch_size):
        x, y = inputs[s:s + batch_size], targets[s:s + batch_size]
        tape = ad.Tape()
        pv = {k: tape.const(v) for k, v in model.params.items()}
        logits = lm_logits(model.config, pv, x).value.astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
        keep = y != PAD
        total -= float(picked[keep].sum())
        count += int(keep.sum())
    return total, count


def evaluate_ppl(model: Model, ids, N: int, batch_size: int = 32) -> float:
    """``exp`` of the mean per-token negative log-likelihood (no smoothing)."""
    total, count = nll_windows(model, ids, N, batch_size)
    return math.exp(total / max(count, 1))
