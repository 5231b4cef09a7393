"""Command-line entry point: ``train``, ``eval``, ``verify``, ``analyze``.

Exit codes: 0 success, 1 a verified property failed, 2 configuration or I/O
problem (including usage errors), 3 checkpoint/corpus incompatibility.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attention as att
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError, InputError, NumericError
from .model import (
    ModelConfig,
    attention_param_count,
    build_model,
    count_parameters,
    estimate_flops,
    flops_breakdown,
)
from .training import (
    TrainConfig,
    Vocabulary,
    evaluate_ppl,
    load_corpus,
    nll_windows,
    train,
    write_metrics,
)

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_COMPAT = 0, 1, 2, 3

log = logging.getLogger("ttlm")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str | None = None
    level: str = "char"
    val_fraction: float = 0.1
    out_dir: str = "runs/default"
    checkpoint: str | None = None
    format: str = "text"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        problems = [f"unknown config key {k!r}" for k in sorted(set(data) - known)]
        if problems:
            raise ConfigError(problems)
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        trainc = TrainConfig.from_dict(data.pop("train", {}))
        return cls(model=model, train=trainc, **data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def validate(self) -> "RunConfig":
        problems = []
        if self.level not in ("char", "word"):
            problems.append(f"level must be 'char' or 'word', got {self.level!r}")
        if not 0.0 < self.val_fraction < 1.0:
            problems.append("val_fraction must lie in (0, 1)")
        if self.format not in ("text", "json", "csv"):
            problems.append(f"unknown format {self.format!r}")
        problems += [p for p in self.model.violations() if not p.startswith("vocab_size")]
        problems += self.train.violations(self.model.N_max)
        if problems:
            raise ConfigError(problems)
        return self


# ------------------------------------------------------------------ output


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def render(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True)
    flat = _flatten(report)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in flat.items():
            w.writerow([k, json.dumps(v) if isinstance(v, (list, bool)) or v is None else v])
        return buf.getvalue().rstrip("\n")
    width = max((len(k) for k in flat), default=0)
    lines = []
    for k, v in flat.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"{k:<{width}}  {v}")
    return "\n".join(lines)


def emit(report: dict, fmt: str) -> None:
    print(render(report, fmt))


# ------------------------------------------------------------------ helpers


def load_run_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    rc = RunConfig.from_dict(data)
    m, t = rc.model, rc.train
    overrides = {
        "d_model": ("model", "d_model"), "d": ("model", "d"), "heads": ("model", "h"),
        "rank": ("model", "R"), "layers": ("model", "L"), "d_ff": ("model", "d_ff"),
        "attention": ("model", "attention_kind"), "mode": ("model", "attention_mode"),
        "dropout": ("model", "dropout"), "epochs": ("train", "epochs"),
        "seq_len": ("train", "seq_len"), "batch_size": ("train", "batch_size"),
        "warmup": ("train", "warmup_steps"), "lr_scale": ("train", "base_lr_scale"),
    }
    for arg, (section, name) in overrides.items():
        v = getattr(args, arg, None)
        if v is not None:
            setattr(m if section == "model" else t, name, v)
    if getattr(args, "seed", None) is not None:
        m.seed = t.seed = args.seed
    if getattr(args, "deterministic", False):
        t.deterministic = True
    for name in ("corpus", "level", "format"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(rc, name, v)
    if getattr(args, "out", None):
        rc.out_dir = args.out
    if t.seq_len > m.N_max:
        m.N_max = t.seq_len
    return rc.validate()


def split_ids(ids: np.ndarray, val_fraction: float):
    cut = int(round(len(ids) * (1.0 - val_fraction)))
    return ids[:cut], ids[cut:]


def param_summary(cfg: ModelConfig) -> dict:
    """Whole-model and attention counts for ``cfg`` and its other-kind twin."""
    other = "multi_head" if cfg.attention_kind == "multi_linear" else "multi_linear"
    twin = cfg.twin(other)
    out = {}
    for c in (cfg, twin):
        counts = count_parameters(build_model(c))
        out[c.attention_kind] = {
            **counts,
            "attention_per_layer": att.count_attention_params(
                c.attention_kind, c.d_model, c.d, c.h, c.rank, True, c.attention_mode),
            "attention_projection_per_layer": att.count_attention_params(
                c.attention_kind, c.d_model, c.d, c.h, c.rank, False, c.attention_mode),
        }
    mh, ml = out["multi_head"], out["multi_linear"]
    out["ratios"] = {
        "projection_only": mh["attention_projection_per_layer"] / ml["attention_projection_per_layer"],
        "attention_with_output_map": mh["attention"] / ml["attention"],
        "whole_model": mh["total"] / ml["total"],
        "compression_ratio_rank": att.compression_ratio_rank(cfg.h, cfg.d_model, cfg.d, cfg.rank),
    }
    return out


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc = load_run_config(args)
    if not rc.corpus:
        raise InputError("no corpus given (use --corpus or the 'corpus' config key)")
    corpus = Path(rc.corpus)
    if not corpus.is_file():
        raise InputError(f"corpus not found: {corpus}")
    vocab, ids = load_corpus(corpus, rc.level)
    rc.model.vocab_size = len(vocab)
    rc.model.validate()
    train_ids, val_ids = split_ids(ids, rc.val_fraction)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(rc.checkpoint) if rc.checkpoint else out / "checkpoint.ttlm"
    model = build_model(rc.model)
    N = rc.train.seq_len
    meta = {"seq_len": N, "val_fraction": rc.val_fraction, "corpus": str(corpus)}

    def save(epoch, m, opt, metrics):
        save_checkpoint(ckpt_path, m, opt, vocab, {**meta, "epoch": epoch})

    trained, metrics = train(model, train_ids, rc.train, val_ids=val_ids,
                             max_steps=getattr(args, "max_steps", None),
                             max_seconds=getattr(args, "max_seconds", None),
                             on_epoch_end=save)
    write_metrics(metrics, out / "metrics.csv")
    val_ppls = [r.val_ppl for r in metrics if r.val_ppl is not None]
    final_ppl = evaluate_ppl(trained, val_ids, N)
    summary = {
        "config": rc.to_dict(),
        "steps": len(metrics),
        "vocab_size": len(vocab),
        "vocab_fingerprint": vocab.fingerprint(),
        "final_val_ppl": final_ppl,
        "best_val_ppl": min(val_ppls + [final_ppl]),
        "uniform_ppl": float(len(vocab)),
        "params": param_summary(rc.model),
        "checkpoint": str(ckpt_path) if metrics else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    emit(summary, rc.format)
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    corpus = Path(args.corpus)
    if not corpus.is_file():
        raise InputError(f"corpus not found: {corpus}")
    vocab = ck.vocab
    if vocab is None:
        raise FormatError("checkpoint carries no vocabulary")
    text_vocab, _ = load_corpus(corpus, vocab.level)
    # word-level OOV maps to <unk>; an unseen character means the wrong corpus
    unseen = [t for t in text_vocab.tokens if t not in vocab.index]
    if unseen and vocab.level == "char":
        print(f"vocabulary mismatch: checkpoint {vocab.fingerprint()} vs corpus "
              f"{text_vocab.fingerprint()} ({len(unseen)} unseen tokens)", file=sys.stderr)
        return EXIT_COMPAT
    _, ids = load_corpus(corpus, vocab=vocab)
    if args.split != "all":
        tr, va = split_ids(ids, ck.meta.get("val_fraction", 0.1))
        ids = va if args.split == "val" else tr
    N = args.seq_len or ck.meta.get("seq_len") or ck.model.config.N_max
    total, count = nll_windows(ck.model, ids, N)
    report = {"tokens": count, "ppl": float(np.exp(total / max(count, 1))),
              "seq_len": N, "split": args.split, "vocab_fingerprint": vocab.fingerprint()}
    emit(report, args.format or "text")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    try:
        results = run_suites(args.suite, args.seed, args.trials)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    fmt = args.format or "text"
    if fmt == "text":
        for r in results:
            print(r.line())
    else:
        emit({f"{r.suite}/{r.name}": {"passed": r.passed, "max_error": r.max_error,
                                      "tolerance": r.tolerance} for r in results}, fmt)
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in results], indent=2))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed", file=sys.stderr)
    return EXIT_PROPERTY if failed else EXIT_OK


def analyze_report(d_model, d, h, R, L, vocab, N, d_ff=2100, mode="chunked") -> dict:
    R = d if R is None else R
    if min(d_model, d, h, R, L, vocab, N, d_ff) < 1 or R > d:
        raise UsageError("dimensions must be positive and rank must not exceed d")
    report = {"inputs": {"d_model": d_model, "d": d, "heads": h, "rank": R, "layers": L,
                         "vocab": vocab, "seq_len": N, "d_ff": d_ff, "mode": mode}}
    for kind in ("multi_head", "multi_linear"):
        cfg = ModelConfig(L=L, d_model=d_model, d=d, h=h, R=R, d_ff=d_ff, vocab_size=vocab,
                          N_max=N, attention_kind=kind, attention_mode=mode)
        report[kind] = {
            "attention_per_layer_excl_Wo": att.count_attention_params(kind, d_model, d, h, R, False, mode),
            "attention_per_layer": att.count_attention_params(kind, d_model, d, h, R, True, mode),
            "attention_total": attention_param_count(cfg),
            "model_total": count_parameters(build_model(cfg)).get("total"),
            "flops": estimate_flops(cfg, N),
            "flops_breakdown": flops_breakdown(cfg, N),
        }
    mh, ml = report["multi_head"], report["multi_linear"]
    report["ratios"] = {
        "compression_ratio": att.compression_ratio(h, d_model),
        "compression_ratio_rank": att.compression_ratio_rank(h, d_model, d, R),
        "projection_only": mh["attention_per_layer_excl_Wo"] / ml["attention_per_layer_excl_Wo"],
        "whole_model": mh["model_total"] / ml["model_total"],
    }
    return report


def cmd_analyze(args) -> int:
    report = analyze_report(args.d_model, args.d, args.heads, args.rank, args.layers,
                            args.vocab, args.seq_len, args.d_ff, args.mode)
    emit(report, args.format or "text")
    return EXIT_OK


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttlm", description="Tensorized transformer LM toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--format", choices=["text", "json", "csv"])

    t = sub.add_parser("train", help="train a language model")
    common(t)
    t.add_argument("--corpus")
    t.add_argument("--level", choices=["char", "word"])
    t.add_argument("--d-model", type=int)
    t.add_argument("--d", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--rank", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--d-ff", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seq-len", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--lr-scale", type=float)
    t.add_argument("--attention", choices=["multi_linear", "multi_head"])
    t.add_argument("--mode", choices=["chunked", "sum"])
    t.add_argument("--max-steps", type=int)
    t.add_argument("--max-seconds", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=["all", "train", "val"], default="all")
    e.add_argument("--seq-len", type=int)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the executable identity suites")
    common(v)
    v.add_argument("--suite", default="all")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--json", help="also write results to this JSON file")
    v.set_defaults(func=cmd_verify, seed=0)

    a = sub.add_parser("analyze", help="parameter, compression and FLOP accounting")
    common(a)
    a.add_argument("--d-model", type=int, default=256)
    a.add_argument("--d", type=int, default=40)
    a.add_argument("--heads", type=int, default=2)
    a.add_argument("--rank", type=int)
    a.add_argument("--layers", type=int, default=3)
    a.add_argument("--vocab", type=int, default=10000)
    a.add_argument("--seq-len", type=int, default=30)
    a.add_argument("--d-ff", type=int, default=2100)
    a.add_argument("--mode", choices=["chunked", "sum"], default="chunked")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "verify" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (ConfigError, InputError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
