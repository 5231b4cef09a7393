"""Desk-scale language-model comparison between the two attention kinds.

Both models see the same corpus split, the same hyperparameters and the same
wall-clock budget; only the attention sublayer differs.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import attention as att
from .model import ModelConfig, attention_param_count, build_model, count_parameters
from .training import TrainConfig, evaluate_ppl, load_corpus, train

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    corpus: str = "data/corpus.txt"
    val_fraction: float = 0.1
    budget_seconds: float = 600.0  # per model
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        L=3, d_model=128, d=40, h=2, R=40, d_ff=512, N_max=64, dropout=0.1))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=16, seq_len=64, epochs=1000, warmup_steps=400))


def run_desk_experiment(dc: DeskConfig, kinds=("multi_linear", "multi_head")) -> dict:
    vocab, ids = load_corpus(Path(dc.corpus), "char")
    cut = int(round(len(ids) * (1 - dc.val_fraction)))
    train_ids, val_ids = ids[:cut], ids[cut:]
    report = {"vocab_size": len(vocab), "train_tokens": int(cut), "val_tokens": int(len(val_ids)),
              "budget_seconds": dc.budget_seconds, "train_config": asdict(dc.train), "runs": {}}
    for kind in kinds:
        cfg = ModelConfig(**{**dc.model.to_dict(), "vocab_size": len(vocab), "attention_kind": kind})
        model = build_model(cfg)
        t0 = time.process_time()
        trained, metrics = train(model, train_ids, dc.train, max_seconds=dc.budget_seconds)
        cpu = time.process_time() - t0
        ppl = evaluate_ppl(trained, val_ids, dc.train.seq_len)
        log.info("%s: %d steps, %.0f CPU-s, val ppl %.3f", kind, len(metrics), cpu, ppl)
        report["runs"][kind] = {
            "config": cfg.to_dict(),
            "steps": len(metrics),
            "train_cpu_seconds": cpu,
            "final_train_loss": metrics[-1].train_loss if metrics else None,
            "val_ppl": ppl,
            "params": count_parameters(trained),
            "attention_projection_params": attention_param_count(cfg, include_Wo=False),
        }
    if set(kinds) == {"multi_linear", "multi_head"}:
        ml, mh = report["runs"]["multi_linear"], report["runs"]["multi_head"]
        c = dc.model
        report["ppl_ratio"] = ml["val_ppl"] / mh["val_ppl"]
        report["projection_ratio"] = mh["attention_projection_params"] / ml["attention_projection_params"]
        report["compression_ratio_rank"] = att.compression_ratio_rank(c.h, c.d_model, c.d, c.rank)
    return report
