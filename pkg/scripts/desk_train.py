"""Train the multi-linear model and its multi-head twin on the bundled corpus
under one shared time budget and write the comparison to JSON.

    python scripts/desk_train.py --budget 600 --out runs/desk.json
"""
import argparse
import json
import logging
from pathlib import Path

from tensorized_transformer.experiments import DeskConfig, run_desk_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", default="data/corpus.txt")
    ap.add_argument("--budget", type=float, default=600.0, help="seconds per model")
    ap.add_argument("--out", default="runs/desk.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    report = run_desk_experiment(DeskConfig(corpus=args.corpus, budget_seconds=args.budget))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    for kind, run in report["runs"].items():
        print(f"{kind:13s} steps={run['steps']:5d} val_ppl={run['val_ppl']:.3f}")
    print(f"ppl ratio (multi_linear / multi_head) = {report['ppl_ratio']:.3f}")


if __name__ == "__main__":
    main()
