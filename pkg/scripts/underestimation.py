"""Compare instance-label modes on the synthetic corpus.

Trains one model per (mode, seed) and reports how confident the instances of
each validation clip are about its true class, how many instances vote for
it, and the final bag accuracy. Results go to stdout and a JSON file.

    python3 scripts/underestimation.py --modes none pnl --seeds 0 1 2 --out runs/underestimation
"""

import argparse
import json
import logging
import statistics
import time
from pathlib import Path

import numpy as np

from milscene import datasets as ds
from milscene import evalkit as ek
from milscene import trainer as tr
from milscene.milhead import LossConfig, SceneTaxonomy


def build_corpus(root: Path, n_classes: int, train_per_class: int, val_per_class: int):
    tax = SceneTaxonomy.first(n_classes)
    train_meta = ds.synth_generate(ds.SynthConfig(n_classes=n_classes, clips_per_class=train_per_class, seed=0),
                                   root / "train", tax)
    val_meta = ds.synth_generate(ds.SynthConfig(n_classes=n_classes, clips_per_class=val_per_class, seed=1),
                                 root / "val", tax)
    train = ds.load_examples(ds.parse_meta(train_meta, tax), root / "cache")
    val = ds.load_examples(ds.parse_meta(val_meta, tax), root / "cache")
    return tax, train, val


def run_one(mode, seed, args, tax, train, val):
    cfg = tr.TrainConfig(epochs=args.epochs, warmup_epochs=args.warmup, batch_size=args.batch_size,
                         initial_lr=args.lr, seed=seed, scenes=list(tax.names),
                         loss=LossConfig(instance_label_mode=mode), eval_every=5)
    start = time.perf_counter()
    params, hist = tr.fit(train, val, cfg)
    stats = ek.confidence_stats(ek.Model(params, cfg.model_config()), val)
    return {
        "mode": mode,
        "seed": seed,
        "diagonal_instance_mean": float(np.nanmean(stats.diagonal_instance_mean)),
        "positive_fraction": float(np.nanmean(stats.positive_fraction)),
        "final_val_accuracy": hist.final_val_accuracy,
        "best_val_accuracy": hist.best_val_accuracy,
        "loss_first": hist.records[0].total_loss,
        "loss_last": hist.records[-1].total_loss,
        "seconds": time.perf_counter() - start,
        "stats": json.loads(stats.to_json()),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--modes", nargs="+", default=["none", "pnl"], choices=["none", "pnl", "gt"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--train-per-class", type=int, default=10)
    p.add_argument("--val-per-class", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--out", default="runs/underestimation")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    tax, train, val = build_corpus(out / "data", args.classes, args.train_per_class, args.val_per_class)
    results = []
    for mode in args.modes:
        for seed in args.seeds:
            r = run_one(mode, seed, args, tax, train, val)
            results.append(r)
            print(f"{mode:>5} seed {seed}: diag {r['diagonal_instance_mean']:.3f} "
                  f"pos {r['positive_fraction']:.3f} acc {r['final_val_accuracy']:.2f} "
                  f"loss {r['loss_first']:.3f}->{r['loss_last']:.4f} ({r['seconds']:.0f}s)", flush=True)

    print("\nmedians over seeds")
    for mode in args.modes:
        rows = [r for r in results if r["mode"] == mode]
        med = {k: statistics.median(r[k] for r in rows)
               for k in ("diagonal_instance_mean", "positive_fraction", "final_val_accuracy")}
        print(f"{mode:>5}: diag {med['diagonal_instance_mean']:.3f} pos {med['positive_fraction']:.3f} "
              f"acc {med['final_val_accuracy']:.2f}")
    (out / "results.json").write_text(json.dumps(results, indent=2))
    print(f"wrote {out / 'results.json'}")


if __name__ == "__main__":
    main()
