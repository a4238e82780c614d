"""Train one model, then compare max-instance and vote-count decisions.

Also prints the one-vs-rest instance AUC per class and writes a confidence
mask for the first validation clip of every class.

    python3 scripts/decision_rules.py --mode pnl --objective bce --out runs/rules
"""

import argparse
import json
from pathlib import Path

from milscene import evalkit as ek
from milscene import trainer as tr
from milscene.milhead import LossConfig

from underestimation import build_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--mode", default="pnl", choices=["none", "pnl", "gt"])
    p.add_argument("--objective", default="bce", choices=["bce", "ce"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--out", default="runs/rules")
    args = p.parse_args()

    out = Path(args.out)
    tax, train, val = build_corpus(out / "data", args.classes, 10, 5)
    cfg = tr.TrainConfig(epochs=args.epochs, warmup_epochs=5, batch_size=8, initial_lr=args.lr, seed=args.seed,
                         scenes=list(tax.names), eval_every=5,
                         loss=LossConfig(instance_label_mode=args.mode, objective=args.objective))
    params, hist = tr.fit(train, val, cfg)
    tr.save_checkpoint(params, cfg.epochs, out / "model.milc")
    cfg.to_json(out / "config.json")
    model = ek.Model(params, cfg.model_config(), args.objective)

    summary = {}
    for rule in ("smi", "cmi"):
        rep = ek.evaluate(model, val, rule)
        summary[rule] = rep.accuracy
        print(f"{rule}: accuracy {rep.accuracy:.3f} per class {[round(a, 2) for a in rep.per_class_accuracy]}")
    summary["auc"] = {}
    for cls, name in enumerate(tax.names):
        _, _, _, auc = ek.instance_roc(model, val, cls)
        summary["auc"][name] = auc
        print(f"AUC {name}: {auc:.3f}")
    for cls in range(args.classes):
        first = next(e for e in val if e.label == cls)
        ek.export_masks(model, first, out / f"mask_{first.clip_id}")
    summary["history"] = hist.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
