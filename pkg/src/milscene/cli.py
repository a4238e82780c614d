"""Command-line entry point: ``milscene <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import datasets as ds
from . import evalkit, featex, fusenet
from .milhead import SceneTaxonomy
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint

MANIFEST = "manifest.json"
CHECKPOINT = "model.milc"


@dataclass
class RunManifest:
    config: dict
    seed: int
    version: str
    started: str
    finished: str | None = None
    outputs: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _taxonomy(args) -> SceneTaxonomy:
    if getattr(args, "scenes", None):
        return SceneTaxonomy(tuple(s.strip() for s in args.scenes.split(",")))
    return SceneTaxonomy()


def _load_run(checkpoint, config_path=None) -> tuple[evalkit.Model, TrainConfig]:
    checkpoint = Path(checkpoint)
    if config_path is not None:
        cfg = TrainConfig.from_json(config_path)
    else:
        manifest = checkpoint.parent / MANIFEST
        if not manifest.exists():
            raise FileNotFoundError(f"no {MANIFEST} next to {checkpoint}; pass --config")
        cfg = TrainConfig.from_dict(RunManifest.read(manifest).config)
    params, _, _ = load_checkpoint(checkpoint)
    return evalkit.Model(params, cfg.model_config(), cfg.loss.objective), cfg


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = ds.SynthConfig(n_classes=args.classes, clips_per_class=args.per_class, clip_seconds=args.seconds,
                         seed=args.seed, clip_offset=args.offset)
    meta = ds.synth_generate(cfg, args.out)
    print(meta)
    return 0


def cmd_features(args) -> int:
    records = ds.parse_meta(args.meta, _taxonomy(args), args.audio_root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(r):
        values = featex.extract(r.path).values
        featex.save_features(values, out / f"{r.clip_id}.lmel")
        return values.shape

    with ThreadPoolExecutor(ds._threads()) as pool:
        shapes = list(pool.map(work, records))
    print(f"wrote {len(shapes)} feature files to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tax = cfg.taxonomy
    manifest = RunManifest(cfg.to_dict(), cfg.seed, version_string(), _now(),
                           outputs={"checkpoint": str(out / CHECKPOINT), "history": str(out / "history.json")})
    manifest.write(out / MANIFEST)
    cache = out / "cache"
    train = ds.load_examples(ds.parse_meta(args.train_meta, tax, args.audio_root), cache)
    val = ds.load_examples(ds.parse_meta(args.val_meta, tax, args.audio_root), cache) if args.val_meta else []

    params, start, history = None, 0, None
    if args.resume:
        params, start, _ = load_checkpoint(args.resume)

    def on_epoch(p, rec):
        save_checkpoint(p, rec.epoch + 1, out / CHECKPOINT)

    params, history = fit(train, val, cfg, params=params, start_epoch=start, on_epoch=on_epoch)
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
    manifest.finished = _now()
    manifest.write(out / MANIFEST)
    print(json.dumps({"final_val_accuracy": history.final_val_accuracy,
                      "best_val_accuracy": history.best_val_accuracy}))
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_run(args.checkpoint, args.config)
    examples, skipped = evalkit.load_readable(ds.parse_meta(args.meta, cfg.taxonomy, args.audio_root))
    report = evalkit.evaluate(model, examples, args.rule, skipped)
    print(report.to_json(args.out))
    if args.stats:
        evalkit.confidence_stats(model, examples).to_json(args.stats)
    return 0


def cmd_roc(args) -> int:
    model, cfg = _load_run(args.checkpoint, args.config)
    tax = cfg.taxonomy
    cls = tax.index(args.cls) if args.cls in tax.names else int(args.cls)
    examples, _ = evalkit.load_readable(ds.parse_meta(args.meta, tax, args.audio_root))
    thr, fpr, tpr, auc = evalkit.instance_roc(model, examples, cls)
    if args.out:
        np.savetxt(args.out, np.column_stack([thr, fpr, tpr]), delimiter=",", header="threshold,fpr,tpr",
                   comments="", fmt="%.8g")
    print(json.dumps({"class": tax.names[cls], "auc": auc, "points": len(thr)}))
    return 0


def cmd_inspect(args) -> int:
    model, cfg = _load_run(args.checkpoint, args.config)
    clip = Path(args.clip)
    values = featex.extract(clip).values.astype(np.float32)
    label = cfg.taxonomy.index(args.scene) if args.scene else 0
    example = ds.Example(clip.stem, values, label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.export_masks(model, example, out / f"{clip.stem}_mask")
    rows = evalkit.export_instances(model, [example], out / f"{clip.stem}_instances.csv", cfg.taxonomy.names)
    print(f"wrote masks and {rows} instance rows to {out}")
    return 0


def cmd_params(args) -> int:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    report = fusenet.model_param_report(fusenet.init_params(cfg.model_config(), 0))
    print(fusenet.format_param_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milscene", description="MIL acoustic scene classification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--audio-root", help="directory meta filenames are relative to (default: the meta file's directory)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic scene corpus")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=10)
    s.add_argument("--seconds", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--offset", type=int, default=0, help="first clip index (use distinct ranges for splits)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="extract log-mel LMEL files for a meta TSV")
    s.add_argument("--meta", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", help="comma-separated scene names (default: the ten TAU scenes)")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--train-meta", required=True)
    s.add_argument("--val-meta")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="MILC checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "accuracy report"), ("roc", "one-vs-rest instance ROC"),
                           ("inspect", "confidence masks and instance export for one clip")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--config", help="training config JSON (default: manifest next to the checkpoint)")
        if name == "eval":
            s.add_argument("--meta", required=True)
            s.add_argument("--rule", choices=("smi", "cmi"), default="smi")
            s.add_argument("--out")
            s.add_argument("--stats", help="also write confidence statistics JSON here")
            s.set_defaults(func=cmd_eval)
        elif name == "roc":
            s.add_argument("--meta", required=True)
            s.add_argument("--class", dest="cls", required=True)
            s.add_argument("--out", help="CSV of curve points")
            s.set_defaults(func=cmd_roc)
        else:
            s.add_argument("--clip", required=True)
            s.add_argument("--scene", help="true scene of the clip (for the positive column)")
            s.add_argument("--out", required=True)
            s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("params", help="itemized parameter count")
    s.add_argument("--config")
    s.set_defaults(func=cmd_params)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(f"milscene {args.command}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
