"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command
prints its resolved configuration to stderr and writes its artifacts plus an
``artifacts.json`` listing under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import edge
from .data import SynthConfig, load_clip, load_manifest, synth_generate
from .model_io import load_archive, save_archive
from .optim import OptimConfig
from .train_eval import (
    REFERENCE_ACCURACY,
    TrainConfig,
    evaluate,
    predict,
    resolution_csv,
    resolution_study,
    train,
)
from .vision import DATASET_PRESETS, PreprocessConfig, preprocess

logger = logging.getLogger("actrec3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_preprocess_flags(p):
    g = p.add_argument_group("preprocessing (defaults: KTH row, S=7 N=35 20x20, bg-sub on)")
    g.add_argument("--dataset", choices=sorted(DATASET_PRESETS),
                   help="take S and N from a dataset preset")
    g.add_argument("--S", type=float, help="seconds of video considered (default 7)")
    g.add_argument("--N", type=int, help="frames sampled by equal interleaving (default 35)")
    g.add_argument("--size", type=int, nargs="+", metavar="PX",
                   help="target frame size: one value for square or H W (default 20 20)")
    g.add_argument("--bg-sub", dest="bg_sub", action="store_true", default=None,
                   help="median-reference background subtraction (default on)")
    g.add_argument("--no-bg-sub", dest="bg_sub", action="store_false")
    g.add_argument("--bg-threshold", type=float,
                   help="binarize the difference image at this level (default unset)")


def _add_train_flags(p):
    p.add_argument("--manifest", required=True, help="dataset manifest file")
    g = p.add_argument_group("training")
    g.add_argument("--model", type=int, choices=(1, 2, 3, 4),
                   help="preset: 1=2 conv, 2=3 conv, 3=3 conv+dropout 0.5, "
                        "4=model 3 + nadam, lr decay, flip augmentation (default 3)")
    g.add_argument("--epochs", type=int, help="default 50")
    g.add_argument("--batch-size", type=int, help="default 16")
    g.add_argument("--seed", type=int, help="default 0")
    g.add_argument("--optimizer", choices=("adam", "nadam"),
                   help="default adam (nadam for model 4)")
    g.add_argument("--lr", type=float, help="initial learning rate (default 1e-3)")
    g.add_argument("--decay", type=float,
                   help="time-based decay k in lr0/(1+k*epoch) (default 0; 0.01 for model 4)")
    g.add_argument("--augment", choices=("none", "model4"),
                   help="flip augmentation (default none; model4 for model 4)")
    g.add_argument("--flip-exclude", nargs="*",
                   help="class names given no flipped copies (default: translate-left/right)")
    _add_preprocess_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actrec3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--out", default="out", help="output directory (default ./out)")
        p.add_argument("--config", help="JSON config overlay; flags win")
        return p

    p = command("synth-data", "generate the synthetic moving-shape dataset")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--clips-per-class", type=int, default=40)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--fps", type=float, default=8.0)
    p.add_argument("--bg-amplitude", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)

    p = command("preprocess", "preprocess one clip into a [1,N,H,W] .npy tensor")
    p.add_argument("--clip", required=True)
    p.add_argument("--fps", type=float, help="frame rate for PGM folders without fps.txt")
    p.add_argument("--archive", help="take the preprocessing config from an archive")
    _add_preprocess_flags(p)

    p = command("train", "train a preset model and write weight archives")
    _add_train_flags(p)

    p = command("eval", "evaluate an archive on a manifest split")
    p.add_argument("--archive", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--reference", choices=sorted(REFERENCE_ACCURACY),
                   help="print published accuracies for this dataset alongside")

    p = command("predict", "classify one clip")
    p.add_argument("--archive", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--fps", type=float)

    p = command("resolution-study", "train model 3 at several frame sizes")
    _add_train_flags(p)
    p.add_argument("--sizes", type=int, nargs="+", default=[20, 40, 60])

    p = command("watch", "classify clips dropped into a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--webhook", help="POST events here instead of stdout")
    p.add_argument("--poll-ms", type=int, default=500)
    p.add_argument("--max-events", type=int, help="exit after this many events")
    p.add_argument("--timeout", type=float, help="exit after this many seconds")
    return parser


def _read_config(args) -> dict:
    if not args.config:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None


def resolve_preprocess(args, base: dict | None = None) -> PreprocessConfig:
    d = PreprocessConfig().to_dict()
    d.update(base or {})
    if args.dataset:
        preset = DATASET_PRESETS[args.dataset]
        d.update(S=preset.S, N=preset.N)
    if args.S is not None:
        d["S"] = args.S
    if args.N is not None:
        d["N"] = args.N
    if args.size is not None:
        if len(args.size) not in (1, 2):
            raise UsageError("--size takes one value or two (H W)")
        d["size"] = args.size * 2 if len(args.size) == 1 else args.size
    if args.bg_sub is not None:
        d["bg_sub"] = args.bg_sub
    if args.bg_threshold is not None:
        d["bg_threshold"] = args.bg_threshold
    return PreprocessConfig.from_dict(d)


def resolve_train_config(args, overlay: dict) -> TrainConfig:
    model = args.model if args.model is not None else overlay.get("model_id", 3)
    base = TrainConfig.for_model(model).to_dict()
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    base["model_id"] = model
    flags = {"epochs": args.epochs, "batch_size": args.batch_size, "seed": args.seed,
             "augment": args.augment}
    base.update({k: v for k, v in flags.items() if v is not None})
    if args.flip_exclude is not None:
        base["flip_exclude"] = args.flip_exclude
    optim = {"kind": args.optimizer, "lr0": args.lr, "decay": args.decay}
    base["optim"].update({k: v for k, v in optim.items() if v is not None})
    cfg = TrainConfig.from_dict(base)
    return replace(cfg, preprocess=resolve_preprocess(args, base["preprocess"]))


class _Outputs:
    def __init__(self, out: str):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def close(self):
        (self.dir / "artifacts.json").write_text(
            json.dumps({"files": self.files}, indent=2) + "\n")


def _show(config: dict) -> None:
    print("resolved config: " + json.dumps(config, sort_keys=True), file=sys.stderr)


def _archive_meta(cfg: TrainConfig, **extra) -> dict:
    return {"train": cfg.to_dict(), **extra}


def cmd_synth_data(args, out: _Outputs):
    cfg = SynthConfig(classes=args.classes, clips_per_class=args.clips_per_class,
                      T=args.frames, H=args.height, W=args.width, fps=args.fps,
                      bg_amplitude=args.bg_amplitude, noise=args.noise, seed=args.seed)
    _show(cfg.__dict__)
    manifest = synth_generate(cfg, out.dir)
    out.files += ["manifest.txt"] + [e.path for e in manifest.entries]
    # A config overlay matching the generated clips, usable with --config.
    pcfg = PreprocessConfig(S=cfg.T / cfg.fps, N=cfg.T, size=(cfg.H, cfg.W), bg_sub=True)
    out.write_text("train_config.json",
                   json.dumps({"preprocess": pcfg.to_dict()}, indent=2) + "\n")
    print(f"wrote {len(manifest.entries)} clips, splits {manifest.counts()}")


def cmd_preprocess(args, out: _Outputs):
    base = load_archive(args.archive).preprocess.to_dict() if args.archive else {}
    base.update(_read_config(args).get("preprocess", {}))
    pcfg = resolve_preprocess(args, base)
    _show(pcfg.to_dict())
    x = preprocess(load_clip(args.clip, args.fps), pcfg)
    np.save(out.path("preprocessed.npy"), x)
    print(f"tensor shape {list(x.shape)}")


def cmd_train(args, out: _Outputs):
    cfg = resolve_train_config(args, _read_config(args))
    _show(cfg.to_dict())
    manifest = load_manifest(args.manifest)
    res = train(manifest, cfg)
    out.write_text("history.csv", res.history.to_csv())
    out.write_text("config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_archive(res.spec, res.params, cfg.preprocess, res.classes, out.path("model.ar3d"),
                 _archive_meta(cfg, checkpoint="final"))
    save_archive(res.spec, res.best_params, cfg.preprocess, res.classes,
                 out.path("model_best.ar3d"),
                 _archive_meta(cfg, checkpoint="best_val_loss", best_epoch=res.best_epoch))
    last = res.history.rows[-1]
    print(f"trained {len(res.history)} epochs: val_loss {last[2]:.4f} val_acc {last[3]:.4f} "
          f"(best val loss at epoch {res.best_epoch})")


def cmd_eval(args, out: _Outputs):
    arc = load_archive(args.archive)
    _show({"archive": args.archive, "split": args.split, "preprocess": arc.preprocess.to_dict()})
    manifest = load_manifest(args.manifest)
    if list(manifest.classes) != list(arc.classes):
        raise ValueError(f"manifest classes {manifest.classes} differ from archive {arc.classes}")
    acc, cm = evaluate(arc.spec, arc.params, manifest, arc.preprocess, args.split)
    out.write_text("confusion.csv", cm.to_csv())
    out.write_text("metrics.json", json.dumps(
        {"accuracy": acc, "total": cm.total, "split": args.split}, indent=2) + "\n")
    print(f"accuracy {acc:.4f} ({int(np.trace(cm.counts))}/{cm.total})")
    print(cm.to_csv(), end="")
    if args.reference:
        model_id = arc.meta.get("train", {}).get("model_id", arc.spec.preset)
        ref = REFERENCE_ACCURACY[args.reference].get(model_id)
        if ref is not None:
            published = ref[1] if arc.preprocess.bg_sub else ref[0]
            print(f"reference ({args.reference}, model {model_id}, "
                  f"bg-sub {'on' if arc.preprocess.bg_sub else 'off'}): "
                  f"published {published:.4f} vs measured {acc:.4f}")


def cmd_predict(args, out: _Outputs):
    arc = load_archive(args.archive)
    _show({"archive": args.archive, "preprocess": arc.preprocess.to_dict()})
    k, name, probs = predict(arc.spec, arc.params, load_clip(args.clip, args.fps),
                             arc.preprocess, arc.classes)
    result = {"class": name, "class_index": k, "probs": [float(p) for p in probs]}
    out.write_text("prediction.json", json.dumps(result) + "\n")
    print(json.dumps(result))


def cmd_resolution_study(args, out: _Outputs):
    cfg = resolve_train_config(args, _read_config(args))
    _show({**cfg.to_dict(), "sizes": args.sizes})
    rows = resolution_study(load_manifest(args.manifest), cfg, args.sizes)
    text = resolution_csv(rows)
    out.write_text("resolution.csv", text)
    print(text, end="")


def cmd_watch(args, out: _Outputs):
    _show({"input": args.input, "archive": args.archive, "webhook": args.webhook,
           "poll_ms": args.poll_ms})
    sink = edge.WebhookSink(args.webhook) if args.webhook else edge.StdoutSink()
    runner = edge.EdgeRunner(args.input, args.archive, sink, args.poll_ms)
    try:
        events = runner.run(args.max_events, timeout=args.timeout)
    except KeyboardInterrupt:
        events = runner.events
    out.write_text("events.jsonl", "".join(e.to_json() + "\n" for e in events))


COMMANDS = {
    "synth-data": cmd_synth_data, "preprocess": cmd_preprocess, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "resolution-study": cmd_resolution_study,
    "watch": cmd_watch,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = _Outputs(args.out)
        COMMANDS[args.command](args, out)
        out.close()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        logger.debug("failure", exc_info=True)
        return 2
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
