"""Command-line entry point: ``boxprior <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from boxprior.errors import BoxPriorError
from boxprior.fusion.config import TrainConfig, load_config
from boxprior.fusion.model import init_model
from boxprior.fusion.training import (
    evaluate,
    inbox_accuracy,
    loss_grad_check,
    synthetic_split,
    train,
)
from boxprior.geometry import rasterize_all
from boxprior.scenedata import SCENE_FILES, generate_scenes, read_scene, write_scene

log = logging.getLogger("boxprior")

LOSS_CURVE_FILE = "loss_curve.csv"
PARAMS_FILE = "params.npz"
GRAD_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CommandOutcome:
    exit_code: int
    summary: str
    report_path: Path | None = None


class UsageError(Exception):
    pass


class _HelpShown(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        if status:
            raise UsageError((message or "").strip())
        if message:
            sys.stdout.write(message)
        raise _HelpShown()


def g6(x: float) -> str:
    return format(float(x), ".6g")


# --- helpers ------------------------------------------------------------------------


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    changes = {}
    for flag, name in (("seed", "seed"), ("scenes", "scenes"), ("lam", "lam"), ("epochs", "epochs"), ("lr", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    return cfg.with_(**changes) if changes else cfg


def _scene_dirs(root: Path) -> list[Path]:
    if all((root / name).exists() for name in SCENE_FILES):
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / SCENE_FILES[0]).exists())
    if not dirs:
        raise BoxPriorError(f"{root}: no scene directories found")
    return dirs


def _scenes(args, cfg: TrainConfig):
    """Scenes from ``--data`` if given, otherwise a synthetic split from the seed."""
    if args.data:
        scenes = [read_scene(d) for d in _scene_dirs(Path(args.data))]
        return scenes, None
    return synthetic_split(cfg.seed, cfg.scenes)


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def format_loss_curve(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "seg_loss", "distill_loss", "total_loss"])
    for step, r in enumerate(history, 1):
        w.writerow([step, repr(r.seg_loss), repr(r.distill_loss), repr(r.total_loss)])
    return buf.getvalue()


def format_projection(projection) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "u_f", "v_f", "depth", "pixel_u", "pixel_v"])
    pix = rasterize_all(projection.u, projection.v)
    for i, u, v, d, (pu, pv) in zip(projection.source_index, projection.u, projection.v, projection.depth, pix):
        w.writerow([int(i), repr(float(u)), repr(float(v)), repr(float(d)), int(pu), int(pv)])
    return buf.getvalue()


def format_boxes2d(bundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["box", "class", "x1", "y1", "x2", "y2"])
    for i, (b3, b2) in enumerate(zip(bundle.boxes3d, bundle.boxes2d)):
        if b2 is None:
            w.writerow([i, b3.class_id, "", "", "", ""])
        else:
            w.writerow([i, b2.class_id, *(repr(float(x)) for x in (b2.x1, b2.y1, b2.x2, b2.y2))])
    return buf.getvalue()


# --- subcommands --------------------------------------------------------------------


def cmd_gen(args) -> CommandOutcome:
    out = Path(args.out)
    scenes = generate_scenes(args.seed or 0, args.scenes or 1)
    for i, s in enumerate(scenes):
        write_scene(s, out / f"s{i}")
    points = sum(len(s.cloud) for s in scenes)
    return CommandOutcome(0, f"wrote {len(scenes)} scenes ({points} points) to {out}", out)


def cmd_project(args) -> CommandOutcome:
    bundle = read_scene(args.scene)
    proj = bundle.project()
    path = _write_text(Path(args.out), format_projection(proj))
    return CommandOutcome(0, f"{len(proj)} of {len(bundle.cloud)} points project into the image", path)


def cmd_boxes(args) -> CommandOutcome:
    bundle = read_scene(args.scene)
    visible = sum(b is not None for b in bundle.boxes2d)
    text = format_boxes2d(bundle)
    path = _write_text(Path(args.out), text) if args.out else None
    summary = f"{visible} of {len(bundle.boxes3d)} boxes visible"
    return CommandOutcome(0, summary if path else summary + "\n" + text.rstrip(), path)


def cmd_gradcheck(args) -> CommandOutcome:
    cfg = _config(args)
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    worst, worst_name = 0.0, ""
    for seed in seeds:
        report = loss_grad_check(cfg.with_(seed=seed), max_coords=args.max_coords)
        name, err = report.worst()
        if err >= worst:
            worst, worst_name = err, f"{name} (seed {seed})"
    ok = worst < GRAD_TOLERANCE
    path = None
    if args.out:
        payload = {"max_relative_error": worst, "worst": worst_name, "tolerance": GRAD_TOLERANCE, "passed": ok}
        path = _write_text(Path(args.out), json.dumps(payload, indent=2) + "\n")
    verdict = "passed" if ok else "FAILED"
    return CommandOutcome(0 if ok else 1, f"gradient check {verdict}: max relative error {g6(worst)} at {worst_name}", path)


def cmd_train(args) -> CommandOutcome:
    cfg = _config(args)
    scenes, held = _scenes(args, cfg)
    params, history = train(scenes, cfg)
    out = Path(args.out)
    path = _write_text(out / LOSS_CURVE_FILE, format_loss_curve(history))
    params.save(out / PARAMS_FILE)
    first, last = history[0], history[-1]
    lines = [
        f"steps {len(history)}",
        f"total_loss {g6(first.total_loss)} -> {g6(last.total_loss)}",
        f"seg_loss {g6(last.seg_loss)} distill_loss {g6(last.distill_loss)}",
    ]
    if held is not None:
        lines.append(f"held-out in-box accuracy {g6(inbox_accuracy([held], params, cfg))}")
    return CommandOutcome(0, "\n".join(lines), path)


def cmd_eval(args) -> CommandOutcome:
    cfg = _config(args)
    scenes, held = _scenes(args, cfg)
    targets = scenes if held is None else [held]
    params = init_model(cfg)
    if args.params:
        params.load(args.params)
    report = evaluate(targets, params, cfg)
    payload = {
        "seg_loss": report.seg_loss,
        "distill_loss": report.distill_loss,
        "total_loss": report.total_loss,
        "per_class_iou": [None if np.isnan(x) else x for x in report.per_class_iou],
        "miou": report.miou,
        "inbox_accuracy": inbox_accuracy(targets, params, cfg),
    }
    path = _write_text(Path(args.out), json.dumps(payload, indent=2) + "\n") if args.out else None
    iou = " ".join("nan" if np.isnan(x) else g6(x) for x in report.per_class_iou)
    summary = (
        f"total_loss {g6(report.total_loss)} seg_loss {g6(report.seg_loss)} distill_loss {g6(report.distill_loss)}\n"
        f"per-class IoU {iou}\nmIoU {g6(report.miou)} in-box accuracy {g6(payload['inbox_accuracy'])}"
    )
    return CommandOutcome(0, summary, path)


def compare_lambda(cfg: TrainConfig, seeds: Sequence[int], lam: float = 0.1) -> list[tuple[int, float, float]]:
    """Held-out in-box accuracy with distillation weight ``lam`` and with none, per seed."""
    rows = []
    for seed in seeds:
        scenes, held = synthetic_split(seed, cfg.scenes)
        acc = []
        for weight in (lam, 0.0):
            run_cfg = cfg.with_(seed=seed, lam=weight)
            params, _ = train(scenes, run_cfg)
            acc.append(inbox_accuracy([held], params, run_cfg))
        rows.append((seed, acc[0], acc[1]))
    return rows


def cmd_compare(args) -> CommandOutcome:
    cfg = _config(args)
    lam = cfg.lam if cfg.lam > 0 else 0.1
    rows = compare_lambda(cfg, range(cfg.seed, cfg.seed + args.seeds), lam)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "accuracy_distill", "accuracy_no_distill", "delta"])
    for seed, a, b in rows:
        w.writerow([seed, repr(a), repr(b), repr(a - b)])
    path = _write_text(Path(args.out), buf.getvalue()) if args.out else None
    wins = sum(a >= b for _, a, b in rows)
    mean_delta = float(np.mean([a - b for _, a, b in rows]))
    summary = f"lambda {g6(lam)} >= lambda 0 in {wins} of {len(rows)} seeds; mean accuracy delta {g6(mean_delta)}"
    return CommandOutcome(0, summary, path)


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="boxprior", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def training_flags(p, out_required=False):
        p.add_argument("--config", help="key = value training configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--scenes", type=int, help="number of synthetic training scenes")
        p.add_argument("--lambda", dest="lam", type=float, help="distillation weight (default 0.1)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("gen", help="generate synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("project", help="project a scene's points into its image")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("boxes", help="derive 2D boxes from a scene's 3D boxes")
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_boxes)

    p = sub.add_parser("gradcheck", help="finite-difference check of the total loss")
    training_flags(p)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to check")
    p.add_argument("--max-coords", type=int, default=6, help="coordinates probed per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on synthetic or stored scenes")
    training_flags(p, out_required=True)
    p.add_argument("--data", help="directory of scene directories (default: synthetic)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="losses, IoU and in-box accuracy")
    training_flags(p)
    p.add_argument("--data", help="directory of scene directories (default: synthetic held-out scene)")
    p.add_argument("--params", help="parameters saved by train (default: fresh initialization)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="held-out accuracy with and without distillation")
    training_flags(p)
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_compare)
    return parser


def run(argv: Sequence[str] | None = None) -> CommandOutcome:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except _HelpShown:
        return CommandOutcome(0, "")
    except UsageError as exc:
        return CommandOutcome(2, str(exc) or parser.format_usage().strip())
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (BoxPriorError, OSError, KeyError, ValueError) as exc:
        return CommandOutcome(1, f"error: {exc}")


def main(argv: Sequence[str] | None = None) -> int:
    outcome = run(argv)
    stream = sys.stdout if outcome.exit_code == 0 else sys.stderr
    if outcome.summary:
        print(outcome.summary, file=stream)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
