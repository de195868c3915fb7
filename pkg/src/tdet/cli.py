"""Command-line surface: dataset generation, splitting, training, evaluation,
comparison, and plot emission.

Every run writes a reproducibility manifest (resolved config + seed +
version); identical manifests produce byte-identical CSV/JSON outputs.
Plots are self-contained hand-written SVG; the CSV files are authoritative.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SyntheticSceneConfig,
    calibrate_hidden_fraction,
    generate_dataset,
    hidden_fraction,
    load_dataset,
    save_dataset,
    split_train_test,
)
from .detector import DetectorConfig, init_base_params, load_checkpoint, transfer_weights
from .evaluate import evaluate, read_report, write_report
from .trainer import TrainConfig, pretrain_base, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        raise UsageError(message)


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": config, "seed": seed,
                "version": __version__}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# SVG rendering


def render_svg(path, series, xlabel: str, ylabel: str, title: str = "",
               width: int = 640, height: int = 480) -> None:
    """series: list of (label, [(x, y), ...], color); axes span [0, 1]."""
    ml, mr, mt, mb = 60, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + x * pw

    def sy(y):
        return mt + (1.0 - y) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    # axes and ticks
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" '
                 'stroke="black"/>')
    for k in range(6):
        v = k / 5
        parts.append(f'<line x1="{sx(v):.1f}" y1="{mt + ph}" x2="{sx(v):.1f}" '
                     f'y2="{mt + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{sx(v):.1f}" y="{mt + ph + 20}" font-size="12" '
                     f'text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<line x1="{ml - 5}" y1="{sy(v):.1f}" x2="{ml}" '
                     f'y2="{sy(v):.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 10}" y="{sy(v) + 4:.1f}" font-size="12" '
                     f'text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 10}" font-size="14" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="15" y="{mt + ph / 2}" font-size="14" '
                 f'text-anchor="middle" transform="rotate(-90 15 {mt + ph / 2})">'
                 f'{ylabel}</text>')
    if title:
        parts.append(f'<text x="{ml + pw / 2}" y="20" font-size="14" '
                     f'text-anchor="middle">{title}</text>')
    for idx, (label, points, color) in enumerate(series):
        if points:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 15 + 16 * idx
        parts.append(f'<line x1="{ml + pw - 130}" y1="{ly - 4}" x2="{ml + pw - 105}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw - 100}" y="{ly}" font-size="12">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _read_curve_csv(path) -> list[tuple[float, float]]:
    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            points.append((float(row["recall"]), float(row["precision"])))
    return points


def _read_proneness_csv(path) -> list[tuple[float, float]]:
    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            points.append((float(row["recall"]), float(row["tp_visible_over_tp"])))
    return points


def _plot_report_dir(report_dir: Path, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for variant in ("all", "hidden", "visible"):
        src = report_dir / f"curve_{variant}.csv"
        if src.exists():
            render_svg(out_dir / f"curve_{variant}.svg",
                       [(variant, _read_curve_csv(src), "#1f77b4")],
                       "Recall", "Precision", title=f"PR curve ({variant})")
    pron = report_dir / "proneness.csv"
    if pron.exists():
        render_svg(out_dir / "proneness.svg",
                   [("proneness", _read_proneness_csv(pron), "#d62728")],
                   "Recall", "TP_visible / TP")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    if args.config:
        with open(args.config) as fh:
            cfg = SyntheticSceneConfig.from_dict(json.load(fh))
    else:
        cfg = SyntheticSceneConfig()
    if args.seed is not None:
        cfg = SyntheticSceneConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.target_hidden is not None:
        cfg = calibrate_hidden_fraction(cfg, args.target_hidden,
                                        num_videos=args.videos)
    videos = generate_dataset(cfg, args.videos)
    out = Path(args.out)
    save_dataset(videos, out, config=cfg)
    _write_manifest(out, "gen", {**cfg.to_dict(), "videos": args.videos}, cfg.seed)
    frac = hidden_fraction([g for v in videos for g in v.gt])
    print(f"wrote {len(videos)} videos to {out} (hidden gt fraction {frac:.3f})")
    return 0


def _cmd_split(args) -> int:
    videos = load_dataset(args.data)
    train_vids, test_vids = split_train_test(videos, args.fraction)
    out = Path(args.out)
    save_dataset(train_vids, out / "train")
    save_dataset(test_vids, out / "test")
    _write_manifest(out, "split", {"data": str(args.data), "fraction": args.fraction},
                    None)
    print(f"split {len(videos)} videos at fraction {args.fraction} into {out}")
    return 0


def _cmd_train(args) -> int:
    videos = load_dataset(args.data)
    det_cfg = DetectorConfig(input_size=args.input_size)
    rng = np.random.default_rng(args.seed)
    base = init_base_params(det_cfg, rng)
    if args.pretrain_epochs > 0:
        pre_cfg = TrainConfig(seq_len=1, epochs=args.pretrain_epochs,
                              learning_rate=args.lr, seed=args.seed,
                              steps_per_epoch=args.pretrain_steps)
        pretrain_base(videos, pre_cfg, base)
    params = transfer_weights(base, init_seed=args.seed + 1)
    cfg = TrainConfig(seq_len=args.seq_len, epochs=args.epochs,
                      learning_rate=args.lr, seed=args.seed,
                      steps_per_epoch=args.steps_per_epoch, hflip=args.hflip)
    out = Path(args.out)
    _write_manifest(out, "train", {
        "data": str(args.data), "input_size": args.input_size,
        "pretrain_epochs": args.pretrain_epochs,
        "pretrain_steps": args.pretrain_steps, **cfg.to_dict()}, args.seed)
    _, trace = train(videos, cfg, params, out_dir=out)
    shutil.copyfile(out / "final.ckpt", out / "best.ckpt")
    print(f"trained {cfg.epochs} epochs; final loss "
          f"{trace[-1][2]:.4f}; checkpoints in {out}")
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.model)
    videos = load_dataset(args.data)
    report = evaluate(params, videos, args.mode)
    out = Path(args.report)
    _write_manifest(out, "eval", {"model": str(args.model), "data": str(args.data),
                                  "mode": args.mode}, None)
    write_report(report, out)
    if not args.no_svg:
        _plot_report_dir(out, out)
    print(f"mode={args.mode} ap_all={report.ap_all:.4f} "
          f"ap_hidden={report.ap_hidden:.4f} ap_visible={report.ap_visible:.4f}")
    return 0


def _cmd_compare(args) -> int:
    a = read_report(args.report_a)
    b = read_report(args.report_b)
    name_a = Path(args.report_a).name
    name_b = Path(args.report_b).name
    print(f"{'metric':<12} {name_a:>12} {name_b:>12}")
    for key in ("ap_all", "ap_hidden", "ap_visible", "hidden_fraction"):
        print(f"{key:<12} {a[key]:>12.4f} {b[key]:>12.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        colors = ("#1f77b4", "#d62728")
        for variant in ("all", "hidden", "visible"):
            series = []
            for name, rdir, color in ((name_a, args.report_a, colors[0]),
                                      (name_b, args.report_b, colors[1])):
                src = Path(rdir) / f"curve_{variant}.csv"
                if src.exists():
                    series.append((name, _read_curve_csv(src), color))
            render_svg(out / f"curve_{variant}.svg", series, "Recall", "Precision",
                       title=f"PR curves ({variant})")
        series = []
        for name, rdir, color in ((name_a, args.report_a, colors[0]),
                                  (name_b, args.report_b, colors[1])):
            src = Path(rdir) / "proneness.csv"
            if src.exists():
                series.append((name, _read_proneness_csv(src), color))
        render_svg(out / "proneness.svg", series, "Recall", "TP_visible / TP")
        print(f"wrote overlay plots to {out}")
    return 0


def _cmd_plot(args) -> int:
    _plot_report_dir(Path(args.report), Path(args.out or args.report))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tdet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic occlusion dataset")
    p.add_argument("--config", help="scene config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--target-hidden", type=float, default=None,
                   help="calibrate occluder size for this hidden-gt fraction")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("split", help="80/20 per-video temporal split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="pretrain base, transfer, sequence-train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--pretrain-epochs", type=int, default=5)
    p.add_argument("--pretrain-steps", type=int, default=None)
    p.add_argument("--hflip", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("plain", "sequenced"), required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="side-by-side AP table + overlay plots")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("plot", help="render SVG plots from report CSVs")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
