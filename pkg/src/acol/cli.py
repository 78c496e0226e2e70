"""Command-line entry point: ``acol <subcommand> [flags]``.

Subcommands: gen-data, train, eval, sweep, localize, verify. Settings come
from built-in defaults, then a flat JSON ``--config`` file, then
``--kebab-case`` flags, later sources winning. The effective settings are
written to ``effective_config.json`` in the output directory and echoed to
stdout. Diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import audit
from .localization import BBox, iou, write_metrics, write_sample_details
from .locmaps import overlay_heatmap
from .synthdata import DatasetError, SynthConfig, generate, load_dataset, save_dataset
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    delta_sweep,
    evaluate_model,
    load_checkpoint,
    localize_batch,
    prepare,
    train,
)

log = logging.getLogger("acol")

EVAL_BATCH = 100
PRED_COLOR = (0, 255, 0)
GT_COLOR = (255, 0, 0)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- settings

def _field_types() -> dict[str, object]:
    out = {}
    for cls in (SynthConfig, TrainConfig):
        for f in fields(cls):
            out.setdefault(f.name, f.type)
    return out


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _converter(type_name):
    t = str(type_name)
    if "tuple" in t:
        return lambda s: tuple(int(v) for v in s.split(","))
    if t.startswith("int | None"):
        return lambda s: None if s.lower() == "none" else int(s)
    if t.startswith("bool"):
        return _parse_bool
    if t.startswith("int"):
        return int
    if t.startswith("float"):
        return float
    return str


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("setting overrides (take precedence over --config)")
    for name, typ in _field_types().items():
        if name == "seed":
            continue
        g.add_argument(
            "--" + name.replace("_", "-"),
            dest="set_" + name,
            type=_converter(typ),
            default=argparse.SUPPRESS,
            metavar=name.upper(),
        )


def _effective(args, base: TrainConfig | None = None) -> tuple[SynthConfig, TrainConfig, dict]:
    """Defaults (or ``base``, e.g. a checkpoint's settings), then the config file, then flags."""
    raw: dict = base.to_dict() if base is not None else {}
    file_raw: dict = {}
    if args.config:
        try:
            file_raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_raw, dict):
            raise UsageError(f"config {args.config} must be a flat JSON object")
    unknown = set(file_raw) - set(_field_types())
    if unknown:
        raise UsageError(f"unknown config keys in {args.config}: {sorted(unknown)}")
    raw.update(file_raw)
    for k, v in vars(args).items():
        if k.startswith("set_"):
            raw[k[4:]] = v
    if args.seed is not None:
        raw["seed"] = args.seed
    synth_keys = {f.name for f in fields(SynthConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    try:
        scfg = SynthConfig(**{k: v for k, v in raw.items() if k in synth_keys})
        tcfg = TrainConfig(**{k: v for k, v in raw.items() if k in train_keys})
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    if args.command == "gen-data":
        effective = {"synth": _plain(scfg.__dict__), "seed": tcfg.seed}
    else:
        effective = {"train": tcfg.to_dict()}
    return scfg, tcfg, effective


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _echo(effective: dict, out: Path | None, command: str) -> None:
    doc = {"command": command, **effective}
    text = json.dumps(doc, sort_keys=True)
    print(f"effective config: {text}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def _load_data(path):
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


def _load_ckpt(args):
    """Checkpoint parameters plus settings: the checkpoint's own, overridden by config and flags."""
    try:
        state = load_checkpoint(args.ckpt)
    except (CheckpointError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    _, tcfg, eff = _effective(args, base=state["config"])
    if state["params"].num_categories != tcfg.num_categories:
        raise UsageError(
            f"checkpoint has {state['params'].num_categories} categories, settings say {tcfg.num_categories}"
        )
    return state["params"], tcfg, eff


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    scfg, _, eff = _effective(args)
    out = Path(args.out)
    _echo(eff, out, "gen-data")
    train_set, test_set, manifest = generate(scfg, seed=eff["seed"])
    save_dataset(train_set, test_set, manifest, out)
    print(f"wrote {len(train_set)} train / {len(test_set)} test images to {out}")
    return 0


def cmd_train(args) -> int:
    _require(args, "data")
    _, tcfg, eff = _effective(args)
    out = Path(args.out)
    train_set, _, _ = _load_data(args.data)
    _echo(eff, out, "train")
    result = train(train_set, tcfg, out_dir=out, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} epochs; last: {json.dumps(last)}")
    if result.checkpoints:
        print(f"checkpoint: {result.checkpoints[-1]}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "ckpt", "data")
    out = Path(args.out)
    _, test_set, _ = _load_data(args.data)
    params, tcfg, eff = _load_ckpt(args)
    _echo(eff, out, "eval")
    fused, base = evaluate_model(params, test_set, tcfg, batch_size=EVAL_BATCH)
    write_metrics(fused, out / "metrics.json")
    write_metrics(base, out / "metrics_branch_a.json")
    write_sample_details(fused, out / "samples.jsonl")
    print(json.dumps({"fused": fused.to_json(), "branch_a": base.to_json()}))
    return 0


def cmd_sweep(args) -> int:
    _require(args, "data")
    _, tcfg, eff = _effective(args)
    try:
        deltas = [float(d) for d in args.deltas.split(",") if d.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --deltas {args.deltas!r}") from exc
    if not deltas:
        raise UsageError("--deltas is empty")
    out = Path(args.out)
    train_set, test_set, _ = _load_data(args.data)
    _echo(eff, out, "sweep")
    rows = delta_sweep(train_set, test_set, tcfg, deltas, out_dir=out)
    (out / "sweep.json").write_text(json.dumps(rows, indent=1) + "\n")
    print(f"{'delta':>6} {'top1':>7} {'top5':>7} {'gt-known':>9}")
    for r in rows:
        if "error" in r:
            print(f"{r['delta']:6.2f} error: {r['error']}")
        else:
            print(
                f"{r['delta']:6.2f} {r['top1_loc_err']:7.3f} {r['top5_loc_err']:7.3f} {r['gt_known_loc_err']:9.3f}"
            )
    return 0 if all("error" not in r for r in rows) else 1


def draw_box(rgb: np.ndarray, box: BBox, color) -> np.ndarray:
    """One-pixel outline of a half-open box, in place on an HxWx3 uint8 array."""
    h, w = rgb.shape[:2]
    x0, y0 = max(box.x0, 0), max(box.y0, 0)
    x1, y1 = min(box.x1, w) - 1, min(box.y1, h) - 1
    rgb[y0, x0 : x1 + 1] = color
    rgb[y1, x0 : x1 + 1] = color
    rgb[y0 : y1 + 1, x0] = color
    rgb[y0 : y1 + 1, x1] = color
    return rgb


def _save_rgb(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def _localize_ids(params, dataset, tcfg, ids):
    """Rows for the requested indices, each computed inside its evaluation batch."""
    by_batch: dict[int, list[int]] = {}
    for i in ids:
        if not 0 <= i < len(dataset):
            raise UsageError(f"sample id {i} out of range (0..{len(dataset) - 1})")
        by_batch.setdefault(i // EVAL_BATCH, []).append(i)
    rows = {}
    for b, members in by_batch.items():
        samples = dataset.samples[b * EVAL_BATCH : (b + 1) * EVAL_BATCH]
        images, labels = prepare(samples)
        batch_rows = localize_batch(params, images, tcfg, labels)
        for i in members:
            rows[i] = batch_rows[i - b * EVAL_BATCH]
    return rows


def _image_from_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc
    return (arr.transpose(2, 0, 1).astype(np.float64) / 255).astype(np.float32)


def cmd_localize(args) -> int:
    _require(args, "ckpt")
    if not args.data and not args.image:
        raise UsageError("localize needs --data with --ids, or --image")
    out = Path(args.out)
    params, tcfg, eff = _load_ckpt(args)
    jobs = []  # (stem, image, row, gt_label, gt_box)
    if args.image:
        img = _image_from_png(args.image)
        row = localize_batch(params, img[None] - np.float32(0.5), tcfg)[0]
        jobs.append((Path(args.image).stem, img, row, None, None))
    if args.data:
        train_set, test_set, _ = _load_data(args.data)
        dataset = test_set if args.split == "test" else train_set
        try:
            ids = [int(v) for v in args.ids.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --ids {args.ids!r}") from exc
        rows = _localize_ids(params, dataset, tcfg, ids)
        for i in ids:
            s = dataset[i]
            jobs.append((f"{args.split}_{i:06d}", s.image, rows[i], s.label, s.gt_box))
    _echo(eff, out, "localize")
    for stem, img, row, label, gt in jobs:
        base = (np.clip(img, 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
        pred_box = row["boxes"][0]
        fused = overlay_heatmap(img, row["fused"])
        if pred_box is not None:
            draw_box(fused, pred_box, PRED_COLOR)
        if gt is not None:
            draw_box(fused, gt, GT_COLOR)
        _save_rgb(base, out / f"{stem}_input.png")
        _save_rgb(overlay_heatmap(img, row["map_a"]), out / f"{stem}_map_a.png")
        _save_rgb(overlay_heatmap(img, row["map_b"]), out / f"{stem}_map_b.png")
        _save_rgb(fused, out / f"{stem}_fused.png")
        doc = {
            "id": stem,
            "pred": row["guesses"][0],
            "guesses": row["guesses"],
            "pred_box": pred_box.as_list() if pred_box else None,
            "label": label,
            "gt_box": gt.as_list() if gt else None,
            "iou": iou(pred_box, gt) if (pred_box and gt) else None,
            "gt_known_box": row["gt_known_box"].as_list() if row.get("gt_known_box") else None,
        }
        (out / f"{stem}.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {len(jobs)} localization result(s) to {out}")
    return 0


def cmd_verify(args) -> int:
    out = Path(args.out) if args.out else None
    checks = audit.run_all()
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    report = [
        {"name": c.name, "error": c.error, "tol": c.tol, "passed": c.passed, "seconds": c.seconds}
        for c in checks
    ]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(json.dumps(report, indent=1) + "\n")
    print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "localize": cmd_localize,
    "verify": cmd_verify,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one-line diagnostic instead of the usage block
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acol", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat JSON settings file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="master seed (data generation and training)")
        _add_overrides(p)

    common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    p = sub.add_parser("train", help="train a two-branch model")
    common(p)
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", help="localization metrics on the test split")
    common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt", help="checkpoint file (.acol)")
    p = sub.add_parser("sweep", help="train and evaluate one model per erase threshold")
    common(p)
    p.add_argument("--data")
    p.add_argument("--deltas", default="0.5,0.6,0.7,0.8,0.9")
    p = sub.add_parser("localize", help="heatmap overlays and boxes for chosen images")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--ids", default="0")
    p.add_argument("--image", help="a 64x64 RGB PNG outside the dataset")
    p = sub.add_parser("verify", help="gradient audits and map equivalence")
    p.add_argument("--out", help="also write verify.json here")
    return parser


def _thread_limit():
    raw = os.environ.get("ACOL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"ACOL_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("ACOL_THREADS must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - the package declares it
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage line
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"acol {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TrainingDiverged, CheckpointError, DatasetError) as exc:
        print(f"acol {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
