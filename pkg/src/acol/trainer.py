"""Training loop, checkpoints, evaluation and the erase-threshold sweep."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import acol_net as net
from . import tensor_core as tc
from .localization import (
    BBox,
    LocMetrics,
    SamplePrediction,
    evaluate,
    largest_connected_component,
    segment_foreground,
    tight_bbox,
)
from .locmaps import fuse_maps, normalize_map
from .synthdata import Dataset, stack

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "CheckpointError",
    "train",
    "evaluate_model",
    "localize_batch",
    "delta_sweep",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite; the last good checkpoint is kept."""


class CheckpointError(IOError):
    pass


@dataclass
class TrainConfig:
    delta: float = 0.6
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 7
    tau_rel: float = 0.6
    top_k: int = 5
    k_box: int | None = None
    branch_mode: str = "mean"
    connectivity: int = 8
    val_fraction: float = 0.1
    patience: int = 5
    min_delta: float = 1e-4
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    branch_width: int = 64
    num_categories: int = 4
    identical_branches: bool = False
    erase: bool = True
    warmup_epochs: int = 3

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)

    def validate(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.5 <= self.delta <= 0.99:
            warnings.warn(f"delta={self.delta} is outside the usual 0.5-0.99 range", stacklevel=2)
        if self.branch_mode not in ("a", "b", "mean"):
            raise ValueError(f"unknown branch_mode {self.branch_mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: net.NetworkParams
    velocity: dict[str, np.ndarray]
    history: list[dict]
    checkpoints: list[Path] = field(default_factory=list)
    stopped_early: bool = False


INPUT_SHIFT = 0.5


def prepare(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into a centred float32 batch."""
    images, labels = stack(samples)
    return images - np.float32(INPUT_SHIFT), labels


def build_params(config: TrainConfig) -> net.NetworkParams:
    return net.init_params(
        num_categories=config.num_categories,
        backbone_widths=config.backbone_widths,
        branch_width=config.branch_width,
        seed=config.seed,
        identical_branches=config.identical_branches,
    )


def _split_validation(n: int, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * config.val_fraction)) if config.patience > 0 else 0
    order = np.random.default_rng([config.seed, 2]).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _val_loss(params, dataset, idx, config) -> float:
    total = 0.0
    for start in range(0, len(idx), 100):
        images, labels = prepare([dataset[i] for i in idx[start : start + 100]])
        rec = net.acol_forward(images, params, config.delta, labels, mode="train")
        la, _ = tc.softmax_cross_entropy(rec.logits_a, labels)
        lb, _ = tc.softmax_cross_entropy(rec.logits_b, labels)
        total += (la + lb) * len(labels)
    return total / len(idx)


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
    resume=None,
    step_hook: Callable | None = None,
) -> TrainResult:
    """Mini-batch SGD on the summed two-branch cross-entropy.

    Each epoch shuffles the training indices from a seeded stream, runs a
    train-mode forward (erase mask from classifier A's ground-truth map),
    backpropagates and applies one SGD step per batch. With ``out_dir`` a
    checkpoint and one JSON log line are written per epoch. ``resume`` is a
    checkpoint path to continue from. ``step_hook(record, labels, grads,
    parts)`` is called after every backward pass.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty training set")
    train_idx, val_idx = _split_validation(len(dataset), config)
    if len(train_idx) == 0:
        raise ValueError("no training samples left after the validation split")

    params = build_params(config)
    velocity: dict[str, np.ndarray] = {}
    rng = np.random.default_rng([config.seed, 1])
    start_epoch = 0
    history: list[dict] = []
    best_val, bad_epochs = math.inf, 0
    if resume is not None:
        state = load_checkpoint(resume, params)
        velocity = state["velocity"]
        rng.bit_generator.state = state["rng_state"]
        start_epoch = state["epoch"]
        history = state.get("history", [])
        best_val = state.get("best_val", math.inf)
        bad_epochs = state.get("bad_epochs", 0)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    named = params.named_tensors()
    delta = config.delta if config.erase else 1.0 - 1e-12
    stopped = False

    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        sums = {"loss_a": 0.0, "loss_b": 0.0, "acc_a": 0.0, "acc_b": 0.0}
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            images, labels = prepare([dataset[i] for i in batch])
            if config.erase and epoch > config.warmup_epochs:
                record = net.acol_forward(images, params, delta, labels, mode="train")
            else:
                record = _forward_no_erase(images, labels, params)
            loss, grads, parts = net.acol_loss_and_grads(record, labels, params, return_parts=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; last checkpoint: "
                    f"{checkpoints[-1] if checkpoints else 'none'}"
                )
            if step_hook is not None:
                step_hook(record, labels, grads, parts)
            tc.sgd_update(named, grads, config.lr, config.momentum, config.weight_decay, velocity)
            nb = len(batch)
            sums["loss_a"] += parts["loss_a"] * nb
            sums["loss_b"] += parts["loss_b"] * nb
            sums["acc_a"] += float((record.logits_a.argmax(1) == labels).sum())
            sums["acc_b"] += float((record.logits_b.argmax(1) == labels).sum())
        row = {"epoch": epoch, **{k: v / len(order) for k, v in sums.items()}}
        if len(val_idx):
            row["val_loss"] = _val_loss(params, dataset, val_idx, config)
            if row["val_loss"] < best_val - config.min_delta:
                best_val, bad_epochs = row["val_loss"], 0
            else:
                bad_epochs += 1
        history.append(row)
        log.info("epoch %d: %s", epoch, row)
        if out is not None:
            with (out / "train_log.jsonl").open("a" if epoch > 1 else "w") as fh:
                fh.write(json.dumps(row) + "\n")
            path = out / f"ckpt_ep{epoch:03d}.acol"
            save_checkpoint(
                path,
                params,
                velocity,
                epoch,
                config,
                rng.bit_generator.state,
                extra={"history": history, "best_val": best_val, "bad_epochs": bad_epochs},
            )
            checkpoints.append(path)
        if len(val_idx) and bad_epochs >= config.patience:
            stopped = True
            break
    return TrainResult(params, velocity, history, checkpoints, stopped)


def _forward_no_erase(images, labels, params):
    # every position kept: both branches see the same features
    n = images.shape[0]
    h1 = images.shape[2] // params.downsample
    w1 = images.shape[3] // params.downsample
    mask = np.zeros((n, h1, w1), dtype=bool)
    return net.acol_forward(images, params, 0.5, labels, mode="train", mask=mask)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def save_checkpoint(
    path,
    params: net.NetworkParams,
    velocity: dict,
    epoch: int,
    config: TrainConfig,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Tensor container at ``path`` plus a ``.json`` sidecar next to it."""
    path = Path(path)
    tensors = dict(params.named_tensors())
    for name, v in velocity.items():
        tensors[f"velocity.{name}"] = v
    tc.save_tensors(path, tensors)
    sidecar = {
        "epoch": epoch,
        "config": config.to_dict(),
        "num_categories": params.num_categories,
        "rng_state": rng_state,
        **(extra or {}),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(_json_safe(sidecar), indent=1, sort_keys=True) + "\n"
    )
    return path


def load_checkpoint(path, params: net.NetworkParams | None = None) -> dict:
    """Load a checkpoint; builds the network from the sidecar config if ``params`` is None.

    Returns a dict with ``params``, ``velocity``, ``epoch``, ``config``,
    ``rng_state`` and any extra sidecar fields.
    """
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    try:
        meta = json.loads(side.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{side}: cannot read checkpoint sidecar ({exc})") from exc
    try:
        tensors = tc.load_tensors(path)
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    config = TrainConfig.from_dict(meta["config"])
    if params is None:
        params = build_params(config)
    try:
        params.load_tensors(tensors)
    except (KeyError, tc.ShapeError) as exc:
        raise CheckpointError(f"{path}: incompatible with model ({exc})") from exc
    velocity = {
        name[len("velocity.") :]: arr for name, arr in tensors.items() if name.startswith("velocity.")
    }
    out = dict(meta)
    if out.get("best_val") is None:
        out["best_val"] = math.inf
    out.update(params=params, velocity=velocity, config=config)
    return out


def _box_from_map(m: np.ndarray, image_hw, config: TrainConfig) -> BBox | None:
    up = tc.bilinear_resize(m, *image_hw)
    comp = largest_connected_component(segment_foreground(up, config.tau_rel), config.connectivity)
    return tight_bbox(comp, image_hw)


def localize_batch(params: net.NetworkParams, images: np.ndarray, config: TrainConfig, labels=None):
    """Test-mode forward plus per-sample maps and boxes.

    Returns one dict per image with ranked guesses, normalized maps for the
    top guess (``map_a``, ``map_b``, ``fused``), the fused-map box for each of
    the first ``k_box`` guesses, and, when ``labels`` are given, the fused and
    branch-A-only boxes at the true category.
    """
    rec = net.acol_forward(images, params, config.delta, mode="test")
    logits = net.predict_logits(rec, config.branch_mode)
    k = min(config.top_k, params.num_categories)
    k_box = k if config.k_box is None else min(config.k_box, k)
    hw = images.shape[2:]
    out = []
    cache: dict = {}

    def maps_for(i, c):
        key = (i, c)
        if key not in cache:
            ma = normalize_map(rec.maps_a[i, c])
            mb = normalize_map(rec.maps_b[i, c])
            cache[key] = (ma, mb, fuse_maps(ma, mb))
        return cache[key]

    def box_for(i, c, which):
        key = (i, c, which)
        if key not in cache:
            ma, _, fused = maps_for(i, c)
            cache[key] = _box_from_map(fused if which == "fused" else ma, hw, config)
        return cache[key]

    for i in range(images.shape[0]):
        guesses = [int(c) for c in np.argsort(-logits[i], kind="stable")[:k]]
        ma, mb, fused = maps_for(i, guesses[0])
        row = {
            "guesses": guesses,
            "mask_category": int(rec.mask_category[i]),
            "map_a": ma,
            "map_b": mb,
            "fused": fused,
            "boxes": [box_for(i, c, "fused") if r < k_box else None for r, c in enumerate(guesses)],
            "boxes_a": [box_for(i, c, "a") if r < k_box else None for r, c in enumerate(guesses)],
        }
        if labels is not None:
            lab = int(labels[i])
            row["gt_known_box"] = box_for(i, lab, "fused")
            row["gt_known_box_a"] = box_for(i, lab, "a")
        out.append(row)
    return out


def evaluate_model(
    params: net.NetworkParams, dataset: Dataset, config: TrainConfig, batch_size: int = 100
) -> tuple[LocMetrics, LocMetrics]:
    """Fused-map metrics and the branch-A-only baseline under identical box extraction."""
    fused_preds, a_preds, gts = [], [], []
    k = min(config.top_k, params.num_categories)
    for start in range(0, len(dataset), batch_size):
        samples = dataset.samples[start : start + batch_size]
        images, labels = prepare(samples)
        if images.shape[2] % params.downsample or images.shape[3] % params.downsample:
            raise tc.ShapeError(
                f"image size {images.shape[2:]} not divisible by {params.downsample}"
            )
        for s, row in zip(samples, localize_batch(params, images, config, labels)):
            fused_preds.append(SamplePrediction(row["guesses"], row["boxes"], row["gt_known_box"]))
            a_preds.append(SamplePrediction(row["guesses"], row["boxes_a"], row["gt_known_box_a"]))
            gts.append((s.label, s.gt_box))
    return (
        evaluate(fused_preds, gts, k=k, k_box=config.k_box),
        evaluate(a_preds, gts, k=k, k_box=config.k_box),
    )


def delta_sweep(
    train_set: Dataset,
    test_set: Dataset,
    config: TrainConfig,
    deltas,
    out_dir=None,
) -> list[dict]:
    """Train and evaluate one model per erase threshold, all from the same seed.

    A failing cell is reported with an ``error`` field and the sweep continues.
    """
    rows = []
    for d in deltas:
        cfg = TrainConfig.from_dict({**config.to_dict(), "delta": float(d)})
        cell_dir = Path(out_dir) / f"delta_{d:.2f}" if out_dir is not None else None
        try:
            result = train(train_set, cfg, cell_dir)
            fused, base = evaluate_model(result.params, test_set, cfg)
        except Exception as exc:  # noqa: BLE001 - one bad cell must not end the sweep
            log.warning("delta %.2f failed: %s", d, exc)
            rows.append({"delta": float(d), "error": str(exc)})
            continue
        m = fused.to_json()
        rows.append(
            {
                "delta": float(d),
                "top1_loc_err": m["top1_loc_err"],
                "top5_loc_err": m["top5_loc_err"],
                "gt_known_loc_err": m["gt_known_loc_err"],
                "cls_err": m["cls_err"],
                "baseline_a_gt_known_loc_err": base.gt_known_loc_err,
                "epochs_run": len(result.history),
            }
        )
    return rows
