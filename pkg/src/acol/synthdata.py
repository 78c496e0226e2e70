"""Deterministic two-part-object images with exact ground-truth boxes.

Every object is a *glyph* whose shape identifies the category, plus an
attached *body* that has the same shape for every category and carries only a
faint category tint. A classifier can get by looking at the glyph alone, but a
box around either part alone never reaches IoU 0.5 with the full-object box,
so a localizer has to cover both parts to score.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .localization import BBox

__all__ = [
    "SynthConfig",
    "Sample",
    "Dataset",
    "DatasetError",
    "generate",
    "render_sample",
    "glyph_template",
    "save_dataset",
    "load_dataset",
    "stack",
]

GLYPH_COLOR = np.array([0.95, 0.9, 0.25])
BODY_COLOR = np.array([0.35, 0.55, 0.85])
# per-category body tints, added to BODY_COLOR
BODY_TINTS = np.array(
    [
        [0.12, -0.06, -0.06],
        [-0.06, 0.12, -0.06],
        [-0.06, -0.06, 0.12],
        [0.08, 0.08, -0.12],
        [-0.10, 0.06, 0.06],
        [0.06, -0.10, 0.06],
    ]
)
MAX_RETRIES = 50


class DatasetError(IOError):
    """Missing, corrupt or inconsistent dataset files."""


@dataclass
class SynthConfig:
    num_train: int = 800
    num_test: int = 200
    num_categories: int = 4
    image_size: int = 64
    glyph_size: int = 22
    scale_jitter: float = 0.1
    noise: float = 0.03
    texture: float = 0.06
    tint_scale: float = 1.0
    body_jitter: float = 0.08

    def validate(self) -> None:
        if not 2 <= self.num_categories <= len(BODY_TINTS):
            raise ValueError(f"num_categories must lie in [2, {len(BODY_TINTS)}]")
        for name in ("num_train", "num_test"):
            n = getattr(self, name)
            if n < 0 or n % self.num_categories:
                raise ValueError(f"{name}={n} must be a non-negative multiple of num_categories")
        if self.image_size < 2.1 * self.glyph_size * (1 + self.scale_jitter):
            raise ValueError("image too small for the object size")


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W], multiples of 1/255
    label: int
    gt_box: BBox
    glyph_box: BBox
    body_box: BBox
    glyph_mask: np.ndarray = field(repr=False)
    body_mask: np.ndarray = field(repr=False)


@dataclass
class Dataset:
    samples: list[Sample]
    split: str = "train"

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """Batch images ``[N, 3, H, W]`` and labels ``[N]``."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    return images, np.array([s.label for s in samples], dtype=np.int64)


def glyph_template(category: int, size: int) -> np.ndarray:
    """Boolean ``size x size`` shape for a category."""
    c = (np.arange(size) + 0.5) / size * 2 - 1  # cell centers in [-1, 1]
    y, x = np.meshgrid(c, c, indexing="ij")
    kind = category % 6
    if kind == 0:  # disc
        return x**2 + y**2 <= 1.0
    if kind == 1:  # plus
        return (np.abs(x) <= 0.38) | (np.abs(y) <= 0.38)
    if kind == 2:  # triangle, apex up
        return (y >= -1) & (np.abs(x) <= (y + 1) / 2 + 0.05)
    if kind == 3:  # hollow square
        return (np.maximum(np.abs(x), np.abs(y)) >= 0.45)
    if kind == 4:  # X
        return (np.abs(x - y) <= 0.5) | (np.abs(x + y) <= 0.5)
    return np.abs(x) + np.abs(y) <= 1.0  # diamond


def _body_template(h: int, w: int) -> np.ndarray:
    cy = (np.arange(h) + 0.5) / h * 2 - 1
    cx = (np.arange(w) + 0.5) / w * 2 - 1
    y, x = np.meshgrid(cy, cx, indexing="ij")
    # rounded rectangle
    return (np.abs(x) ** 4 + np.abs(y) ** 4) <= 1.0


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    n = cfg.image_size
    base = rng.uniform(0.25, 0.45, size=3)
    yy, xx = np.mgrid[0:n, 0:n] / n
    tex = np.zeros((n, n))
    for _ in range(3):
        fy, fx = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return base[:, None, None] + cfg.texture / 3 * tex[None]


def _place(rng, cfg, g, bh, bw, side):
    """Top-left corners for glyph and body; None if the object leaves the image."""
    n = cfg.image_size
    if side in ("left", "right"):
        off = int(rng.integers(g // 4, g // 2 + 1)) * int(rng.choice([-1, 1]))
        gy_rel, by_rel = 0, (g - bh) // 2 + off
        gx_rel, bx_rel = (0, g) if side == "right" else (bw, 0)
    else:
        off = int(rng.integers(g // 4, g // 2 + 1)) * int(rng.choice([-1, 1]))
        gx_rel, bx_rel = 0, (g - bw) // 2 + off
        gy_rel, by_rel = (0, g) if side == "below" else (bh, 0)
    y0 = min(gy_rel, by_rel)
    x0 = min(gx_rel, bx_rel)
    ext_h = max(gy_rel + g, by_rel + bh) - y0
    ext_w = max(gx_rel + g, bx_rel + bw) - x0
    margin = 2
    if ext_h > n - 2 * margin or ext_w > n - 2 * margin:
        return None
    oy = int(rng.integers(margin, n - margin - ext_h + 1)) - y0
    ox = int(rng.integers(margin, n - margin - ext_w + 1)) - x0
    return (oy + gy_rel, ox + gx_rel), (oy + by_rel, ox + bx_rel)


def _valid(glyph_box: BBox, body_box: BBox, gt: BBox) -> bool:
    # each part's box covers >= 25% of the object box but has IoU < 0.5 with it
    return all(0.25 * gt.area <= b.area < 0.5 * gt.area for b in (glyph_box, body_box))


def render_sample(cfg: SynthConfig, label: int, rng: np.random.Generator) -> Sample:
    """Draw one image of the given category from ``rng``."""
    n = cfg.image_size
    bg = _background(rng, cfg)
    placed = None
    for _ in range(MAX_RETRIES):
        scale = 1 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
        g = max(4, int(round(cfg.glyph_size * scale)))
        bh = max(3, int(round(g * rng.uniform(0.8, 1.0))))
        bw = max(3, int(round(g * rng.uniform(0.9, 1.2))))
        side = ("left", "right", "above", "below")[int(rng.integers(4))]
        if side in ("above", "below"):
            bh, bw = bw, bh
        corners = _place(rng, cfg, g, bh, bw, side)
        if corners is None:
            continue
        (gy, gx), (by, bx) = corners
        glyph_box = BBox(gx, gy, gx + g, gy + g)
        body_box = BBox(bx, by, bx + bw, by + bh)
        gt = BBox(min(gx, bx), min(gy, by), max(gx + g, bx + bw), max(gy + g, by + bh))
        if _valid(glyph_box, body_box, gt):
            placed = (g, bh, bw, glyph_box, body_box, gt)
            break
    if placed is None:
        # deterministic fallback: unjittered object centred, body to the right
        g = cfg.glyph_size
        bh, bw = int(round(0.8 * g)), g
        off = g // 4
        ext_w = g + bw
        gx = (n - ext_w) // 2
        gy = (n - g) // 2
        bx, by = gx + g, gy + (g - bh) // 2 + off
        glyph_box = BBox(gx, gy, gx + g, gy + g)
        body_box = BBox(bx, by, bx + bw, by + bh)
        gt = BBox(gx, min(gy, by), bx + bw, max(gy + g, by + bh))
        placed = (g, bh, bw, glyph_box, body_box, gt)
    g, bh, bw, glyph_box, body_box, gt = placed

    glyph_mask = np.zeros((n, n), dtype=bool)
    glyph_mask[glyph_box.y0 : glyph_box.y1, glyph_box.x0 : glyph_box.x1] = glyph_template(label, g)
    body_mask = np.zeros((n, n), dtype=bool)
    body_mask[body_box.y0 : body_box.y1, body_box.x0 : body_box.x1] = _body_template(bh, bw)
    body_mask &= ~glyph_mask

    img = bg
    # per-sample colour jitter keeps the tint a weak cue rather than a reliable one
    body_color = BODY_COLOR + cfg.tint_scale * BODY_TINTS[label] + rng.normal(0, cfg.body_jitter, size=3)
    img = np.where(body_mask[None], body_color[:, None, None], img)
    img = np.where(glyph_mask[None], GLYPH_COLOR[:, None, None], img)
    if cfg.noise:
        img = img + rng.normal(0, cfg.noise, size=img.shape)
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return Sample(
        image=img.astype(np.float32),
        label=int(label),
        gt_box=gt,
        glyph_box=glyph_box,
        body_box=body_box,
        glyph_mask=glyph_mask,
        body_mask=body_mask,
    )


def _split_labels(seed: int, split_id: int, count: int, num_categories: int) -> np.ndarray:
    labels = np.arange(count) % num_categories
    rng = np.random.default_rng([seed, split_id, 2**31 - 1])
    return rng.permutation(labels)


def _make_split(cfg: SynthConfig, seed: int, split: str) -> Dataset:
    split_id = {"train": 0, "test": 1}[split]
    count = cfg.num_train if split == "train" else cfg.num_test
    labels = _split_labels(seed, split_id, count, cfg.num_categories)
    samples = [
        render_sample(cfg, int(lab), np.random.default_rng([seed, split_id, i]))
        for i, lab in enumerate(labels)
    ]
    return Dataset(samples, split)


def generate(cfg: SynthConfig | None = None, seed: int = 0) -> tuple[Dataset, Dataset, dict]:
    """Build train and test sets plus a manifest.

    Each sample draws from its own stream seeded by ``(seed, split, index)``,
    so a sample does not depend on how many others were generated.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    train = _make_split(cfg, seed, "train")
    test = _make_split(cfg, seed, "test")
    return train, test, _manifest(cfg, seed, train, test)


def _manifest(cfg, seed, train, test, digests=None) -> dict:
    records = {}
    for ds in (train, test):
        rows = []
        for i, s in enumerate(ds.samples):
            rel = f"{ds.split}/img_{i:06d}.png"
            row = {
                "file": rel,
                "label": s.label,
                "box": s.gt_box.as_list(),
                "glyph_box": s.glyph_box.as_list(),
                "body_box": s.body_box.as_list(),
            }
            if digests is not None:
                row["sha256"] = digests[rel]
            rows.append(row)
        records[ds.split] = rows
    return {
        "seed": seed,
        "config": asdict(cfg),
        "num_train": cfg.num_train,
        "num_test": cfg.num_test,
        "num_categories": cfg.num_categories,
        "image_size": cfg.image_size,
        "noise": cfg.noise,
        "records": records,
    }


def _png_bytes(image: np.ndarray) -> bytes:
    import io

    from PIL import Image

    arr = np.round(image.transpose(1, 2, 0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def save_dataset(train: Dataset, test: Dataset, manifest: dict, directory) -> dict:
    """Write ``{train,test}/img_%06d.png`` and ``manifest.json`` under ``directory``.

    Returns the manifest as written (with per-file SHA-256 digests).
    """
    directory = Path(directory)
    digests = {}
    for ds in (train, test):
        (directory / ds.split).mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(ds.samples):
            rel = f"{ds.split}/img_{i:06d}.png"
            data = _png_bytes(s.image)
            (directory / rel).write_bytes(data)
            digests[rel] = hashlib.sha256(data).hexdigest()
    cfg = SynthConfig(**manifest["config"])
    written = _manifest(cfg, manifest["seed"], train, test, digests)
    (directory / "manifest.json").write_text(json.dumps(written, indent=1) + "\n")
    return written


def _read_png(path: Path, digest: str | None, size: int) -> np.ndarray:
    import io

    from PIL import Image

    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc})") from exc
    if digest is not None and hashlib.sha256(data).hexdigest() != digest:
        raise DatasetError(f"{path}: checksum mismatch")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise DatasetError(f"{path}: corrupt PNG ({exc})") from exc
    if arr.shape != (size, size, 3):
        raise DatasetError(f"{path}: expected {size}x{size} RGB, got {arr.shape}")
    return (arr.transpose(2, 0, 1).astype(np.float64) / 255).astype(np.float32)


def load_dataset(directory, with_masks: bool = True) -> tuple[Dataset, Dataset, dict]:
    """Read a dataset written by ``save_dataset``.

    Part masks are not stored on disk; with ``with_masks`` they are rebuilt
    from the manifest geometry (shapes are deterministic given box and label).
    """
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{mpath}: cannot load manifest ({exc})") from exc
    size = manifest["image_size"]
    out = []
    for split in ("train", "test"):
        samples = []
        for row in manifest["records"][split]:
            img = _read_png(directory / row["file"], row.get("sha256"), size)
            gb = BBox.from_list(row["glyph_box"])
            bb = BBox.from_list(row["body_box"])
            gm = np.zeros((size, size), dtype=bool)
            bm = np.zeros((size, size), dtype=bool)
            if with_masks:
                gm[gb.y0 : gb.y1, gb.x0 : gb.x1] = glyph_template(row["label"], gb.x1 - gb.x0)
                bm[bb.y0 : bb.y1, bb.x0 : bb.x1] = _body_template(bb.y1 - bb.y0, bb.x1 - bb.x0)
                bm &= ~gm
            samples.append(
                Sample(img, int(row["label"]), BBox.from_list(row["box"]), gb, bb, gm, bm)
            )
        out.append(Dataset(samples, split))
    return out[0], out[1], manifest
