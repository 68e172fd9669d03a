"""Deterministic synthetic co-salient group generator plus augmentation.

Each group shares one shape category (its co-salient object, drawn last
so the ground-truth mask marks exactly its visible pixels); every image
also carries one or two distractor shapes from other categories over a
textured noise background.  All randomness comes from counter-based
Philox streams keyed on (seed, group, image), so regeneration from the
same seed is byte-identical.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

CATEGORY_NAMES = (
    "disc",
    "ring",
    "square",
    "diamond",
    "triangle",
    "cross",
    "hbar",
    "vbar",
    "ell",
    "tee",
    "hexagon",
    "frame",
)

_FG_FRACTION_LO = 0.02
_FG_FRACTION_HI = 0.50


def worker_count() -> int:
    """Fan-out cap from TOPICNET_THREADS (default 1)."""
    raw = os.environ.get("TOPICNET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _image_rng(seed: int, group_id: int, image_idx: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, group_id, image_idx]))
    )


def _shape_mask(category: int, cy: float, cx: float, scale: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy = (yy - cy) / scale
    dx = (xx - cx) / scale
    ax, ay = np.abs(dx), np.abs(dy)
    name = CATEGORY_NAMES[category % len(CATEGORY_NAMES)]
    if name == "disc":
        return dx * dx + dy * dy <= 1.0
    if name == "ring":
        rr = dx * dx + dy * dy
        return (rr <= 1.0) & (rr >= 0.3)
    if name == "square":
        return np.maximum(ax, ay) <= 0.85
    if name == "diamond":
        return ax + ay <= 1.1
    if name == "triangle":
        return (dy >= -0.9) & (dy <= 0.9) & (ax <= (dy + 0.9) * 0.65)
    if name == "cross":
        return ((ax <= 0.33) & (ay <= 1.0)) | ((ay <= 0.33) & (ax <= 1.0))
    if name == "hbar":
        return (ax <= 1.1) & (ay <= 0.35)
    if name == "vbar":
        return (ax <= 0.35) & (ay <= 1.1)
    if name == "ell":
        return ((dx >= -1.0) & (dx <= -0.4) & (ay <= 1.0)) | (
            (dy >= 0.4) & (dy <= 1.0) & (ax <= 1.0)
        )
    if name == "tee":
        return ((dy >= -1.0) & (dy <= -0.4) & (ax <= 1.0)) | ((ax <= 0.3) & (ay <= 1.0))
    if name == "hexagon":
        return (ax <= 0.866) & (ay <= 1.0 - ax / 1.732)
    # frame: hollow diamond
    return (ax + ay <= 1.1) & (ax + ay >= 0.55)


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple:
    i = int(math.floor(h * 6.0)) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    return ((v, t, p), (q, v, p), (p, v, t), (p, q, t), (t, p, v), (v, p, q))[i]


def _category_color(rng: np.random.Generator, category: int, n_categories: int) -> np.ndarray:
    hue = (category / n_categories + rng.uniform(-0.05, 0.05)) % 1.0
    sat = rng.uniform(0.65, 0.95)
    val = rng.uniform(0.70, 0.95)
    return np.array(_hsv_to_rgb(hue, sat, val))


def _paint(image: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    image[:, mask] = color[:, None]


def render_image(rng: np.random.Generator, category: int, n_categories: int, size: int):
    """One synthetic image: textured background, 1-2 distractors, then
    the co-salient shape on top.  Returns (image [3,H,W], mask [1,H,W])."""
    base = rng.uniform(0.25, 0.75)
    tint = rng.uniform(-0.05, 0.05, size=3)
    noise = rng.uniform(-0.12, 0.12, size=(size, size))
    image = np.clip(base + tint[:, None, None] + noise[None, :, :], 0.0, 1.0)

    # Distractors share the target's scale and placement band so no
    # single-image cue separates them; only cross-image recurrence does.
    n_distractors = 1 + int(rng.uniform() < 0.5)
    for _ in range(n_distractors):
        other = int(rng.integers(0, n_categories - 1))
        if other >= category:
            other += 1
        dcy = rng.uniform(0.25, 0.75) * size
        dcx = rng.uniform(0.25, 0.75) * size
        dscale = rng.uniform(0.14, 0.26) * size
        _paint(image, _shape_mask(other, dcy, dcx, dscale, size), _category_color(rng, other, n_categories))

    for _ in range(20):
        cy = rng.uniform(0.25, 0.75) * size
        cx = rng.uniform(0.25, 0.75) * size
        scale = rng.uniform(0.14, 0.26) * size
        shape = _shape_mask(category, cy, cx, scale, size)
        fraction = shape.mean()
        if _FG_FRACTION_LO <= fraction <= _FG_FRACTION_HI:
            break
    _paint(image, shape, _category_color(rng, category, n_categories))
    return image, shape[None, :, :].astype(np.float64)


def _group_plan(categories: int, train_groups: int, val_groups: int):
    """(split, group_id, category) triples; validation reuses train
    categories on fresh group ids so splits stay disjoint by id."""
    plan = []
    for g in range(train_groups):
        plan.append(("train", g, g % categories))
    train_cats = sorted({g % categories for g in range(train_groups)})
    stride = max(1, len(train_cats) // max(1, val_groups))
    for k in range(val_groups):
        plan.append(("val", train_groups + k, train_cats[(k * stride) % len(train_cats)]))
    return plan


def generate_dataset(
    out_root,
    seed: int,
    image_size: int = 64,
    categories: int = 12,
    train_groups: int = 8,
    val_groups: int = 4,
    images_per_group: int = 4,
) -> dict:
    """Write the dataset tree and manifest; returns the manifest mapping."""
    if image_size % 16 != 0:
        raise ConfigError(f"image size {image_size} is not a multiple of 16")
    if categories < 4:
        raise ConfigError(f"need at least 4 categories, got {categories}")
    if categories > len(CATEGORY_NAMES):
        raise ConfigError(f"at most {len(CATEGORY_NAMES)} categories are defined")
    root = Path(out_root)
    plan = _group_plan(categories, train_groups, val_groups)

    def _make_group(entry):
        split, group_id, category = entry
        gdir = root / split / f"group{group_id:03d}_cat{category}"
        try:
            (gdir / "img").mkdir(parents=True, exist_ok=True)
            (gdir / "gt").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {gdir}: {exc}") from exc
        sums = np.zeros(3)
        squares = np.zeros(3)
        for idx in range(images_per_group):
            rng = _image_rng(seed, group_id, idx)
            image, mask = render_image(rng, category, categories, image_size)
            write_ppm(gdir / "img" / f"img{idx:02d}.ppm", image)
            write_pgm(gdir / "gt" / f"img{idx:02d}.pgm", mask)
            # Statistics come from the quantized on-disk values.
            q = np.rint(image * 255.0) / 255.0
            sums += q.sum(axis=(1, 2))
            squares += (q * q).sum(axis=(1, 2))
        return sums, squares

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_make_group, plan))
    else:
        results = [_make_group(entry) for entry in plan]

    pixels = len(plan) * images_per_group * image_size * image_size
    total = np.sum([r[0] for r in results], axis=0)
    total_sq = np.sum([r[1] for r in results], axis=0)
    mean = total / pixels
    std = np.sqrt(np.maximum(total_sq / pixels - mean * mean, 1e-12))

    manifest = {
        "seed": str(seed),
        "image_size": str(image_size),
        "categories": str(categories),
        "train_groups": str(train_groups),
        "val_groups": str(val_groups),
        "images_per_group": str(images_per_group),
        "mean_r": f"{mean[0]:.17g}",
        "mean_g": f"{mean[1]:.17g}",
        "mean_b": f"{mean[2]:.17g}",
        "std_r": f"{std[0]:.17g}",
        "std_g": f"{std[1]:.17g}",
        "std_b": f"{std[2]:.17g}",
    }
    write_manifest(root / "manifest.txt", manifest)
    return manifest


def write_manifest(path, manifest: dict) -> None:
    lines = ["# dataset manifest"]
    lines += [f"{key}={value}" for key, value in manifest.items()]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    manifest = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    return manifest


def manifest_stats(manifest: dict):
    """(mean, std) per-channel arrays recorded by the generator."""
    mean = np.array([float(manifest[f"mean_{c}"]) for c in "rgb"])
    std = np.array([float(manifest[f"std_{c}"]) for c in "rgb"])
    return mean, std


def list_groups(root, split: str) -> list:
    """Sorted (path, group_id, category) records for one split."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise IoError(f"missing dataset split directory {split_dir}")
    records = []
    for gdir in sorted(split_dir.iterdir()):
        if not gdir.is_dir() or "_cat" not in gdir.name:
            continue
        head, _, cat = gdir.name.partition("_cat")
        records.append(
            {"path": gdir, "group_id": int(head.removeprefix("group")), "category": int(cat)}
        )
    return records


def load_group(group_dir):
    """(images [N,3,H,W], masks [N,1,H,W]) for one group directory."""
    gdir = Path(group_dir)
    names = sorted(p.name for p in (gdir / "img").glob("*.ppm"))
    if not names:
        raise IoError(f"no images under {gdir / 'img'}")
    images, masks = [], []
    for name in names:
        images.append(read_ppm(gdir / "img" / name))
        gt = gdir / "gt" / name.replace(".ppm", ".pgm")
        if not gt.exists():
            raise IoError(f"missing ground truth {gt}")
        masks.append(read_pgm(gt))
    return np.stack(images), np.stack(masks)


# ---------------------------------------------------------------------------
# Augmentation


def hflip(arr: np.ndarray) -> np.ndarray:
    """Horizontal flip of the trailing width axis (an involution)."""
    return arr[..., ::-1].copy()


def _inverse_grid(h: int, w: int, degrees: float):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = math.radians(degrees)
    cos_r, sin_r = math.cos(rad), math.sin(rad)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = cos_r * (yy - cy) + sin_r * (xx - cx) + cy
    sx = -sin_r * (yy - cy) + cos_r * (xx - cx) + cx
    return sy, sx


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate [C,H,W] about the center, bilinear with edge clamping."""
    c, h, w = image.shape
    sy, sx = _inverse_grid(h, w, degrees)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    out = np.empty_like(image)
    for ch in range(c):
        plane = image[ch]
        out[ch] = (
            plane[y0c, x0c] * (1 - fy) * (1 - fx)
            + plane[y0c, x1c] * (1 - fy) * fx
            + plane[y1c, x0c] * fy * (1 - fx)
            + plane[y1c, x1c] * fy * fx
        )
    return out


def rotate_mask(mask: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate [1,H,W] with nearest resampling and zero fill; stays binary."""
    _, h, w = mask.shape
    sy, sx = _inverse_grid(h, w, degrees)
    yr = np.rint(sy).astype(int)
    xr = np.rint(sx).astype(int)
    inside = (yr >= 0) & (yr < h) & (xr >= 0) & (xr < w)
    out = np.zeros_like(mask)
    out[0][inside] = mask[0][np.clip(yr, 0, h - 1), np.clip(xr, 0, w - 1)][inside]
    return out


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, mean, std):
    """Flip (p=0.5), rotate (uniform in [-15, 15] degrees), normalize.

    Exactly two RNG draws are consumed per call regardless of outcome,
    keeping downstream draw alignment deterministic.
    """
    flip = rng.uniform() < 0.5
    angle = rng.uniform(-15.0, 15.0)
    if flip:
        image, mask = hflip(image), hflip(mask)
    image = rotate_image(image, angle)
    mask = rotate_mask(mask, angle)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    image = (image - mean[:, None, None]) / std[:, None, None]
    return image, mask


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel normalization without geometric augmentation."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (image - mean[:, None, None]) / std[:, None, None]
