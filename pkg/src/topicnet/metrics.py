"""Saliency evaluation: MAE, max/mean F-measure, E-measure, S-measure.

Thresholded measures sweep the 256 levels t = k/255 and binarize with a
strict comparison B = [M > t], which makes a perfectly inverted
prediction score zero while a perfect one still reaches the maximum.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, ShapeError
from .netpbm import read_pgm

_BETA_SQ = 0.3
_THRESHOLDS = np.arange(256) / 255.0
_EPS = 1e-12

CSV_HEADER = ("group", "F_mu", "mae", "F_gamma", "E_mu", "S_alpha")


@dataclass
class MetricReport:
    """Dataset-level scores plus the per-group breakdown."""

    f_mu: float
    mae: float
    f_gamma: float
    e_mu: float
    s_alpha: float
    per_group: dict = field(default_factory=dict)


def _check_pair(m: np.ndarray, t: np.ndarray):
    m = np.asarray(m, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if m.shape != t.shape:
        raise ShapeError(f"metric inputs disagree: {m.shape} vs {t.shape}")
    return m.ravel(), t.ravel() > 0.5


def mae(m: np.ndarray, t: np.ndarray) -> float:
    """Mean absolute error over all pixels."""
    mf, tb = _check_pair(m, t)
    return float(np.abs(mf - tb).mean())


def f_measures(m: np.ndarray, t: np.ndarray):
    """(F_mu, F_gamma): max and mean F over the threshold sweep.

    F = (1 + beta^2) P R / (beta^2 P + R) with beta^2 = 0.3; a zero
    denominator (or an empty binarization) scores 0 at that threshold.
    """
    mf, tb = _check_pair(m, t)
    tsum = int(tb.sum())
    if tsum == 0:
        raise ShapeError("f_measures: ground truth has no foreground")
    b = mf[None, :] > _THRESHOLDS[:, None]  # [256, P]
    inter = (b & tb[None, :]).sum(axis=1).astype(np.float64)
    bsum = b.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(bsum > 0, inter / np.maximum(bsum, 1), 0.0)
    recall = inter / tsum
    denom = _BETA_SQ * precision + recall
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(denom > 0, (1 + _BETA_SQ) * precision * recall / np.maximum(denom, _EPS), 0.0)
    return float(f.max()), float(f.mean())


def e_measure_max(m: np.ndarray, t: np.ndarray) -> float:
    """Max enhanced-alignment score over the threshold sweep."""
    mf, tb = _check_pair(m, t)
    tf = tb.astype(np.float64)
    phi_t = tf - tf.mean()
    best = -np.inf
    for thr in _THRESHOLDS:
        bf = (mf > thr).astype(np.float64)
        phi_b = bf - bf.mean()
        xi = 2.0 * phi_b * phi_t / (phi_b * phi_b + phi_t * phi_t + _EPS)
        best = max(best, float(np.mean((1.0 + xi) ** 2 / 4.0)))
    return best


def _dispersion_score(values: np.ndarray) -> float:
    mean = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + sigma + _EPS)


def _ssim_region(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    xm = float(x.mean())
    ym = float(y.mean())
    if n > 1:
        sx = float(x.var(ddof=1))
        sy = float(y.var(ddof=1))
        sxy = float(((x - xm) * (y - ym)).sum() / (n - 1))
    else:
        sx = sy = sxy = 0.0
    alpha = 4.0 * xm * ym * sxy
    beta = (xm * xm + ym * ym) * (sx + sy)
    if alpha != 0.0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0.0 else 0.0


def s_measure(m: np.ndarray, t: np.ndarray) -> float:
    """Structure measure: 0.5 * object score + 0.5 * region score.

    Degenerate ground truths bypass the split: all-zero scores
    1 - mean(M), all-one scores mean(M).  The region term splits the
    frame into four quadrants about the foreground centroid, weighted by
    quadrant pixel-count fractions.
    """
    m2 = np.asarray(m, dtype=np.float64).reshape(np.asarray(t).shape[-2:])
    t2 = np.asarray(t, dtype=np.float64).reshape(m2.shape) > 0.5
    if not t2.any():
        return 1.0 - float(m2.mean())
    if t2.all():
        return float(m2.mean())

    mu = float(t2.mean())
    s_object = mu * _dispersion_score(m2[t2]) + (1.0 - mu) * _dispersion_score(1.0 - m2[~t2])

    rows, cols = np.nonzero(t2)
    cy = int(round(float(rows.mean()))) + 1
    cx = int(round(float(cols.mean()))) + 1
    h, w = t2.shape
    s_region = 0.0
    for sl_r, sl_c in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ):
        region = m2[sl_r, sl_c]
        weight = region.size / (h * w)
        if weight == 0.0:
            continue
        s_region += weight * _ssim_region(region, t2[sl_r, sl_c].astype(np.float64))

    return float(min(max(0.5 * s_object + 0.5 * s_region, 0.0), 1.0))


def evaluate_pair(m: np.ndarray, t: np.ndarray) -> dict:
    """All five scores for one prediction/ground-truth pair."""
    f_mu, f_gamma = f_measures(m, t)
    return {
        "F_mu": f_mu,
        "mae": mae(m, t),
        "F_gamma": f_gamma,
        "E_mu": e_measure_max(m, t),
        "S_alpha": s_measure(m, t),
    }


def evaluate_groups(groups: dict) -> MetricReport:
    """Aggregate {group_name: [(pred, gt), ...]} per group, then overall.

    Images whose ground truth has no foreground are excluded with a
    warning (their recall is undefined).
    """

    def _one_group(pairs):
        scores = []
        for m, t in pairs:
            if not np.any(np.asarray(t) > 0.5):
                warnings.warn("skipping an image with an empty ground-truth mask")
                continue
            scores.append(evaluate_pair(m, t))
        if not scores:
            return None
        return {key: float(np.mean([s[key] for s in scores])) for key in scores[0]}

    names = sorted(groups)
    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda n: _one_group(groups[n]), names))
    else:
        results = [_one_group(groups[name]) for name in names]
    per_group = {name: res for name, res in zip(names, results) if res is not None}
    if not per_group:
        raise ShapeError("evaluate_groups: no scorable images")
    overall = {
        key: float(np.mean([g[key] for g in per_group.values()]))
        for key in ("F_mu", "mae", "F_gamma", "E_mu", "S_alpha")
    }
    return MetricReport(
        f_mu=overall["F_mu"],
        mae=overall["mae"],
        f_gamma=overall["F_gamma"],
        e_mu=overall["E_mu"],
        s_alpha=overall["S_alpha"],
        per_group=per_group,
    )


def _worker_count() -> int:
    from .dataset import worker_count

    return worker_count()


def evaluate_dataset(pred_dir, gt_root) -> MetricReport:
    """Pair pred_dir/<group>/<name>.pgm with gt_root/<group>/gt/<name>.pgm."""
    pred_dir = Path(pred_dir)
    gt_root = Path(gt_root)
    if not gt_root.is_dir():
        raise IoError(f"ground-truth split {gt_root} is not a directory")
    groups = {}
    found_any = False
    for gdir in sorted(p for p in gt_root.iterdir() if p.is_dir()):
        gt_files = sorted((gdir / "gt").glob("*.pgm")) if (gdir / "gt").is_dir() else []
        if not gt_files:
            continue
        pairs = []
        for gt_file in gt_files:
            pred_file = pred_dir / gdir.name / gt_file.name
            if not pred_file.exists():
                raise IoError(f"missing prediction {pred_file}")
            pairs.append((read_pgm(pred_file)[0], read_pgm(gt_file)[0]))
            found_any = True
        groups[gdir.name] = pairs
    if not found_any:
        raise IoError(f"no ground-truth masks found under {gt_root}")
    return evaluate_groups(groups)


def write_csv(report: MetricReport, path) -> None:
    """Per-group rows plus one overall row, 6 decimals, LF endings."""
    try:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for name in sorted(report.per_group):
                scores = report.per_group[name]
                writer.writerow(
                    [name] + [f"{scores[key]:.6f}" for key in CSV_HEADER[1:]]
                )
            writer.writerow(
                [
                    "overall",
                    f"{report.f_mu:.6f}",
                    f"{report.mae:.6f}",
                    f"{report.f_gamma:.6f}",
                    f"{report.e_mu:.6f}",
                    f"{report.s_alpha:.6f}",
                ]
            )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
