"""Training loop, per-epoch validation, run logging, and the gradient checker.

One step samples M groups with pairwise-distinct categories, N images
each, augments them, and applies a single Adam update on the combined
loss.  Every epoch ends with a held-out validation pass and a checkpoint
write; a nonfinite loss aborts with the last completed epoch's
checkpoint still on disk.  All sampling flows from one Philox stream, so
a fixed seed reproduces the run log row for row (wall time aside).
"""

from __future__ import annotations

import hashlib
import time
from pathlib import Path

import numpy as np

from .backbone import save_checkpoint
from .config import TrainConfig
from .dataset import (
    augment,
    list_groups,
    load_group,
    manifest_stats,
    normalize,
    read_manifest,
)
from .errors import ConfigError, IoError
from .metrics import f_measures, mae
from .model import build_params, forward_topicnet
from .optim import AdamState, adam_step, zero_grads
from .tensor import backward, no_grad

RUNLOG_COLUMNS = ("epoch", "loss", "loss_cl", "loss_s", "val_fmu", "val_mae", "seconds")


def tiny_check_config(seed: int = 0) -> TrainConfig:
    """Smallest config that still exercises every parameter tensor."""
    return TrainConfig(
        image_size=16,
        working_resolution=3,
        groups_per_step=2,
        images_per_group=2,
        feature_dim=8,
        encoder_channels=(4, 8, 8, 8, 8),
        seed=seed,
    )


def code_config_digest(cfg: TrainConfig) -> str:
    """sha256 over the package sources plus the config echo."""
    digest = hashlib.sha256()
    package_dir = Path(__file__).resolve().parent
    for path in sorted(package_dir.glob("*.py")):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    for line in cfg.echo_lines():
        digest.update(line.encode("utf-8"))
    return digest.hexdigest()


def find_manifest(data_dir) -> dict:
    """Manifest next to the given directory, or one level up."""
    data_dir = Path(data_dir)
    for candidate in (data_dir / "manifest.txt", data_dir.parent / "manifest.txt"):
        if candidate.is_file():
            return read_manifest(candidate)
    raise IoError(f"no manifest.txt beside or above {data_dir}")


def load_split(root, split: str) -> list:
    """All groups of one split, images and masks resident in memory."""
    records = []
    for rec in list_groups(root, split):
        images, masks = load_group(rec["path"])
        records.append(
            {
                "name": rec["path"].name,
                "category": rec["category"],
                "images": images,
                "masks": masks,
            }
        )
    if not records:
        raise IoError(f"no groups found in split {split!r} under {root}")
    return records


def sample_step(rng: np.random.Generator, records: list, cfg: TrainConfig, mean, std):
    """(images, masks): M augmented groups with distinct categories."""
    chosen, seen = [], set()
    for idx in rng.permutation(len(records)):
        rec = records[int(idx)]
        if rec["category"] in seen:
            continue
        chosen.append(rec)
        seen.add(rec["category"])
        if len(chosen) == cfg.groups_per_step:
            break
    if len(chosen) < cfg.groups_per_step:
        raise ConfigError(
            f"training split offers {len(seen)} distinct categories, "
            f"need {cfg.groups_per_step} per step"
        )
    images, masks = [], []
    for rec in chosen:
        count = rec["images"].shape[0]
        picks = rng.choice(count, size=cfg.images_per_group, replace=count < cfg.images_per_group)
        group_images, group_masks = [], []
        for pick in picks:
            img, msk = augment(rec["images"][int(pick)], rec["masks"][int(pick)], rng, mean, std)
            group_images.append(img)
            group_masks.append(msk)
        images.append(np.stack(group_images))
        masks.append(np.stack(group_masks))
    return images, masks


def validate(params: dict, cfg: TrainConfig, records: list, mean, std):
    """(F_mu, MAE) averaged per group then across groups.

    Maps are quantized to 255 levels first so the logged numbers match
    what the on-disk PGM evaluation path would report.
    """
    fmu_per_group, mae_per_group = [], []
    with no_grad():
        for rec in records:
            images = np.stack([normalize(img, mean, std) for img in rec["images"]])
            maps, _ = forward_topicnet([images], params, cfg, "infer")
            quantized = np.rint(maps[0].data * 255.0) / 255.0
            f_scores, errors = [], []
            for i in range(quantized.shape[0]):
                f_mu, _ = f_measures(quantized[i, 0], rec["masks"][i, 0])
                f_scores.append(f_mu)
                errors.append(mae(quantized[i, 0], rec["masks"][i, 0]))
            fmu_per_group.append(float(np.mean(f_scores)))
            mae_per_group.append(float(np.mean(errors)))
    return float(np.mean(fmu_per_group)), float(np.mean(mae_per_group))


def train(cfg: TrainConfig, data_root, out_dir, checkpoint_path=None, echo=None) -> dict:
    """Run the full loop; returns checkpoint/runlog paths and epoch rows."""
    root = Path(data_root)
    manifest = read_manifest(root / "manifest.txt")
    if int(manifest["image_size"]) != cfg.image_size:
        raise ConfigError(
            f"dataset images are {manifest['image_size']} px, config says {cfg.image_size}"
        )
    mean, std = manifest_stats(manifest)
    train_records = load_split(root, "train")
    val_records = load_split(root, "val")
    if len({r["category"] for r in train_records}) < cfg.groups_per_step:
        raise ConfigError("training split lacks enough distinct categories")

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    checkpoint = Path(checkpoint_path) if checkpoint_path else out / "checkpoint.bin"
    runlog = out / "runlog.csv"

    params = build_params(cfg)
    state = AdamState(lr=cfg.lr)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))
    rows = []
    with open(runlog, "w", encoding="utf-8", newline="\n") as fh:
        for line in cfg.echo_lines():
            fh.write(f"# {line}\n")
        fh.write(f"# code_config_sha256={code_config_digest(cfg)}\n")
        fh.write(",".join(RUNLOG_COLUMNS) + "\n")
        fh.flush()
        for epoch in range(1, cfg.epochs + 1):
            started = time.monotonic()
            sums = np.zeros(3)
            for _ in range(cfg.steps_per_epoch):
                images, masks = sample_step(rng, train_records, cfg, mean, std)
                _, report = forward_topicnet(images, params, cfg, "train", masks)
                backward(report.l)
                adam_step(params, state)
                zero_grads(params)
                sums += (report.l.item(), report.l_cl.item(), report.l_s.item())
            loss, loss_cl, loss_s = sums / cfg.steps_per_epoch
            val_fmu, val_mae = validate(params, cfg, val_records, mean, std)
            seconds = time.monotonic() - started
            rows.append(
                {
                    "epoch": epoch,
                    "loss": loss,
                    "loss_cl": loss_cl,
                    "loss_s": loss_s,
                    "val_fmu": val_fmu,
                    "val_mae": val_mae,
                    "seconds": seconds,
                }
            )
            fh.write(
                f"{epoch},{loss:.6f},{loss_cl:.6f},{loss_s:.6f},"
                f"{val_fmu:.6f},{val_mae:.6f},{seconds:.3f}\n"
            )
            fh.flush()
            save_checkpoint(checkpoint, params)
            if echo is not None:
                echo(
                    f"epoch {epoch}/{cfg.epochs} loss={loss:.4f} "
                    f"val_fmu={val_fmu:.4f} val_mae={val_mae:.4f}"
                )
    return {"checkpoint": checkpoint, "runlog": runlog, "epochs": rows}


def _fd_converged(eval_shifted, h: float, refinements: int = 5) -> float:
    """Central difference with step refinement.

    A fixed step cannot give a trustworthy slope when the probed interval
    straddles a relu kink, an argmax switch, or strong exp curvature: the
    estimate then reflects the interval, not the point.  The step is
    shrunk 4x until two successive estimates agree, so the returned value
    is a converged measurement of the true derivative rather than an
    artifact of the initial step size.
    """
    previous = None
    for _ in range(refinements + 1):
        fd = (eval_shifted(h) - eval_shifted(-h)) / (2.0 * h)
        if previous is not None and abs(fd - previous) <= 1e-6 * max(abs(fd), abs(previous), 1e-2):
            return fd
        previous = fd
        h /= 4.0
    return previous


def grad_check(cfg: TrainConfig = None, coords_per_tensor: int = 20, h: float = 1e-3, threshold: float = 1e-4) -> dict:
    """Compare autodiff against converged central differences on the full loss.

    Every parameter tensor is probed at up to coords_per_tensor random
    coordinates (all of them when the tensor is smaller).  Relative error
    uses a 1e-2 magnitude floor so near-zero gradients compare by
    absolute difference.
    """
    if cfg is None:
        cfg = tiny_check_config()
    params = build_params(cfg)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 2])))
    n, size = cfg.images_per_group, cfg.image_size
    images = [rng.normal(size=(n, 3, size, size)) for _ in range(cfg.groups_per_step)]
    masks = []
    for _ in range(cfg.groups_per_step):
        mask = np.zeros((n, 1, size, size))
        for i in range(n):
            r0, c0 = rng.integers(1, size // 2, size=2)
            extent = int(rng.integers(size // 4, size // 2))
            mask[i, 0, r0 : r0 + extent, c0 : c0 + extent] = 1.0
        masks.append(mask)

    def loss_value() -> float:
        _, report = forward_topicnet(images, params, cfg, "train", masks)
        return report.l.item()

    _, report = forward_topicnet(images, params, cfg, "train", masks)
    backward(report.l)
    grads = {name: np.array(p.grad) for name, p in params.items()}
    zero_grads(params)

    per_tensor = {}
    worst = 0.0
    with no_grad():
        for name in sorted(params):
            p = params[name]
            count = min(coords_per_tensor, p.data.size)
            flat_coords = rng.choice(p.data.size, size=count, replace=False)
            max_rel = 0.0
            for flat in flat_coords:
                idx = np.unravel_index(int(flat), p.data.shape)
                keep = p.data[idx]

                def eval_shifted(delta):
                    p.data[idx] = keep + delta
                    try:
                        return loss_value()
                    finally:
                        p.data[idx] = keep

                fd = _fd_converged(eval_shifted, h)
                ad = float(grads[name][idx])
                rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-2)
                max_rel = max(max_rel, rel)
            per_tensor[name] = {"count": count, "max_rel": max_rel}
            worst = max(worst, max_rel)
    return {
        "per_tensor": per_tensor,
        "max_rel": worst,
        "threshold": threshold,
        "passed": worst <= threshold,
    }
