"""Command-line surface: gen-data, train, eval, infer, grad-check.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including a
failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .backbone import load_checkpoint
from .config import build_config
from .dataset import generate_dataset, manifest_stats, normalize
from .errors import IoError, TopicNetError
from .metrics import evaluate_dataset, write_csv
from .model import forward_topicnet
from .netpbm import read_ppm, write_pgm
from .train import find_manifest, grad_check, tiny_check_config, train


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(parser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")


def _config_from(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return build_config(args.config, overrides)


def _cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    generate_dataset(
        args.out,
        cfg.seed,
        image_size=cfg.image_size,
        categories=cfg.categories,
        train_groups=cfg.train_groups,
        val_groups=cfg.val_groups,
        images_per_group=cfg.images_per_group,
    )
    print(f"dataset written to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from(args)
    result = train(cfg, args.data, args.out, args.checkpoint, echo=print)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"runlog: {result['runlog']}")
    return 0


def _cmd_eval(args) -> int:
    report = evaluate_dataset(args.pred, args.data)
    write_csv(report, args.out)
    print(
        f"F_mu={report.f_mu:.6f} mae={report.mae:.6f} F_gamma={report.f_gamma:.6f} "
        f"E_mu={report.e_mu:.6f} S_alpha={report.s_alpha:.6f}"
    )
    return 0


def _load_image_dir(group_dir: Path):
    """(names, images [N,3,H,W]) from one group's img/ tree, gt optional."""
    names = sorted(p.name for p in (group_dir / "img").glob("*.ppm"))
    if not names:
        raise IoError(f"no images under {group_dir / 'img'}")
    return names, np.stack([read_ppm(group_dir / "img" / name) for name in names])


def _cmd_infer(args) -> int:
    cfg = _config_from(args)
    params = load_checkpoint(args.checkpoint)
    data = Path(args.data)
    if not data.is_dir():
        raise IoError(f"missing dataset directory {data}")
    mean, std = manifest_stats(find_manifest(data))
    out = Path(args.out)
    group_dirs = sorted(p for p in data.iterdir() if p.is_dir() and (p / "img").is_dir())
    if not group_dirs:
        raise IoError(f"no group directories under {data}")
    written = 0
    for gdir in group_dirs:
        names, images = _load_image_dir(gdir)
        batch = np.stack([normalize(img, mean, std) for img in images])
        maps, _ = forward_topicnet([batch], params, cfg, "infer")
        target = out / gdir.name
        try:
            target.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {target}: {exc}") from exc
        for i, name in enumerate(names):
            write_pgm(target / name.replace(".ppm", ".pgm"), maps[0].data[i])
            written += 1
    print(f"wrote {written} maps to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    if args.config:
        cfg = _config_from(args)
    else:
        cfg = tiny_check_config(args.seed if args.seed is not None else 0)
    report = grad_check(cfg)
    for name in sorted(report["per_tensor"]):
        row = report["per_tensor"][name]
        print(f"{name:24s} coords={row['count']:3d} max_rel={row['max_rel']:.3e}")
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"max relative error {report['max_rel']:.3e} (threshold {report['threshold']:.0e}): {verdict}")
    return 0 if report["passed"] else 2


def _build_parser() -> _Parser:
    parser = _Parser(prog="topicnet", description="Group co-saliency detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    gen = sub.add_parser("gen-data", help="write a synthetic co-salient dataset")
    gen.add_argument("--out", required=True, help="dataset root to create")
    _add_config_flags(gen)
    gen.set_defaults(handler=_cmd_gen_data)

    tr = sub.add_parser("train", help="train and write checkpoint + run log")
    tr.add_argument("--data", required=True, help="dataset root (manifest + splits)")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.bin)")
    _add_config_flags(tr)
    tr.set_defaults(handler=_cmd_train)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True, help="directory of predicted maps")
    ev.add_argument("--data", required=True, help="split directory with group*/gt")
    ev.add_argument("--out", required=True, help="CSV path to write")
    ev.set_defaults(handler=_cmd_eval)

    inf = sub.add_parser("infer", help="write saliency maps for a split")
    inf.add_argument("--data", required=True, help="split directory with group*/img")
    inf.add_argument("--checkpoint", required=True, help="checkpoint to load")
    inf.add_argument("--out", required=True, help="output directory for maps")
    _add_config_flags(inf)
    inf.set_defaults(handler=_cmd_infer)

    gc = sub.add_parser("grad-check", help="compare autodiff against finite differences")
    _add_config_flags(gc)
    gc.set_defaults(handler=_cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except TopicNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
