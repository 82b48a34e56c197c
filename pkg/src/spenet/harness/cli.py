"""Command-line entry point: ``spenet <subcommand> [options]``.

Failures exit with status 1 (usage errors with 2) after printing one line
``error: <code>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..config import load_dataclass, read_config, write_config
from ..geom import load_cloud, read_manifest, write_xyz
from ..net import (
    CheckpointError,
    NetworkConfig,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from ..spe import VARIANTS
from .data import DEFAULT_CLASSES, generate_synthetic_dataset
from .export import export_attention, export_encodings, export_loss_curves
from .matrix import REGIMES, run_regime_matrix
from .presets import MatrixSetup
from .train import TrainConfig, TrainingDiverged, evaluate, train


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _setup(args) -> MatrixSetup:
    """Desk defaults, overridden by ``--config`` then by explicit flags.

    Network fields derived from the point count (stage points, radii, head
    widths) are recomputed from the file's values, never copied from the desk
    defaults.
    """
    s = MatrixSetup()
    kv = read_config(args.config) if args.config else {}
    data_kv = {k.split(".", 1)[1]: v for k, v in kv.items() if k.startswith("data.")}
    if "classes" in data_kv:
        s.classes = tuple(data_kv.pop("classes").split(","))
    for key in ("per_class", "points", "seed"):
        if key in data_kv:
            setattr(s, "data_seed" if key == "seed" else key, int(data_kv.pop(key)))
    if data_kv:
        raise CliError("config", f"unknown data keys: {sorted(data_kv)}")
    net_overrides = {"num_classes": len(s.classes), "num_points": s.points}
    if "net.maskout_epochs" not in kv:
        net_overrides["maskout_epochs"] = s.net.maskout_epochs
    if "net.num_points" in kv and "data.points" not in kv:
        s.points = int(kv["net.num_points"])
        net_overrides["num_points"] = s.points
    s.net = load_dataclass(NetworkConfig, kv, "net", **net_overrides)
    s.train = load_dataclass(TrainConfig, kv, "train", epochs=int(kv.get("train.epochs", s.train.epochs)))
    if args.variant:
        s.net = replace(s.net, variant=args.variant)
    if args.seed is not None:
        s.train = replace(s.train, seed=args.seed)
    return s


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _clouds(args, s: MatrixSetup, split: str):
    if getattr(args, "manifest", None):
        return [load_cloud(p, s.points, seed=i, label=lab)
                for i, (p, lab) in enumerate(read_manifest(args.manifest))]
    ds = s.dataset()
    return ds.train if split == "train" else ds.test


def cmd_dataset(args) -> None:
    s = _setup(args)
    out = _out_dir(args)
    ds = s.dataset()
    lines = []
    for split, clouds in (("train", ds.train), ("test", ds.test)):
        (out / split).mkdir(exist_ok=True)
        for c in clouds:
            path = out / split / f"{c.id}.xyz"
            write_xyz(c, path)
            lines.append(f"{split}/{c.id}.xyz,{c.label}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test clouds to {out}")


def cmd_train(args) -> None:
    s = _setup(args)
    out = _out_dir(args)
    train_rot, test_rot = REGIMES[args.regime or "nn"]
    state = init_parameters(s.net, s.train.seed)
    clouds = _clouds(args, s, "train")
    try:
        state, hist = train(state, clouds, s.train, train_rot)
    except TrainingDiverged as exc:
        raise CliError("diverged", str(exc)) from exc
    save_checkpoint(state, out / "model.ckpt")
    write_config(out / "config.txt", ("net", s.net), ("train", s.train))
    export_loss_curves({s.net.variant: hist}, out / "loss.csv")
    print(f"trained {s.train.epochs} epochs in {hist.wall_time:.1f} s; "
          f"final loss {hist.loss[-1]:.4f}; checkpoint {out / 'model.ckpt'}")


def cmd_eval(args) -> None:
    s = _setup(args)
    state = _load(args)
    acc = evaluate(state, _clouds(args, s, "test"), REGIMES[args.regime or "nn"][1],
                   seed=s.train.seed)
    print(f"regime={args.regime or 'nn'} accuracy={acc:.4f}")


def cmd_matrix(args) -> None:
    s = _setup(args)
    out = _out_dir(args)
    variants = tuple(args.variants.split(",")) if args.variants else \
        ((args.variant,) if args.variant else VARIANTS)
    regimes = tuple(args.regimes.split(",")) if args.regimes else \
        ((args.regime,) if args.regime else tuple(REGIMES))
    seeds = tuple(int(x) for x in args.seeds.split(","))
    m = run_regime_matrix(s.net, s.train, s.dataset(), variants, regimes, seeds)
    m.write_long(out / "matrix_long.csv")
    m.write_table(out / "matrix_table.csv")
    print((out / "matrix_table.csv").read_text(), end="")


def cmd_encode(args) -> None:
    s = _setup(args)
    cloud = load_cloud(args.input, s.points, seed=s.train.seed) if args.input \
        else s.dataset().train[0]
    out = _out_dir(args)
    kinds = (args.kind,) if args.kind else ("cd", "zri", "ari")
    for kind in kinds:
        export_encodings(cloud, kind, s.net.base_radius, s.net.k, out / f"encoding_{kind}.csv")
    print(f"wrote {', '.join(kinds)} encodings of {cloud.id or args.input} to {out}")


def cmd_attention(args) -> None:
    s = _setup(args)
    state = _load(args)
    out = _out_dir(args)
    cloud = _clouds(args, s, "test")[args.index]
    rows = export_attention(state, cloud, out / "attention.csv", stage=args.stage)
    labels, counts = np.unique([r[3] for r in rows], return_counts=True)
    print(" ".join(f"{l}={c}" for l, c in zip(labels, counts)))


def cmd_gradcheck(args) -> None:
    from .gradcheck import run_gradchecks
    worst = 0.0
    failed = []
    for name, err in run_gradchecks(seed=args.seed or 0):
        worst = max(worst, err)
        status = "ok" if err <= 1e-3 else "FAIL"
        print(f"{name:24s} rel_err={err:.2e} {status}")
        if err > 1e-3:
            failed.append(name)
    if failed:
        raise CliError("gradcheck", f"failed: {','.join(failed)}")


def _load(args):
    if not args.checkpoint:
        raise CliError("usage", "--checkpoint is required")
    try:
        return load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError("checkpoint", str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (net.*, train.*, data.*)")
    common.add_argument("--seed", type=int, help="training/evaluation seed")
    common.add_argument("--regime", choices=tuple(REGIMES), default=None)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="spenet", description="Selective position encoding networks")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("dataset", parents=[common], help="write the synthetic dataset as .xyz")
    p.set_defaults(fn=cmd_dataset)
    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--manifest", help="'path,label' lines of .xyz/.off files")
    p.set_defaults(fn=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("matrix", parents=[common], help="rotation-regime matrix")
    p.add_argument("--variants", help="comma list (default: all, or --variant)")
    p.add_argument("--regimes", help="comma list (default: all, or --regime)")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_matrix)
    p = sub.add_parser("encode", parents=[common], help="export position encodings")
    p.add_argument("--input", help=".xyz or .off file (default: first synthetic cloud)")
    p.add_argument("--kind", choices=("cd", "zri", "ari"))
    p.set_defaults(fn=cmd_encode)
    p = sub.add_parser("attention", parents=[common], help="export encoding-selection labels")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--index", type=int, default=0, help="test cloud index")
    p.add_argument("--stage", type=int, default=1)
    p.set_defaults(fn=cmd_attention)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all ops")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.fn(args)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
