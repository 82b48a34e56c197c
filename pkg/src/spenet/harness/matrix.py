"""Rotation-regime evaluation matrix over model variants and seeds."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..config import dump_dataclass
from ..net import NetworkConfig, init_parameters
from ..spe import KINDS, VARIANTS
from .data import Dataset
from .train import History, TrainConfig, evaluate, prepare, train

log = logging.getLogger(__name__)

# regime key -> (train rotation, test rotation)
REGIMES = {
    "nn": ("none", "none"),
    "zz": ("z", "z"),
    "zso3": ("z", "so3"),
    "so3so3": ("so3", "so3"),
}
REGIME_NAMES = {"nn": "N/N", "zz": "Z/Z", "zso3": "Z/SO3", "so3so3": "SO3/SO3"}
VARIANT_NAMES = {
    "cd": "CD-only",
    "zri": "ZRI-only",
    "ari": "ARI-only",
    "fused": "Fused-noSel",
    "sel": "Sel",
}
LONG_HEADER = ("variant", "regime", "seed", "accuracy", "status")


@dataclass
class RegimeMatrix:
    variants: tuple[str, ...]
    regimes: tuple[str, ...]
    seeds: tuple[int, ...]
    # (variant, regime, seed) -> accuracy, or nan when the cell failed
    cells: dict[tuple[str, str, int], float] = field(default_factory=dict)
    failures: dict[tuple[str, str, int], str] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)
    histories: dict[tuple[str, str, int], History] = field(default_factory=dict)

    def accuracy(self, variant: str, regime: str) -> float:
        """Mean over seeds of the successful cells (nan if none succeeded)."""
        vals = [self.cells[(variant, regime, s)] for s in self.seeds
                if (variant, regime, s) in self.cells and (variant, regime, s) not in self.failures]
        return float(np.mean(vals)) if vals else float("nan")

    def write_table(self, path: str | Path) -> None:
        """Wide CSV: one row per variant, one column per regime (seed means)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "params"] + [REGIME_NAMES[r] for r in self.regimes])
            for v in self.variants:
                row = [VARIANT_NAMES[v], self.param_counts.get(v, "")]
                row += [_fmt(self.accuracy(v, r)) for r in self.regimes]
                w.writerow(row)

    def write_long(self, path: str | Path) -> None:
        """One row per (variant, regime, seed) cell."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LONG_HEADER)
            for v in self.variants:
                for r in self.regimes:
                    for s in self.seeds:
                        key = (v, r, s)
                        if key in self.failures:
                            w.writerow([v, r, s, "nan", "failed: " + self.failures[key]])
                        elif key in self.cells:
                            w.writerow([v, r, s, repr(self.cells[key]), "ok"])

    @classmethod
    def read_long(cls, path: str | Path) -> "RegimeMatrix":
        variants, regimes, seeds = [], [], []
        m = cls((), (), ())
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["variant"], row["regime"], int(row["seed"]))
                for lst, item in zip((variants, regimes, seeds), key):
                    if item not in lst:
                        lst.append(item)
                m.cells[key] = float(row["accuracy"])
                if row["status"] != "ok":
                    m.failures[key] = row["status"]
        m.variants, m.regimes, m.seeds = tuple(variants), tuple(regimes), tuple(seeds)
        return m


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


def fingerprint(net_cfg: NetworkConfig, train_cfg: TrainConfig, dataset_spec: dict,
                variants, regimes, seeds) -> str:
    """Stable hash of everything that determines a matrix run."""
    lines = dump_dataclass(net_cfg, "net") + dump_dataclass(train_cfg, "train")
    lines += [f"data.{k}={v}" for k, v in sorted(dataset_spec.items())]
    lines += [f"variants={','.join(variants)}", f"regimes={','.join(regimes)}",
              f"seeds={','.join(map(str, seeds))}"]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def run_regime_matrix(net_cfg: NetworkConfig, train_cfg: TrainConfig, dataset: Dataset,
                      variants=VARIANTS, regimes=tuple(REGIMES), seeds=(0, 1, 2),
                      on_cell: Optional[Callable[[str, str, int, float], None]] = None
                      ) -> RegimeMatrix:
    """Train each (variant, train rotation, seed) once and test every requested regime.

    Regimes that share a training rotation (Z/Z and Z/SO3) share the model.
    Mask-out applies to ``sel`` only; the other variants train with T = 0.
    A failing cell is recorded and the run continues.
    """
    variants, regimes, seeds = tuple(variants), tuple(regimes), tuple(seeds)
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected a subset of {VARIANTS}")
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}; expected a subset of {tuple(REGIMES)}")
    result = RegimeMatrix(variants, regimes, seeds)
    shared = replace(net_cfg, variant="sel")
    train_items = prepare(dataset.train, shared, kinds=KINDS)
    test_items = prepare(dataset.test, shared, kinds=KINDS)
    by_train: dict[str, list[str]] = {}
    for r in regimes:
        by_train.setdefault(REGIMES[r][0], []).append(r)
    for v in variants:
        cfg_v = replace(net_cfg, variant=v,
                        maskout_epochs=net_cfg.maskout_epochs if v == "sel" else 0)
        tcfg = replace(train_cfg, maskout_epochs=None)
        result.param_counts[v] = init_parameters(cfg_v, 0).n_parameters()
        for train_rot, regs in by_train.items():
            for seed in seeds:
                try:
                    state = init_parameters(replace(cfg_v), seed)
                    state, hist = train(state, train_items, replace(tcfg, seed=seed), train_rot)
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    log.warning("cell %s/%s/%d failed: %s", v, train_rot, seed, exc)
                    for r in regs:
                        result.failures[(v, r, seed)] = f"{type(exc).__name__}: {exc}"
                        result.cells[(v, r, seed)] = float("nan")
                    continue
                for r in regs:
                    result.histories[(v, r, seed)] = hist
                    try:
                        acc = evaluate(state, test_items, REGIMES[r][1], seed=seed)
                    except Exception as exc:  # noqa: BLE001
                        result.failures[(v, r, seed)] = f"{type(exc).__name__}: {exc}"
                        acc = float("nan")
                    result.cells[(v, r, seed)] = acc
                    if on_cell:
                        on_cell(v, r, seed, acc)
    return result
