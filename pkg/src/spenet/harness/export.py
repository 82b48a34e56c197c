"""CSV exports: attention labels, loss curves and raw encodings."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np

from ..encode import COMPONENTS, encode_batch
from ..geom import PointCloud
from ..net import ModelState, build_geometry, forward_features
from ..neighborhood import ball_query
from ..spe import SLICED

ATTENTION_HEADER = ("x", "y", "z", "label", "alpha1", "alpha2", "alpha3")
ATTENTION_LABELS = ("CD", "ZRI", "ARI")
LOSS_HEADER = ("variant", "epoch", "loss")


def attention_weights(state: ModelState, cloud: PointCloud, stage: int = 1,
                      epoch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Query coordinates (M, 3) and per-point mean gates (M, 3) of a strided block.

    ``stage`` counts strided blocks from 1 (the first one by default).
    ``epoch`` defaults to the state's epoch counter, which drives mask-out.
    """
    cfg = state.config
    if cfg.variant not in SLICED:
        raise ValueError(f"variant {cfg.variant!r} has no encoding selection")
    if not 1 <= stage <= len(cfg.stage_channels):
        raise ValueError(f"stage must be in [1, {len(cfg.stage_channels)}], got {stage}")
    geom = build_geometry(cloud.positions, cfg)
    epoch = state.epoch if epoch is None else epoch
    _, alphas = forward_features(state, geom, cloud.positions[None], train=False, epoch=epoch,
                                 capture_alpha=True)
    gates = alphas[stage - 1]  # (M, 3, C/3)
    xyz = cloud.positions[geom.levels[stage]]
    return xyz, gates.mean(axis=2)


def attention_labels(mean_alpha: np.ndarray) -> np.ndarray:
    """Argmax branch per point (0 = CD, 1 = ZRI, 2 = ARI; ties go to the lower branch)."""
    return np.asarray(mean_alpha).argmax(axis=1)


def export_attention(state: ModelState, cloud: PointCloud, path: str | Path | None = None,
                     stage: int = 1, epoch: int | None = None) -> list[tuple]:
    """Rows ``x,y,z,label,alpha1,alpha2,alpha3``; written as CSV when ``path`` is given."""
    xyz, alpha = attention_weights(state, cloud, stage, epoch)
    labels = attention_labels(alpha)
    rows = [(*map(float, p), ATTENTION_LABELS[l], *map(float, a))
            for p, l, a in zip(xyz, labels, alpha)]
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ATTENTION_HEADER)
            w.writerows(rows)
    return rows


def export_loss_curves(histories: Mapping[str, object], path: str | Path) -> int:
    """Columns ``variant,epoch,loss`` (epoch counts from 0); returns the data row count."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for name, hist in histories.items():
            for epoch, loss in enumerate(hist.loss):
                w.writerow([name, epoch, repr(float(loss))])
                n += 1
    return n


def export_encodings(cloud: PointCloud, kind: str, radius: float, k: int,
                     path: str | Path) -> np.ndarray:
    """Encodings of every point's neighborhood, one row per (query, neighbor) pair."""
    nbrs = ball_query(cloud.positions, np.arange(len(cloud.positions)), radius, k)
    enc = encode_batch(cloud, nbrs, kind)  # (M, K, W)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("query", "neighbor", *COMPONENTS[kind]))
        for i in range(enc.shape[0]):
            for j in range(enc.shape[1]):
                w.writerow([int(nbrs.query_indices[i]), int(nbrs.neighbor_lists[i, j]),
                            *(repr(float(x)) for x in enc[i, j])])
    return enc
