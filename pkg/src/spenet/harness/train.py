"""Training loop, optimizers and evaluation under a rotation condition."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import diff
from ..geom import PointCloud, random_rotation_so3, random_rotation_z
from ..net import (
    Geometry,
    ModelState,
    NetworkConfig,
    batch_geometry,
    build_geometry,
    canonical_encodings,
    forward_batch,
    rotated_groupings,
)
from ..spe import variant_kinds

log = logging.getLogger(__name__)

ROTATIONS = ("none", "z", "so3")


@dataclass
class TrainConfig:
    optimizer: str = "adamw"  # or "sgd" (with momentum)
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple[float, ...] = (0.9, 0.999)
    schedule: str = "cosine"  # or "constant"
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    label_smoothing: float = 0.1
    scale_range: tuple[float, ...] = ()  # per-epoch anisotropic scaling, e.g. (0.8, 1.2)
    noise: float = 0.0  # per-epoch gaussian jitter sigma
    maskout_epochs: Optional[int] = None  # overrides the network config when set
    eval_every: int = 0  # 0: evaluate after the last epoch only

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            problems.append("lr must be finite and >= 0")
        if not 0 <= self.label_smoothing < 1:
            problems.append("label_smoothing must be in [0, 1)")
        if self.optimizer not in ("sgd", "adamw"):
            problems.append("optimizer must be 'sgd' or 'adamw'")
        if self.schedule not in ("cosine", "constant"):
            problems.append("schedule must be 'cosine' or 'constant'")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2 (batch norm)")
        if self.scale_range and len(self.scale_range) != 2:
            problems.append("scale_range needs two values")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)  # nan where not evaluated
    wall_time: float = 0.0


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(f"non-finite loss in epoch {epoch}; last finite epoch {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, diff.Tensor], lr: float) -> None:
        mu, wd = self.cfg.momentum, self.cfg.weight_decay
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + wd * p.data if wd else p.grad
            v = self.velocity.get(name)
            v = g if v is None else mu * v + g
            self.velocity[name] = v
            p.data = p.data - (lr * v).astype(p.dtype)


class AdamW:
    """Adam with weight decay decoupled from the gradient."""

    def __init__(self, cfg: TrainConfig, eps: float = 1e-8):
        self.cfg = cfg
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, diff.Tensor], lr: float) -> None:
        b1, b2 = self.cfg.betas
        wd = self.cfg.weight_decay
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            t = self.t.get(name, 0) + 1
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            self.m[name], self.v[name], self.t[name] = m, v, t
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            update = mhat / (np.sqrt(vhat) + self.eps) + wd * p.data
            p.data = p.data - (lr * update).astype(p.dtype)


def make_optimizer(cfg: TrainConfig):
    return SGD(cfg) if cfg.optimizer == "sgd" else AdamW(cfg)


# ---------------------------------------------------------------------------
# rotations and cached geometry


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def sample_rotation(kind: str, seed: int) -> np.ndarray:
    if kind == "none":
        return np.eye(3)
    if kind == "z":
        return random_rotation_z(seed)
    if kind == "so3":
        return random_rotation_so3(seed)
    raise ValueError(f"unknown rotation {kind!r}; expected one of {ROTATIONS}")


@dataclass
class Prepared:
    """A cloud with its rotation-independent geometry and canonical encodings."""

    cloud: PointCloud
    geometry: Geometry
    encodings: list[dict]


def prepare(clouds: list[PointCloud], cfg: NetworkConfig, kinds=None) -> list[Prepared]:
    """Precompute geometry and encodings; ``kinds`` defaults to the variant's own.

    Geometry depends only on the point and radius schedule, so clouds
    prepared with all kinds can be shared across variants.
    """
    kinds = variant_kinds(cfg.variant) if kinds is None else kinds
    out = []
    for c in clouds:
        geom = build_geometry(c.positions, cfg)
        out.append(Prepared(c, geom, canonical_encodings(geom, c.positions, kinds)))
    return out


def _ensure_prepared(data, cfg: NetworkConfig) -> list[Prepared]:
    if data and isinstance(data[0], Prepared):
        return data
    return prepare(list(data), cfg)


def _batch_inputs(items: list[Prepared], rotations: np.ndarray, rotation_kind: str,
                  cfg: NetworkConfig):
    pos = np.stack([it.cloud.positions for it in items])
    if rotation_kind != "none":
        pos = np.einsum("bij,bnj->bni", rotations, pos)
    geoms = [it.geometry for it in items]
    geom = batch_geometry(geoms, cfg.num_points) if len(items) > 1 else geoms[0]
    groupings = rotated_groupings(geom, [it.encodings for it in items],
                                  None if rotation_kind == "none" else rotations, pos,
                                  z_only=rotation_kind == "z", kinds=variant_kinds(cfg.variant))
    return pos, geom, groupings


def _augment(cloud: PointCloud, cfg: TrainConfig, rng: np.random.Generator) -> PointCloud:
    pos = cloud.positions
    if cfg.scale_range:
        pos = pos * rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=3)
    if cfg.noise:
        pos = pos + cfg.noise * rng.standard_normal(pos.shape)
    return cloud.with_positions(pos)


# ---------------------------------------------------------------------------
# train / evaluate


def train(state: ModelState, data, cfg: TrainConfig, rotation: str = "none",
          test_data=None, test_rotation: Optional[str] = None,
          on_epoch: Optional[Callable[[int, ModelState, History], None]] = None
          ) -> tuple[ModelState, History]:
    """Train ``state`` in place on ``data`` (clouds or :class:`Prepared`).

    Each visit of a sample draws a fresh rotation of kind ``rotation``.
    ``on_epoch(epoch, state, history)`` runs after every epoch, with
    ``state.epoch`` still set to the epoch just finished.
    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if rotation not in ROTATIONS:
        raise ValueError(f"unknown rotation {rotation!r}; expected one of {ROTATIONS}")
    if cfg.maskout_epochs is not None:
        state.config.maskout_epochs = cfg.maskout_epochs
    net_cfg = state.config
    items = _ensure_prepared(data, net_cfg)
    if len(items) < 2:
        raise ValueError("training needs at least 2 samples (batch norm)")
    test_items = _ensure_prepared(test_data, net_cfg) if test_data else None
    augmenting = bool(cfg.scale_range) or cfg.noise > 0
    opt = make_optimizer(cfg)
    hist = History()
    t0 = time.perf_counter()
    n = len(items)
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        starts = list(range(0, n, cfg.batch_size))
        if n - starts[-1] == 1 and len(starts) > 1:
            starts.pop()  # a lone trailing sample joins the previous batch
        total, count = 0.0, 0
        for bi, lo in enumerate(starts):
            hi = starts[bi + 1] if bi + 1 < len(starts) else n
            idx = order[lo:hi]
            batch = [items[i] for i in idx]
            rots = np.stack([
                sample_rotation(rotation, _derived_seed(cfg.seed, 1, epoch, i)) for i in idx])
            if augmenting:
                aug_rng = np.random.default_rng([cfg.seed, 2, epoch, bi])
                batch = prepare([_augment(it.cloud, cfg, aug_rng) for it in batch], net_cfg)
            pos, geom, groupings = _batch_inputs(batch, rots, rotation, net_cfg)
            labels = np.array([it.cloud.label for it in batch])
            drop_rng = np.random.default_rng([cfg.seed, 3, epoch, bi])
            with diff.Tape() as tape:
                logits = forward_batch(state, geom, pos, train=True, epoch=epoch, rng=drop_rng,
                                       groupings=groupings)
                loss = diff.cross_entropy(logits, labels, cfg.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, epoch - 1)
            tape.backward(loss)
            opt.step(state.params, lr)
            state.zero_grad()
            total += value * len(idx)
            count += len(idx)
        hist.loss.append(total / count)
        evaluate_now = test_items is not None and (
            (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0) or epoch == cfg.epochs - 1)
        acc = evaluate(state, test_items, test_rotation or rotation, seed=cfg.seed) \
            if evaluate_now else float("nan")
        hist.accuracy.append(acc)
        log.info("epoch %d loss %.4f acc %.4f lr %.5f", epoch, hist.loss[-1], acc, lr)
        if on_epoch is not None:
            on_epoch(epoch, state, hist)
    state.epoch = cfg.epochs
    hist.wall_time = time.perf_counter() - t0
    return state, hist


def predict(state: ModelState, data, rotation: str = "none", seed: int = 0,
            batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits; sample ``i`` gets a rotation seeded by ``(seed, i)``."""
    items = _ensure_prepared(data, state.config)
    out = []
    for lo in range(0, len(items), batch_size):
        batch = items[lo:lo + batch_size]
        rots = np.stack([sample_rotation(rotation, _derived_seed(seed, 4, lo + j))
                         for j in range(len(batch))])
        pos, geom, groupings = _batch_inputs(batch, rots, rotation, state.config)
        out.append(forward_batch(state, geom, pos, train=False, groupings=groupings).data)
    return np.concatenate(out)


def evaluate(state: ModelState, data, rotation: str = "none", seed: int = 0) -> float:
    """Top-1 accuracy with a fresh seeded rotation per test sample."""
    if data is None or len(data) == 0:
        raise ValueError("evaluate needs a non-empty test set")
    items = _ensure_prepared(data, state.config)
    logits = predict(state, items, rotation, seed)
    labels = np.array([it.cloud.label for it in items])
    return float((logits.argmax(axis=1) == labels).mean())
