"""The full classification network: points embedding, five stages, head.

Geometry (sampling, neighborhoods, centers) depends only on pairwise
distances, so it is computed once per cloud with :func:`build_geometry` and
reused under any rotation; only the encodings are recomputed from the
rotated coordinates.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diff
from .config import dump_dataclass, load_dataclass
from .diff import Tensor
from .encode import encode_arrays
from .geom import PointCloud
from .neighborhood import ball_query_positions, center_points, farthest_point_sample
from .spe import (
    SLICED,
    VARIANTS,
    BlockConfig,
    Grouping,
    ParamStore,
    SPEConfig,
    init_block,
    init_spe_mlp,
    is_masked,
    make_grouping,
    spe_mlp,
    strided_spe_block,
    variant_kinds,
)

N_STAGES = 5
EMBED_WIDTHS = {"cd": 3, "zri": 2, "ari": 1}


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (12, 24, 48, 96, 192)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1, 1)
    num_points: int = 512
    # empty -> N, N/2, N/4, ... and base_radius * 2**t
    stage_points: tuple[int, ...] = ()
    stage_radii: tuple[float, ...] = ()
    base_radius: float = 0.1
    k: int = 16
    maskout_epochs: int = 0
    num_classes: int = 5
    head_widths: tuple[int, ...] = ()
    variant: str = "sel"
    mlp_layers: int = 1
    dropout: float = 0.5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if not self.stage_points:
            self.stage_points = tuple(max(1, self.num_points >> t) for t in range(N_STAGES))
        if not self.stage_radii:
            self.stage_radii = tuple(self.base_radius * 2.0**t for t in range(N_STAGES))
        if not self.head_widths:
            c5 = self.stage_channels[-1]
            self.head_widths = (c5, max(1, c5 // 2))
        self.stage_points = tuple(int(n) for n in self.stage_points)
        self.stage_radii = tuple(float(r) for r in self.stage_radii)
        self.head_widths = tuple(int(h) for h in self.head_widths)
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("stage_channels", "blocks_per_stage", "stage_points", "stage_radii"):
            if len(getattr(self, name)) != N_STAGES:
                problems.append(f"{name} needs {N_STAGES} entries")
        ch = self.stage_channels
        if any(b <= a for a, b in zip(ch, ch[1:])):
            problems.append(f"stage_channels must be strictly increasing: {ch}")
        if any(c % 3 for c in ch):
            problems.append(f"stage_channels must be divisible by 3: {ch}")
        pts = (self.num_points, *self.stage_points)
        if any(b > a for a, b in zip(pts, pts[1:])) or min(pts) < 1:
            problems.append(f"point counts must be positive and non-increasing: {pts}")
        if any(b < 1 for b in self.blocks_per_stage):
            problems.append("blocks_per_stage entries must be >= 1")
        if any(r <= 0 for r in self.stage_radii) or self.base_radius <= 0:
            problems.append("radii must be positive")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if self.maskout_epochs < 0:
            problems.append("maskout_epochs must be >= 0")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must be in [0, 1)")
        if problems:
            raise ValueError("invalid NetworkConfig: " + "; ".join(problems))

    def embed_spe(self) -> SPEConfig:
        c1 = self.stage_channels[0]
        return SPEConfig(c1, c1, self.k, self.base_radius, self.mlp_layers,
                         self.maskout_epochs, self.variant)

    def blocks(self) -> list[tuple[str, int, int, BlockConfig]]:
        """(prefix, stage, index within stage, config) for every block in order."""
        out = []
        c_prev = self.stage_channels[0]
        for t in range(N_STAGES):
            c = self.stage_channels[t]
            for j in range(self.blocks_per_stage[t]):
                cfg = BlockConfig(c_prev if j == 0 else c, c, self.k, self.stage_radii[t],
                                  self.mlp_layers, self.maskout_epochs, self.variant)
                out.append((f"stage{t + 1}.block{j}", t, j, cfg))
            c_prev = c
        return out


@dataclass
class ModelState(ParamStore):
    config: NetworkConfig = field(default_factory=NetworkConfig)
    epoch: int = 0
    seed: int = 0


# ---------------------------------------------------------------------------
# geometry


@dataclass
class GroupIndex:
    """Neighborhood of one SPE-MLP: rows refer to the source level."""

    src_level: int
    query_rows: np.ndarray
    neighbor_rows: np.ndarray
    center_rows: np.ndarray
    radius: float


@dataclass
class Geometry:
    """Sampling hierarchy of one cloud, or of a batch with row offsets applied.

    ``levels[t]`` holds point indices into the (flattened) input; level 0 is
    every point, level t >= 1 the points kept by stage t.
    """

    levels: list[np.ndarray]
    groups: list[GroupIndex]
    batch_size: int = 1


def _group(points: np.ndarray, query_rows: np.ndarray, radius: float, k: int, level: int) -> GroupIndex:
    nbrs = ball_query_positions(points, points[query_rows], radius, k)
    return GroupIndex(level, query_rows, nbrs, center_points(points, nbrs), radius)


def build_geometry(positions: np.ndarray, cfg: NetworkConfig) -> Geometry:
    pts = np.asarray(positions, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot build geometry for an empty cloud")
    levels = [np.arange(n)]
    groups = [_group(pts, np.arange(n), cfg.base_radius, cfg.k, 0)]
    level_pts = pts
    for t in range(N_STAGES):
        m = min(cfg.stage_points[t], len(level_pts))
        if m == len(level_pts):
            sample = np.arange(m)
        else:
            sample = farthest_point_sample(level_pts, m)
        if t == 0 and m == n and cfg.stage_radii[0] == cfg.base_radius:
            groups.append(groups[0])  # identical to the embedding neighborhoods
        else:
            groups.append(_group(level_pts, sample, cfg.stage_radii[t], cfg.k, t))
        levels.append(levels[-1][sample])
        level_pts = level_pts[sample]
        for _ in range(cfg.blocks_per_stage[t] - 1):
            groups.append(_group(level_pts, np.arange(m), cfg.stage_radii[t], cfg.k, t + 1))
    return Geometry(levels, groups)


def batch_geometry(geoms: list[Geometry], n_points: int) -> Geometry:
    """Stack per-cloud geometries (equal point counts) into one with row offsets."""
    b = len(geoms)
    sizes = [len(lv) for lv in geoms[0].levels]
    levels = [
        np.concatenate([g.levels[t] + i * n_points for i, g in enumerate(geoms)])
        for t in range(len(sizes))
    ]
    groups = []
    for gi, g0 in enumerate(geoms[0].groups):
        off = sizes[g0.src_level]
        parts = [g.groups[gi] for g in geoms]
        groups.append(GroupIndex(
            g0.src_level,
            np.concatenate([p.query_rows + i * off for i, p in enumerate(parts)]),
            np.concatenate([p.neighbor_rows + i * off for i, p in enumerate(parts)]),
            np.concatenate([p.center_rows + i * off for i, p in enumerate(parts)]),
            g0.radius,
        ))
    return Geometry(levels, groups, b)


def encode_geometry(geom: Geometry, positions: np.ndarray, kinds, dtype=np.float32) -> list[Grouping]:
    """Groupings with encodings of the (possibly rotated) flattened ``positions``."""
    flat = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    out = []
    for g in geom.groups:
        src = flat[geom.levels[g.src_level]]
        out.append(make_grouping(src, g.query_rows, g.neighbor_rows, g.center_rows,
                                 g.radius, kinds, dtype))
    return out


def canonical_encodings(geom: Geometry, positions: np.ndarray, kinds,
                        dtype=np.float32) -> list[dict[str, np.ndarray]]:
    """Per-group encodings of an unrotated cloud, for reuse under rotation."""
    return [g.encodings for g in encode_geometry(geom, positions, kinds, dtype)]


def rotated_groupings(geom: Geometry, cached: list[list[dict[str, np.ndarray]]],
                      rotations: Optional[np.ndarray], positions: np.ndarray,
                      z_only: bool, kinds=None) -> list[Grouping]:
    """Batch groupings from per-cloud cached encodings.

    ``rotations`` (B, 3, 3) were applied to give ``positions``. A-RI is
    invariant and reused as is; CD is rotated; Z-RI is reused when every
    rotation is about Z and recomputed from ``positions`` otherwise.
    ``kinds`` restricts the output to a subset of the cached encodings.
    """
    b = len(cached)
    flat = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    out = []
    for gi, g in enumerate(geom.groups):
        enc = {}
        for kind in (cached[0][gi] if kinds is None else kinds):
            parts = [c[gi][kind] for c in cached]
            if kind == "cd" and rotations is not None:
                stacked = np.stack(parts).reshape(b, -1, 3)  # (B, M*K, 3)
                rot_t = rotations.astype(stacked.dtype).transpose(0, 2, 1)
                enc[kind] = np.matmul(stacked, rot_t).reshape(-1, *parts[0].shape[1:])
            elif kind == "zri" and rotations is not None and not z_only:
                src = flat[geom.levels[g.src_level]]
                enc[kind] = encode_arrays("zri", src[g.query_rows],
                                          src[g.neighbor_rows]).astype(parts[0].dtype)
            else:
                enc[kind] = np.concatenate(parts) if b > 1 else parts[0]
        out.append(Grouping(g.query_rows, g.neighbor_rows, enc))
    return out


# ---------------------------------------------------------------------------
# parameters


def init_parameters(config: NetworkConfig, seed: int = 0) -> ModelState:
    """Fan-in scaled uniform weights, zero biases, unit/zero normalization affine."""
    config.validate()
    rng = np.random.default_rng(seed)
    state = ModelState(config=config, seed=seed)
    c1 = config.stage_channels[0]
    if config.variant in SLICED:
        for kind in ("cd", "zri", "ari"):
            state.add_linear(f"embed.{kind}", EMBED_WIDTHS[kind], c1 // 3, rng)
    else:
        state.add_linear(f"embed.{config.variant}", EMBED_WIDTHS[config.variant], c1, rng)
    init_spe_mlp(state, "embed.spe", config.embed_spe(), rng)
    for prefix, _, _, bcfg in config.blocks():
        init_block(state, prefix, bcfg, rng)
    widths = (config.stage_channels[-1], *config.head_widths)
    for j in range(len(config.head_widths)):
        state.add_linear(f"head.fc{j}", widths[j], widths[j + 1], rng)
        state.add_bn(f"head.bn{j}", widths[j + 1])
    state.add_linear("head.out", widths[-1], config.num_classes, rng)
    return state


def point_descriptors(positions: np.ndarray, kind: str) -> np.ndarray:
    """Per-point input of the embedding layer: xyz, (z, |xy|) or |xyz|."""
    p = np.asarray(positions, dtype=np.float64)
    if kind == "cd":
        return p
    if kind == "zri":
        return np.stack([p[:, 2], np.hypot(p[:, 0], p[:, 1])], axis=1)
    if kind == "ari":
        return np.linalg.norm(p, axis=1, keepdims=True)
    raise ValueError(f"unknown kind {kind!r}")


def embed_features(state: ModelState, positions: np.ndarray, epoch: int) -> Tensor:
    """Linear embedding of per-point descriptors: (N, 3) -> (N, C1)."""
    cfg = state.config
    dtype = state.params["head.out.weight"].dtype
    if cfg.variant not in SLICED:
        q = point_descriptors(positions, cfg.variant).astype(dtype)
        return state.linear(f"embed.{cfg.variant}", Tensor(q))
    masked = cfg.variant == "sel" and is_masked(epoch, cfg.maskout_epochs)
    parts = []
    for kind in ("cd", "zri", "ari"):
        q = point_descriptors(positions, kind).astype(dtype)
        if masked and kind != "ari":
            q = np.zeros_like(q)
        parts.append(state.linear(f"embed.{kind}", Tensor(q)))
    return diff.concat_last(parts)


def embed_points(cloud: PointCloud, state: ModelState, train: bool = False,
                 epoch: Optional[int] = None) -> Tensor:
    """Embedding stage alone for one cloud: (N, C1) features."""
    epoch = state.epoch if epoch is None else epoch
    geom = build_geometry(cloud.positions, state.config)
    grouping = encode_geometry(geom, cloud.positions, variant_kinds(state.config.variant),
                               state.params["head.out.weight"].dtype)[0]
    f = embed_features(state, cloud.positions, epoch)
    return spe_mlp(state, "embed.spe", f, grouping, state.config.embed_spe(), epoch, train)


def forward_features(state: ModelState, geom: Geometry, positions: np.ndarray, train: bool,
                     epoch: int, capture_alpha: bool = False,
                     groupings: Optional[list[Grouping]] = None):
    """Backbone only: returns pooled (B, C5) features and, optionally, the gates
    of every strided block as a list of ``(M, 3, out/3)`` arrays (None if ungated)."""
    cfg = state.config
    dtype = state.params["head.out.weight"].dtype
    if groupings is None:
        groupings = encode_geometry(geom, positions, variant_kinds(cfg.variant), dtype)
    flat = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    x = embed_features(state, flat, epoch)
    x = spe_mlp(state, "embed.spe", x, groupings[0], cfg.embed_spe(), epoch, train)
    gates = []
    for (prefix, _, j, bcfg), grouping in zip(cfg.blocks(), groupings[1:]):
        x, alphas = strided_spe_block(state, prefix, x, grouping, bcfg, epoch, train,
                                      return_alpha=True)
        if j == 0 and capture_alpha:
            gates.append(None if alphas is None else np.stack([a.data for a in alphas], axis=1))
    b = geom.batch_size
    x = diff.max_over_neighbors(diff.reshape(x, (b, x.shape[0] // b, x.shape[1])))
    return (x, gates) if capture_alpha else x


def forward_batch(state: ModelState, geom: Geometry, positions: np.ndarray, train: bool = False,
                  epoch: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                  groupings: Optional[list[Grouping]] = None) -> Tensor:
    """Logits (B, c) for a batch of clouds stacked as ``positions`` (B, N, 3)."""
    epoch = state.epoch if epoch is None else epoch
    cfg = state.config
    x = forward_features(state, geom, positions, train, epoch, groupings=groupings)
    for j in range(len(cfg.head_widths)):
        x = diff.relu(state.bn(f"head.bn{j}", state.linear(f"head.fc{j}", x), train))
        if train and cfg.dropout > 0:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            keep = rng.random(x.shape) >= cfg.dropout
            x = diff.mul_const(x, keep / (1.0 - cfg.dropout))
    return state.linear("head.out", x)


def forward(cloud: PointCloud, state: ModelState, mode: str = "eval") -> np.ndarray:
    """Logits of a single cloud. Batch norm needs batches in train mode, so
    single-cloud inference is eval-only."""
    if mode != "eval":
        raise ValueError("single-cloud forward supports mode='eval' only; use forward_batch")
    geom = build_geometry(cloud.positions, state.config)
    return forward_batch(state, geom, cloud.positions[None], train=False).data[0]


def logits_many(state: ModelState, clouds: list[PointCloud], geoms: Optional[list[Geometry]] = None,
                rotations: Optional[list[np.ndarray]] = None, batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for many clouds, batched. ``geoms`` may be cached
    geometries of the unrotated clouds."""
    out = []
    for lo in range(0, len(clouds), batch_size):
        chunk = clouds[lo:lo + batch_size]
        pos = np.stack([c.positions for c in chunk])
        if rotations is not None:
            rots = np.stack(rotations[lo:lo + batch_size])
            pos = np.einsum("bij,bnj->bni", rots, pos)
        gs = geoms[lo:lo + batch_size] if geoms is not None else [
            build_geometry(p, state.config) for p in pos]
        geom = batch_geometry(gs, pos.shape[1]) if len(gs) > 1 else gs[0]
        out.append(forward_batch(state, geom, pos, train=False).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SPENETCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint_error"


class CheckpointVersionError(CheckpointError):
    code = "version_mismatch"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class UnknownTensorError(CheckpointError):
    code = "unknown_tensor"


class CheckpointShapeError(CheckpointError):
    code = "shape_mismatch"


def _state_text(state: ModelState) -> str:
    lines = dump_dataclass(state.config, "net")
    lines += [f"state.epoch={state.epoch}", f"state.seed={state.seed}"]
    return "\n".join(lines) + "\n"


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Binary checkpoint: magic, version, config text, then named float32 tensors.

    All integers are little-endian uint32; tensor values are raw float32.
    """
    text = _state_text(state).encode()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(text)), text]
    tensors = {**{k: t.data for k, t in state.params.items()}, **state.buffers}
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path, config: Optional[NetworkConfig] = None) -> ModelState:
    """Restore a :class:`ModelState` bitwise.

    With ``config`` given, tensors are validated against that architecture
    instead of the one recorded in the file.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic bytes)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    text = r.take(r.u32()).decode()
    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    file_cfg = load_dataclass(NetworkConfig, kv, "net")
    cfg = config if config is not None else file_cfg
    state = init_parameters(cfg, int(kv.get("state.seed", 0)))
    state.epoch = int(kv.get("state.epoch", 0))
    seen = set()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if name in state.params:
            target = state.params[name].data
        elif name in state.buffers:
            target = state.buffers[name]
        else:
            raise UnknownTensorError(f"{path}: unknown tensor {name!r}")
        if target.shape != arr.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {arr.shape}, model expects {target.shape}")
        if name in state.params:
            state.params[name].data = arr
        else:
            state.buffers[name] = arr
        seen.add(name)
    missing = (set(state.params) | set(state.buffers)) - seen
    if missing:
        raise CheckpointTruncatedError(f"{path}: missing tensors {sorted(missing)[:3]}")
    return state
