"""Selective position encoding MLP, the point-wise MLP baseline, and residual blocks.

Feature tensors are 2-D ``(rows, channels)``; a :class:`Grouping` says which
rows are queries, which rows are each query's K neighbors, and carries the
precomputed position encodings for those (query, neighbor) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diff
from .diff import Tensor
from .encode import KINDS, WIDTHS, encode_arrays
from .neighborhood import support_intersection

VARIANTS = ("cd", "zri", "ari", "fused", "sel")
SLICED = ("fused", "sel")


@dataclass
class ParamStore:
    """Named parameters plus batch-norm running buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = diff.parameter(value, name=name)
        self.params[name] = t
        return t

    def add_linear(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                   bias: bool = True, dtype=np.float32) -> None:
        bound = 1.0 / np.sqrt(n_in)
        self.add(f"{name}.weight", rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype))
        if bias:
            self.add(f"{name}.bias", np.zeros(n_out, dtype=dtype))

    def add_bn(self, name: str, c: int, dtype=np.float32) -> None:
        self.add(f"{name}.gamma", np.ones(c, dtype=dtype))
        self.add(f"{name}.beta", np.zeros(c, dtype=dtype))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=dtype)

    def linear(self, name: str, x: Tensor) -> Tensor:
        return diff.linear(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"))

    def bn(self, name: str, x: Tensor, train: bool) -> Tensor:
        return diff.batch_norm(
            x,
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            train,
        )

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> None:
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        for k, v in self.buffers.items():
            self.buffers[k] = v.astype(dtype)


@dataclass
class SPEConfig:
    in_channels: int
    out_channels: int
    k: int = 16
    radius: float = 0.1
    mlp_layers: int = 1
    maskout_epochs: int = 0
    variant: str = "sel"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.mlp_layers < 1:
            raise ValueError("mlp_layers must be >= 1")
        if self.maskout_epochs < 0:
            raise ValueError("maskout_epochs must be >= 0")
        if self.variant in SLICED and self.out_channels % 3:
            raise ValueError(f"out_channels {self.out_channels} must be divisible by 3")

    @property
    def padded_in(self) -> int:
        if self.variant in SLICED:
            return -(-self.in_channels // 3) * 3
        return self.in_channels


@dataclass
class Grouping:
    """Query rows, neighbor rows (M, K) and encodings (M, K, width) per kind."""

    query_rows: np.ndarray
    neighbor_rows: np.ndarray
    encodings: dict[str, np.ndarray]

    @property
    def k(self) -> int:
        return self.neighbor_rows.shape[1]

    @property
    def m(self) -> int:
        return self.neighbor_rows.shape[0]


def make_grouping(positions: np.ndarray, query_rows: np.ndarray, neighbor_rows: np.ndarray,
                  center_rows: Optional[np.ndarray], radius: float, kinds=KINDS,
                  dtype=np.float32) -> Grouping:
    """Encode every (query, neighbor) pair in float64, then narrow to ``dtype``."""
    pos = np.asarray(positions, dtype=np.float64)
    p_i = pos[query_rows]
    p_j = pos[neighbor_rows]
    enc = {}
    for kind in kinds:
        if kind == "ari":
            m_i = pos[center_rows]
            s_i = support_intersection(p_i, radius)
            e = encode_arrays(kind, p_i, p_j, m_i, s_i)
        else:
            e = encode_arrays(kind, p_i, p_j)
        enc[kind] = e.astype(dtype)
    return Grouping(np.asarray(query_rows), np.asarray(neighbor_rows), enc)


def variant_kinds(variant: str) -> tuple[str, ...]:
    return KINDS if variant in SLICED else (variant,)


# ---------------------------------------------------------------------------
# parameters


def _branch_width(cfg: SPEConfig) -> tuple[int, int]:
    """(feature width per branch, output width per branch)."""
    if cfg.variant in SLICED:
        return cfg.padded_in // 3, cfg.out_channels // 3
    return cfg.in_channels, cfg.out_channels


def init_mlp(store: ParamStore, prefix: str, n_in: int, n_out: int, layers: int,
             rng: np.random.Generator) -> None:
    for j in range(layers):
        store.add_linear(f"{prefix}.fc{j}", n_in if j == 0 else n_out, n_out, rng)
        store.add_bn(f"{prefix}.bn{j}", n_out)


def init_spe_mlp(store: ParamStore, prefix: str, cfg: SPEConfig, rng: np.random.Generator) -> None:
    c_in, c_out = _branch_width(cfg)
    if cfg.variant in SLICED:
        for kind in KINDS:
            init_mlp(store, f"{prefix}.{kind}", 2 * c_in + WIDTHS[kind], c_out, cfg.mlp_layers, rng)
        if cfg.variant == "sel":
            store.add_linear(f"{prefix}.select", cfg.padded_in, cfg.out_channels, rng)
    else:
        init_mlp(store, f"{prefix}.{cfg.variant}", 2 * c_in + WIDTHS[cfg.variant], c_out,
                 cfg.mlp_layers, rng)


# ---------------------------------------------------------------------------
# forward pieces


def pad_channels(f: Tensor, multiple: int = 3) -> Tensor:
    c = f.shape[-1]
    extra = -c % multiple
    if not extra:
        return f
    return diff.concat_last([f, Tensor(np.zeros((*f.shape[:-1], extra), dtype=f.dtype))])


def selection_weights(store: ParamStore, prefix: str, f: Tensor) -> list[Tensor]:
    """Per-point channel gates: sigmoid of a linear map of ``f``, split in three."""
    w = store.params[f"{prefix}.select.weight"]
    if f.shape[-1] != w.shape[1]:
        raise ValueError(f"selection FC expects width {w.shape[1]}, got feature shape {f.shape}")
    return diff.slice_last(diff.sigmoid(store.linear(f"{prefix}.select", f)), 3)


def is_masked(epoch: int, maskout_epochs: int) -> bool:
    return epoch < maskout_epochs


def apply_maskout(alphas: list[Tensor], epoch: int, maskout_epochs: int) -> list[Tensor]:
    """Zero the CD and Z-RI gates (as constants, so no gradient) while ``epoch < T``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if not is_masked(epoch, maskout_epochs):
        return list(alphas)
    a1, a2, a3 = alphas
    return [Tensor(np.zeros_like(a1.data)), Tensor(np.zeros_like(a2.data)), a3]


def _branch_input(store: ParamStore, prefix: str, f_k: Tensor, grouping: Grouping,
                  kind: str) -> Tensor:
    """First linear layer of a branch applied to ``[f_i, f_j - f_i, P_kind(p_i, p_j)]``."""
    enc = grouping.encodings[kind]
    w = store.params[f"{prefix}.fc0.weight"]
    expected = 2 * f_k.shape[-1] + enc.shape[-1]
    if enc.shape[-1] != WIDTHS[kind] or w.shape[1] != expected:
        raise ValueError(
            f"branch {prefix!r}: weight {w.shape} does not take features of width "
            f"{f_k.shape[-1]} with {kind} encoding of width {enc.shape[-1]}"
        )
    return diff.pair_linear(f_k, grouping.query_rows, grouping.neighbor_rows, w,
                            store.params.get(f"{prefix}.fc0.bias"), enc)


def branch_features(store: ParamStore, prefix: str, f_k: Tensor, grouping: Grouping,
                    kind: str, layers: int, train: bool) -> Tensor:
    """Encoded local feature of one branch, (M, K, out_k), before gating and pooling."""
    x = _branch_input(store, prefix, f_k, grouping, kind)
    x = diff.relu(store.bn(f"{prefix}.bn0", x, train))
    for j in range(1, layers):
        x = diff.relu(store.bn(f"{prefix}.bn{j}", store.linear(f"{prefix}.fc{j}", x), train))
    return x


def pooled_branch(store: ParamStore, prefix: str, f_k: Tensor, grouping: Grouping,
                  kind: str, layers: int, train: bool) -> Tensor:
    """``max_over_neighbors(branch_features(...))`` with the last layer's
    normalization, activation and pooling fused: (M, out_k)."""
    x = _branch_input(store, prefix, f_k, grouping, kind)
    for j in range(layers):
        if j:
            x = store.linear(f"{prefix}.fc{j}", x)
        if j < layers - 1:
            x = diff.relu(store.bn(f"{prefix}.bn{j}", x, train))
    name = f"{prefix}.bn{layers - 1}"
    return diff.bn_relu_max(x, store.buffers[f"{name}.running_mean"],
                            store.buffers[f"{name}.running_var"], store.params[f"{name}.gamma"],
                            store.params[f"{name}.beta"], train)


def spe_mlp(store: ParamStore, prefix: str, f: Tensor, grouping: Grouping, cfg: SPEConfig,
            epoch: int = 0, train: bool = False, return_alpha: bool = False):
    """Selective position encoding MLP: (rows, C) features -> (M, out) per query.

    For ``sel`` the three branch outputs are gated by the selection weights
    (with mask-out), for ``fused`` they are concatenated with unit weight,
    and single-kind variants fall through to :func:`pointwise_mlp`.
    """
    if cfg.variant not in SLICED:
        out = pointwise_mlp(store, prefix, f, grouping, cfg.variant, cfg.mlp_layers, train)
        return (out, None) if return_alpha else out
    if f.shape[-1] != cfg.in_channels:
        raise ValueError(f"{prefix}: expected {cfg.in_channels} input channels, got {f.shape}")
    f = pad_channels(f)
    masked = cfg.variant == "sel" and is_masked(epoch, cfg.maskout_epochs)
    alphas = None
    if cfg.variant == "sel":
        f_q = diff.gather_rows(f, grouping.query_rows)
        alphas = apply_maskout(selection_weights(store, prefix, f_q), epoch, cfg.maskout_epochs)

    parts = []
    c_out = cfg.out_channels // 3
    for k, (kind, f_k) in enumerate(zip(KINDS, diff.slice_last(f, 3))):
        if masked and k < 2:
            # gate is exactly zero: the branch contributes zeros and no gradient
            parts.append(Tensor(np.zeros((grouping.m, c_out), dtype=f.dtype)))
            continue
        pooled = pooled_branch(store, f"{prefix}.{kind}", f_k, grouping, kind, cfg.mlp_layers,
                               train)
        # gates are positive, so max_k(alpha * g) == alpha * max_k(g) exactly
        parts.append(pooled if alphas is None else diff.mul(pooled, alphas[k]))
    out = diff.concat_last(parts)
    if return_alpha:
        return out, alphas
    return out


def pointwise_mlp(store: ParamStore, prefix: str, f: Tensor, grouping: Grouping, kind: str,
                  layers: int = 1, train: bool = False) -> Tensor:
    """Max over neighbors of an MLP on ``[f_i, f_j - f_i, P(p_i, p_j)]`` with one encoding kind."""
    return pooled_branch(store, f"{prefix}.{kind}", f, grouping, kind, layers, train)


# ---------------------------------------------------------------------------
# residual blocks


def bottleneck(c: int) -> int:
    """Half of ``c``, rounded up to a multiple of 3 so it slices evenly."""
    return -(-c // 6) * 3


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    k: int = 16
    radius: float = 0.1
    mlp_layers: int = 1
    maskout_epochs: int = 0
    variant: str = "sel"

    def spe(self) -> SPEConfig:
        return SPEConfig(bottleneck(self.in_channels), bottleneck(self.out_channels), self.k,
                         self.radius, self.mlp_layers, self.maskout_epochs, self.variant)


def init_block(store: ParamStore, prefix: str, cfg: BlockConfig, rng: np.random.Generator) -> None:
    spe = cfg.spe()
    store.add_linear(f"{prefix}.reduce", cfg.in_channels, spe.in_channels, rng)
    store.add_bn(f"{prefix}.reduce_bn", spe.in_channels)
    init_spe_mlp(store, f"{prefix}.spe", spe, rng)
    store.add_linear(f"{prefix}.expand", spe.out_channels, cfg.out_channels, rng)
    store.add_bn(f"{prefix}.expand_bn", cfg.out_channels)
    if cfg.in_channels != cfg.out_channels:
        store.add_linear(f"{prefix}.skip", cfg.in_channels, cfg.out_channels, rng)
        store.add_bn(f"{prefix}.skip_bn", cfg.out_channels)


def strided_spe_block(store: ParamStore, prefix: str, x: Tensor, grouping: Grouping,
                      cfg: BlockConfig, epoch: int = 0, train: bool = False,
                      return_alpha: bool = False):
    """Residual block whose queries are a subset of the input rows.

    (rows, C) -> (M', C'). Neighbors come from all input rows; the skip path
    gathers the query rows and projects them when C' != C.
    """
    h = diff.relu(store.bn(f"{prefix}.reduce_bn", store.linear(f"{prefix}.reduce", x), train))
    g, alphas = spe_mlp(store, f"{prefix}.spe", h, grouping, cfg.spe(), epoch, train,
                        return_alpha=True)
    y = store.bn(f"{prefix}.expand_bn", store.linear(f"{prefix}.expand", g), train)
    if np.array_equal(grouping.query_rows, np.arange(x.shape[0])):
        skip = x
    else:
        skip = diff.gather_rows(x, grouping.query_rows)
    if cfg.in_channels != cfg.out_channels:
        skip = store.bn(f"{prefix}.skip_bn", store.linear(f"{prefix}.skip", skip), train)
    out = diff.relu(diff.add(y, skip))
    return (out, alphas) if return_alpha else out


def spe_block(store: ParamStore, prefix: str, x: Tensor, grouping: Grouping, cfg: BlockConfig,
              epoch: int = 0, train: bool = False) -> Tensor:
    """Shape-preserving residual block: (M, C) -> (M, C)."""
    if cfg.in_channels != cfg.out_channels or grouping.m != x.shape[0]:
        raise ValueError("spe_block must preserve rows and channels; use strided_spe_block")
    return strided_spe_block(store, prefix, x, grouping, cfg, epoch, train)
