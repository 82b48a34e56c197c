"""Relative position encodings between a query point and its neighbors.

Three kinds, each tied to a rotation condition:

* ``cd``  -- coordinate difference, 3 values, rotation-equivariant only.
* ``zri`` -- invariant to rotations about Z, 5 values.
* ``ari`` -- invariant to any rotation about the origin, 8 values; needs the
  neighborhood center ``m`` and the ball/ray intersection ``s``.

Kernels are vectorized over leading axes and always evaluated in float64.
"""
from __future__ import annotations

import numpy as np

from .neighborhood import NeighborhoodIndex, center_points, support_intersection

KINDS = ("cd", "zri", "ari")
WIDTHS = {"cd": 3, "zri": 5, "ari": 8}
COMPONENTS = {
    "cd": ("dx", "dy", "dz"),
    "zri": ("dz", "r_ij_xy", "r_i_xy", "r_j_xy", "theta_ij_xy"),
    "ari": ("r_i", "r_ms", "r_ps", "r_pm", "r_sp", "r_mp", "r_pp", "theta_mp"),
}
EPS = 1e-12


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def _norm(v):
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def encode_cd(p_i, p_j) -> np.ndarray:
    return _f64(p_j) - _f64(p_i)


def encode_zri(p_i, p_j) -> np.ndarray:
    """[dz, |p'_j - p'_i|, |p'_i|, |p'_j|, angle(p'_i, p'_j)] with p' the XY projection.

    The angle is unsigned, measured at the origin, and 0 when either
    projection vanishes.
    """
    p_i, p_j = np.broadcast_arrays(_f64(p_i), _f64(p_j))
    a, b = p_i[..., :2], p_j[..., :2]
    r_i, r_j = _norm(a), _norm(b)
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
    theta = np.arctan2(np.abs(cross), dot)
    theta = np.where((r_i < EPS) | (r_j < EPS), 0.0, theta)
    return np.stack([p_j[..., 2] - p_i[..., 2], _norm(b - a), r_i, r_j, theta], axis=-1)


def dihedral(axis_from, axis_to, a, b) -> np.ndarray:
    """Signed angle about ``axis_to - axis_from`` from the half-plane of ``a`` to that of ``b``.

    Half-planes share the edge through ``axis_from``. Returns 0 where ``a`` or
    ``b`` lies on the axis line.
    """
    u = axis_to - axis_from
    u = u / np.maximum(_norm(u), EPS)[..., None]
    va = a - axis_from
    vb = b - axis_from
    pa = va - np.einsum("...i,...i->...", va, u)[..., None] * u
    pb = vb - np.einsum("...i,...i->...", vb, u)[..., None] * u
    y = np.einsum("...i,...i->...", u, np.cross(pa, pb))
    x = np.einsum("...i,...i->...", pa, pb)
    theta = np.arctan2(y, x)
    theta = np.where(theta <= -np.pi, np.pi, theta)  # keep the range (-pi, pi]
    degenerate = (_norm(pa) < EPS) | (_norm(pb) < EPS)
    return np.where(degenerate, 0.0, theta)


def encode_ari(p_i, p_j, m_i, s_i) -> np.ndarray:
    p_i, p_j, m_i, s_i = np.broadcast_arrays(_f64(p_i), _f64(p_j), _f64(m_i), _f64(s_i))
    return np.stack(
        [
            _norm(p_i),
            _norm(m_i - s_i),
            _norm(p_i - s_i),
            _norm(p_i - m_i),
            _norm(s_i - p_j),
            _norm(m_i - p_j),
            _norm(p_i - p_j),
            dihedral(p_i, s_i, m_i, p_j),
        ],
        axis=-1,
    )


def encode_arrays(kind: str, p_i, p_j, m_i=None, s_i=None) -> np.ndarray:
    """Batched encoding: ``p_i`` (M, 3), ``p_j`` (M, K, 3), ``m_i``/``s_i`` (M, 3)."""
    p_i = _f64(p_i)[:, None, :]
    if kind == "cd":
        return encode_cd(p_i, p_j)
    if kind == "zri":
        return encode_zri(p_i, p_j)
    if kind == "ari":
        return encode_ari(p_i, p_j, _f64(m_i)[:, None, :], _f64(s_i)[:, None, :])
    raise ValueError(f"unknown encoding kind {kind!r}; expected one of {KINDS}")


def encode_batch(cloud, nbrs: NeighborhoodIndex, kind: str) -> np.ndarray:
    """Encoding tensor (M, K, width) aligned with ``nbrs``."""
    if kind not in WIDTHS:
        raise ValueError(f"unknown encoding kind {kind!r}; expected one of {KINDS}")
    pts = np.asarray(getattr(cloud, "positions", cloud), dtype=np.float64)
    p_i = pts[nbrs.query_indices]
    p_j = pts[nbrs.neighbor_lists]
    if kind != "ari":
        return encode_arrays(kind, p_i, p_j)
    m_i = pts[center_points(pts, nbrs.neighbor_lists)]
    s_i = support_intersection(p_i, nbrs.radius)
    return encode_arrays(kind, p_i, p_j, m_i, s_i)


def encoding_header(kind: str) -> list[str]:
    return list(COMPONENTS[kind])
