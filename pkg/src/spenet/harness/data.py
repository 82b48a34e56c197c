"""Synthetic primitive-shape dataset standing in for CAD model collections.

Every primitive is built upright (its symmetry axis along +Z), so rotations
about Z keep the canonical pose meaningful while arbitrary rotations do not.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import PointCloud, normalize_cloud, sample_mesh_surface

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "capsule", "ellipsoid")
# The cube is left out of the default set: a coordinate-difference model
# trained on upright cubes still recognizes them after arbitrary rotation,
# so the class says little about rotation transfer.
DEFAULT_CLASSES = ("cylinder", "cone", "torus", "pyramid", "capsule")


def _grid(fn, nu: int, nv: int, wrap_u: bool = True):
    """Triangulate a parametric surface ``fn(u, v)`` over [0,1]^2."""
    u = np.linspace(0.0, 1.0, nu + (0 if wrap_u else 1), endpoint=not wrap_u)
    v = np.linspace(0.0, 1.0, nv + 1)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    verts = fn(uu.ravel(), vv.ravel())
    cols = nv + 1
    faces = []
    n_u = len(u)
    for i in range(n_u if wrap_u else n_u - 1):
        i2 = (i + 1) % n_u
        for j in range(nv):
            a, b = i * cols + j, i2 * cols + j
            faces += [(a, b, b + 1), (a, b + 1, a + 1)]
    return verts, np.array(faces)


def _merge(*meshes):
    verts, faces, off = [], [], 0
    for v, f in meshes:
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    return np.concatenate(verts), np.concatenate(faces)


def _disk(radius: float, z: float, n: int = 48):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    rim = np.stack([radius * np.cos(t), radius * np.sin(t), np.full(n, z)], axis=1)
    verts = np.vstack([[0.0, 0.0, z], rim])
    faces = np.array([(0, 1 + i, 1 + (i + 1) % n) for i in range(n)])
    return verts, faces


def _revolve(profile_r, profile_z, n: int = 64, m: int = 24):
    """Surface of revolution about Z from a profile parameterized on [0, 1]."""
    def fn(u, v):
        t = 2 * np.pi * u
        r, z = profile_r(v), profile_z(v)
        return np.stack([r * np.cos(t), r * np.sin(t), z], axis=1)
    return _grid(fn, n, m)


def shape_mesh(name: str):
    """Vertices and triangles of an upright primitive, roughly unit-sized."""
    if name == "cube":
        v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * 0.5
        f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
             (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
        return v, np.array(f)
    if name == "pyramid":
        v = np.array([[-0.6, -0.6, -0.4], [0.6, -0.6, -0.4], [0.6, 0.6, -0.4],
                      [-0.6, 0.6, -0.4], [0.0, 0.0, 0.8]])
        f = [(0, 2, 1), (0, 3, 2), (0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
        return v, np.array(f)
    if name == "cylinder":
        side = _revolve(lambda v: np.full_like(v, 0.45), lambda v: -0.8 + 1.6 * v, m=8)
        return _merge(side, _disk(0.45, -0.8), _disk(0.45, 0.8))
    if name == "cone":
        side = _revolve(lambda v: 0.6 * (1 - v), lambda v: -0.6 + 1.4 * v, m=8)
        return _merge(side, _disk(0.6, -0.6))
    if name == "torus":
        def fn(u, v):
            t, p = 2 * np.pi * u, 2 * np.pi * v
            r = 0.7 + 0.25 * np.cos(p)
            return np.stack([r * np.cos(t), r * np.sin(t), 0.25 * np.sin(p)], axis=1)
        return _grid(fn, 64, 24)
    if name == "capsule":
        # cylinder of half-length 0.5 capped by hemispheres of radius 0.35
        def r(v):
            s = 3 * v
            return np.where(s < 1, 0.35 * np.sin(0.5 * np.pi * s),
                            np.where(s < 2, 0.35, 0.35 * np.cos(0.5 * np.pi * (s - 2))))

        def z(v):
            s = 3 * v
            return np.where(s < 1, -0.5 - 0.35 * np.cos(0.5 * np.pi * s),
                            np.where(s < 2, -0.5 + (s - 1), 0.5 + 0.35 * np.sin(0.5 * np.pi * (s - 2))))
        return _revolve(r, z, m=48)
    if name in ("sphere", "ellipsoid"):
        axes = np.array([1.0, 1.0, 1.0]) if name == "sphere" else np.array([1.0, 0.6, 0.35])

        def fn(u, v):
            t, p = 2 * np.pi * u, np.pi * v
            return np.stack([np.sin(p) * np.cos(t), np.sin(p) * np.sin(t), -np.cos(p)], axis=1) * axes
        return _grid(fn, 64, 32)
    raise ValueError(f"unknown shape {name!r}; expected one of {SHAPES}")


def sample_shape(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly on the surface of a primitive (before any augmentation)."""
    if name == "sphere":
        p = rng.standard_normal((n, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True)
    verts, faces = shape_mesh(name)
    return sample_mesh_surface(verts, faces, n, rng)


@dataclass
class Dataset:
    classes: tuple[str, ...]
    train: list[PointCloud]
    test: list[PointCloud]


def generate_synthetic_dataset(classes=DEFAULT_CLASSES, per_class: int = 100, points: int = 512,
                               seed: int = 0, noise: float = 0.01,
                               scale_range: tuple[float, float] = (0.8, 1.2),
                               train_fraction: float = 0.8) -> Dataset:
    """Surface-sampled, anisotropically scaled, jittered and normalized clouds.

    Each class contributes its first ``round(train_fraction * per_class)``
    samples to the training split and the rest to the test split.
    """
    classes = tuple(classes)
    for c in classes:
        if c not in SHAPES:
            raise ValueError(f"unknown shape {c!r}; expected one of {SHAPES}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    n_train = int(round(train_fraction * per_class))
    train, test = [], []
    for label, name in enumerate(classes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, label, i])
            pts = sample_shape(name, points, rng)
            pts = pts * rng.uniform(*scale_range, size=3)
            pts = pts + noise * rng.standard_normal(pts.shape)
            cloud, _ = normalize_cloud(PointCloud(pts, label=label, id=f"{name}_{i:04d}"))
            (train if i < n_train else test).append(cloud)
    return Dataset(classes, train, test)
