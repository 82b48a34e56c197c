"""Point clouds, rotations and normalization.

All geometry is float64. Rotations act about the origin, so clouds are
centered (``normalize_cloud``) before any rotation is applied.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

ROTATION_TOL = 1e-12


@dataclass(frozen=True)
class PointCloud:
    """N points in model coordinates plus an optional class label."""

    positions: np.ndarray
    label: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pos)):
            raise ValueError("point coordinates must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return replace(self, positions=positions)


def is_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    return bool(
        np.all(np.abs(R @ R.T - np.eye(3)) <= tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def rotate(cloud: PointCloud, R: np.ndarray) -> PointCloud:
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R, tol=1e-9):
        raise ValueError("R is not a proper rotation matrix")
    return cloud.with_positions(cloud.positions @ R.T)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation_z(seed: int) -> np.ndarray:
    """Rotation about +Z by an angle drawn uniformly from [0, 2*pi)."""
    rng = np.random.default_rng(seed)
    return rotation_z(rng.uniform(0.0, 2.0 * np.pi))


def random_rotation_so3(seed: int) -> np.ndarray:
    """Haar-uniform rotation: four standard normals, normalized to a unit quaternion."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    n = np.linalg.norm(q)
    while n < 1e-8:
        q = rng.standard_normal(4)
        n = np.linalg.norm(q)
    return quaternion_to_matrix(q / n)


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, bool]:
    """Center on the centroid and scale the farthest point to unit norm.

    Returns ``(cloud, degenerate)``. ``degenerate`` is True when every point
    coincides; the points are then centered and the scale is left at 1.
    """
    pos = cloud.positions
    centered = pos - pos.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius <= 1e-12:
        return cloud.with_positions(np.zeros_like(pos)), True
    return cloud.with_positions(centered / radius), False


# ---------------------------------------------------------------------------
# file formats


def read_xyz(path: str | Path, label: Optional[int] = None) -> PointCloud:
    """Read a text cloud: one ``x,y,z`` line per point."""
    pts = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return PointCloud(pts[:, :3], label=label, id=Path(path).stem)


def write_xyz(cloud: PointCloud, path: str | Path) -> None:
    np.savetxt(path, cloud.positions, delimiter=",", fmt="%.17g")


def read_off(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices (V, 3) and triangle faces (F, 3) of an OFF mesh.

    Polygons with more than three vertices are fan-triangulated.
    """
    tokens = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.append(line)
    if not tokens or not tokens[0].startswith("OFF"):
        raise ValueError(f"{path}: missing OFF header")
    head = tokens[0][3:].split()
    rest = tokens[1:]
    if not head:
        head, rest = rest[0].split(), rest[1:]
    nv, nf = int(head[0]), int(head[1])
    verts = np.array([[float(v) for v in rest[i].split()[:3]] for i in range(nv)])
    faces = []
    for line in rest[nv : nv + nf]:
        vals = [int(v) for v in line.split()]
        poly = vals[1 : 1 + vals[0]]
        for k in range(1, len(poly) - 1):
            faces.append((poly[0], poly[k], poly[k + 1]))
    return verts.reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def sample_mesh_surface(
    verts: np.ndarray, faces: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Area-weighted uniform sampling of ``n`` points on a triangle mesh."""
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(faces), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a[tri] + u[:, None] * (b[tri] - a[tri]) + v[:, None] * (c[tri] - a[tri])


def load_cloud(path: str | Path, n_points: int = 1024, seed: int = 0,
               label: Optional[int] = None) -> PointCloud:
    """Load a ``.off`` mesh (surface-sampled) or a text cloud, normalized."""
    path = Path(path)
    if path.suffix.lower() == ".off":
        verts, faces = read_off(path)
        pts = sample_mesh_surface(verts, faces, n_points, np.random.default_rng(seed))
        cloud = PointCloud(pts, label=label, id=path.stem)
    else:
        cloud = read_xyz(path, label=label)
    cloud, degenerate = normalize_cloud(cloud)
    if degenerate:
        warnings.warn(f"{path}: all points coincide, scale left at 1")
    return cloud


def read_manifest(path: str | Path) -> list[tuple[Path, int]]:
    """Parse a dataset manifest of ``path,label_index`` lines.

    Relative paths resolve against the manifest's directory.
    """
    base = Path(path).parent
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            p, lab = line.rsplit(",", 1)
            out.append((base / p.strip(), int(lab)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: expected 'path,label_index'") from exc
    return out
