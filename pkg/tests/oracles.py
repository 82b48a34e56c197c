"""Slow, loop-based reimplementations used as independent test oracles."""
import math

import numpy as np

BN_EPS = 1e-5


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def _sub(a, b):
    return [x - y for x, y in zip(a, b)]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def scalar_center(points, nbr_list):
    """Index of the distinct neighbor with the least mean distance to the others."""
    distinct = list(dict.fromkeys(int(j) for j in nbr_list))
    best, best_mean = None, math.inf
    for a in distinct:
        others = [b for b in distinct if b != a]
        mean = sum(_dist(points[a], points[b]) for b in others) / max(len(others), 1)
        if mean < best_mean * (1 - 1e-12) or (abs(mean - best_mean) <= 1e-12 * best_mean
                                               and a < best):
            best, best_mean = a, mean
    return best


def scalar_encoding(kind, p, q, m=None, s=None):
    if kind == "cd":
        return _sub(q, p)
    if kind == "zri":
        a, b = p[:2], q[:2]
        ra, rb = math.hypot(*a), math.hypot(*b)
        theta = 0.0
        if ra >= 1e-12 and rb >= 1e-12:
            theta = math.atan2(abs(a[0] * b[1] - a[1] * b[0]), a[0] * b[0] + a[1] * b[1])
        return [q[2] - p[2], _dist(a, b), ra, rb, theta]
    u = _sub(s, p)
    nu = math.sqrt(_dot(u, u))
    u = [x / nu for x in u]
    pa = _sub(m, p)
    pa = [x - _dot(pa, u) * y for x, y in zip(pa, u)]
    pb = _sub(q, p)
    pb = [x - _dot(pb, u) * y for x, y in zip(pb, u)]
    theta = 0.0
    if math.sqrt(_dot(pa, pa)) >= 1e-12 and math.sqrt(_dot(pb, pb)) >= 1e-12:
        theta = math.atan2(_dot(u, _cross(pa, pb)), _dot(pa, pb))
        if theta <= -math.pi:
            theta = math.pi
    return [math.sqrt(_dot(p, p)), _dist(m, s), _dist(p, s), _dist(p, m), _dist(s, q),
            _dist(m, q), _dist(p, q), theta]


def _layer(params, buffers, name, x):
    """Linear, eval-mode batch norm and ReLU on one vector."""
    W = params[f"{name.replace('bn', 'fc')}.weight"]
    b = params[f"{name.replace('bn', 'fc')}.bias"]
    out = []
    for o in range(W.shape[0]):
        acc = float(b[o])
        for c in range(W.shape[1]):
            acc += float(W[o, c]) * x[c]
        mean = float(buffers[f"{name}.running_mean"][o])
        var = float(buffers[f"{name}.running_var"][o])
        y = (acc - mean) / math.sqrt(var + BN_EPS)
        y = y * float(params[f"{name}.gamma"][o]) + float(params[f"{name}.beta"][o])
        out.append(max(y, 0.0))
    return out


def scalar_spe_mlp(params, buffers, prefix, features, positions, neighbor_lists, radius,
                   variant, epoch=0, maskout_epochs=0):
    """Eval-mode selective MLP with explicit loops over queries, neighbors and channels.

    ``params`` and ``buffers`` map names to plain numpy arrays; every row of
    ``features`` is a query.
    """
    kinds = ("cd", "zri", "ari")
    pts = [list(map(float, p)) for p in positions]
    n, c_in = features.shape
    third = c_in // 3
    out = []
    for i in range(n):
        f_i = [float(v) for v in features[i]]
        nbrs = [int(j) for j in neighbor_lists[i]]
        m = pts[scalar_center(pts, nbrs)]
        norm = math.sqrt(_dot(pts[i], pts[i]))
        s = [x + radius * x / norm for x in pts[i]]
        gates = None
        if variant == "sel":
            W, b = params[f"{prefix}.select.weight"], params[f"{prefix}.select.bias"]
            gates = []
            for o in range(W.shape[0]):
                z = float(b[o]) + sum(float(W[o, c]) * f_i[c] for c in range(c_in))
                gates.append(1.0 / (1.0 + math.exp(-z)))
        row = []
        for k, kind in enumerate(kinds):
            width = params[f"{prefix}.{kind}.fc0.weight"].shape[0]
            if variant == "sel" and k < 2 and epoch < maskout_epochs:
                row += [0.0] * width
                continue
            lo = k * third
            pooled = [-math.inf] * width
            for j in nbrs:
                f_j = [float(v) for v in features[j]]
                x = f_i[lo:lo + third] + [f_j[c] - f_i[c] for c in range(lo, lo + third)]
                x += scalar_encoding(kind, pts[i], pts[j], m, s)
                h = _layer(params, buffers, f"{prefix}.{kind}.bn0", x)
                pooled = [max(a, v) for a, v in zip(pooled, h)]
            if gates is not None:
                pooled = [g * v for g, v in zip(gates[k * width:(k + 1) * width], pooled)]
            row += pooled
        out.append(row)
    return np.array(out)
