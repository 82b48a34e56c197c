"""Finite-difference checks of every differentiable operation, in float64.

Each check draws ``trials`` random inputs, reduces the op output with a
random weighted sum and compares reverse-mode gradients with central
differences. The reported error is the worst over trials and inputs.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .. import diff
from ..diff import Tensor
from ..neighborhood import ball_query_positions, center_points
from ..spe import ParamStore, SPEConfig, init_spe_mlp, make_grouping, spe_mlp

Check = Callable[[np.random.Generator], float]


def _reduce(y: Tensor, rng_w: np.ndarray) -> Tensor:
    return diff.weighted_sum(y, rng_w.reshape(y.shape))


def _check_unary(op, shape) -> Check:
    def run(rng):
        x = rng.standard_normal(shape)
        w = rng.standard_normal(op(Tensor(x)).shape)
        return diff.grad_check(lambda t: _reduce(op(t), w), Tensor(x))
    return run


def _check_each(build) -> Check:
    """``build(rng)`` returns (inputs, fn(*tensors) -> Tensor); every input is checked."""
    def run(rng):
        inputs, fn = build(rng)
        w = rng.standard_normal(fn(*[Tensor(a) for a in inputs]).shape)
        worst = 0.0
        for i in range(len(inputs)):
            def f(t, i=i):
                args = [Tensor(a) for a in inputs]
                args[i] = t
                return _reduce(fn(*args), w)
            worst = max(worst, diff.grad_check(f, Tensor(inputs[i])))
        return worst
    return run


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x)


def _linear(rng):
    return [rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)], \
        diff.linear


def _linear_3d(rng):
    return [rng.standard_normal((4, 3, 5)), rng.standard_normal((2, 5)), rng.standard_normal(2)], \
        diff.linear


def _batch_norm(train):
    def build(rng):
        c = 3
        rm, rv = np.zeros(c), np.ones(c) * 1.5

        def fn(x, g, b):
            return diff.batch_norm(x, rm.copy(), rv.copy(), g, b, train)
        return [rng.standard_normal((6, 2, c)), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)], fn
    return build


def _bn_relu_max(train):
    def build(rng):
        c = 4
        rm, rv = np.zeros(c), np.ones(c) * 1.5

        def fn(x, g, b):
            return diff.bn_relu_max(x, rm.copy(), rv.copy(), g, b, train)
        # gapped values keep the per-channel extreme stable under the probe step;
        # mixed-sign scales exercise both the max and the min path
        x = rng.permutation(5 * 6 * c).reshape(5, 6, c) * 0.05 + rng.uniform(0, 0.005, (5, 6, c))
        return [x, np.array([1.2, -0.7, 0.5, -1.1]), rng.standard_normal(c) * 0.5], fn
    return build


def _pair_linear(rng):
    n, m, k, c, w, o = 7, 4, 3, 2, 3, 5
    qr = rng.integers(0, n, m)
    nr = rng.integers(0, n, (m, k))
    P = rng.standard_normal((m, k, w))
    return [rng.standard_normal((n, c)), rng.standard_normal((o, 2 * c + w)),
            rng.standard_normal(o)], \
        lambda f, W, b: diff.pair_linear(f, qr, nr, W, b, P)


def _gather(rng):
    idx = rng.integers(0, 5, (4, 3))
    return [rng.standard_normal((5, 2))], lambda x: diff.gather_rows(x, idx)


def _max_neighbors(rng):
    # distinct values with clear gaps so the argmax is stable under the probe step
    x = rng.permutation(4 * 5 * 3).reshape(4, 5, 3) * 0.1 + rng.uniform(0, 0.01, (4, 5, 3))
    return [x], diff.max_over_neighbors


def _cross_entropy(rng):
    labels = rng.integers(0, 4, 5)
    return [rng.standard_normal((5, 4))], lambda z: diff.cross_entropy(z, labels, 0.1)


def _binary(op):
    def build(rng):
        return [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], op
    return build


def _concat(rng):
    return [rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 4))], \
        lambda a, b: diff.concat_last([a, b])


def _slice(rng):
    ws = rng.standard_normal(3)
    return [rng.standard_normal((4, 6))], \
        lambda x: diff.concat_last([diff.mul_const(s, np.full(s.shape, wk))
                                    for s, wk in zip(diff.slice_last(x, 3), ws)])


# ReLU and max-pool kinks are dense in a composed network; a smaller probe
# step makes straddling one less likely.
COMPOSED_STEP = 1e-6

PROBED_PARAMS = ("s.select.weight", "s.select.bias", "s.cd.fc0.weight", "s.zri.fc0.bias",
                 "s.ari.fc0.weight", "s.ari.bn0.gamma", "s.cd.bn0.beta")


def _composed_spe(variant: str) -> Check:
    """Composed selective MLP on a 32-point cloud, checked w.r.t. features and weights."""
    def run(rng):
        n, c_in, c_out, k, radius = 32, 6, 6, 8, 0.6
        pts = rng.uniform(-1, 1, (n, 3))
        nbrs = ball_query_positions(pts, pts, radius, k)
        grouping = make_grouping(pts, np.arange(n), nbrs, center_points(pts, nbrs), radius,
                                 dtype=np.float64)
        cfg = SPEConfig(c_in, c_out, k, radius, 1, 0, variant)
        store = ParamStore()
        init_spe_mlp(store, "s", cfg, rng)
        store.astype(np.float64)
        f0 = rng.standard_normal((n, c_in))
        w = rng.standard_normal((n, c_out))

        def loss_f(t):
            return diff.weighted_sum(spe_mlp(store, "s", t, grouping, cfg, train=True), w)

        worst = diff.grad_check(loss_f, Tensor(f0), COMPOSED_STEP)
        # Weights are probed with eval-mode normalization: under batch statistics a
        # bias (or a constant encoding column) feeding a normalization has an exactly
        # zero gradient, and a zero is not a meaningful relative-error target.
        for key, buf in store.buffers.items():
            store.buffers[key] = rng.uniform(0.5, 1.5, buf.shape) if key.endswith("var") \
                else rng.standard_normal(buf.shape) * 0.1
        for name in PROBED_PARAMS:
            if name not in store.params:
                continue
            saved = store.params[name]

            def loss_p(t, name=name, saved=saved):
                # the probe tensor temporarily takes the parameter's slot
                store.params[name] = t
                try:
                    return diff.weighted_sum(
                        spe_mlp(store, "s", Tensor(f0), grouping, cfg, train=False), w)
                finally:
                    store.params[name] = saved

            worst = max(worst, diff.grad_check(loss_p, Tensor(saved.data.copy()), COMPOSED_STEP))
        return worst
    return run


CHECKS: dict[str, Check] = {
    "add": _check_each(_binary(diff.add)),
    "sub": _check_each(_binary(diff.sub)),
    "mul": _check_each(_binary(diff.mul)),
    "mul_const": _check_unary(lambda t: diff.mul_const(t, np.arange(12.0).reshape(3, 4)), (3, 4)),
    "sigmoid": _check_unary(diff.sigmoid, (3, 4)),
    "relu": lambda rng: diff.grad_check(
        lambda t: diff.weighted_sum(diff.relu(t), np.linspace(-1, 2, 12).reshape(3, 4)),
        Tensor(_away_from_zero(rng, (3, 4)))),
    "linear": _check_each(_linear),
    "linear_3d": _check_each(_linear_3d),
    "batch_norm_train": _check_each(_batch_norm(True)),
    "batch_norm_eval": _check_each(_batch_norm(False)),
    "concat_last": _check_each(_concat),
    "slice_last": _check_each(_slice),
    "reshape": _check_unary(lambda t: diff.reshape(t, (6, 2)), (3, 4)),
    "gather_rows": _check_each(_gather),
    "expand_neighbors": _check_unary(lambda t: diff.expand_neighbors(t, 3), (4, 2)),
    "pair_linear": _check_each(_pair_linear),
    "max_over_neighbors": _check_each(_max_neighbors),
    "bn_relu_max_train": _check_each(_bn_relu_max(True)),
    "bn_relu_max_eval": _check_each(_bn_relu_max(False)),
    "total": _check_unary(diff.total, (3, 4)),
    "weighted_sum": _check_unary(lambda t: diff.weighted_sum(t, np.ones((3, 4)) * 0.5), (3, 4)),
    "cross_entropy": _check_each(_cross_entropy),
    "spe_mlp_sel": _composed_spe("sel"),
    "spe_mlp_fused": _composed_spe("fused"),
    "spe_mlp_ari": _composed_spe("ari"),
}


def run_gradchecks(seed: int = 0, trials: int = 10, names=None) -> Iterator[tuple[str, float]]:
    """Yield ``(name, worst relative error)`` per operation over ``trials`` random draws."""
    for name, check in CHECKS.items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, len(name)] + [ord(ch) for ch in name])
        yield name, max(check(rng) for _ in range(trials))
