"""Gradient-check suite: every differentiable op against central finite
differences, plus the full reconstruction loss on a micro model.

Each check builds its own inputs from a fixed seed at call time, so the
whole suite runs under the caller's (double) precision mode.
"""

from __future__ import annotations

import numpy as np

from . import tensor as t
from .model import ArchConfig, decode, encode, init_params, mae_loss
from .patches import PatchConfig, make_mask_plan
from .tensor import Tensor, grad_check

OP_TOL = 1e-6
LOSS_TOL = 1e-5


def _rng(tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([11, tag])))


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Project a tensor-valued op to a scalar with fixed random weights."""
    return t.sum_(t.mul(out, Tensor(weights)))


def _binary_check(op, shapes, tag: int, positive: bool = False):
    def run() -> float:
        rng = _rng(tag)
        worst = 0.0
        for sa, sb in shapes:
            a_data = rng.standard_normal(sa)
            b_data = rng.standard_normal(sb)
            if positive:
                a_data = np.abs(a_data) + 0.5
                b_data = np.abs(b_data) + 0.5
            a = Tensor(a_data, requires_grad=True)
            b = Tensor(b_data, requires_grad=True)
            w = rng.standard_normal(np.broadcast_shapes(sa, sb))
            worst = max(worst, grad_check(
                lambda x, y, w=w: _weighted(op(x, y), w), [a, b]))
        return worst
    return run


def _unary_check(op, shapes, tag: int, positive: bool = False):
    def run() -> float:
        rng = _rng(tag)
        worst = 0.0
        for shape in shapes:
            data = rng.standard_normal(shape)
            if positive:
                data = np.abs(data) + 0.5
            a = Tensor(data, requires_grad=True)
            w = rng.standard_normal(op(Tensor(data)).data.shape)
            worst = max(worst, grad_check(lambda x, w=w: _weighted(op(x), w), [a]))
        return worst
    return run


def _matmul_check():
    rng = _rng(20)
    worst = 0.0
    for sa, sb in [((5, 7), (7, 3)), ((2, 3, 4), (4, 5)), ((3, 4), (2, 4, 5))]:
        a = Tensor(rng.standard_normal(sa), requires_grad=True)
        b = Tensor(rng.standard_normal(sb), requires_grad=True)
        w = rng.standard_normal(np.matmul(a.data, b.data).shape)
        worst = max(worst, grad_check(
            lambda x, y, w=w: _weighted(t.matmul(x, y), w), [a, b]))
    return worst


def _reduction_check(op, tag: int):
    def run() -> float:
        rng = _rng(tag)
        worst = 0.0
        for shape, axis in [((3, 4), None), ((2, 3, 4), -1), ((4, 3), 0)]:
            a = Tensor(rng.standard_normal(shape), requires_grad=True)
            probe = op(Tensor(a.data), axis)
            w = rng.standard_normal(probe.data.shape) if probe.data.shape else None
            if w is None:
                fn = lambda x: op(x, axis)
            else:
                fn = lambda x, w=w: _weighted(op(x, axis), w)
            worst = max(worst, grad_check(fn, [a]))
        return worst
    return run


def _mse_check():
    rng = _rng(30)
    worst = 0.0
    for shape in [(3, 4), (2, 3, 4), (7,)]:
        p = Tensor(rng.standard_normal(shape), requires_grad=True)
        q = Tensor(rng.standard_normal(shape), requires_grad=True)
        worst = max(worst, grad_check(lambda x, y: t.mse(x, y), [p, q]))
    return worst


def _shape_op_checks():
    rng = _rng(40)
    worst = 0.0
    cases = [
        lambda x: t.reshape(x, (3, 4)),
        lambda x: t.reshape(x, (2, 6)),
        lambda x: t.reshape(x, (12,)),
    ]
    for fn in cases:
        a = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
        w = rng.standard_normal(fn(Tensor(a.data)).data.shape)
        worst = max(worst, grad_check(lambda x, fn=fn, w=w: _weighted(fn(x), w), [a]))
    return worst


def _transpose_check():
    rng = _rng(41)
    worst = 0.0
    for axes in [(1, 0, 2), (2, 0, 1), (0, 2, 1)]:
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        w = rng.standard_normal(np.transpose(a.data, axes).shape)
        worst = max(worst, grad_check(
            lambda x, axes=axes, w=w: _weighted(t.transpose(x, axes), w), [a]))
    return worst


def _narrow_check():
    rng = _rng(42)
    worst = 0.0
    for axis, start, length in [(0, 1, 2), (1, 0, 3), (2, 2, 2)]:
        a = Tensor(rng.standard_normal((4, 4, 4)), requires_grad=True)
        w = rng.standard_normal(t.narrow(Tensor(a.data), axis, start, length).data.shape)
        worst = max(worst, grad_check(
            lambda x, a_=axis, s=start, ln=length, w=w: _weighted(t.narrow(x, a_, s, ln), w),
            [a]))
    return worst


def _concat_check():
    rng = _rng(43)
    worst = 0.0
    for axis in [0, 1, -1]:
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        w = rng.standard_normal(np.concatenate([a.data, b.data], axis=axis).shape)
        worst = max(worst, grad_check(
            lambda x, y, axis=axis, w=w: _weighted(t.concat([x, y], axis), w), [a, b]))
    return worst


def _expand_check():
    rng = _rng(44)
    worst = 0.0
    for src, dst in [((1, 3), (4, 3)), ((2, 1, 2), (2, 5, 2)), ((1,), (6,))]:
        a = Tensor(rng.standard_normal(src), requires_grad=True)
        w = rng.standard_normal(dst)
        worst = max(worst, grad_check(
            lambda x, dst=dst, w=w: _weighted(t.expand(x, dst), w), [a]))
    return worst


def _gather_check():
    rng = _rng(45)
    worst = 0.0
    for n, k in [(5, 3), (4, 4), (6, 2)]:
        a = Tensor(rng.standard_normal((n, 3)), requires_grad=True)
        idx = rng.integers(0, n, size=k)
        w = rng.standard_normal((k, 3))
        worst = max(worst, grad_check(
            lambda x, idx=idx, w=w: _weighted(t.gather_rows(x, idx), w), [a]))
    batched = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
    idx = np.stack([rng.permutation(5)[:3] for _ in range(2)])
    w = rng.standard_normal((2, 3, 3))
    worst = max(worst, grad_check(
        lambda x, idx=idx, w=w: _weighted(t.gather_rows(x, idx), w), [batched]))
    return worst


def _scatter_check():
    rng = _rng(46)
    worst = 0.0
    for n, k in [(5, 3), (4, 4), (6, 2)]:
        a = Tensor(rng.standard_normal((k, 3)), requires_grad=True)
        idx = rng.permutation(n)[:k]
        w = rng.standard_normal((n, 3))
        worst = max(worst, grad_check(
            lambda x, idx=idx, n=n, w=w: _weighted(t.scatter_rows(x, idx, n), w), [a]))
    return worst


def _conv_transpose_check():
    rng = _rng(47)
    worst = 0.0
    cases = [((2, 3, 3), (2, 4, 2, 2), False),
             ((2, 2, 3, 3), (2, 3, 2, 2), True),
             ((1, 1, 1), (1, 2, 2, 2), True)]
    for x_shape, w_shape, with_bias in cases:
        x = Tensor(rng.standard_normal(x_shape), requires_grad=True)
        wt = Tensor(rng.standard_normal(w_shape), requires_grad=True)
        inputs = [x, wt]
        bias = None
        if with_bias:
            bias = Tensor(rng.standard_normal(w_shape[1]), requires_grad=True)
            inputs.append(bias)
        probe = t.conv_transpose2d(Tensor(x.data), Tensor(wt.data),
                                   Tensor(bias.data) if bias is not None else None)
        w = rng.standard_normal(probe.data.shape)

        def fn(*args, w=w, with_bias=with_bias):
            if with_bias:
                return _weighted(t.conv_transpose2d(args[0], args[1], args[2]), w)
            return _weighted(t.conv_transpose2d(args[0], args[1]), w)

        worst = max(worst, grad_check(fn, inputs))
    return worst


def _cross_entropy_check():
    rng = _rng(48)
    worst = 0.0
    for b, k in [(4, 3), (2, 5), (6, 2)]:
        logits = Tensor(rng.standard_normal((b, k)), requires_grad=True)
        labels = rng.integers(0, k, size=b)
        worst = max(worst, grad_check(
            lambda z, labels=labels: t.cross_entropy(z, labels), [logits]))
    return worst


def _bce_check():
    rng = _rng(49)
    worst = 0.0
    for shape in [(2, 3, 3), (4, 4), (8,)]:
        logits = Tensor(rng.standard_normal(shape), requires_grad=True)
        targets = Tensor((rng.random(shape) > 0.5).astype(np.float64))
        worst = max(worst, grad_check(
            lambda z, targets=targets: t.bce_with_logits(z, targets), [logits]))
    return worst


def _full_mae_loss_check():
    cfg = ArchConfig(PatchConfig(8, 4), enc_dim=8, enc_depth=1, enc_heads=2,
                     dec_dim=8, dec_depth=1, dec_heads=2)
    model = init_params(cfg, seed=3)
    rng = _rng(99)
    images = Tensor(rng.random((2, 1, 8, 8)))
    plans = [make_mask_plan(cfg.patch.num_patches, 0.5, rng) for _ in range(2)]
    inputs = [model.params[k] for k in sorted(model.params)]

    def fn(*_):
        pred = decode(encode(images, plans, model), plans, model)
        return mae_loss(pred, images, plans)

    return grad_check(fn, inputs)


def _corrupted_gelu_check():
    """Harness sanity hook: a deliberately wrong backward rule must fail."""
    rng = _rng(66)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))

    def broken_gelu(a: Tensor) -> Tensor:
        good = t.gelu(Tensor(a.data))

        def backward(g):
            probe = Tensor(a.data.copy(), requires_grad=True)
            ref = t.gelu(probe)
            t.sum_(t.mul(ref, Tensor(g))).backward()
            t._accumulate(a, probe.grad * 1.01)

        return Tensor._result(good.data, (a,), backward)

    return grad_check(lambda v: _weighted(broken_gelu(v), w), [x])


def suite(include_corrupted: bool = False):
    """(name, zero-arg check, tolerance) triples covering every op."""
    checks = [
        ("add", _binary_check(t.add, [((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((5, 1), (6,))], 1), OP_TOL),
        ("sub", _binary_check(t.sub, [((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((5, 1), (6,))], 2), OP_TOL),
        ("mul", _binary_check(t.mul, [((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((5, 1), (6,))], 3), OP_TOL),
        ("scale", _unary_check(lambda x: t.scale(x, 1.7), [(3, 4), (7,), (2, 2, 2)], 4), OP_TOL),
        ("gelu", _unary_check(t.gelu, [(3, 4), (17,), (2, 3, 2)], 5), OP_TOL),
        ("sigmoid", _unary_check(t.sigmoid, [(3, 4), (7,), (2, 3, 2)], 6), OP_TOL),
        ("log", _unary_check(t.log, [(3, 4), (7,), (2, 3, 2)], 7, positive=True), OP_TOL),
        ("softmax", _unary_check(lambda x: t.softmax(x, -1), [(3, 5), (4, 3), (2, 3, 4)], 8), OP_TOL),
        ("layer_norm", _unary_check(lambda x: t.layer_norm(x, -1), [(3, 8), (2, 4, 6), (5, 5)], 9), OP_TOL),
        ("mean", _reduction_check(t.mean, 10), OP_TOL),
        ("variance", _reduction_check(t.variance, 11), OP_TOL),
        ("sum", _reduction_check(t.sum_, 12), OP_TOL),
        ("mse", _mse_check, OP_TOL),
        ("matmul", _matmul_check, OP_TOL),
        ("reshape", _shape_op_checks, OP_TOL),
        ("transpose", _transpose_check, OP_TOL),
        ("narrow", _narrow_check, OP_TOL),
        ("concat", _concat_check, OP_TOL),
        ("expand", _expand_check, OP_TOL),
        ("gather_rows", _gather_check, OP_TOL),
        ("scatter_rows", _scatter_check, OP_TOL),
        ("conv_transpose2d", _conv_transpose_check, OP_TOL),
        ("cross_entropy", _cross_entropy_check, OP_TOL),
        ("bce_with_logits", _bce_check, OP_TOL),
        ("full_mae_loss", _full_mae_loss_check, LOSS_TOL),
    ]
    out = [(name, fn, tol) for (name, fn, tol) in checks]
    if include_corrupted:
        out.append(("corrupted_gelu_sanity", _corrupted_gelu_check, OP_TOL))
    return out
