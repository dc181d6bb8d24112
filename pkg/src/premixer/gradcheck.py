"""Finite-difference verification of every hand-written backward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass


from premixer.encodings import NodeContextFusion, build_stpe
from premixer.forecaster import (
    BasicSpatialLayer,
    ModelSpec,
    PreMixer,
    StructuredSpatialLayer,
    TemporalMixer,
)
from premixer.pretrain import PIEncoder, contrastive_loss, pretrain_objective, recon_loss, recon_loss_grad
from premixer.tensorcore import (
    Linear,
    Rng,
    dropout,
    gelu,
    gelu_grad,
    grad_check,
    layer_norm,
    layer_norm_backward,
    matmul,
    matmul_backward,
    relu,
    relu_grad,
    sigmoid,
    softmax_rows,
)

EPS = 1e-4
TOL = 1e-4
MAX_CHECKS = 24


@dataclass
class CheckRow:
    name: str
    seeds: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _param_fn(params, loss_and_backward):
    def fn(*_):
        for p in params:
            p.zero_grad()
        loss = loss_and_backward()
        return loss, [p.grad.copy() for p in params]

    return fn


def _layer_with_input(layer, x, w):
    """Check d(sum(w * layer(x))) w.r.t. x and every layer parameter."""
    params = layer.parameters()

    def fn(*_):
        for p in params:
            p.zero_grad()
        y = layer.forward(x)
        dx = layer.backward(w)
        return float((w * y).sum()), [dx] + [p.grad.copy() for p in params]

    return fn, [x] + [p.value for p in params]


# -- individual checks: each returns (fn, inputs) for one seed ---------------


def check_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))

    def fn(a_, b_):
        da, db = matmul_backward(w, a_, b_)
        return float((w * matmul(a_, b_)).sum()), [da, db]

    return fn, [a, b]


def check_linear(rng):
    layer = Linear("lin", 5, 3, rng)
    return _layer_with_input(layer, rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 4, 3)))


def _elementwise(f, fprime):
    def build(rng):
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(4, 6))
        return (lambda x_: (float((w * f(x_)).sum()), [w * fprime(x_)])), [x]

    return build


def check_layer_norm(rng):
    x = rng.normal(size=(3, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))

    def fn(x_, g_, b_):
        y, cache = layer_norm(x_, g_, b_)
        dx, dg, db = layer_norm_backward(w, cache)
        return float((w * y).sum()), [dx, dg, db]

    return fn, [x, g, b]


def check_dropout(rng):
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 4))
    seed = int(rng.integers(0, 2**31))

    def fn(x_):
        y, mask = dropout(x_, 0.3, Rng(seed), True)
        return float((w * y).sum()), [w * mask]

    return fn, [x]


def check_softmax(rng):
    x = rng.normal(size=(3, 5)) * 3.0
    w = rng.normal(size=(3, 5))

    def fn(x_):
        p = softmax_rows(x_)
        dp = w
        dx = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        return float((w * p).sum()), [dx]

    return fn, [x]


def check_contrastive(rng):
    z1, z2 = rng.normal(size=(2, 3, 2, 4)), rng.normal(size=(2, 3, 2, 4))

    def fn(a, b):
        loss, da, db = contrastive_loss(a, b, return_grad=True)
        return loss, [da, db]

    return fn, [z1, z2]


def check_recon(rng):
    x = rng.normal(size=(3, 2, 4))
    v1, v2 = rng.normal(size=x.shape), rng.normal(size=x.shape)
    m = (rng.random((3, 2)) < 0.5).astype(float)

    def fn(a, b):
        return recon_loss(x, a, b, m), list(recon_loss_grad(x, a, b, m))

    return fn, [v1, v2]


def check_node_context(rng):
    N, d_pe, d_emb, d_ctx = 4, 8, 3, 5
    fusion = NodeContextFusion(N, d_pe, d_emb, d_ctx, rng)
    stpe = build_stpe(2, N, d_pe)
    w = rng.normal(size=(N, d_ctx))
    params = fusion.parameters()

    def lb():
        c = fusion.forward(stpe)
        fusion.backward(w)
        return float((w * c).sum())

    return _param_fn(params, lb), [p.value for p in params]


def check_temporal_mixer(rng):
    layer = TemporalMixer(6, 8, rng)
    layer.norm.gamma.value[...] = rng.normal(size=6)
    layer.norm.beta.value[...] = rng.normal(size=6)
    return _layer_with_input(layer, rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 3, 6)))


def check_structured_spatial(rng, mode="mean"):
    N, H, d_ctx = 4, 5, 3
    layer = StructuredSpatialLayer("sp", H, d_ctx, rng, use_context=True, mode=mode)
    h = rng.normal(size=(2, N, H))
    ctx = rng.normal(size=(N, d_ctx))
    w = rng.normal(size=(2, N, H))
    params = layer.parameters()

    def fn(*_):
        for p in params:
            p.zero_grad()
        y = layer.forward(h, ctx)
        dh, dctx = layer.backward(w)
        return float((w * y).sum()), [dh, dctx] + [p.grad.copy() for p in params]

    return fn, [h, ctx] + [p.value for p in params]


def check_basic_spatial(rng):
    N, H = 4, 5
    layer = BasicSpatialLayer("bs", N, rng)
    h = rng.normal(size=(2, N, H))
    w = rng.normal(size=(2, N, H))
    params = layer.parameters()

    def fn(*_):
        for p in params:
            p.zero_grad()
        y = layer.forward(h)
        dh, _ = layer.backward(w)
        return float((w * y).sum()), [dh] + [p.grad.copy() for p in params]

    return fn, [h] + [p.value for p in params]


def toy_piencoder(rng, L=4, D=5):
    return PIEncoder(P=L, D=D, rng=rng, L=L, C=1)


def check_piencoder(rng):
    model = toy_piencoder(rng)
    x = rng.normal(size=(2, 8, 2, 1))  # 2 windows, 2 patches of 4, 2 nodes
    mask_seed = int(rng.integers(0, 2**31))
    params = model.parameters()
    return (
        _param_fn(params, lambda: pretrain_objective(model, x, 0.5, Rng(mask_seed)).total),
        [p.value for p in params],
    )


def toy_premixer(rng, **overrides):
    kw = dict(N=3, T=4, horizon=4, d_pe=4, d_model=2, D=5, d_emb=3, d_ctx=4,
              spatial_layers=2, dropout=0.0, seed=int(rng.integers(0, 2**31)))
    kw.update(overrides)
    spec = ModelSpec(**kw)
    enc = None if spec.no_pretrain else toy_piencoder(rng, L=spec.T, D=spec.D)
    return PreMixer(spec, enc)


def _premixer_check(**overrides):
    def build(rng):
        model = toy_premixer(rng, **overrides)
        s = model.spec
        x = rng.normal(size=(2, s.T, s.N, s.c_in))
        y = rng.normal(size=(2, s.horizon, s.N, s.c_out))
        params = model.trainable_parameters()
        return _param_fn(params, lambda: model.loss_and_grad(x, y)), [p.value for p in params]

    return build


CHECKS = {
    "matmul": check_matmul,
    "linear": check_linear,
    "relu": _elementwise(relu, relu_grad),
    "gelu": _elementwise(gelu, gelu_grad),
    "sigmoid": _elementwise(sigmoid, lambda x: sigmoid(x) * (1 - sigmoid(x))),
    "layer_norm": check_layer_norm,
    "dropout": check_dropout,
    "softmax_rows": check_softmax,
    "recon_loss": check_recon,
    "contrastive_loss": check_contrastive,
    "node_context": check_node_context,
    "temporal_mixer": check_temporal_mixer,
    "spatial_structured_mean": check_structured_spatial,
    "spatial_structured_sum": lambda rng: check_structured_spatial(rng, "sum"),
    "spatial_basic": check_basic_spatial,
    "piencoder_total_loss": check_piencoder,
    "premixer_regression_loss": _premixer_check(),
    "premixer_basic_mixer": _premixer_check(spatial_mode="basic"),
    "premixer_no_pretrain": _premixer_check(no_pretrain=True),
    "premixer_no_context": _premixer_check(no_context=True),
    "premixer_no_stpe": _premixer_check(no_stpe=True),
}


def run_check(name, seeds=10, eps=EPS, tol=TOL, max_checks=MAX_CHECKS) -> CheckRow:
    worst = 0.0
    for seed in range(seeds):
        rng = Rng(1000 + seed)
        fn, inputs = CHECKS[name](rng)
        worst = max(worst, grad_check(fn, inputs, eps=eps, max_checks=max_checks, rng=rng))
    return CheckRow(name, seeds, worst, tol)


def run_suite(seeds=10, eps=EPS, tol=TOL, names=None):
    t0 = time.perf_counter()
    rows = [run_check(n, seeds, eps, tol) for n in (names or CHECKS)]
    return rows, time.perf_counter() - t0


def format_table(rows) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  seeds  max_rel_err  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.seeds:>5}  {r.max_rel_err:11.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
