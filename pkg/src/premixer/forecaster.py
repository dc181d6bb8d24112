"""PreMixer forecaster: STPE-augmented input embedding, fusion with frozen
PIEncoder representations, a residual TemporalMixer, a stack of spatial
mixers and a direct multi-horizon linear head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from premixer.encodings import NodeContextFusion, Stpe, build_stpe, build_temporal_pe
from premixer.errors import ConfigError, ShapeError
from premixer.pretrain import PIEncoder
from premixer.tensorcore import (
    LayerNorm,
    Linear,
    Parameter,
    Rng,
    dropout,
    dropout_backward,
    gelu,
    gelu_grad,
    init_uniform,
    matmul,
    sigmoid,
)

SPATIAL_MODES = ("structured", "basic")
AGGREGATIONS = ("mean", "sum")


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------


def fold_nodes(e: np.ndarray) -> np.ndarray:
    """(B, T, N, d) -> (B, N, T * d)."""
    B, T, N, d = e.shape
    return np.ascontiguousarray(e.transpose(0, 2, 1, 3)).reshape(B, N, T * d)


def unfold_nodes(h: np.ndarray, T: int) -> np.ndarray:
    B, N, HT = h.shape
    return np.ascontiguousarray(h.reshape(B, N, T, HT // T).transpose(0, 2, 1, 3))


def short_patch(x_flow: np.ndarray) -> np.ndarray:
    """(B, T, N, C) short window -> one patch per node, (B, N, T * C)."""
    return fold_nodes(x_flow)


def pair_gates(c, psi_w, psi_b):
    """``g[i, j] = sigmoid(psi([c_i || c_j]))`` as an (N, N) matrix."""
    d = c.shape[-1]
    w = psi_w.reshape(-1)
    s = (c @ w[:d])[:, None] + (c @ w[d:])[None, :] + psi_b.reshape(())
    return sigmoid(s)


def _nodes_first(x):
    """(..., N, H) -> (N, prod(...) * H)."""
    n = x.shape[-2]
    if x.ndim == 2:
        return x
    return np.moveaxis(x, -2, 0).reshape(n, -1)


def _node_mix(g, x):
    """``g @ x`` over the node axis of (..., N, H) with a single GEMM."""
    if x.ndim == 2:
        return g @ x
    mixed = g @ _nodes_first(x)
    shape = (x.shape[-2],) + x.shape[:-2] + (x.shape[-1],)
    return np.moveaxis(mixed.reshape(shape), 0, -2)


def spatial_mixer_structured(h, theta, w_m, gates=None, mode="mean"):
    """Forward of one structured spatial layer.

    ``h`` is (..., N, H). Messages ``m_ij = g_ij * ([h_i || h_j] @ w_m)`` are
    reduced over j by sum (``mode="sum"``) or sum / N (``"mean"``); the update
    is ``GELU(h_i @ theta + m_i)``. ``gates=None`` means all gates are 1.
    Returns ``(out, cache)``.
    """
    if mode not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {mode!r}")
    n, hdim = h.shape[-2], h.shape[-1]
    g = np.ones((n, n)) if gates is None else gates
    if g.shape != (n, n):
        raise ShapeError(f"gate matrix {g.shape} does not match {n} nodes")
    scale = 1.0 / n if mode == "mean" else 1.0
    a, b = w_m[:hdim], w_m[hdim:]
    ha = matmul(h, a)
    hb = matmul(h, b)
    r = g.sum(axis=1)
    msg = scale * (r[:, None] * ha + _node_mix(g, hb))
    pre = matmul(h, theta) + msg
    return gelu(pre), (h, theta, w_m, g, scale, ha, hb, pre)


def spatial_mixer_structured_backward(dout, cache):
    """Returns ``(dh, dtheta, dw_m, dgates)``."""
    h, theta, w_m, g, scale, ha, hb, pre = cache
    hdim = h.shape[-1]
    a, b = w_m[:hdim], w_m[hdim:]
    dpre = dout * gelu_grad(pre)
    h2 = h.reshape(-1, hdim)
    dpre2 = dpre.reshape(-1, hdim)
    dtheta = h2.T @ dpre2
    r = g.sum(axis=1)
    dha = scale * r[:, None] * dpre
    dhb = scale * _node_mix(g.T, dpre)
    dw_m = np.concatenate([h2.T @ dha.reshape(-1, hdim), h2.T @ dhb.reshape(-1, hdim)], axis=0)
    dh = matmul(dpre, theta.T) + matmul(dha, a.T) + matmul(dhb, b.T)
    lead = tuple(range(dpre.ndim - 2))
    rowdot = (dpre * ha).sum(axis=(*lead, -1))
    n = dpre.shape[-2]
    # sum_b dpre_b @ hb_b^T as one GEMM over the (batch, feature) axis
    cross = _nodes_first(dpre) @ _nodes_first(hb).T
    dg = scale * (rowdot[:, None] + cross.reshape(n, n))
    return dh, dtheta, dw_m, dg


def spatial_mixer_basic(h, w_channel, bias):
    """``GELU(W_channel @ H + b)`` mixing across the node axis."""
    n = h.shape[-2]
    if w_channel.shape != (n, n):
        raise ShapeError(f"channel-mixing weight {w_channel.shape} built for a different node count than {n}")
    pre = _node_mix(w_channel, h) + bias[:, None]
    return gelu(pre), (h, w_channel, pre)


def spatial_mixer_basic_backward(dout, cache):
    h, w, pre = cache
    dpre = dout * gelu_grad(pre)
    dw = _nodes_first(dpre) @ _nodes_first(h).T
    db = dpre.sum(axis=tuple(range(dpre.ndim - 2)) + (-1,))
    dh = _node_mix(w.T, dpre)
    return dh, dw, db


def regression_loss(y_hat, y) -> float:
    """Mean absolute error over every element."""
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    return float(np.mean(np.abs(y_hat - y)))


def regression_loss_grad(y_hat, y):
    return np.sign(y_hat - y) / y_hat.size


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class TemporalMixer:
    """``H + GELU(LN(H) W1 + b1) W2 + b2`` row-wise per node."""

    def __init__(self, H, H_ff, rng: Rng, p_drop=0.0):
        self.norm = LayerNorm("temporal.norm", H)
        self.fc1 = Linear("temporal.fc1", H, H_ff, rng)
        self.fc2 = Linear("temporal.fc2", H_ff, H, rng)
        self.p_drop = p_drop
        self._cache = None

    def parameters(self):
        return self.norm.parameters() + self.fc1.parameters() + self.fc2.parameters()

    def forward(self, h, training=False, rng=None):
        a1 = self.fc1.forward(self.norm.forward(h))
        act, mask = dropout(gelu(a1), self.p_drop, rng, training)
        self._cache = (a1, mask)
        return h + self.fc2.forward(act)

    def backward(self, dy):
        a1, mask = self._cache
        dact = dropout_backward(self.fc2.backward(dy), mask)
        dln = self.fc1.backward(dact * gelu_grad(a1))
        return dy + self.norm.backward(dln)


class StructuredSpatialLayer:
    def __init__(self, name, H, d_ctx, rng: Rng, use_context=True, mode="mean", p_drop=0.0):
        self.theta = Parameter(f"{name}.theta", init_uniform(rng, (H, H), H))
        self.w_m = Parameter(f"{name}.w_m", init_uniform(rng, (2 * H, H), 2 * H))
        self.use_context = use_context
        if use_context:
            self.psi_w = Parameter(f"{name}.psi.weight", init_uniform(rng, (2 * d_ctx, 1), 2 * d_ctx))
            self.psi_b = Parameter(f"{name}.psi.bias", np.zeros(1))
        self.mode = mode
        self.p_drop = p_drop
        self._cache = None

    def parameters(self):
        ps = [self.theta, self.w_m]
        if self.use_context:
            ps += [self.psi_w, self.psi_b]
        return ps

    def forward(self, h, ctx=None, training=False, rng=None):
        g = pair_gates(ctx, self.psi_w.value, self.psi_b.value) if self.use_context else None
        out, cache = spatial_mixer_structured(h, self.theta.value, self.w_m.value, g, self.mode)
        out, mask = dropout(out, self.p_drop, rng, training)
        self._cache = (cache, mask, ctx)
        return out

    def backward(self, dy):
        cache, mask, ctx = self._cache
        dh, dtheta, dw_m, dg = spatial_mixer_structured_backward(dropout_backward(dy, mask), cache)
        self.theta.grad += dtheta
        self.w_m.grad += dw_m
        if not self.use_context:
            return dh, None
        g = cache[3]
        ds = dg * g * (1.0 - g)
        d = ctx.shape[-1]
        w = self.psi_w.value[:, 0]
        rows, cols = ds.sum(axis=1), ds.sum(axis=0)
        self.psi_w.grad[:d, 0] += ctx.T @ rows
        self.psi_w.grad[d:, 0] += ctx.T @ cols
        self.psi_b.grad += ds.sum()
        dctx = rows[:, None] * w[None, :d] + cols[:, None] * w[None, d:]
        return dh, dctx


class BasicSpatialLayer:
    def __init__(self, name, N, rng: Rng, p_drop=0.0):
        self.w = Parameter(f"{name}.w_channel", init_uniform(rng, (N, N), N))
        self.b = Parameter(f"{name}.bias", np.zeros(N))
        self.p_drop = p_drop
        self._cache = None

    def parameters(self):
        return [self.w, self.b]

    def forward(self, h, ctx=None, training=False, rng=None):
        out, cache = spatial_mixer_basic(h, self.w.value, self.b.value)
        out, mask = dropout(out, self.p_drop, rng, training)
        self._cache = (cache, mask)
        return out

    def backward(self, dy):
        cache, mask = self._cache
        dh, dw, db = spatial_mixer_basic_backward(dropout_backward(dy, mask), cache)
        self.w.grad += dw
        self.b.grad += db
        return dh, None


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    N: int
    T: int = 12
    horizon: int = 12
    c_in: int = 1
    c_out: int = 1
    d_pe: int = 16
    d_model: int = 32
    D: int = 96
    d_emb: int = 32
    d_ctx: int = 64
    spatial_layers: int = 2
    ff_mult: int = 2
    dropout: float = 0.1
    spatial_mode: str = "structured"
    aggregation: str = "mean"
    no_pretrain: bool = False
    no_context: bool = False
    no_stpe: bool = False
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @property
    def H(self):
        return self.d_model * self.T


class PreMixer:
    def __init__(self, spec: ModelSpec, piencoder: PIEncoder | None = None):
        if spec.spatial_mode not in SPATIAL_MODES:
            raise ConfigError(f"unknown spatial mode {spec.spatial_mode!r}")
        if spec.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {spec.aggregation!r}")
        if not spec.no_pretrain:
            if piencoder is None:
                raise ConfigError("a pre-trained PIEncoder is required unless no_pretrain is set")
            if piencoder.L != spec.T:
                raise ConfigError(
                    f"short window T={spec.T} must equal the PIEncoder patch length L={piencoder.L}"
                )
            if piencoder.D != spec.D:
                raise ConfigError(f"PIEncoder D={piencoder.D} != configured D={spec.D}")
        self.spec = spec
        self.piencoder = piencoder
        rng = Rng(spec.seed)
        H = spec.H
        self.stpe: Stpe = (build_temporal_pe if spec.no_stpe else build_stpe)(spec.T, spec.N, spec.d_pe)
        self.input_mlp = Linear("input_mlp", spec.c_in + spec.d_pe, spec.d_model, rng)
        self.semantic_projector = Linear("semantic_projector", spec.D, H, rng)
        if spec.no_pretrain:
            for p in self.semantic_projector.parameters():
                p.value[...] = 0.0
        self.temporal = TemporalMixer(H, spec.ff_mult * H, rng, spec.dropout)
        structured = spec.spatial_mode == "structured"
        use_context = structured and not spec.no_context
        self.context = (
            NodeContextFusion(spec.N, spec.d_pe, spec.d_emb, spec.d_ctx, rng, use_stpe=not spec.no_stpe)
            if use_context
            else None
        )
        self.spatial = []
        for l in range(spec.spatial_layers):
            if structured:
                layer = StructuredSpatialLayer(f"spatial{l}", H, spec.d_ctx, rng, use_context,
                                               spec.aggregation, spec.dropout)
            else:
                layer = BasicSpatialLayer(f"spatial{l}", spec.N, rng, spec.dropout)
            self.spatial.append(layer)
        self.output = Linear("output", H, spec.horizon * spec.c_out, rng)
        self._cache = None

    # -- parameter sets -----------------------------------------------------

    def _parameter_groups(self):
        """``(parameters, trainable)`` pairs in a fixed order."""
        yield self.input_mlp.parameters(), True
        yield self.semantic_projector.parameters(), not self.spec.no_pretrain
        yield self.temporal.parameters(), True
        if self.context is not None:
            yield self.context.parameters(), True
        for layer in self.spatial:
            yield layer.parameters(), True
        yield self.output.parameters(), True

    def trainable_parameters(self):
        return [p for ps, train in self._parameter_groups() if train for p in ps]

    def own_parameters(self):
        """Every forecaster parameter, frozen projector included."""
        return [p for ps, _ in self._parameter_groups() for p in ps]

    def parameter_counts(self) -> dict:
        trainable = sum(p.size for p in self.trainable_parameters())
        own = sum(p.size for p in self.own_parameters())
        frozen_enc = sum(p.size for p in self.piencoder.parameters()) if self.piencoder else 0
        return {"trainable": trainable, "total": own + frozen_enc, "piencoder_frozen": frozen_enc}

    def state_dict(self):
        return {p.name: p.value for p in self.own_parameters()}

    def load_state_dict(self, arrays):
        from premixer.errors import CheckpointError

        for p in self.own_parameters():
            if p.name not in arrays:
                raise CheckpointError(f"missing forecaster parameter {p.name!r}")
            if arrays[p.name].shape != p.value.shape:
                raise CheckpointError(
                    f"parameter {p.name!r} has shape {arrays[p.name].shape}, expected {p.value.shape}"
                )
            p.value[...] = arrays[p.name]

    # -- stages -------------------------------------------------------------

    def encode_context(self, x_short):
        """Frozen PIEncoder second-layer embedding of the short window, (B, N, D)."""
        enc = self.piencoder
        if x_short.shape[1] != enc.L:
            raise ConfigError(
                f"short window length {x_short.shape[1]} must equal patch length L={enc.L}"
            )
        return enc.embed(short_patch(x_short[..., : enc.C]))[1]

    def _check_input(self, x):
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.T, s.N, s.c_in):
            raise ShapeError(f"input shape {x.shape} does not match (B, {s.T}, {s.N}, {s.c_in})")

    def forward(self, x_short, training=False, rng=None):
        """Normalized (B, T, N, c_in) window -> normalized (B, horizon, N, c_out) forecast."""
        x_short = np.asarray(x_short, dtype=np.float64)
        self._check_input(x_short)
        s = self.spec
        B = x_short.shape[0]
        u = np.broadcast_to(self.stpe.table, (B,) + self.stpe.table.shape)
        a0 = self.input_mlp.forward(np.concatenate([x_short, u], axis=-1))
        h = fold_nodes(gelu(a0))
        if not s.no_pretrain:
            h = h + self.semantic_projector.forward(self.encode_context(x_short))
        h = self.temporal.forward(h, training, rng)
        ctx = self.context.forward(self.stpe) if self.context is not None else None
        for layer in self.spatial:
            h = layer.forward(h, ctx, training, rng)
        out = self.output.forward(h)
        self._cache = (a0,)
        return np.ascontiguousarray(out.reshape(B, s.N, s.horizon, s.c_out).transpose(0, 2, 1, 3))

    def backward(self, dy):
        s = self.spec
        (a0,) = self._cache
        dh = self.output.backward(np.ascontiguousarray(dy.transpose(0, 2, 1, 3)).reshape(dy.shape[0], s.N, -1))
        dctx = None
        for layer in reversed(self.spatial):
            dh, dc = layer.backward(dh)
            if dc is not None:
                dctx = dc if dctx is None else dctx + dc
        if dctx is not None:
            self.context.backward(dctx)
        dh = self.temporal.backward(dh)
        if not s.no_pretrain:
            self.semantic_projector.backward(dh)
        de = unfold_nodes(dh, s.T) * gelu_grad(a0)
        self.input_mlp.backward(de)

    def zero_grad(self):
        for p in self.own_parameters():
            p.zero_grad()

    def loss_and_grad(self, x_short, y, training=False, rng=None) -> float:
        y_hat = self.forward(x_short, training, rng)
        loss = regression_loss(y_hat, y)
        self.backward(regression_loss_grad(y_hat, y))
        return loss

    def predict(self, x_short, batch_size=64):
        outs = [self.forward(x_short[i : i + batch_size]) for i in range(0, x_short.shape[0], batch_size)]
        return np.concatenate(outs, axis=0)
