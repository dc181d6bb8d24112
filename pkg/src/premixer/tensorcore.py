"""Dense kernels with hand-derived backward passes, Adam, seeded RNG and a
finite-difference gradient checker.

Tensors are plain C-contiguous float64 numpy arrays. Every op that needs a
backward pass returns ``(out, cache)`` or has a matching ``*_backward``; the
models compose these in a fixed order, there is no tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from premixer.errors import ConfigError, NumericError, ShapeError

DTYPE = np.float64
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


class Rng:
    """Counter-based (Philox) generator; same seed and call sequence give the
    same stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, tag: int) -> "Rng":
        """Independent stream derived from (seed, tag) without touching ours."""
        return Rng((self.seed * 1_000_003 + int(tag) * 7919 + 1) % (2**63))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)


class Parameter:
    def __init__(self, name: str, value):
        self.name = name
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# elementwise and dense ops
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched-on-the-left matrix product: ``a[..., K] @ b[K, Q]`` or plain 2-D."""
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if a.ndim <= 2:
        return a @ b
    # one GEMM instead of numpy's per-batch loop
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[1])


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ``c = a @ b`` for ``a`` of any leading rank."""
    a2 = a.reshape(-1, a.shape[-1])
    dc2 = dc.reshape(-1, dc.shape[-1])
    da = (dc2 @ b.T).reshape(*dc.shape[:-1], b.shape[0])
    db = a2.T @ dc2
    return da, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0.0).astype(x.dtype)


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sigmoid(x):
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction. ``-inf`` entries get
    probability zero."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-5):
    f = x.shape[-1]
    if f < 2:
        raise ShapeError(f"layer_norm needs a feature axis of at least 2, got {f}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy, cache):
    xhat, rstd, gamma = cache
    f = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = (rstd / f) * (
        f * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def dropout(x, p: float, rng: Rng | None, training: bool):
    """Inverted dropout. Returns ``(y, mask)``; mask is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("training-mode dropout needs an Rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(DTYPE) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def init_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear:
    """``y = x @ W + b`` over the last axis; W is stored (in, out)."""

    def __init__(self, name: str, n_in: int, n_out: int, rng: Rng, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(f"{name}.weight", init_uniform(rng, (n_in, n_out), n_in))
        self.bias = (
            Parameter(f"{name}.bias", init_uniform(rng, (n_out,), n_in)) if bias else None
        )
        self._x = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(
                f"{self.weight.name}: expected last axis {self.n_in}, got shape {x.shape}"
            )
        self._x = x
        y = matmul(x, self.weight.value)
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, dy):
        dx, dw = matmul_backward(dy, self._x, self.weight.value)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += dy.reshape(-1, self.n_out).sum(axis=0)
        return dx


class LayerNorm:
    def __init__(self, name: str, n: int, eps: float = 1e-5):
        self.gamma = Parameter(f"{name}.gamma", np.ones(n))
        self.beta = Parameter(f"{name}.beta", np.zeros(n))
        self.eps = eps
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        y, self._cache = layer_norm(x, self.gamma.value, self.beta.value, self.eps)
        return y

    def backward(self, dy):
        dx, dg, db = layer_norm_backward(dy, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **hyper)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``param.value`` and ``state``."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter {param.name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    # lr * m_hat / (sqrt(v_hat) + eps), with fewer temporaries
    denom = np.sqrt(state.v)
    denom *= 1.0 / math.sqrt(bc2)
    denom += state.eps
    np.divide(state.m, denom, out=denom)
    denom *= state.lr / bc1
    param.value -= denom


@dataclass
class Adam:
    params: list
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique within an optimizer")
        for p in self.params:
            self.states.setdefault(
                p.name,
                AdamState.for_param(
                    p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
                ),
            )

    @property
    def step_count(self) -> int:
        return max((s.step for s in self.states.values()), default=0)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            adam_step(p, self.states[p.name])


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(fn, inputs, eps=1e-4, max_checks=None, rng=None, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` returns ``(scalar, [grad per input])``. Inputs are float64
    arrays perturbed in place (and restored), so ``fn`` may close over them.
    With ``max_checks`` only that many randomly chosen entries per input are
    probed. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = list(inputs)
    _, analytic = fn(*inputs)
    worst = 0.0
    for x, g in zip(inputs, analytic):
        if g.shape != x.shape:
            raise ShapeError(f"gradient shape {g.shape} != input shape {x.shape}")
        flat = x.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = (rng or Rng(0)).permutation(flat.size)[:max_checks]
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = fn(*inputs)[0]
            flat[k] = orig - eps
            fm = fn(*inputs)[0]
            flat[k] = orig
            num = (fp - fm) / (2.0 * eps)
            a = gflat[k]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
