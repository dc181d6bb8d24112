"""Spatio-temporal positional encoding, learnable node embeddings and the
node-context fusion that feeds the structured spatial mixer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from premixer.errors import ConfigError, ShapeError
from premixer.tensorcore import Linear, Parameter, Rng, gelu, gelu_grad


@dataclass
class Stpe:
    table: np.ndarray  # (T, N, d_pe)

    @property
    def d_pe(self) -> int:
        return self.table.shape[-1]

    @property
    def temporal(self) -> np.ndarray:
        return self.table[..., : self.d_pe // 2]

    @property
    def spatial(self) -> np.ndarray:
        return self.table[..., self.d_pe // 2 :]


def _sinusoid(pos: np.ndarray, half: int, d_pe: int) -> np.ndarray:
    """Interleaved sin/cos of ``pos`` at frequencies ``10000^(-4i/d_pe)``, i < half/2."""
    i = np.arange(half // 2)
    freq = np.power(10000.0, -4.0 * i / d_pe)
    ang = pos[:, None] * freq[None, :]
    out = np.empty((pos.size, half))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def build_stpe(T: int, N: int, d_pe: int = 16) -> Stpe:
    """First half of the channels encodes the step index t, second half the
    node index n."""
    if d_pe <= 0 or d_pe % 4:
        raise ConfigError(f"encoding width must be a positive multiple of 4, got {d_pe}")
    if T < 1 or N < 1:
        raise ConfigError(f"T and N must be >= 1, got T={T}, N={N}")
    half = d_pe // 2
    temporal = _sinusoid(np.arange(T, dtype=np.float64), half, d_pe)
    spatial = _sinusoid(np.arange(N, dtype=np.float64), half, d_pe)
    table = np.empty((T, N, d_pe))
    table[:, :, :half] = temporal[:, None, :]
    table[:, :, half:] = spatial[None, :, :]
    return Stpe(table)


def build_temporal_pe(T: int, N: int, d_pe: int = 16) -> Stpe:
    """Plain 1-D sinusoidal encoding of t over the full width (no node part)."""
    if d_pe <= 0 or d_pe % 2:
        raise ConfigError(f"encoding width must be a positive even number, got {d_pe}")
    i = np.arange(d_pe // 2)
    freq = np.power(10000.0, -2.0 * i / d_pe)
    ang = np.arange(T, dtype=np.float64)[:, None] * freq
    enc = np.empty((T, d_pe))
    enc[:, 0::2] = np.sin(ang)
    enc[:, 1::2] = np.cos(ang)
    return Stpe(np.ascontiguousarray(np.broadcast_to(enc[:, None, :], (T, N, d_pe))))


class NodeEmbedding:
    def __init__(self, N: int, d_emb: int, rng: Rng):
        bound = 1.0 / math.sqrt(d_emb)
        self.E = Parameter("node_embedding.E", rng.uniform(-bound, bound, (N, d_emb)))

    def parameters(self):
        return [self.E]


class NodeContextFusion:
    """``c_n = GELU(Linear([spatial_pe_n || E_n]))``.

    The spatial encoding is taken at t = 0; it is time-invariant. With
    ``use_stpe=False`` the encoding part is dropped and only ``E`` is fused.
    """

    def __init__(self, N, d_pe, d_emb, d_ctx, rng: Rng, use_stpe=True):
        self.use_stpe = use_stpe
        self.d_spatial = d_pe // 2 if use_stpe else 0
        self.embedding = NodeEmbedding(N, d_emb, rng)
        self.proj = Linear("context_fusion", self.d_spatial + d_emb, d_ctx, rng)
        self._pre = None

    def parameters(self):
        return self.embedding.parameters() + self.proj.parameters()

    def forward(self, stpe: Stpe | None) -> np.ndarray:
        E = self.embedding.E.value
        if self.use_stpe:
            sp = stpe.spatial[0]
            if sp.shape[0] != E.shape[0]:
                raise ShapeError(f"encoding has {sp.shape[0]} nodes, embedding has {E.shape[0]}")
            feats = np.concatenate([sp, E], axis=-1)
        else:
            feats = E
        self._pre = self.proj.forward(feats)
        return gelu(self._pre)

    def backward(self, dc):
        dfeats = self.proj.backward(dc * gelu_grad(self._pre))
        self.embedding.E.grad += dfeats[:, self.d_spatial :]


def fuse_node_context(E: np.ndarray, stpe: Stpe, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Functional form of :class:`NodeContextFusion` for fixed weights."""
    feats = np.concatenate([stpe.spatial[0], E], axis=-1)
    return gelu(feats @ weight + bias)
