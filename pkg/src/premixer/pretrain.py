"""PIEncoder: a patch-independent MLP autoencoder trained with reconstruction
plus complementary contrastive loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from premixer import checkpoint
from premixer.errors import CheckpointError, ConfigError, NumericError, ShapeError
from premixer.patchmask import MaskPair, PatchSet, complementary_masks, patchify
from premixer.tensorcore import (
    Adam,
    Linear,
    Rng,
    dropout,
    dropout_backward,
    relu,
    relu_grad,
)

log = logging.getLogger(__name__)


@dataclass
class PatchEmbeddings:
    z1: np.ndarray
    z2: np.ndarray


@dataclass
class PretrainLosses:
    recon: float
    contrastive: float
    total: float


class PIEncoder:
    """Two ReLU layers (P -> D -> D) and a bias-free linear head (D -> P),
    applied identically to every (patch, node)."""

    def __init__(self, P: int, D: int = 96, rng: Rng | None = None, dropout: float = 0.0,
                 L: int | None = None, C: int = 1):
        rng = rng or Rng(0)
        self.P, self.D, self.C = P, D, C
        self.L = L if L is not None else P // C
        self.dropout = dropout
        self.enc1 = Linear("enc1", P, D, rng)
        self.enc2 = Linear("enc2", D, D, rng)
        self.recon_head = Linear("recon_head", D, P, rng, bias=False)
        self._cache = None

    def parameters(self):
        return self.enc1.parameters() + self.enc2.parameters() + self.recon_head.parameters()

    def state_dict(self):
        return {p.name: p.value for p in self.parameters()}

    def load_state_dict(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise CheckpointError(f"missing parameter {p.name!r}")
            if arrays[p.name].shape != p.value.shape:
                raise CheckpointError(
                    f"parameter {p.name!r} has shape {arrays[p.name].shape}, expected {p.value.shape}"
                )
            p.value[...] = arrays[p.name]

    # -- forward ------------------------------------------------------------

    def forward(self, x, training=False, rng=None) -> PatchEmbeddings:
        """Embed patches ``x[..., P]``; caches activations for ``backward``."""
        if x.shape[-1] != self.P:
            raise ShapeError(f"patch dim {x.shape[-1]} != encoder P={self.P}")
        a1 = self.enc1.forward(x)
        z1 = relu(a1)
        z1d, m1 = dropout(z1, self.dropout, rng, training)
        a2 = self.enc2.forward(z1d)
        z2 = relu(a2)
        z2d, m2 = dropout(z2, self.dropout, rng, training)
        self._cache = (a1, a2, m1, m2, z2d)
        return PatchEmbeddings(z1, z2)

    def reconstruct(self, z2=None):
        """Apply the head to the last forward's (dropped-out) z2, or to ``z2``."""
        if z2 is None:
            z2 = self._cache[4]
            return self.recon_head.forward(z2)
        return z2 @ self.recon_head.weight.value

    def backward(self, dxhat=None, dz1=None, dz2=None):
        a1, a2, m1, m2, _ = self._cache
        g2 = np.zeros_like(a2) if dz2 is None else dz2
        if dxhat is not None:
            g2 = g2 + dropout_backward(self.recon_head.backward(dxhat), m2)
        g2 = g2 * relu_grad(a2)
        g1 = dropout_backward(self.enc2.backward(g2), m1)
        if dz1 is not None:
            g1 = g1 + dz1
        g1 = g1 * relu_grad(a1)
        return self.enc1.backward(g1)

    def embed(self, x):
        """Cache-free inference; returns ``(z1, z2)``."""
        if x.shape[-1] != self.P:
            raise ShapeError(f"patch dim {x.shape[-1]} != encoder P={self.P}")
        z1 = relu(x @ self.enc1.weight.value + self.enc1.bias.value)
        z2 = relu(z1 @ self.enc2.weight.value + self.enc2.bias.value)
        return z1, z2

    def autoencode(self, x):
        return self.embed(x)[1] @ self.recon_head.weight.value

    # -- persistence --------------------------------------------------------

    def manifest(self, seed=None, **extra):
        body = {"kind": "piencoder", "P": self.P, "D": self.D, "L": self.L, "C": self.C,
                "dropout": self.dropout, "seed": seed}
        body.update(extra)
        return body


def piencoder_forward(view: PatchSet, model: PIEncoder, training=False, rng=None) -> PatchEmbeddings:
    return model.forward(view.patches, training, rng)


def reconstruct(z2, model: PIEncoder):
    return model.reconstruct(z2)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _check_complementary(m):
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ConfigError("reconstruction mask must be binary (complementary views)")


def recon_loss(x, xhat_v1, xhat_v2, mask) -> float:
    """Two-term masked squared error, summed over patches and nodes.

    A patch's reconstruction is read from the view in which it was visible:
    view 1 where ``mask == 1``, view 2 where ``mask == 0``.
    """
    m = mask.m if isinstance(mask, MaskPair) else np.asarray(mask)
    _check_complementary(m)
    x = x.patches if isinstance(x, PatchSet) else x
    if not (x.shape == xhat_v1.shape == xhat_v2.shape) or m.shape != x.shape[:-1]:
        raise ShapeError("recon_loss: shapes of x, reconstructions and mask disagree")
    e1 = ((x - xhat_v1) ** 2).sum(axis=-1)
    e2 = ((x - xhat_v2) ** 2).sum(axis=-1)
    return float((m * e1).sum() + ((1.0 - m) * e2).sum())


def recon_loss_grad(x, xhat_v1, xhat_v2, m):
    w = m[..., None]
    return -2.0 * w * (x - xhat_v1), -2.0 * (1.0 - w) * (x - xhat_v2)


def _stack_views(z1_v1, z1_v2):
    # (..., T_p, N, D) x2 -> (..., N, 2T_p, D)
    z = np.concatenate([z1_v1, z1_v2], axis=-3)
    return np.ascontiguousarray(np.swapaxes(z, -3, -2))


def _log_probs(z):
    s = z @ np.swapaxes(z, -1, -2)
    two_tp = s.shape[-1]
    diag = np.arange(two_tp)
    s[..., diag, diag] = -np.inf
    shifted = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def contrastive_probs(z1_v1, z1_v2):
    """Pair probabilities ``p((i, s), n)`` shaped (..., N, 2T_p, 2T_p); the
    diagonal is zero."""
    return np.exp(_log_probs(_stack_views(z1_v1, z1_v2)))


def contrastive_loss(z1_v1, z1_v2, return_grad=False):
    """Mean over anchors (and nodes, and windows) of ``-log p((i, partner), n)``
    where the partner of i is the same patch in the other view."""
    if z1_v1.shape != z1_v2.shape:
        raise ShapeError(f"view embeddings differ in shape: {z1_v1.shape} vs {z1_v2.shape}")
    z = _stack_views(z1_v1, z1_v2)
    two_tp = z.shape[-2]
    t_p = two_tp // 2
    partner = (np.arange(two_tp) + t_p) % two_tp
    logp = _log_probs(z)
    picked = np.take_along_axis(logp, np.broadcast_to(partner[:, None], logp.shape[:-1] + (1,)), -1)
    count = picked.size
    loss = float(-picked.sum() / count) + 0.0  # no negative zero when T_p = 1
    if not return_grad:
        return loss
    p = np.exp(logp)
    p[..., np.arange(two_tp), partner] -= 1.0
    ds = p / count
    dz = (ds + np.swapaxes(ds, -1, -2)) @ z
    dz = np.swapaxes(dz, -3, -2)  # (..., 2T_p, N, D)
    return loss, np.ascontiguousarray(dz[..., :t_p, :, :]), np.ascontiguousarray(dz[..., t_p:, :, :])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def pretrain_objective(model: PIEncoder, x_long, mask_ratio, rng: Rng, use_cl=True,
                       training=True, backward=True) -> PretrainLosses:
    """Loss (and, with ``backward``, accumulated grads) for a batch of long
    histories ``x_long`` shaped (B, T_long, N, C)."""
    ps = patchify(x_long, model.L)
    if ps.P != model.P:
        raise ShapeError(f"patch dim {ps.P} != encoder P={model.P}")
    B, t_p, n, _ = ps.patches.shape
    m = complementary_masks(t_p, n, mask_ratio, rng, batch=B).m
    views = np.stack([ps.patches * m[..., None], ps.patches * (1.0 - m)[..., None]])
    emb = model.forward(views, training, rng)
    xhat = model.reconstruct()
    recon = recon_loss(ps.patches, xhat[0], xhat[1], m) / B
    if use_cl:
        res = contrastive_loss(emb.z1[0], emb.z1[1], return_grad=backward)
        cl, grads = (res[0], res[1:]) if backward else (res, None)
    else:
        cl, grads = 0.0, None
    total = recon + cl
    if not np.isfinite(total):
        raise NumericError(f"non-finite pre-training loss (recon={recon}, cl={cl})")
    if backward:
        g1, g2 = recon_loss_grad(ps.patches, xhat[0], xhat[1], m)
        dxhat = np.stack([g1, g2]) / B
        dz1 = np.stack(grads) if grads is not None else None
        model.backward(dxhat=dxhat, dz1=dz1)
    return PretrainLosses(recon, cl, total)


class Pretrainer:
    def __init__(self, model: PIEncoder, lr=1e-3, mask_ratio=0.5, use_cl=True, seed=0):
        self.model = model
        self.optim = Adam(model.parameters(), lr=lr)
        self.mask_ratio = mask_ratio
        self.use_cl = use_cl
        self.rng = Rng(seed)

    def step(self, x_long) -> PretrainLosses:
        """One optimizer step; returns the losses computed before the update."""
        self.optim.zero_grad()
        losses = pretrain_objective(self.model, x_long, self.mask_ratio, self.rng, self.use_cl)
        self.optim.step()
        return losses


def pretrain_step(x_long, model, optim: Adam, rng: Rng, mask_ratio=0.5, use_cl=True) -> PretrainLosses:
    optim.zero_grad()
    losses = pretrain_objective(model, x_long, mask_ratio, rng, use_cl)
    optim.step()
    return losses


def reconstruction_mse(model: PIEncoder, x_long) -> float:
    """Mean squared patch reconstruction error (visible-view reconstruction)."""
    ps = patchify(x_long, model.L)
    return float(np.mean((ps.patches - model.autoencode(ps.patches)) ** 2))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: PIEncoder, path, seed=None, optim: Adam | None = None, **extra):
    arrays = dict(model.state_dict())
    body = model.manifest(seed=seed, **extra)
    if optim is not None:
        body["step"] = optim.step_count
        body["lr"] = optim.lr
        for name, st in optim.states.items():
            arrays[f"adam_m.{name}"] = st.m
            arrays[f"adam_v.{name}"] = st.v
    return checkpoint.save(path, body, arrays)


def load_checkpoint(path, expect_P=None, expect_L=None, expect_C=None):
    """Returns ``(model, manifest, arrays)``."""
    manifest, arrays = checkpoint.load(path)
    if manifest.get("kind") != "piencoder":
        raise CheckpointError(f"{path} is not a PIEncoder checkpoint (kind={manifest.get('kind')})")
    for key, want in (("P", expect_P), ("L", expect_L), ("C", expect_C)):
        if want is not None and manifest.get(key) != want:
            raise CheckpointError(
                f"checkpoint {key}={manifest.get(key)} does not match expected {key}={want}"
            )
    model = PIEncoder(manifest["P"], manifest["D"], dropout=manifest.get("dropout", 0.0),
                      L=manifest["L"], C=manifest["C"])
    model.load_state_dict(arrays)
    return model, manifest, arrays


def restore_optimizer(optim: Adam, manifest, arrays):
    step = int(manifest.get("step", 0))
    for name, st in optim.states.items():
        if f"adam_m.{name}" in arrays:
            st.m[...] = arrays[f"adam_m.{name}"]
            st.v[...] = arrays[f"adam_v.{name}"]
        st.step = step
