"""Non-overlapping patching of long histories and complementary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from premixer.errors import ConfigError, ShapeError
from premixer.tensorcore import Rng


@dataclass
class PatchSet:
    patches: np.ndarray  # (..., T_p, N, P), P = L * C
    L: int
    C: int

    @property
    def T_p(self) -> int:
        return self.patches.shape[-3]

    @property
    def P(self) -> int:
        return self.patches.shape[-1]


@dataclass
class MaskPair:
    m: np.ndarray  # (..., T_p, N); 1 = visible in view 1
    ratio: float

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.m


def patchify(x_long: np.ndarray, L: int) -> PatchSet:
    """(..., T_long, N, C) -> PatchSet of shape (..., T_long // L, N, L * C)."""
    *lead, t_long, n, c = x_long.shape
    if L < 1 or t_long % L:
        raise ShapeError(f"patch length {L} does not divide history length {t_long}")
    t_p = t_long // L
    p = x_long.reshape(*lead, t_p, L, n, c)
    p = np.moveaxis(p, -3, -2)  # (..., T_p, N, L, C)
    return PatchSet(np.ascontiguousarray(p.reshape(*lead, t_p, n, L * c)), L, c)


def unpatchify(ps: PatchSet) -> np.ndarray:
    *lead, t_p, n, _ = ps.patches.shape
    x = ps.patches.reshape(*lead, t_p, n, ps.L, ps.C)
    x = np.moveaxis(x, -2, -3)  # (..., T_p, L, N, C)
    return np.ascontiguousarray(x.reshape(*lead, t_p * ps.L, n, ps.C))


def complementary_masks(T_p: int, N: int, ratio: float, rng: Rng, batch: int | None = None) -> MaskPair:
    """Per node, a seeded permutation picks exactly ``round(ratio * T_p)``
    patches visible in view 1; view 2 sees the rest."""
    if T_p < 2:
        raise ConfigError(f"complementary masking needs at least 2 patches, got {T_p}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = int(round(ratio * T_p))
    lead = () if batch is None else (batch,)
    m = np.zeros(lead + (N, T_p))
    rows = m.reshape(-1, T_p)
    for r in range(rows.shape[0]):
        rows[r, rng.permutation(T_p)[:k]] = 1.0
    return MaskPair(np.ascontiguousarray(np.swapaxes(m, -1, -2)), ratio)


def apply_mask(ps: PatchSet, mask: np.ndarray) -> PatchSet:
    if mask.shape != ps.patches.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match patch grid {ps.patches.shape[:-1]}")
    return PatchSet(ps.patches * mask[..., None], ps.L, ps.C)
