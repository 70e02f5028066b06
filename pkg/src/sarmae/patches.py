"""Patch geometry: patchify, random masking, 2D sin-cos positions, token assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .tensor import Tensor


@dataclass
class PatchGrid:
    patches: Tensor  # [N, p*p*C]
    grid_h: int
    grid_w: int
    p: int
    C: int

    @property
    def N(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class MaskPlan:
    masked_idx: np.ndarray
    visible_idx: np.ndarray
    ratio: float
    seed: int | None
    N: int

    @property
    def num_masked(self) -> int:
        return int(self.masked_idx.size)

    @property
    def num_visible(self) -> int:
        return int(self.visible_idx.size)

    def visible_mask(self) -> np.ndarray:
        """Boolean [N] array, True where the patch is visible."""
        vis = np.zeros(self.N, dtype=bool)
        vis[self.visible_idx] = True
        return vis


def patchify(image, p: int) -> PatchGrid:
    """Split ``image`` [C,H,W] into row-major non-overlapping ``p``x``p`` patches.

    Each patch is flattened channel-major, then row-major within the patch.
    """
    x = T.as_tensor(image)
    if x.ndim != 3:
        raise ShapeError(f"patchify expects [C,H,W], got shape {x.shape}")
    C, H, W = x.shape
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {p} (H={H}, W={W}, p={p})")
    gh, gw = H // p, W // p
    patches = x.reshape(C, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, C * p * p)
    return PatchGrid(patches, gh, gw, p, C)


def unpatchify(patches, grid_h: int, grid_w: int, p: int, C: int) -> Tensor:
    x = T.as_tensor(patches)
    if x.shape != (grid_h * grid_w, C * p * p):
        raise ShapeError(f"unpatchify: patches {x.shape} do not match a {grid_h}x{grid_w} grid of "
                         f"{C}x{p}x{p} patches")
    return x.reshape(grid_h, grid_w, C, p, p).transpose(2, 0, 3, 1, 4).reshape(C, grid_h * p, grid_w * p)


def mask_count(N: int, r: float) -> int:
    return int(np.floor(N * r + 0.5))


def sample_mask(N: int, r: float, seed) -> MaskPlan:
    """Mask the first ``round(N*r)`` entries of a seeded uniform permutation of ``0..N-1``."""
    if N < 1:
        raise ParameterError(f"N must be >= 1, got {N}")
    if not 0.0 <= r <= 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1], got {r}")
    perm = np.random.default_rng(seed).permutation(N)
    m = mask_count(N, r)
    return MaskPlan(np.sort(perm[:m]), np.sort(perm[m:]), float(r), seed, N)


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (2.0 * np.arange(dim // 2) / dim)
    angles = pos[:, None] * omega[None, :]
    out = np.empty((pos.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def build_pos_table(grid_h: int, grid_w: int, D: int) -> np.ndarray:
    """Fixed 2D sin-cos table of shape [(grid_h*grid_w)+1, D]; row 0 (cls) is zero.

    The first D/2 columns encode the patch row, the last D/2 the column.
    """
    if D % 4:
        raise ParameterError(f"embedding dim {D} must be divisible by 4")
    ys, xs = np.divmod(np.arange(grid_h * grid_w), grid_w)
    table = np.zeros((grid_h * grid_w + 1, D))
    table[1:, : D // 2] = _sincos_1d(ys.astype(np.float64), D // 2)
    table[1:, D // 2:] = _sincos_1d(xs.astype(np.float64), D // 2)
    return table


def gather_visible(grid: PatchGrid, plan: MaskPlan, embed_weight, embed_bias, cls_token,
                   pos_table) -> Tensor:
    """Embed visible patches, prepend the cls token and add their position rows.

    Output is [num_visible + 1, D].
    """
    if plan.N != grid.N:
        raise ShapeError(f"mask plan covers {plan.N} patches but the grid has {grid.N}")
    vis = T.gather(grid.patches, plan.visible_idx, axis=0)
    tokens = T.linear(vis, embed_weight, embed_bias)
    seq = T.concat([cls_token, tokens], axis=0)
    rows = np.concatenate([[0], plan.visible_idx + 1])
    pos = np.asarray(pos_table)[rows].astype(seq.dtype)
    return seq + pos


def full_index(plan: MaskPlan) -> np.ndarray:
    """Source row for each output position when scattering back to full length.

    Sources: row 0 is cls, rows 1..V the visible tokens in ``visible_idx``
    order, row V+1 the shared mask token.
    """
    V = plan.num_visible
    index = np.full(plan.N + 1, V + 1, dtype=np.int64)
    index[0] = 0
    index[plan.visible_idx + 1] = np.arange(1, V + 1)
    return index


def scatter_full(encoded_visible, mask_token, plan: MaskPlan, pos_table) -> Tensor:
    """Restore the full [N+1, D] sequence in original patch order.

    Visible positions receive their encoded token, masked positions the shared
    mask token; every position then gets its row of ``pos_table``.
    """
    enc = T.as_tensor(encoded_visible)
    if enc.shape[0] != plan.num_visible + 1:
        raise ShapeError(f"encoded sequence has {enc.shape[0]} rows, plan expects "
                         f"{plan.num_visible + 1}")
    src = T.concat([enc, mask_token], axis=0)
    seq = T.gather(src, full_index(plan), axis=0)
    return seq + np.asarray(pos_table).astype(seq.dtype)
