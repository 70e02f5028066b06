"""Pre-LN Vision Transformer trunk shared by the MAE encoder, decoder and detector backbone."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .nn import LayerNorm, Linear, Module, init_default
from .patches import MaskPlan, build_pos_table, gather_visible, patchify
from .tensor import Parameter


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    patch: int = 16
    in_channels: int = 1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ParameterError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ParameterError("mlp_ratio must be positive")

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


class Attention(Module):
    def __init__(self, dim: int, heads: int):
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self._heads = heads

    def forward(self, x):
        L, D = x.shape
        h = self._heads
        qkv = self.qkv(x).reshape(L, 3, h, D // h).transpose(1, 2, 0, 3)
        out = T.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 0, 2).reshape(L, D))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int):
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """``y = x + MSA(LN(x)); out = y + MLP(LN(y))``."""

    def __init__(self, cfg: ViTConfig):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, cfg.heads)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = Mlp(cfg.dim, cfg.hidden)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def block_forward(x, block: Block):
    return block(x)


def trunk_forward(tokens, cfg: ViTConfig, blocks, norm: LayerNorm):
    if len(blocks) != cfg.depth:
        raise ParameterError(f"expected {cfg.depth} blocks, got {len(blocks)}")
    for blk in blocks:
        tokens = blk(tokens)
    return norm(tokens)


@lru_cache(maxsize=32)
def _cached_pos(grid_h: int, grid_w: int, D: int) -> np.ndarray:
    table = build_pos_table(grid_h, grid_w, D)
    table.setflags(write=False)
    return table


class ViTEncoder(Module):
    """Patch embedding + cls token + fixed 2D positions + trunk."""

    def __init__(self, cfg: ViTConfig):
        self._cfg = cfg
        p2c = cfg.patch * cfg.patch * cfg.in_channels
        self.patch_embed = Linear(p2c, cfg.dim)
        self.cls_token = Parameter(np.zeros((1, cfg.dim), dtype=T.get_dtype()))
        self.blocks = [Block(cfg) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    @property
    def config(self) -> ViTConfig:
        return self._cfg

    def pos_table(self, grid_h: int, grid_w: int) -> np.ndarray:
        return _cached_pos(grid_h, grid_w, self._cfg.dim)

    def forward_visible(self, grid, plan: MaskPlan):
        tokens = gather_visible(grid, plan, self.patch_embed.weight, self.patch_embed.bias,
                                self.cls_token, self.pos_table(grid.grid_h, grid.grid_w))
        return trunk_forward(tokens, self._cfg, self.blocks, self.norm)

    def forward_map(self, image):
        """Encode every patch and return the [D, H/p, W/p] feature map (cls dropped)."""
        grid = patchify(image, self._cfg.patch)
        everything = MaskPlan(np.zeros(0, dtype=np.int64), np.arange(grid.N), 0.0, None, grid.N)
        out = self.forward_visible(grid, everything)
        return out[1:].transpose(1, 0).reshape(self._cfg.dim, grid.grid_h, grid.grid_w)


def init_parameters(module: Module, seed) -> None:
    """Truncated-normal(0.02) weights and tokens, zero biases, unit LN scales."""
    init_default(module, np.random.default_rng(seed))
