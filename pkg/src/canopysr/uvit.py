"""U-shaped vision transformer predicting a velocity field on a latent grid.

Every grid cell is one token. Blocks are pre-norm attention + MLP; the output
of each block in the first half is concatenated onto the input of its mirror
block in the second half and fused back to width D by a linear layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from canopysr import autodiff as ad
from canopysr.autodiff import Tensor
from canopysr.errors import ConfigError, DimensionError, RangeError
from canopysr.nn import MLP, LayerNorm, Linear, Module


@dataclass
class UViTConfig:
    state_channels: int = 8
    grid: tuple[int, int] = (8, 8)
    depth: int = 6
    heads: int = 4
    width: int = 64
    time_dim: int = 64
    mlp_ratio: int = 4
    patch: int = 1
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"depth must be even and >= 2, got {self.depth}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.time_dim % 2 or self.time_dim < 2:
            raise ConfigError("time_dim must be a positive even number")
        if self.patch != 1:
            raise ConfigError("only patch size 1 (one token per grid cell) is supported")
        if self.state_channels < 1 or min(self.grid) < 1:
            raise ConfigError("state_channels and grid must be positive")

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1]


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Interleaved [sin, cos] pairs of 1000*t at geometrically spaced frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise RangeError(f"time must lie in [0, 1], got {t.min()}..{t.max()}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    out = np.empty((t.size, dim))
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out


class Attention(Module):
    def __init__(self, width: int, heads: int, rng, dtype):
        self.qkv = Linear(width, 3 * width, rng, dtype)
        self.proj = Linear(width, width, rng, dtype)
        self._heads = heads

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self._heads, d // self._heads
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).permute(2, 0, 3, 1, 4)
        q, k, v = (ad.slice_(qkv, i).reshape(b * h, n, dh) for i in range(3))
        scores = ad.scale(q @ k.permute(0, 2, 1), 1.0 / math.sqrt(dh))
        out = ad.softmax(scores) @ v
        return self.proj(out.reshape(b, h, n, dh).permute(0, 2, 1, 3).reshape(b, n, d))


class Block(Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, rng, dtype):
        self.norm1 = LayerNorm(width, dtype)
        self.attn = Attention(width, heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.mlp = MLP([width, mlp_ratio * width, width], rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class UViT(Module):
    def __init__(self, cfg: UViTConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.width
        self.embed = Linear(cfg.state_channels, d, rng, dtype)
        self.pos = Tensor((rng.standard_normal((cfg.tokens, d)) * 0.02).astype(dtype),
                          requires_grad=True)
        self.time_mlp = MLP([cfg.time_dim, d, d], rng, dtype)
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]
        self.fuse = [Linear(2 * d, d, rng, dtype) for _ in range(cfg.depth // 2)]
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.state_channels, rng, dtype)

    def time_embed(self, t) -> Tensor:
        """Learned embedding (batch, width) of one or more times in [0, 1]."""
        s = sinusoidal_embedding(t, self.cfg.time_dim).astype(self.embed.weight.dtype)
        return self.time_mlp(Tensor(s))

    def forward(self, z, t, skip_hook=None) -> Tensor:
        """Velocity for state ``z`` of shape (B, C, H, W) or (C, H, W) at time(s) ``t``.

        ``skip_hook``, if given, receives and may replace each stored skip
        activation; it exists for inspecting the long connections.
        """
        z = ad.as_tensor(z)
        single = z.ndim == 3
        if single:
            z = z.reshape(1, *z.shape)
        cfg = self.cfg
        if z.ndim != 4 or z.shape[1] != cfg.state_channels or z.shape[2:] != cfg.grid:
            raise DimensionError(f"state shape {z.shape} does not match "
                                 f"({cfg.state_channels}, {cfg.grid[0]}, {cfg.grid[1]})")
        b, c = z.shape[:2]
        n, d = cfg.tokens, cfg.width
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))

        x = self.embed(z.permute(0, 2, 3, 1).reshape(b, n, c))
        x = x + ad.expand(self.pos, (b, n, d))
        if np.all(t == t[0]):
            # one shared time: embed it once so a tile's output never depends on batch size
            temb = ad.expand(self.time_embed(t[:1]).reshape(1, 1, d), (b, n, d))
        else:
            temb = ad.expand(self.time_embed(t).reshape(b, 1, d), (b, n, d))
        x = x + temb

        half = cfg.depth // 2
        skips = []
        for i, block in enumerate(self.blocks):
            if i >= half:
                skip = skips.pop()
                x = self.fuse[i - half](ad.concat([x, skip], axis=-1))
            x = block(x)
            if i < half:
                skips.append(skip_hook(i, x) if skip_hook else x)

        out = self.head(self.norm(x))
        out = out.reshape(b, cfg.grid[0], cfg.grid[1], c).permute(0, 3, 1, 2)
        return out.reshape(c, *cfg.grid) if single else out

    def velocity(self, z: np.ndarray, t) -> np.ndarray:
        """Gradient-free evaluation on plain arrays, as used by the integrator."""
        with ad.no_grad():
            return self.forward(ad.Tensor(np.asarray(z, dtype=self.embed.weight.dtype)), t).data
