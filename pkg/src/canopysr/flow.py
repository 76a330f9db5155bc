"""Conditional flow matching on stacked latent states.

A state stacks the conditioning latent (from the source encoder) on top of
the transported channels. Training pairs start from input-seeded noise and
end at the target latent; the conditioning slice is the same at both ends,
so its target velocity is zero.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from canopysr import autodiff as ad
from canopysr.autodiff import Tensor
from canopysr.errors import ConfigError, DimensionError, RangeError, UsageError
from canopysr.nn import MLP, Module
from canopysr.scene import dihedral
from canopysr.training import LossCurve, OptimConfig, run_training
from canopysr.uvit import sinusoidal_embedding


# -- input-seeded noise -------------------------------------------------------------------

def canonical_bytes(cond: np.ndarray) -> bytes:
    """Shape header plus float32 little-endian row-major values."""
    c = np.ascontiguousarray(cond, dtype="<f4")
    return np.asarray(c.shape, dtype="<u4").tobytes() + c.tobytes()


def noise_key(cond: np.ndarray) -> int:
    return int.from_bytes(hashlib.blake2b(canonical_bytes(cond), digest_size=8).digest(), "little")


def conditioned_noise(cond: np.ndarray, channels: int | None = None) -> np.ndarray:
    """Standard-normal field (channels, H, W) determined entirely by ``cond``."""
    cond = np.asarray(cond)
    if cond.ndim != 3:
        raise DimensionError(f"conditioning latent must be (C, H, W), got {cond.shape}")
    if not np.all(np.isfinite(cond)):
        raise RangeError("conditioning latent contains non-finite values")
    gen = np.random.Generator(np.random.Philox(key=noise_key(cond)))
    c = cond.shape[0] if channels is None else channels
    return gen.standard_normal((c, *cond.shape[1:])).astype(np.float32)


# -- states and samples ------------------------------------------------------------------

def build_state_pair(cond: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cond, target = np.asarray(cond, np.float32), np.asarray(target, np.float32)
    if cond.ndim != 3 or target.ndim != 3 or cond.shape[1:] != target.shape[1:]:
        raise DimensionError(f"grids {cond.shape} and {target.shape} are not compatible")
    z0 = np.concatenate([cond, conditioned_noise(cond, target.shape[0])])
    z1 = np.concatenate([cond, target])
    return z0, z1


def interpolate(z0, z1, t):
    """Point at time ``t`` on the straight path from ``z0`` to ``z1``."""
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise DimensionError(f"endpoints differ in shape: {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=z0.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise RangeError(f"t must lie in [0, 1], got {t}")
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (z0.ndim - 1)))
    return (1 - t) * z0 + t * z1


@dataclass
class FlowSample:
    z0: np.ndarray
    z1: np.ndarray
    t: np.ndarray
    z_t: np.ndarray = field(init=False)
    v_target: np.ndarray = field(init=False)

    def __post_init__(self):
        self.z_t = interpolate(self.z0, self.z1, self.t)
        self.v_target = self.z1 - self.z0


def fm_loss(v_pred: Tensor, v_target, cond_channels: int = 0, masked: bool = False) -> Tensor:
    """Velocity-matching MSE; ``masked`` restricts it to the transported channels."""
    v_target = np.asarray(v_target, dtype=v_pred.dtype)
    if v_pred.shape != v_target.shape:
        raise DimensionError(f"prediction {v_pred.shape} vs target {v_target.shape}")
    if not masked:
        return ad.mse(v_pred, Tensor(v_target))
    idx = (slice(None), slice(cond_channels, None)) if v_pred.ndim == 4 else (slice(cond_channels, None),)
    return ad.mse(ad.slice_(v_pred, idx), Tensor(v_target[idx]))


# -- latent standardisation ----------------------------------------------------------------

@dataclass
class LatentScaler:
    """Per-channel affine map putting encoder outputs on a unit scale."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, latents: np.ndarray) -> "LatentScaler":
        lat = np.asarray(latents, dtype=np.float64)
        std = lat.std(axis=(0, 2, 3))
        return cls(lat.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))

    def _k(self, a):
        return a.reshape(-1, 1, 1).astype(np.float32)

    def transform(self, z):
        return ((np.asarray(z, np.float32) - self._k(self.mean)) / self._k(self.std)).astype(np.float32)

    def inverse_transform(self, z):
        return (np.asarray(z, np.float32) * self._k(self.std) + self._k(self.mean)).astype(np.float32)

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# -- training -----------------------------------------------------------------------------

@dataclass
class FlowTrainConfig:
    batch_size: int = 16
    steps: int = 8000
    lr: float = 3e-4
    weight_decay: float = 0.01
    t_law: str = "uniform"
    masked_loss: bool = False
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.t_law != "uniform":
            raise ConfigError(f"unknown t sampling law {self.t_law!r}")

    def optim(self) -> OptimConfig:
        return OptimConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, seed=self.seed)


def fit_velocity(model: Module, pair_sampler, cfg: FlowTrainConfig, cond_channels: int = 0,
                 curve: LossCurve | None = None) -> LossCurve:
    """Regress ``model(z_t, t)`` onto ``z1 - z0`` for pairs drawn by ``pair_sampler(rng, n)``."""
    dtype = next(iter(model.parameters())).dtype

    def loss(rng, step):
        z0, z1 = pair_sampler(rng, cfg.batch_size)
        t = rng.random(cfg.batch_size)
        s = FlowSample(z0.astype(dtype), z1.astype(dtype), t.astype(dtype))
        return fm_loss(model(Tensor(s.z_t), t), s.v_target, cond_channels, cfg.masked_loss)

    return run_training(model, loss, cfg.optim(), curve)


class PairedLatentSampler:
    """Draws augmented tile pairs, encodes them with frozen autoencoders and
    returns standardised stacked states ``(z0, z1)``."""

    def __init__(self, source: np.ndarray, target: np.ndarray, source_ae, target_ae,
                 source_scaler: LatentScaler, target_scaler: LatentScaler, augment: bool = True):
        for name, ae in (("source", source_ae), ("target", target_ae)):
            if not ae.frozen:
                raise UsageError(f"{name} autoencoder must be frozen before flow training")
        if len(source) != len(target) or len(source) == 0:
            raise DimensionError("source and target must hold the same non-zero number of tiles")
        self.source, self.target = source, target
        self.source_ae, self.target_ae = source_ae, target_ae
        self.source_scaler, self.target_scaler = source_scaler, target_scaler
        self.augment = augment

    def __call__(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self.source), size=n)
        codes = rng.integers(0, 8, size=n) if self.augment else np.zeros(n, dtype=int)
        src = np.stack([dihedral(self.source[i], c) for i, c in zip(idx, codes)])
        tgt = np.stack([dihedral(self.target[i], c) for i, c in zip(idx, codes)])
        cond = self.source_scaler.transform(self.source_ae.transform(src))
        lat = self.target_scaler.transform(self.target_ae.transform(tgt))
        pairs = [build_state_pair(c, l) for c, l in zip(cond, lat)]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def train_flow(model: Module, sampler: PairedLatentSampler, cfg: FlowTrainConfig,
               curve: LossCurve | None = None) -> LossCurve:
    """Train ``model`` as a velocity field; the autoencoders must stay untouched."""
    before = (sampler.source_ae.digest(), sampler.target_ae.digest())
    cond_channels = sampler.source_ae.latent_channels
    curve = fit_velocity(model, sampler, cfg, cond_channels, curve)
    if (sampler.source_ae.digest(), sampler.target_ae.digest()) != before:
        raise UsageError("autoencoder parameters changed during flow training")
    return curve


# -- a small velocity field for low-dimensional problems ----------------------------------------

class MLPVelocity(Module):
    """Velocity network for flat states: MLP over [z, sinusoidal(t)]."""

    def __init__(self, dim: int, hidden: int = 64, depth: int = 2, time_dim: int = 16,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self._time_dim = time_dim
        self.net = MLP([dim + time_dim, *[hidden] * depth, dim], rng, dtype)

    def forward(self, z, t) -> Tensor:
        z = ad.as_tensor(z)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        emb = Tensor(sinusoidal_embedding(t, self._time_dim).astype(z.dtype))
        return self.net(ad.concat([z, emb], axis=-1))

    def velocity(self, z, t) -> np.ndarray:
        with ad.no_grad():
            return self.forward(Tensor(np.asarray(z, dtype=np.float32)), t).data
