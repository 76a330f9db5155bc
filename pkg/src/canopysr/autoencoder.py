"""Patch autoencoders mapping images onto a coarse latent grid.

Each P x P patch (all channels) is flattened and pushed through an MLP to a
latent vector; the decoder maps a latent vector back to a patch. Choosing
P per side lets a 16x16 source image and a 128x128 height field land on
the same 8x8 grid.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from canopysr import autodiff as ad
from canopysr.errors import ConfigError, DataError, DimensionError, UsageError
from canopysr.io import Checkpoint
from canopysr.nn import MLP, Module
from canopysr.training import LossCurve, OptimConfig, run_training


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(n, C, H, W) -> (n, H/P, W/P, C*P*P), channel-major inside a patch."""
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"spatial size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return x.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh, gw, -1)


def unpatchify(p: np.ndarray, channels: int, patch: int) -> np.ndarray:
    n, gh, gw, _ = p.shape
    return (p.reshape(n, gh, gw, channels, patch, patch)
            .transpose(0, 3, 1, 4, 2, 5).reshape(n, channels, gh * patch, gw * patch))


class AutoencoderNet(Module):
    def __init__(self, encoder: MLP, decoder: MLP):
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, x):
        return self.decoder(self.encoder(x))


class PatchAutoencoder(BaseEstimator, TransformerMixin):
    """MLP autoencoder over non-overlapping square patches.

    ``transform`` maps (n, C, H, W) images to (n, latent_channels, H/P, W/P)
    latent grids and ``inverse_transform`` maps them back.
    """

    def __init__(self, in_channels: int = 1, patch: int = 16, latent_channels: int = 4,
                 hidden: int = 256, depth: int = 2, steps: int = 3000, batch_size: int = 256,
                 lr: float = 1e-3, weight_decay: float = 0.0, seed: int = 0):
        self.in_channels = in_channels
        self.patch = patch
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    # -- construction --------------------------------------------------------------

    def _validate_params(self):
        for name in ("in_channels", "patch", "latent_channels", "hidden", "depth", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def initialize(self) -> "PatchAutoencoder":
        """Create untrained weights (zero biases) without fitting."""
        return self._build()

    def _build(self):
        self._validate_params()
        rng = np.random.default_rng(self.seed)
        width = self.in_channels * self.patch ** 2
        hid = [self.hidden] * self.depth
        self.net_ = AutoencoderNet(MLP([width, *hid, self.latent_channels], rng),
                                   MLP([self.latent_channels, *hid, width], rng))
        self.curve_ = LossCurve()
        return self

    def _check_images(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1] != self.in_channels:
            raise DimensionError(f"expected (n, {self.in_channels}, H, W) images, got {X.shape}")
        if X.shape[2] % self.patch or X.shape[3] % self.patch:
            raise ConfigError(f"spatial size {X.shape[2]}x{X.shape[3]} is not divisible "
                              f"by patch size {self.patch}")
        if not np.all(np.isfinite(X)):
            raise DataError("images contain non-finite values")
        return X

    # -- estimator API --------------------------------------------------------------

    def fit(self, X, y=None):
        """Train on reconstruction MSE of randomly drawn patches."""
        X = self._check_images(X)
        self._build()
        patches = patchify(X, self.patch).reshape(-1, self.in_channels * self.patch ** 2)
        batch = min(self.batch_size, len(patches))

        def loss(rng, step):
            idx = rng.integers(0, len(patches), size=batch)
            x = ad.Tensor(patches[idx])
            return ad.mse(self.net_(x), x)

        cfg = OptimConfig(steps=self.steps, batch_size=batch, lr=self.lr,
                          weight_decay=self.weight_decay, seed=self.seed)
        run_training(self.net_, loss, cfg, self.curve_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = self._check_images(X)
        p = patchify(X, self.patch)
        n, gh, gw, d = p.shape
        z = self._apply(self.net_.encoder, p.reshape(n, gh * gw, d))
        return z.reshape(n, gh, gw, -1).transpose(0, 3, 1, 2)

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "net_")
        Z = np.asarray(Z, dtype=np.float32)
        if Z.ndim == 3:
            Z = Z[None]
        if Z.ndim != 4 or Z.shape[1] != self.latent_channels:
            raise DimensionError(f"expected (n, {self.latent_channels}, H_L, W_L) latents, "
                                 f"got {Z.shape}")
        n, c, gh, gw = Z.shape
        out = self._apply(self.net_.decoder, Z.transpose(0, 2, 3, 1).reshape(n, gh * gw, c))
        return unpatchify(out.reshape(n, gh, gw, -1), self.in_channels, self.patch)

    def encode(self, image) -> np.ndarray:
        """Single image (C, H, W) -> latent grid (C_l, H/P, W/P)."""
        return self.transform(np.asarray(image)[None])[0]

    def decode(self, latent) -> np.ndarray:
        return self.inverse_transform(np.asarray(latent)[None])[0]

    def reconstruction_rmse(self, X) -> float:
        X = self._check_images(X)
        return float(np.sqrt(np.mean((self.inverse_transform(self.transform(X)) - X) ** 2)))

    @staticmethod
    def _apply(net, rows: np.ndarray, chunk: int = 256) -> np.ndarray:
        # rows are grouped per image (n, patches, d) so each image's result is
        # independent of its neighbours in the batch
        with ad.no_grad():
            return np.concatenate([net(ad.Tensor(np.ascontiguousarray(rows[i:i + chunk]))).data
                                   for i in range(0, len(rows), chunk)])

    # -- freezing and persistence --------------------------------------------------------

    @property
    def frozen(self) -> bool:
        return hasattr(self, "net_") and self.net_.frozen

    def freeze(self) -> "PatchAutoencoder":
        check_is_fitted(self, "net_")
        self.net_.freeze()
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        return self.net_.state_dict()

    def digest(self) -> str:
        return self.net_.digest()

    def to_checkpoint(self, **metadata) -> Checkpoint:
        losses = self.curve_.losses
        meta = {"kind": "patch-autoencoder", "params": self.get_params(),
                "steps": len(losses), "final_loss": float(losses[-1]) if len(losses) else None}
        meta.update(metadata)
        return Checkpoint(self.state_dict(), self.frozen, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PatchAutoencoder":
        if ckpt.metadata.get("kind") != "patch-autoencoder":
            raise UsageError(f"checkpoint holds {ckpt.metadata.get('kind')!r}, not an autoencoder")
        ae = cls(**ckpt.metadata["params"])._build()
        ae.net_.load_state_dict(ckpt.params)
        if ckpt.frozen:
            ae.freeze()
        return ae
