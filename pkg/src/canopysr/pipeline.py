"""End-to-end estimator: coarse 12-band composites in, fine height fields out."""
from __future__ import annotations

from dataclasses import asdict, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from canopysr.autoencoder import PatchAutoencoder
from canopysr.errors import DimensionError, UsageError
from canopysr.flow import (
    FlowTrainConfig,
    LatentScaler,
    PairedLatentSampler,
    build_state_pair,
    train_flow,
)
from canopysr.io import Checkpoint
from canopysr.ode import IntegratorConfig, TrajectoryRecord, integrate
from canopysr.scene import (
    CLIP_MAX,
    N_BANDS,
    DatasetStats,
    compute_stats,
    denormalize_target,
    normalize_source,
    normalize_target,
)
from canopysr.training import LossCurve
from canopysr.uvit import UViT, UViTConfig


def default_source_ae() -> PatchAutoencoder:
    return PatchAutoencoder(in_channels=N_BANDS, patch=2, latent_channels=4, hidden=128)


def default_target_ae() -> PatchAutoencoder:
    return PatchAutoencoder(in_channels=1, patch=16, latent_channels=4, hidden=256)


class LatentFlowSR(BaseEstimator, RegressorMixin):
    """Frozen patch autoencoders + a U-ViT velocity field integrated with dopri5.

    ``fit`` runs the stages in order (statistics, both autoencoders, freeze,
    latent scaling, flow training). ``predict`` maps raw composites to
    heights in metres; the noise each tile starts from is derived from its
    own conditioning latent, so predictions are reproducible.
    """

    def __init__(self, source_ae=None, target_ae=None, uvit: UViTConfig | None = None,
                 flow: FlowTrainConfig | None = None, integrator: IntegratorConfig | None = None,
                 clip_max: float = CLIP_MAX, batch_size: int = 64):
        self.source_ae = source_ae
        self.target_ae = target_ae
        self.uvit = uvit
        self.flow = flow
        self.integrator = integrator
        self.clip_max = clip_max
        self.batch_size = batch_size

    # -- validation ------------------------------------------------------------------

    @staticmethod
    def _check_source(X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1] != N_BANDS:
            raise DimensionError(f"expected (n, {N_BANDS}, H, W) composites, got {X.shape}")
        return X

    @staticmethod
    def _check_target(y, n) -> np.ndarray:
        y = np.asarray(y, dtype=np.float32)
        if y.ndim == 3:
            y = y[None]
        if y.ndim != 4 or y.shape[1] != 1 or len(y) != n:
            raise DimensionError(f"expected ({n}, 1, H, W) height fields, got {y.shape}")
        return y

    # -- staged fitting ----------------------------------------------------------------

    def fit_autoencoders(self, X, y, stats: DatasetStats | None = None):
        X = self._check_source(X)
        y = self._check_target(y, len(X))
        self.stats_ = stats or compute_stats(X, self.clip_max)
        xs = np.stack([normalize_source(x, self.stats_) for x in X])
        yn = normalize_target(y, self.stats_)
        self.source_ae_ = clone(self.source_ae or default_source_ae()).fit(xs).freeze()
        self.target_ae_ = clone(self.target_ae or default_target_ae()).fit(yn).freeze()
        return self

    def fit_flow(self, X, y):
        check_is_fitted(self, "source_ae_")
        X = self._check_source(X)
        y = self._check_target(y, len(X))
        xs = np.stack([normalize_source(x, self.stats_) for x in X])
        yn = normalize_target(y, self.stats_)
        self.source_scaler_ = LatentScaler.fit(self.source_ae_.transform(xs))
        self.target_scaler_ = LatentScaler.fit(self.target_ae_.transform(yn))
        self.model_ = UViT(self._uvit_config(xs.shape[-2:]))
        flow_cfg = self.flow or FlowTrainConfig()
        sampler = PairedLatentSampler(xs, yn, self.source_ae_, self.target_ae_,
                                      self.source_scaler_, self.target_scaler_, flow_cfg.augment)
        self.curve_ = train_flow(self.model_, sampler, flow_cfg, LossCurve())
        return self

    def fit(self, X, y, stats: DatasetStats | None = None):
        return self.fit_autoencoders(X, y, stats).fit_flow(X, y)

    def _uvit_config(self, source_hw) -> UViTConfig:
        grid = (source_hw[0] // self.source_ae_.patch, source_hw[1] // self.source_ae_.patch)
        channels = self.source_ae_.latent_channels + self.target_ae_.latent_channels
        return replace(self.uvit or UViTConfig(), state_channels=channels, grid=grid)

    # -- inference -----------------------------------------------------------------------

    def initial_states(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_source(X)
        xs = np.stack([normalize_source(x, self.stats_) for x in X])
        cond = self.source_scaler_.transform(self.source_ae_.transform(xs))
        ct = self.target_ae_.latent_channels
        dummy = np.zeros((ct, *cond.shape[2:]), dtype=np.float32)
        return np.stack([build_state_pair(c, dummy)[0] for c in cond])

    def _velocity_fn(self, cfg: IntegratorConfig):
        cs = self.source_ae_.latent_channels

        def f(z, t):
            v = self.model_.velocity(z, t)
            if cfg.clamp_conditioning:
                v[:, :cs] = 0.0
            return v

        return f

    def integrate_states(self, z0: np.ndarray) -> tuple[np.ndarray, TrajectoryRecord]:
        cfg = self.integrator or IntegratorConfig()
        cs = self.source_ae_.latent_channels
        z1, rec = integrate(self._velocity_fn(cfg), z0, cfg)
        rec.conditioning_drift = float(np.max(np.abs(z1[:, :cs] - z0[:, :cs])))
        return z1, rec

    def decode_states(self, z1: np.ndarray) -> np.ndarray:
        cs = self.source_ae_.latent_channels
        lat = self.target_scaler_.inverse_transform(z1[:, cs:])
        return denormalize_target(self.target_ae_.inverse_transform(lat), self.stats_)

    def predict_with_records(self, X):
        """Heights (n, 1, H, W) in metres plus one TrajectoryRecord per batch."""
        X = self._check_source(X)
        outs, recs = [], []
        for s in range(0, len(X), self.batch_size):
            z0 = self.initial_states(X[s:s + self.batch_size])
            z1, rec = self.integrate_states(z0)
            outs.append(self.decode_states(z1))
            recs.append(rec)
        return np.concatenate(outs), recs

    def predict(self, X) -> np.ndarray:
        return self.predict_with_records(X)[0]

    def score(self, X, y, sample_weight=None):
        """Negative masked MAE, so that larger is better."""
        from canopysr.metrics import mae

        pred = self.predict(X)
        y = self._check_target(y, len(pred))
        return -float(np.mean([mae(r[0], p[0]) for r, p in zip(y, pred)]))

    # -- persistence ---------------------------------------------------------------------

    def flow_checkpoint(self, **metadata) -> Checkpoint:
        check_is_fitted(self, "model_")
        losses = self.curve_.losses if hasattr(self, "curve_") else np.array([])
        cfg = asdict(self.model_.cfg)
        meta = {
            "kind": "uvit-flow",
            "uvit": cfg,
            "source_scaler": self.source_scaler_.to_dict(),
            "target_scaler": self.target_scaler_.to_dict(),
            "stats": self.stats_.to_dict(),
            "source_ae_digest": self.source_ae_.digest(),
            "target_ae_digest": self.target_ae_.digest(),
            "steps": int(len(losses)),
            "final_loss": float(losses[-1]) if len(losses) else None,
        }
        meta.update(metadata)
        return Checkpoint(self.model_.state_dict(), False, meta)

    @classmethod
    def from_checkpoints(cls, source: Checkpoint, target: Checkpoint, flow: Checkpoint,
                         integrator: IntegratorConfig | None = None) -> "LatentFlowSR":
        if flow.metadata.get("kind") != "uvit-flow":
            raise UsageError("flow checkpoint has the wrong kind")
        est = cls(integrator=integrator)
        est.source_ae_ = PatchAutoencoder.from_checkpoint(source)
        est.target_ae_ = PatchAutoencoder.from_checkpoint(target)
        meta = flow.metadata
        if (est.source_ae_.digest(), est.target_ae_.digest()) != (meta["source_ae_digest"],
                                                                  meta["target_ae_digest"]):
            raise UsageError("autoencoder checkpoints do not match the ones the flow was trained with")
        est.stats_ = DatasetStats.from_dict(meta["stats"])
        est.clip_max = est.stats_.chm_max
        est.source_scaler_ = LatentScaler.from_dict(meta["source_scaler"])
        est.target_scaler_ = LatentScaler.from_dict(meta["target_scaler"])
        est.model_ = UViT(UViTConfig(**meta["uvit"]))
        est.model_.load_state_dict(flow.params)
        return est
