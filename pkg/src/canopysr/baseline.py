"""Non-learned reference upsampler.

Each coarse pixel's 12 reflectances are inverted band by band through the
known height response, the per-band heights are reduced by their median, and
the result is repeated over the fine block (nearest-neighbour upsampling).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from canopysr.errors import DimensionError
from canopysr.scene import CLIP_MAX, N_BANDS, inverse_band_response


class InverseResponseBaseline(BaseEstimator):
    def __init__(self, sr_factor: int = 8, clip_max: float = CLIP_MAX):
        self.sr_factor = sr_factor
        self.clip_max = clip_max

    def fit(self, X=None, y=None):
        return self

    def coarse_heights(self, composite: np.ndarray) -> np.ndarray:
        c = np.asarray(composite, dtype=np.float64)
        if c.ndim != 3 or c.shape[0] != N_BANDS:
            raise DimensionError(f"expected a ({N_BANDS}, H, W) composite, got {c.shape}")
        per_band = np.stack([inverse_band_response(c[k], k, self.clip_max) for k in range(N_BANDS)])
        return np.median(per_band, axis=0)

    def predict_one(self, composite: np.ndarray) -> np.ndarray:
        h = self.coarse_heights(composite)
        block = np.ones((self.sr_factor, self.sr_factor))
        return np.kron(h, block)[None].astype(np.float32)

    def predict(self, X) -> np.ndarray:
        """(n, 12, H, W) raw composites -> (n, 1, H*f, W*f) heights in metres."""
        X = np.asarray(X)
        if X.ndim == 3:
            X = X[None]
        return np.stack([self.predict_one(x) for x in X])
