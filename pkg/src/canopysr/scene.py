"""Synthetic paired scenes and the data-preparation protocol.

A scene is a fine-resolution canopy height field built from individual tree
crowns. Coarse 12-band "acquisitions" are rendered from it through a fixed
per-band height response, block-averaged to the coarse grid, with noise and
cloud blobs; a cloud-masked temporal median turns them into one composite.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from canopysr.errors import CompositingError, DataError, GeometryError, StatsError

N_BANDS = 12
CLIP_MAX = 120.0

# g_k(h) = offset_k + amplitude_k * (1 - exp(-h / scale_k)); distinct saturation per band.
BAND_OFFSET = np.array([0.04, 0.06, 0.05, 0.12, 0.20, 0.25, 0.28, 0.30, 0.27, 0.22, 0.15, 0.09])
BAND_AMPLITUDE = np.array([-0.020, -0.030, -0.035, 0.050, 0.100, 0.140,
                           0.160, 0.180, 0.150, -0.080, -0.060, -0.050])
BAND_SCALE = np.array([2.0, 3.0, 4.5, 6.0, 8.0, 11.0, 15.0, 20.0, 27.0, 36.0, 48.0, 64.0])
BAND_NOISE = np.full(N_BANDS, 0.002)
CLOUD_REFLECTANCE = 0.55


def band_response(h: np.ndarray) -> np.ndarray:
    """Per-band reflectance for heights ``h``; returns shape (12, *h.shape)."""
    h = np.asarray(h, dtype=np.float64)
    k = (slice(None),) + (None,) * h.ndim
    return BAND_OFFSET[k] + BAND_AMPLITUDE[k] * (1.0 - np.exp(-h[None] / BAND_SCALE[k]))


def inverse_band_response(x: np.ndarray, band: int, h_max: float = CLIP_MAX) -> np.ndarray:
    """Height whose response in ``band`` equals ``x``, clipped to [0, h_max]."""
    frac = (np.asarray(x, dtype=np.float64) - BAND_OFFSET[band]) / BAND_AMPLITUDE[band]
    ceiling = 1.0 - math.exp(-h_max / BAND_SCALE[band])
    frac = np.clip(frac, 0.0, ceiling)
    with np.errstate(divide="ignore"):
        h = -BAND_SCALE[band] * np.log1p(-frac)
    return np.clip(h, 0.0, h_max)


# -- fine-resolution scenes -------------------------------------------------------------

@dataclass
class SceneParams:
    size: int = 128
    density: float = 0.0025       # trees per fine pixel
    mean_height: float = 20.0
    height_cv: float = 0.3
    h_max: float = 60.0
    bare_fraction: float = 0.2
    crown_shape: str = "paraboloid"
    kappa: float = 0.5            # crown radius in pixels per metre of height
    seed: int = 0

    def __post_init__(self):
        if self.h_max > CLIP_MAX or self.h_max < 2.0:
            raise DataError(f"h_max must lie in [2, {CLIP_MAX}], got {self.h_max}")
        if self.crown_shape not in ("cone", "paraboloid"):
            raise DataError(f"unknown crown shape {self.crown_shape!r}")
        if self.density < 0 or not 0 <= self.bare_fraction <= 1:
            raise DataError("density must be >= 0 and bare_fraction in [0, 1]")


def render_crowns(size: int, centers, heights, shape: str = "paraboloid",
                  kappa: float = 0.3) -> np.ndarray:
    """Rasterise crowns onto a zero background; overlaps take the pointwise max."""
    out = np.zeros((size, size), dtype=np.float64)
    for (cy, cx), h in zip(np.asarray(centers, dtype=float).reshape(-1, 2), heights):
        r = max(kappa * h, 0.5)
        r0, r1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, size)
        c0, c1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, size)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        u = np.hypot(yy - cy, xx - cx) / r
        crown = h * (1.0 - u) if shape == "cone" else h * (1.0 - u * u)
        crown = np.where(u < 1.0, crown, 0.0)
        np.maximum(out[r0:r1, c0:c1], crown, out=out[r0:r1, c0:c1])
    return out


def _smooth_field(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    f = ndimage.gaussian_filter(noise, sigma=scale, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def gen_highres_chm(params: SceneParams) -> np.ndarray:
    """Fine height field (1 x N x N, metres) for one scene."""
    rng = np.random.default_rng(params.seed)
    n = params.size
    count = math.ceil(params.density * n * n)
    centers = rng.uniform(0, n, size=(count, 2))
    shape_k = 1.0 / max(params.height_cv, 1e-3) ** 2
    heights = rng.gamma(shape_k, params.mean_height / shape_k, size=count)
    heights = np.clip(heights, 2.0, params.h_max)
    clearing = _smooth_field(rng, n, n / 10.0)
    if count and params.bare_fraction > 0:
        cut = np.quantile(clearing, params.bare_fraction)
        idx = np.clip(centers.astype(int), 0, n - 1)
        keep = clearing[idx[:, 0], idx[:, 1]] > cut
        centers, heights = centers[keep], heights[keep]
    chm = render_crowns(n, centers, heights, params.crown_shape, params.kappa)
    return np.clip(chm, 0.0, CLIP_MAX)[None].astype(np.float32)


# -- coarse acquisitions and compositing ---------------------------------------------------

@dataclass
class AcquisitionParams:
    sr_factor: int = 8
    n_dates: int = 5
    cloud_prob: float = 0.5
    max_blobs: int = 3
    band_noise: np.ndarray = field(default_factory=lambda: BAND_NOISE.copy())


@dataclass
class AcquisitionStack:
    values: np.ndarray   # (dates, bands, H, W)
    valid: np.ndarray    # (dates, H, W) bool


def block_mean(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping factor x factor windows of the last two axes."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise GeometryError(f"size {h}x{w} is not divisible by {factor}")
    return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def render_acquisitions(chm: np.ndarray, params: AcquisitionParams, seed: int) -> AcquisitionStack:
    rng = np.random.default_rng(seed)
    h = np.asarray(chm, dtype=np.float64).reshape(chm.shape[-2:])
    clean = block_mean(band_response(h), params.sr_factor)
    _, hs, ws = clean.shape
    values = np.empty((params.n_dates, N_BANDS, hs, ws))
    valid = np.ones((params.n_dates, hs, ws), dtype=bool)
    yy, xx = np.mgrid[0:hs, 0:ws]
    for d in range(params.n_dates):
        values[d] = clean + rng.standard_normal(clean.shape) * params.band_noise[:, None, None]
        if rng.random() < params.cloud_prob:
            for _ in range(int(rng.integers(1, params.max_blobs + 1))):
                cy, cx = rng.uniform(0, hs), rng.uniform(0, ws)
                rad = rng.uniform(1.0, hs / 3.0)
                valid[d] &= np.hypot(yy - cy, xx - cx) > rad
        cloudy = ~valid[d]
        values[d][:, cloudy] = CLOUD_REFLECTANCE + 0.05 * rng.standard_normal((N_BANDS, cloudy.sum()))
    # every pixel must be observable on at least one date
    bare = ~valid.any(axis=0)
    if bare.any():
        d = int(rng.integers(params.n_dates))
        valid[d, bare] = True
        values[d][:, bare] = (clean[:, bare]
                              + rng.standard_normal((N_BANDS, bare.sum()))
                              * params.band_noise[:, None])
    return AcquisitionStack(values.astype(np.float32), valid)


def median_composite(stack: AcquisitionStack) -> np.ndarray:
    """Per-pixel, per-band median over valid dates (even counts average the middle two)."""
    counts = stack.valid.sum(axis=0)
    if (counts == 0).any():
        r, c = np.argwhere(counts == 0)[0]
        raise CompositingError(f"pixel ({r}, {c}) has no valid acquisition")
    masked = np.where(stack.valid[:, None], stack.values.astype(np.float64), np.nan)
    return np.nanmedian(masked, axis=0).astype(np.float32)


# -- tiles ----------------------------------------------------------------------------------

@dataclass
class TilePair:
    tile_id: str
    i: int
    j: int
    coarse: np.ndarray        # (12, Hs, Ws) composite reflectance
    chm: np.ndarray           # (1, Ht, Wt) metres
    fold: str | None = None
    water: bool = False

    def __post_init__(self):
        hs, ws = self.coarse.shape[-2:]
        ht, wt = self.chm.shape[-2:]
        if ht % hs or wt % ws or ht // hs != wt // ws:
            raise GeometryError(f"tile {self.tile_id}: fine {ht}x{wt} is not an integer "
                                f"multiple of coarse {hs}x{ws}")


def filter_tiles(tiles):
    """Drop tiles with negative heights or a water flag; returns (kept, log)."""
    kept, log = [], []
    for t in tiles:
        if (t.chm < 0).any():
            log.append((t.tile_id, "negative-height"))
        elif t.water:
            log.append((t.tile_id, "water"))
        else:
            kept.append(t)
    return kept, log


def clip_heights(chm: np.ndarray, clip_max: float = CLIP_MAX) -> np.ndarray:
    return np.minimum(chm, np.float32(clip_max))


# -- dihedral augmentation --------------------------------------------------------------------

def dihedral(x: np.ndarray, code: int) -> np.ndarray:
    """Apply element ``code`` (0-7) of the square's symmetry group to the last two axes.

    ``code % 4`` counter-clockwise quarter turns, then a left-right flip if
    ``code >= 4``.
    """
    if not 0 <= code < 8:
        raise ValueError(f"dihedral code must be in 0..7, got {code}")
    if code % 2 and x.shape[-1] != x.shape[-2]:
        raise GeometryError(f"rotation needs a square tile, got {x.shape[-2:]}")
    y = np.rot90(x, code % 4, axes=(-2, -1))
    if code >= 4:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def dihedral_compose(a: int, b: int) -> int:
    """Code of applying ``a`` then ``b``."""
    probe = np.arange(9).reshape(3, 3)
    target = dihedral(dihedral(probe, a), b)
    return next(c for c in range(8) if np.array_equal(dihedral(probe, c), target))


def dihedral_inverse(code: int) -> int:
    return next(c for c in range(8) if dihedral_compose(code, c) == 0)


def augment_pair(pair: TilePair, code: int) -> TilePair:
    return replace(pair, coarse=dihedral(pair.coarse, code), chm=dihedral(pair.chm, code))


# -- spatial split ----------------------------------------------------------------------------

def checkerboard_fold(i: int, j: int, cell: int = 2) -> str:
    return "train" if (i // cell + j // cell) % 2 == 0 else "validation"


def checkerboard_split(tiles, cell: int = 2) -> dict[str, str]:
    """Fold per tile id from its grid coordinates."""
    if cell < 1:
        raise DataError(f"checker cell must be >= 1, got {cell}")
    seen: dict[tuple[int, int], str] = {}
    folds = {}
    for t in tiles:
        key = (t.i, t.j)
        if key in seen:
            raise DataError(f"tiles {seen[key]} and {t.tile_id} share grid cell {key}")
        seen[key] = t.tile_id
        folds[t.tile_id] = checkerboard_fold(t.i, t.j, cell)
    return folds


# -- dataset statistics and normalisation -------------------------------------------------------

@dataclass
class DatasetStats:
    band_mean: np.ndarray
    band_std: np.ndarray
    chm_min: float = 0.0
    chm_max: float = CLIP_MAX

    def __post_init__(self):
        self.band_mean = np.asarray(self.band_mean, dtype=np.float64)
        self.band_std = np.asarray(self.band_std, dtype=np.float64)
        if np.any(self.band_std <= 0):
            raise StatsError("band standard deviations must be positive")
        if self.chm_max <= self.chm_min:
            raise StatsError(f"CHM max {self.chm_max} must exceed min {self.chm_min}")

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.band_mean, self.band_std, np.array([self.chm_min, self.chm_max])):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"band_mean": self.band_mean.tolist(), "band_std": self.band_std.tolist(),
                "chm_min": self.chm_min, "chm_max": self.chm_max, "digest": self.digest}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        stats = cls(d["band_mean"], d["band_std"], d["chm_min"], d["chm_max"])
        if "digest" in d and d["digest"] != stats.digest:
            raise StatsError("stats digest does not match its contents")
        return stats


def compute_stats(composites: np.ndarray, clip_max: float = CLIP_MAX) -> DatasetStats:
    """Per-band statistics over a stack of composites (n, 12, H, W)."""
    c = np.asarray(composites, dtype=np.float64)
    if c.ndim != 4 or c.shape[0] == 0:
        raise StatsError(f"need a non-empty (n, bands, H, W) stack, got {c.shape}")
    std = c.std(axis=(0, 2, 3))
    if np.any(std == 0):
        raise StatsError("a band has zero variance in the training fold")
    return DatasetStats(c.mean(axis=(0, 2, 3)), std, 0.0, clip_max)


def normalize_source(x: np.ndarray, stats: DatasetStats) -> np.ndarray:
    k = (slice(None), None, None)
    return ((x - stats.band_mean[k]) / stats.band_std[k]).astype(np.float32)


def denormalize_source(z: np.ndarray, stats: DatasetStats) -> np.ndarray:
    k = (slice(None), None, None)
    return z.astype(np.float64) * stats.band_std[k] + stats.band_mean[k]


def normalize_target(chm: np.ndarray, stats: DatasetStats) -> np.ndarray:
    clipped = np.clip(chm, stats.chm_min, stats.chm_max)
    return ((clipped - stats.chm_min) / (stats.chm_max - stats.chm_min)).astype(np.float32)


def denormalize_target(y: np.ndarray, stats: DatasetStats) -> np.ndarray:
    h = np.asarray(y, dtype=np.float64) * (stats.chm_max - stats.chm_min) + stats.chm_min
    return np.clip(h, 0.0, stats.chm_max).astype(np.float32)
