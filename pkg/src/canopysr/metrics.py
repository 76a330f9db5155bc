"""Height-field accuracy metrics and the tile-level evaluation report.

All metrics are computed over the evaluation mask, which is derived from the
reference field only (reference >= threshold, 2 m by default).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from canopysr.errors import (
    DimensionError,
    GeometryError,
    PairingError,
    RangeError,
    UndefinedMetricError,
)

DEFAULT_BIN_EDGES = (2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 45.0, 60.0, 120.0)
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class HeightField:
    values: np.ndarray
    resolution: float = 1.25

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 3 and self.values.shape[0] == 1:
            self.values = self.values[0]
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DimensionError(f"height field must be 2-D and non-empty, got {self.values.shape}")


@dataclass
class MetricsConfig:
    threshold: float = 2.0
    block: int = 30
    block_variant: str = "appendix"
    edge_scale: float = 120.0
    bin_edges: tuple = DEFAULT_BIN_EDGES
    resolution_factors: tuple = (1, 8, 16)
    native_resolution: float = 1.25

    def __post_init__(self):
        self.bin_edges = tuple(float(e) for e in self.bin_edges)
        self.resolution_factors = tuple(int(f) for f in self.resolution_factors)
        if not self.resolution_factors or self.resolution_factors[0] != 1:
            raise RangeError("resolution factors must start with the native factor 1")
        if any(f < 1 for f in self.resolution_factors):
            raise RangeError("resolution factors must be >= 1")
        if self.block < 1:
            raise RangeError("block size must be >= 1")


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D height field, got shape {a.shape}")
    return a


def reference_mask(ref, threshold: float = 2.0) -> np.ndarray:
    return _as2d(ref) >= threshold


def _prepare(ref, pred, mask, threshold):
    ref, pred = _as2d(ref), _as2d(pred)
    if ref.shape != pred.shape:
        raise DimensionError(f"reference {ref.shape} and prediction {pred.shape} differ")
    mask = reference_mask(ref, threshold) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != ref.shape:
        raise DimensionError(f"mask {mask.shape} does not match fields {ref.shape}")
    return ref, pred, mask


def mae(ref, pred, mask=None, threshold: float = 2.0) -> float:
    ref, pred, mask = _prepare(ref, pred, mask, threshold)
    if not mask.any():
        raise UndefinedMetricError("MAE undefined: empty evaluation mask")
    return float(np.abs(ref[mask] - pred[mask]).mean())


def mean_error(ref, pred, mask=None, threshold: float = 2.0) -> float:
    """Mean of (prediction - reference); negative means underestimation."""
    ref, pred, mask = _prepare(ref, pred, mask, threshold)
    if not mask.any():
        raise UndefinedMetricError("ME undefined: empty evaluation mask")
    return float((pred[mask] - ref[mask]).mean())


def _block_slices(shape, block):
    for r in range(0, shape[0], block):
        for c in range(0, shape[1], block):
            yield slice(r, r + block), slice(c, c + block)


def block_r2_sums(ref, pred, mask, block: int) -> tuple[float, float, int]:
    """Residual and within-block reference sums of squares over usable blocks.

    Blocks with fewer than two masked pixels or zero reference variance add
    to neither sum. Returns ``(ss_res, ss_tot, n_blocks_used)``.
    """
    ss_res = ss_tot = 0.0
    used = 0
    for sl in _block_slices(ref.shape, block):
        m = mask[sl]
        if m.sum() < 2:
            continue
        y, yh = ref[sl][m], pred[sl][m]
        dev = y - y.mean()
        tot = float((dev * dev).sum())
        if tot == 0.0:
            continue
        ss_res += float(((y - yh) ** 2).sum())
        ss_tot += tot
        used += 1
    return ss_res, ss_tot, used


def _block_means(ref, pred, mask, block):
    ys, ps = [], []
    for sl in _block_slices(ref.shape, block):
        m = mask[sl]
        if m.any():
            ys.append(ref[sl][m].mean())
            ps.append(pred[sl][m].mean())
    return np.array(ys), np.array(ps)


def block_r2(ref, pred, mask=None, block: int = 30, threshold: float = 2.0,
             variant: str = "appendix") -> float:
    """Block-R2.

    ``variant="appendix"`` scores per-pixel residuals against per-block
    reference means. ``variant="aggregate"`` first averages reference and
    prediction within blocks and computes an ordinary R2 over the block means.
    """
    if block < 1:
        raise RangeError(f"block size must be >= 1, got {block}")
    ref, pred, mask = _prepare(ref, pred, mask, threshold)
    if variant == "aggregate":
        ys, ps = _block_means(ref, pred, mask, block)
        if ys.size < 2 or np.all(ys == ys.mean()):
            raise UndefinedMetricError("aggregate Block-R2 undefined: fewer than two distinct blocks")
        return float(1.0 - ((ys - ps) ** 2).sum() / ((ys - ys.mean()) ** 2).sum())
    if variant != "appendix":
        raise RangeError(f"unknown Block-R2 variant {variant!r}")
    ss_res, ss_tot, used = block_r2_sums(ref, pred, mask, block)
    if used == 0:
        raise UndefinedMetricError("Block-R2 undefined: every block is degenerate")
    return 1.0 - ss_res / ss_tot


def sobel_magnitude(field_, scale: float = 120.0) -> np.ndarray:
    """Sobel gradient magnitude of ``field / scale`` with replicate padding."""
    f = _as2d(field_)
    if f.shape[0] < 3 or f.shape[1] < 3:
        raise GeometryError(f"field {f.shape} is smaller than the 3x3 Sobel kernel")
    f = f / scale
    gx = ndimage.sobel(f, axis=1, mode="nearest")
    gy = ndimage.sobel(f, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def edge_error(ref, pred, mask=None, threshold: float = 2.0, scale: float = 120.0) -> float:
    ref, pred, mask = _prepare(ref, pred, mask, threshold)
    if not mask.any():
        raise UndefinedMetricError("EE undefined: empty evaluation mask")
    diff = np.abs(sobel_magnitude(pred, scale) - sobel_magnitude(ref, scale))
    return float(diff[mask].mean())


@dataclass
class HeightBin:
    lower: float
    upper: float
    count: int
    quantiles: list | None


def quantiles(values, qs: Sequence[float] = QUANTILES) -> list[float]:
    """Linear-interpolation quantiles at position (n - 1) * q of the sorted sample."""
    s = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if s.size == 0:
        raise UndefinedMetricError("quantiles of an empty sample")
    out = []
    for q in qs:
        pos = (s.size - 1) * q
        lo = int(np.floor(pos))
        hi = min(lo + 1, s.size - 1)
        out.append(float(s[lo] + (s[hi] - s[lo]) * (pos - lo)))
    return out


def _bin_index(values, edges):
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = len(edges) - 2
    idx[(values < edges[0]) | (values > edges[-1])] = -1
    return idx


def height_binned_residuals(ref, pred, mask=None, edges: Sequence[float] = DEFAULT_BIN_EDGES,
                            threshold: float = 2.0) -> list[HeightBin]:
    """Residual (pred - ref) quantiles per reference-height bin.

    Bins are half-open ``[lower, upper)`` except the last, which is closed.
    """
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise RangeError(f"bin edges must be strictly increasing: {edges}")
    ref, pred, mask = _prepare(ref, pred, mask, threshold)
    y, res = ref[mask], pred[mask] - ref[mask]
    idx = _bin_index(y, edges)
    rows = []
    for i in range(len(edges) - 1):
        r = res[idx == i]
        q = quantiles(r) if r.size else None
        rows.append(HeightBin(edges[i], edges[i + 1], int(r.size), q))
    return rows


def height_histogram(values, edges: Sequence[float] = DEFAULT_BIN_EDGES) -> np.ndarray:
    """Counts per bin, using the same bin convention as the residual table."""
    v = np.asarray(values, dtype=np.float64).ravel()
    idx = _bin_index(v, edges)
    return np.bincount(idx[idx >= 0], minlength=len(edges) - 1).astype(np.int64)


def histogram_deviation(ref_values, pred_values, edges=DEFAULT_BIN_EDGES) -> np.ndarray:
    """Per-bin absolute difference of relative frequencies.

    Both histograms are normalised by the number of evaluated pixels, so
    predicted mass falling outside the bins counts as missing mass.
    """
    ref_values = np.asarray(ref_values).ravel()
    pred_values = np.asarray(pred_values).ravel()
    if ref_values.size != pred_values.size or ref_values.size == 0:
        raise DimensionError("histogram deviation needs equal, non-empty samples")
    n = ref_values.size
    return np.abs(height_histogram(pred_values, edges) / n - height_histogram(ref_values, edges) / n)


def aggregate_to_resolution(field_: HeightField, factor: int) -> HeightField:
    """Block-mean downsampling; edge remainders average over partial windows."""
    if factor < 1:
        raise RangeError(f"aggregation factor must be >= 1, got {factor}")
    v = field_.values
    if factor == 1:
        return HeightField(v.copy(), field_.resolution)
    h, w = v.shape
    rows = [slice(r, r + factor) for r in range(0, h, factor)]
    cols = [slice(c, c + factor) for c in range(0, w, factor)]
    if h % factor == 0 and w % factor == 0:
        out = v.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    else:
        out = np.array([[v[r, c].mean() for c in cols] for r in rows])
    return HeightField(out, field_.resolution * factor)


# -- dataset evaluation -------------------------------------------------------------

@dataclass
class MetricReport:
    n: int
    mae: float
    me: float
    block_r2: float
    ee: float
    rows: list = field(default_factory=list)
    bins: list = field(default_factory=list)
    resolution_rows: list = field(default_factory=list)
    histogram: dict = field(default_factory=dict)

    ROW_FIELDS = ("tile_id", "factor", "resolution_m", "n", "mae", "me", "block_r2", "ee")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row[k]) for k in self.ROW_FIELDS})
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n": self.n, "mae": self.mae, "me": self.me, "block_r2": self.block_r2,
            "ee": self.ee, "resolutions": self.resolution_rows,
            "height_bins": [asdict(b) for b in self.bins], "histogram": self.histogram,
        }

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(self.summary()), indent=2, sort_keys=True)


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return v


def _nan_to_none(obj):
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


class _Pool:
    def __init__(self):
        self.n = 0
        self.abs_sum = self.err_sum = self.edge_sum = 0.0
        self.ss_res = self.ss_tot = 0.0
        self.blocks = 0

    def result(self) -> dict:
        nan = float("nan")
        return {
            "n": self.n,
            "mae": self.abs_sum / self.n if self.n else nan,
            "me": self.err_sum / self.n if self.n else nan,
            "block_r2": 1.0 - self.ss_res / self.ss_tot if self.blocks else nan,
            "ee": self.edge_sum / self.n if self.n else nan,
        }


def _tile_row(tile_id, ref, pred, cfg: MetricsConfig, factor, pool: _Pool) -> dict:
    nan = float("nan")
    mask = ref >= cfg.threshold
    n = int(mask.sum())
    row = {"tile_id": tile_id, "factor": factor,
           "resolution_m": cfg.native_resolution * factor, "n": n,
           "mae": nan, "me": nan, "block_r2": nan, "ee": nan}
    if n == 0:
        return row
    d = pred[mask] - ref[mask]
    row["mae"] = float(np.abs(d).mean())
    row["me"] = float(d.mean())
    ss_res, ss_tot, used = block_r2_sums(ref, pred, mask, cfg.block)
    if used:
        row["block_r2"] = 1.0 - ss_res / ss_tot
    pool.n += n
    pool.abs_sum += float(np.abs(d).sum())
    pool.err_sum += float(d.sum())
    pool.ss_res += ss_res
    pool.ss_tot += ss_tot
    pool.blocks += used
    if min(ref.shape) >= 3:
        diff = np.abs(sobel_magnitude(pred, cfg.edge_scale) - sobel_magnitude(ref, cfg.edge_scale))
        row["ee"] = float(diff[mask].mean())
        pool.edge_sum += float(diff[mask].sum())
    return row


def evaluate_dataset(predictions: Mapping[str, np.ndarray], references: Mapping[str, np.ndarray],
                     cfg: MetricsConfig | None = None, tile_ids: Sequence[str] | None = None
                     ) -> MetricReport:
    """Per-tile and pixel-pooled metrics over aligned prediction/reference tiles.

    ``tile_ids`` restricts evaluation (normally to the validation fold);
    every listed id must exist on both sides.
    """
    cfg = cfg or MetricsConfig()
    ids = sorted(tile_ids if tile_ids is not None else references)
    missing_pred = [i for i in ids if i not in predictions]
    missing_ref = [i for i in ids if i not in references]
    if missing_pred or missing_ref:
        raise PairingError(f"unpaired tiles: no prediction for {missing_pred}, "
                           f"no reference for {missing_ref}")

    pools = {f: _Pool() for f in cfg.resolution_factors}
    rows = []
    ref_pix, pred_pix = [], []
    ref_all, pred_all = [], []
    for tid in ids:
        ref, pred = _as2d(references[tid]), _as2d(predictions[tid])
        if ref.shape != pred.shape:
            raise DimensionError(f"tile {tid}: reference {ref.shape} vs prediction {pred.shape}")
        for factor in cfg.resolution_factors:
            r = aggregate_to_resolution(HeightField(ref), factor).values
            p = aggregate_to_resolution(HeightField(pred), factor).values
            rows.append(_tile_row(tid, r, p, cfg, factor, pools[factor]))
        mask = ref >= cfg.threshold
        ref_pix.append(ref[mask])
        pred_pix.append(pred[mask])

    y = np.concatenate(ref_pix) if ref_pix else np.zeros(0)
    yh = np.concatenate(pred_pix) if pred_pix else np.zeros(0)
    bins, hist = [], {}
    if y.size:
        bins = height_binned_residuals(y[None, :], yh[None, :], np.ones((1, y.size), bool),
                                       cfg.bin_edges)
        hist = {
            "edges": list(cfg.bin_edges),
            "reference": height_histogram(y, cfg.bin_edges).tolist(),
            "prediction": height_histogram(yh, cfg.bin_edges).tolist(),
            "abs_frequency_deviation": histogram_deviation(y, yh, cfg.bin_edges).tolist(),
        }
    res_rows = [{"factor": f, "resolution_m": cfg.native_resolution * f, **pools[f].result()}
                for f in cfg.resolution_factors]
    native = pools[cfg.resolution_factors[0]].result()
    return MetricReport(native["n"], native["mae"], native["me"], native["block_r2"],
                        native["ee"], rows, bins, res_rows, hist)
