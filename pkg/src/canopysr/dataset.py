"""Assemble a gridded world of synthetic tile pairs and store it on disk.

Stand-level parameters (tree density, mean height, clearing fraction) vary
smoothly across the tile grid so that neighbouring tiles resemble each other,
which is what makes a spatial checkerboard split meaningful.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from canopysr import io
from canopysr.errors import ConfigError, DataError, PairingError
from canopysr.scene import (
    CLIP_MAX,
    AcquisitionParams,
    DatasetStats,
    SceneParams,
    TilePair,
    checkerboard_split,
    clip_heights,
    compute_stats,
    filter_tiles,
    gen_highres_chm,
    median_composite,
    render_acquisitions,
)


@dataclass
class DataConfig:
    seed: int = 0
    grid_rows: int = 64
    grid_cols: int = 64
    coarse_size: int = 16
    sr_factor: int = 8
    n_dates: int = 5
    cloud_prob: float = 0.5
    band_noise: float = 0.002
    density_min: float = 0.001
    density_max: float = 0.004
    height_min: float = 10.0
    height_max: float = 35.0
    height_cv: float = 0.3
    h_max: float = 60.0
    bare_min: float = 0.05
    bare_max: float = 0.5
    kappa: float = 0.5
    crown_shape: str = "paraboloid"
    negative_rate: float = 0.0
    water_rate: float = 0.0
    clip_max: float = CLIP_MAX
    checker_cell: int = 2

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError("tile grid must be at least 1x1")
        if self.coarse_size < 1 or self.sr_factor < 1:
            raise ConfigError("coarse_size and sr_factor must be >= 1")
        for lo, hi in (("density_min", "density_max"), ("height_min", "height_max"),
                       ("bare_min", "bare_max")):
            if getattr(self, lo) > getattr(self, hi):
                raise ConfigError(f"{lo} exceeds {hi}")
        if not 0 <= self.negative_rate <= 1 or not 0 <= self.water_rate <= 1:
            raise ConfigError("injection rates must lie in [0, 1]")
        if not 0 < self.clip_max <= CLIP_MAX:
            raise ConfigError(f"clip_max must lie in (0, {CLIP_MAX}]")
        if self.checker_cell < 1:
            raise ConfigError("checker_cell must be >= 1")

    @property
    def fine_size(self) -> int:
        return self.coarse_size * self.sr_factor


def tile_id(i: int, j: int) -> str:
    return f"r{i:03d}c{j:03d}"


def _world_field(cfg: DataConfig, k: int) -> np.ndarray:
    """Smooth uniform(0, 1) field over the tile grid."""
    rng = np.random.default_rng([cfg.seed, 7919, k])
    noise = rng.standard_normal((cfg.grid_rows, cfg.grid_cols))
    f = ndimage.gaussian_filter(noise, sigma=3.0, mode="wrap")
    f = (f - f.mean()) / (f.std() + 1e-12)
    return special.ndtr(f)


class World:
    """Deterministic generator for every tile of a DataConfig."""

    def __init__(self, cfg: DataConfig):
        self.cfg = cfg
        self._u = [_world_field(cfg, k) for k in range(3)]

    def _lerp(self, k, i, j, lo, hi, jitter):
        u = np.clip(self._u[k][i, j] + jitter, 0.0, 1.0)
        return float(lo + (hi - lo) * u)

    def scene_params(self, i: int, j: int) -> SceneParams:
        c = self.cfg
        rng = np.random.default_rng([c.seed, i, j, 0])
        jit = rng.uniform(-0.1, 0.1, size=3)
        return SceneParams(
            size=c.fine_size,
            density=self._lerp(0, i, j, c.density_min, c.density_max, jit[0]),
            mean_height=self._lerp(1, i, j, c.height_min, c.height_max, jit[1]),
            height_cv=c.height_cv,
            h_max=c.h_max,
            bare_fraction=self._lerp(2, i, j, c.bare_min, c.bare_max, jit[2]),
            crown_shape=c.crown_shape,
            kappa=c.kappa,
            seed=int(np.random.SeedSequence([c.seed, i, j, 1]).generate_state(1)[0]),
        )

    def acquisition_params(self) -> AcquisitionParams:
        c = self.cfg
        return AcquisitionParams(sr_factor=c.sr_factor, n_dates=c.n_dates, cloud_prob=c.cloud_prob,
                                 band_noise=np.full(12, c.band_noise))

    def raw_tile(self, i: int, j: int) -> TilePair:
        """Tile with its raw height field, before filtering and clipping."""
        c = self.cfg
        params = self.scene_params(i, j)
        chm = gen_highres_chm(params)
        acq_seed = int(np.random.SeedSequence([c.seed, i, j, 2]).generate_state(1)[0])
        composite = median_composite(render_acquisitions(chm, self.acquisition_params(), acq_seed))
        rng = np.random.default_rng([c.seed, i, j, 3])
        if rng.random() < c.negative_rate:
            r, q = rng.integers(0, c.fine_size - 4, size=2)
            chm = chm.copy()
            chm[0, r:r + 4, q:q + 4] = -0.5
        water = bool(rng.random() < c.water_rate)
        return TilePair(tile_id(i, j), i, j, composite, chm, None, water)


@dataclass
class Dataset:
    config: DataConfig
    tiles: list[TilePair]
    stats: DatasetStats
    rejected: list[tuple[str, str]]

    def fold(self, name: str) -> list[TilePair]:
        return [t for t in self.tiles if t.fold == name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        tiles = self.fold(name)
        if not tiles:
            raise DataError(f"fold {name!r} is empty")
        return (np.stack([t.coarse for t in tiles]), np.stack([t.chm for t in tiles]),
                [t.tile_id for t in tiles])


def assign_folds(tiles: list[TilePair], cell: int, clip_max: float) -> DatasetStats:
    """Set each tile's fold and return statistics from the training fold."""
    folds = checkerboard_split(tiles, cell)
    for t in tiles:
        t.fold = folds[t.tile_id]
    train = [t.coarse for t in tiles if t.fold == "train"]
    if not train:
        raise DataError("training fold is empty")
    return compute_stats(np.stack(train), clip_max)


def build_dataset(cfg: DataConfig) -> Dataset:
    world = World(cfg)
    raw = [world.raw_tile(i, j) for i in range(cfg.grid_rows) for j in range(cfg.grid_cols)]
    kept, rejected = filter_tiles(raw)
    for t in kept:
        t.chm = clip_heights(t.chm, cfg.clip_max)
    kept.sort(key=lambda t: t.tile_id)
    stats = assign_folds(kept, cfg.checker_cell, cfg.clip_max)
    return Dataset(cfg, kept, stats, rejected)


# -- on-disk layout ---------------------------------------------------------------------

def write_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    entries = []
    for t in ds.tiles:
        paths = {"coarse": f"tiles/{t.tile_id}.coarse.vsrt", "chm": f"tiles/{t.tile_id}.chm.vsrt"}
        io.save_tile(root / paths["coarse"], t.coarse)
        io.save_tile(root / paths["chm"], t.chm)
        entries.append({"id": t.tile_id, "i": t.i, "j": t.j, "fold": t.fold,
                        "files": paths,
                        "digests": {k: io.file_digest(root / v) for k, v in paths.items()}})
    io.write_json(root / "stats.json", ds.stats.to_dict())
    io.write_json(root / "manifest.json", {
        "kind": "dataset",
        "config": asdict(ds.config),
        "checker_cell": ds.config.checker_cell,
        "stats_digest": ds.stats.digest,
        "tiles": entries,
        "rejected": [{"id": i, "reason": r} for i, r in ds.rejected],
    })
    return root


def read_dataset(root, verify: bool = True) -> Dataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise DataError(f"{root} has no manifest.json")
    man = io.read_json(root / "manifest.json")
    cfg = DataConfig(**man["config"])
    cfg.checker_cell = man.get("checker_cell", cfg.checker_cell)
    stats = DatasetStats.from_dict(io.read_json(root / "stats.json"))
    if stats.digest != man["stats_digest"]:
        raise DataError("stats.json does not match the manifest")
    tiles = []
    for e in man["tiles"]:
        arrays = {}
        for key, rel in e["files"].items():
            path = root / rel
            if not path.exists():
                raise PairingError(f"tile {e['id']}: missing {key} file {rel}")
            if verify and io.file_digest(path) != e["digests"][key]:
                raise DataError(f"tile {e['id']}: {key} file digest mismatch")
            arrays[key] = io.load_tile(path)
        tiles.append(TilePair(e["id"], e["i"], e["j"], arrays["coarse"], arrays["chm"], e["fold"]))
    return Dataset(cfg, tiles, stats, [(r["id"], r["reason"]) for r in man["rejected"]])


def resplit_dataset(root, cell: int) -> Dataset:
    """Reassign folds with a new checker cell and refresh train-fold statistics."""
    ds = read_dataset(root)
    ds.config.checker_cell = cell
    ds.stats = assign_folds(ds.tiles, cell, ds.config.clip_max)
    root = Path(root)
    man = io.read_json(root / "manifest.json")
    folds = {t.tile_id: t.fold for t in ds.tiles}
    for e in man["tiles"]:
        e["fold"] = folds[e["id"]]
    man["checker_cell"] = cell
    man["stats_digest"] = ds.stats.digest
    io.write_json(root / "stats.json", ds.stats.to_dict())
    io.write_json(root / "manifest.json", man)
    return ds
