"""Deterministic synthetic scenes standing in for monthly satellite composites.

Parcels are Voronoi cells of a jittered seed grid.  Each cell gets a class so
that the class areas track the requested mixture, and each class has its own
temporal signature over the dry season:

* cropland swings from green to bare soil and back,
* cashew keeps evergreen crowns planted in rows over drying ground,
* mixed trees/grassland dries out more slowly with scattered irregular trees,
* built-up is bright and static.

Cashew parcels are split into high- and low-density plantings; low density
stretches the in-row crown spacing, so crown counts scale with its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .raster import BUILTUP, CASHEW, CROPLAND, MIXED, NODATA, RasterStack

BAND_NAMES = ["blue", "green", "red", "nir"]
MONTHS = ["Nov", "Dec", "Jan", "Feb", "Mar", "Apr", "May"]

SOIL = np.array([0.12, 0.15, 0.20, 0.26])
VEG = np.array([0.03, 0.07, 0.04, 0.42])
DRY = np.array([0.09, 0.12, 0.17, 0.24])
BUILT = np.array([0.22, 0.24, 0.27, 0.31])

# Green fraction per month, Nov..May
CROP_GREEN = np.array([0.75, 0.45, 0.12, 0.05, 0.05, 0.10, 0.30])
GRASS_GREEN = np.array([0.60, 0.50, 0.38, 0.28, 0.22, 0.26, 0.40])
CROWN_GREEN = np.array([0.88, 0.86, 0.84, 0.82, 0.82, 0.84, 0.86])
TREE_GREEN = np.array([0.75, 0.70, 0.60, 0.50, 0.45, 0.50, 0.65])


@dataclass
class SceneConfig:
    height: int = 256
    width: int = 256
    bands: int = 4
    timesteps: int = 7
    # class weights in code order: mixed, cashew, built-up, cropland
    mixture: tuple = (0.25, 0.35, 0.10, 0.30)
    parcel_size: int = 24
    crown_spacing: float = 4.0
    row_spacing: float = 4.0
    low_density_factor: float = 2.0
    high_fraction: float = 0.5
    crown_sigma: float = 0.8
    noise: float = 0.01
    change_rate: float = 0.0

    def validate(self):
        w = np.asarray(self.mixture, dtype=float)
        if w.shape != (4,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-6):
            raise ValueError(f"invalid mixture weights {self.mixture}")
        if self.bands != 4:
            raise ValueError("synthetic scenes have exactly 4 bands")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if min(self.height, self.width) < 1 or self.parcel_size < 2:
            raise ValueError("bad scene geometry")
        if not 0.0 <= self.high_fraction <= 1.0:
            raise ValueError("high_fraction must lie in [0, 1]")
        if not 0.0 <= self.change_rate <= 1.0:
            raise ValueError("change_rate must lie in [0, 1]")


def _profile(curve: np.ndarray, T: int) -> np.ndarray:
    if T == len(curve):
        return curve
    return np.interp(np.linspace(0, len(curve) - 1, T), np.arange(len(curve)), curve)


def _parcels(cfg: SceneConfig, rng) -> tuple[np.ndarray, int]:
    s = cfg.parcel_size
    gy = np.arange(s / 2, cfg.height + s / 2, s)
    gx = np.arange(s / 2, cfg.width + s / 2, s)
    seeds = np.array([(y, x) for y in gy for x in gx], dtype=float)
    seeds += rng.uniform(-0.4 * s, 0.4 * s, size=seeds.shape)
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width]
    _, cell = cKDTree(seeds).query(np.column_stack([yy.ravel(), xx.ravel()]))
    return cell.reshape(cfg.height, cfg.width), len(seeds)


def _greedy_assign(areas: np.ndarray, weights: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Give each cell (in ``order``) to the category with the largest remaining deficit."""
    target = weights * areas.sum()
    got = np.zeros(len(weights))
    out = np.full(len(areas), -1)
    for c in order:
        if areas[c] == 0:
            continue
        k = int(np.argmax(target - got))
        out[c] = k
        got[k] += areas[c]
    return out


def _crowns(cell_mask: np.ndarray, spacing: float, row_spacing: float, rng) -> np.ndarray:
    """Crown centres on rows inside one parcel; rows run along a random axis."""
    ys, xs = np.nonzero(cell_mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    horizontal = rng.random() < 0.5
    phase_r = rng.uniform(0, row_spacing)
    phase_c = rng.uniform(0, spacing)
    if horizontal:
        rows = np.arange(y0 + phase_r, y1, row_spacing)
        cols = np.arange(x0 + phase_c, x1, spacing)
        pts = np.array([(r, c) for r in rows for c in cols], dtype=float).reshape(-1, 2)
    else:
        rows = np.arange(x0 + phase_r, x1, row_spacing)
        cols = np.arange(y0 + phase_c, y1, spacing)
        pts = np.array([(c, r) for r in rows for c in cols], dtype=float).reshape(-1, 2)
    pts += rng.uniform(-0.4, 0.4, size=pts.shape)
    iy = np.clip(np.round(pts[:, 0]).astype(int), 0, cell_mask.shape[0] - 1)
    ix = np.clip(np.round(pts[:, 1]).astype(int), 0, cell_mask.shape[1] - 1)
    return pts[cell_mask[iy, ix]]


def _canopy(points: np.ndarray, shape, sigma: float) -> np.ndarray:
    img = np.zeros(shape)
    if len(points):
        iy = np.clip(np.round(points[:, 0]).astype(int), 0, shape[0] - 1)
        ix = np.clip(np.round(points[:, 1]).astype(int), 0, shape[1] - 1)
        np.add.at(img, (iy, ix), 1.0)
    img = ndimage.gaussian_filter(img, sigma, mode="constant")
    peak = 1.0 / (2 * np.pi * sigma ** 2)
    return np.clip(img / peak, 0.0, 1.0)


# (from, to, weight) of the parcel conversions drawn for every year after the first
TRANSITIONS = ((MIXED, CASHEW, 0.35), (CROPLAND, CASHEW, 0.35),
               (MIXED, CROPLAND, 0.15), (CROPLAND, MIXED, 0.15))


def _apply_changes(cls_of_cell: np.ndarray, seed: int, year: int, rate: float) -> np.ndarray:
    """Convert parcels year by year; each mixed/cropland parcel changes with probability ``rate``."""
    out = cls_of_cell.copy()
    for y in range(1, year + 1):
        rng = np.random.default_rng([seed, 0xC4A6E, y])
        draw = rng.random(len(out))
        pick = rng.random(len(out))
        new = out.copy()
        for src in (MIXED, CROPLAND):
            options = [(dst, w) for a, dst, w in TRANSITIONS if a == src]
            w = np.array([w for _, w in options])
            edges = np.cumsum(w / w.sum())
            moving = (out == src) & (draw < rate)
            new[moving] = np.array([d for d, _ in options])[np.searchsorted(edges, pick[moving])]
        out = new
    return out


def synth_scene(config: SceneConfig | None = None, seed: int = 0, return_crowns: bool = False,
                year: int = 0):
    """Generate ``(stack, labels, density_truth)`` for a synthetic landscape.

    ``density_truth`` is 1 for high-density cashew, 0 for low-density cashew
    and 255 elsewhere.  With ``return_crowns`` the planted crown centres
    (row, col) are appended as a fourth element.  ``year`` > 0 gives later
    acquisitions of the same landscape: parcels keep their geometry, crowns
    and density, while ``config.change_rate`` of the mixed and cropland
    parcels convert every year (mostly to cashew).
    """
    cfg = config or SceneConfig()
    cfg.validate()
    if year < 0:
        raise ValueError("year must be >= 0")
    rng = np.random.default_rng([seed, 0x5CE7E])
    H, W, T = cfg.height, cfg.width, cfg.timesteps

    cell, ncell = _parcels(cfg, rng)
    areas = np.bincount(cell.ravel(), minlength=ncell)
    cls_of_cell = _greedy_assign(areas, np.asarray(cfg.mixture, float), rng.permutation(ncell))
    # density is fixed per parcel up front so that it survives conversions
    w = np.array([1 - cfg.high_fraction, cfg.high_fraction])
    base_cashew = np.nonzero(cls_of_cell == CASHEW)[0]
    high_of_cell = np.zeros(ncell, dtype=bool)
    if len(base_cashew):
        dens = _greedy_assign(areas[base_cashew], w, rng.permutation(len(base_cashew)))
        high_of_cell[base_cashew[dens == 1]] = True
    others = np.nonzero(cls_of_cell != CASHEW)[0]
    high_of_cell[others] = rng.random(len(others)) < cfg.high_fraction
    n_trees = rng.poisson(H * W / 80.0)
    trees = rng.uniform([0, 0], [H, W], size=(n_trees, 2))

    if year:
        cls_of_cell = _apply_changes(cls_of_cell, seed, year, cfg.change_rate)
    labels = cls_of_cell[cell].astype(np.uint8)
    cashew_cells = np.nonzero(cls_of_cell == CASHEW)[0]
    density = np.full((H, W), NODATA, dtype=np.uint8)
    density[labels == CASHEW] = 0
    density[(labels == CASHEW) & high_of_cell[cell]] = 1

    crowns = []
    for c in cashew_cells:
        spacing = cfg.crown_spacing * (1.0 if high_of_cell[c] else cfg.low_density_factor)
        crowns.append(_crowns(cell == c, spacing, cfg.row_spacing,
                              np.random.default_rng([seed, 0xC0, int(c)])))
    crowns = np.concatenate(crowns) if crowns else np.zeros((0, 2))
    crown_cover = _canopy(crowns, (H, W), cfg.crown_sigma) * (labels == CASHEW)
    tree_cover = _canopy(trees, (H, W), 1.4) * (labels == MIXED)

    # radiometric noise differs between acquisitions
    rng = np.random.default_rng([seed, 0x5CE7E, year])
    crop_g = _profile(CROP_GREEN, T)
    grass_g = _profile(GRASS_GREEN, T)
    crown_g = _profile(CROWN_GREEN, T)
    tree_g = _profile(TREE_GREEN, T)

    gain = rng.normal(1.0, 0.04, size=ncell)[cell]
    built_tex = ndimage.gaussian_filter(rng.normal(0, 1, (H, W)), 1.0)
    values = np.empty((T, 4, H, W))
    for t in range(T):
        g = np.zeros((H, W))
        g[labels == CROPLAND] = crop_g[t]
        g[labels == MIXED] = grass_g[t]
        g[labels == CASHEW] = 0.7 * grass_g[t]
        ground = g[None] * VEG[:, None, None] + (1 - g)[None] * np.where(
            labels == CROPLAND, 1.0, 0.0)[None] * SOIL[:, None, None] \
            + (1 - g)[None] * np.where(labels == CROPLAND, 0.0, 1.0)[None] * DRY[:, None, None]
        crown_px = crown_g[t] * VEG + (1 - crown_g[t]) * DRY
        tree_px = tree_g[t] * VEG + (1 - tree_g[t]) * DRY
        px = (ground * (1 - crown_cover - tree_cover)
              + crown_cover * crown_px[:, None, None]
              + tree_cover * tree_px[:, None, None])
        built = BUILT[:, None, None] * (1 + 0.08 * built_tex)
        px = np.where((labels == BUILTUP)[None], built, px)
        values[t] = px * gain
    scene_gain = rng.normal(1.0, 0.05, size=(1, 4, 1, 1))
    values = values * scene_gain + rng.normal(0, cfg.noise, size=values.shape)

    stack = RasterStack(values.astype(np.float32), band_names=list(BAND_NAMES),
                        timestep_labels=list(MONTHS) if T == 7 else None)
    if return_crowns:
        return stack, labels, density, crowns
    return stack, labels, density
