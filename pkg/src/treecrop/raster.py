"""Raster carriers, per-area normalization, label hygiene and patch tiling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rstk

# Label codes
MIXED = 0
CASHEW = 1
BUILTUP = 2
CROPLAND = 3
NODATA = 255
CLASS_CODES = (MIXED, CASHEW, BUILTUP, CROPLAND)
VALID_CODES = frozenset(CLASS_CODES + (NODATA,))
CLASS_NAMES = {MIXED: "mixed trees/grassland", CASHEW: "cashew plantation",
               BUILTUP: "built-up", CROPLAND: "cropland/others"}

DEFAULT_NODATA = -9999.0


@dataclass
class RasterStack:
    """A ``(T, B, H, W)`` time series of band values."""

    values: np.ndarray
    nodata: float = DEFAULT_NODATA
    transform: tuple | None = None
    band_names: list[str] | None = None
    timestep_labels: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ValueError(f"values must be (T, B, H, W), got {self.values.shape}")
        T, B = self.values.shape[:2]
        if T < 1 or B < 1:
            raise ValueError("need at least one timestep and one band")
        if not np.all(np.isfinite(self.values[self.valid])):
            raise ValueError("non-finite value outside nodata")
        if self.band_names is not None and len(self.band_names) != B:
            raise ValueError("band_names length does not match B")
        if self.timestep_labels is not None and len(self.timestep_labels) != T:
            raise ValueError("timestep_labels length does not match T")

    @property
    def shape(self):
        return self.values.shape

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def B(self):
        return self.values.shape[1]

    @property
    def H(self):
        return self.values.shape[2]

    @property
    def W(self):
        return self.values.shape[3]

    @property
    def valid(self) -> np.ndarray:
        if np.isnan(self.nodata):
            return ~np.isnan(self.values)
        return self.values != np.float32(self.nodata)

    def save(self, path) -> None:
        rstk.write_array(path, self.values, "f32le", nodata=float(self.nodata),
                         transform=self.transform, band_names=self.band_names,
                         timestep_labels=self.timestep_labels)

    @classmethod
    def load(cls, path) -> "RasterStack":
        header, values = rstk.read_array(path)
        if header["dtype"] != "f32le":
            raise rstk.FormatError(f"{path}: expected f32le samples")
        nodata = header.get("nodata")
        return cls(values, DEFAULT_NODATA if nodata is None else float(nodata),
                   tuple(header["transform"]) if header.get("transform") else None,
                   header.get("band_names"), header.get("timestep_labels"))


def check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {mask.shape}")
    bad = ~np.isin(mask, list(VALID_CODES))
    if bad.any():
        raise ValueError(f"invalid class codes: {sorted(set(np.unique(mask[bad]).tolist()))}")
    return mask.astype(np.uint8)


def save_mask(path, mask, transform=None) -> None:
    mask = check_mask(mask)
    rstk.write_array(path, mask[None, None], "u8", nodata=NODATA, transform=transform)


def load_mask(path) -> np.ndarray:
    header, values = rstk.read_array(path)
    if header["dtype"] != "u8" or values.shape[:2] != (1, 1):
        raise rstk.FormatError(f"{path}: expected a single-plane u8 mask")
    return values[0, 0]


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormalizationParams:
    area_id: str
    p_min: np.ndarray
    p_max: np.ndarray
    percentile_lo: float = 2.0
    percentile_hi: float = 98.0

    def to_dict(self) -> dict:
        return {"area_id": self.area_id, "p_min": [float(v) for v in self.p_min],
                "p_max": [float(v) for v in self.p_max],
                "percentile_lo": self.percentile_lo, "percentile_hi": self.percentile_hi}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(d["area_id"], np.asarray(d["p_min"], np.float64),
                   np.asarray(d["p_max"], np.float64),
                   d.get("percentile_lo", 2.0), d.get("percentile_hi", 98.0))


def nearest_rank(sorted_values: np.ndarray, pct: float):
    """Nearest-rank percentile of an ascending array."""
    n = sorted_values.size
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[min(rank, n) - 1]


def compute_normalization(stack: RasterStack, area_id="0", percentile_lo=2.0,
                          percentile_hi=98.0) -> NormalizationParams:
    """Per-band 2nd/98th nearest-rank percentiles over all valid samples of one area."""
    valid = stack.valid
    lo = np.empty(stack.B)
    hi = np.empty(stack.B)
    for b in range(stack.B):
        v = np.sort(stack.values[:, b][valid[:, b]].astype(np.float64))
        if v.size == 0:
            raise ValueError(f"band {b}: all values are nodata")
        lo[b] = nearest_rank(v, percentile_lo)
        hi[b] = nearest_rank(v, percentile_hi)
        if not lo[b] < hi[b]:
            raise ValueError(f"degenerate band {b}: p_min == p_max == {lo[b]}")
    return NormalizationParams(str(area_id), lo, hi, percentile_lo, percentile_hi)


def normalize(stack: RasterStack, params: NormalizationParams) -> RasterStack:
    """Min-max scale each band to [0, 1] with the area's percentile bounds, clipping outliers."""
    if len(params.p_min) != stack.B or len(params.p_max) != stack.B:
        raise ValueError(f"params cover {len(params.p_min)} bands, stack has {stack.B}")
    lo = params.p_min.reshape(1, -1, 1, 1)
    hi = params.p_max.reshape(1, -1, 1, 1)
    out = np.clip((stack.values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    valid = stack.valid
    out = np.where(valid, out, stack.nodata).astype(np.float32)
    return RasterStack(out, stack.nodata, stack.transform, stack.band_names,
                       stack.timestep_labels)


# ---------------------------------------------------------------------------
# Label hygiene

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = ndimage.generate_binary_structure(2, 1)


def erode_labels(mask, radius: int = 2, min_component: int = 30) -> np.ndarray:
    """Erode every class region and drop small components, relabeling both to cropland.

    Erosion uses a ``(2r+1) x (2r+1)`` square; the raster edge does not erode.
    Components are 8-connected.
    """
    mask = check_mask(mask)
    out = mask.copy()
    element = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    for code in CLASS_CODES:
        if code == CROPLAND:
            continue
        region = mask == code
        if not region.any():
            continue
        if radius > 0:
            core = ndimage.binary_erosion(region, structure=element, border_value=1)
            out[region & ~core] = CROPLAND
    for code in CLASS_CODES:
        if code == CROPLAND:
            continue
        labels, n = ndimage.label(out == code, structure=EIGHT)
        if n == 0:
            continue
        sizes = np.bincount(labels.ravel())
        small = sizes < min_component
        small[0] = False
        out[small[labels]] = CROPLAND
    return out


# ---------------------------------------------------------------------------
# Patch tiling


def window_origins(length: int, size: int, stride: int) -> list[int]:
    """Row-major window starts covering ``[0, length)``; the last one is shifted inward."""
    if size > length:
        raise ValueError(f"patch size {size} exceeds raster extent {length}")
    if not 1 <= stride <= size:
        raise ValueError(f"stride must lie in [1, size]; {stride} would leave gaps or stall")
    origins = list(range(0, length - size + 1, stride))
    if origins[-1] + size < length:
        origins.append(length - size)
    return origins


@dataclass
class PatchSet:
    size: int
    stride: int
    origins: list[tuple[int, int]]
    patches: np.ndarray                  # (N, T, B, S, S)
    labels: np.ndarray | None = None     # (N, S, S) uint8
    extent: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.origins)

    def subset(self, index) -> "PatchSet":
        index = np.asarray(index, dtype=int)
        return PatchSet(self.size, self.stride, [self.origins[i] for i in index],
                        self.patches[index],
                        None if self.labels is None else self.labels[index],
                        self.extent, dict(self.meta))

    @staticmethod
    def concat(sets) -> "PatchSet":
        sets = list(sets)
        first = sets[0]
        labels = None
        if all(s.labels is not None for s in sets):
            labels = np.concatenate([s.labels for s in sets])
        return PatchSet(first.size, first.stride, [o for s in sets for o in s.origins],
                        np.concatenate([s.patches for s in sets]), labels, None,
                        dict(first.meta))


def tile_patches(stack, labels=None, size: int = 64, stride: int | None = None) -> PatchSet:
    """Cut a stack (and optional label mask) into square patches.

    ``stack`` may be a :class:`RasterStack` or a bare ``(T, B, H, W)`` array.
    """
    values = stack.values if isinstance(stack, RasterStack) else np.asarray(stack)
    stride = size if stride is None else stride
    H, W = values.shape[-2:]
    rows = window_origins(H, size, stride)
    cols = window_origins(W, size, stride)
    origins = [(r, c) for r in rows for c in cols]
    patches = np.stack([values[..., r:r + size, c:c + size] for r, c in origins])
    lab = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (H, W):
            raise ValueError("label mask extent does not match the stack")
        lab = np.stack([labels[r:r + size, c:c + size] for r, c in origins]).astype(np.uint8)
    return PatchSet(size, stride, origins, patches, lab, (H, W))
