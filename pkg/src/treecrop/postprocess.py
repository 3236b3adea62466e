"""From probability fields to class maps.

Region growing keeps mid-confidence pixels only when they touch a
high-confidence seed; the other steps are per-pixel overrides applied in
sequence, each one recorded in the map's provenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import BUILTUP, CASHEW, CROPLAND, EIGHT, FOUR, NODATA, check_mask, save_mask


@dataclass(frozen=True)
class GrowThresholds:
    seed_threshold: float = 0.8
    neighbor_low: float = 0.4
    connectivity: int = 8

    def __post_init__(self):
        if not 0.0 <= self.neighbor_low < self.seed_threshold <= 1.0:
            raise ValueError(
                f"invalid thresholds: need 0 <= neighbor_low ({self.neighbor_low}) "
                f"< seed_threshold ({self.seed_threshold}) <= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class ClassMap:
    codes: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.codes = check_mask(self.codes)

    def derive(self, codes, step: dict) -> "ClassMap":
        return ClassMap(codes, self.provenance + [step])

    def save(self, path, transform=None) -> None:
        save_mask(path, self.codes, transform)
        with open(f"{path}.prov.json", "w") as fh:
            json.dump({"operations": self.provenance}, fh, indent=1, sort_keys=True)


def region_grow(prob, thresholds: GrowThresholds = GrowThresholds()) -> np.ndarray:
    """Components of ``prob >= neighbor_low`` that contain a pixel ``>= seed_threshold``."""
    prob = np.asarray(prob)
    candidates = prob >= thresholds.neighbor_low
    seeds = prob >= thresholds.seed_threshold
    structure = EIGHT if thresholds.connectivity == 8 else FOUR
    labels, n = ndimage.label(candidates, structure=structure)
    if n == 0:
        return np.zeros(prob.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[seeds])] = True
    keep[0] = False
    return keep[labels]


def assemble_classmap(field, thresholds: GrowThresholds = GrowThresholds(),
                      class_codes=(0, 1, 2, 3), default=CROPLAND) -> ClassMap:
    """Grow every class, give overlaps to the most probable covering class.

    ``field`` is a ProbabilityField or a bare ``(K, H, W)`` probability array.
    Pixels no class reaches get ``default``.
    """
    probs = np.asarray(getattr(field, "probs", field), dtype=np.float64)
    grown = np.stack([region_grow(probs[k], thresholds) for k in range(probs.shape[0])])
    masked = np.where(grown, probs, -np.inf)
    best = masked.argmax(axis=0)
    codes = np.asarray(class_codes, dtype=np.uint8)[best]
    codes[~grown.any(axis=0)] = default
    step = {"op": "assemble_classmap", "seed_threshold": thresholds.seed_threshold,
            "neighbor_low": thresholds.neighbor_low, "connectivity": thresholds.connectivity}
    return ClassMap(codes, [step])


def _same_extent(maps):
    shapes = {np.asarray(getattr(m, "codes", m)).shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"extent mismatch: {sorted(shapes)}")


def temporal_persistence(maps: list) -> list:
    """Once cashew, always cashew: a running OR of the cashew class over ascending years."""
    if len(maps) < 2:
        raise ValueError("need at least two years")
    _same_extent(maps)
    maps = [m if isinstance(m, ClassMap) else ClassMap(m) for m in maps]
    seen = np.zeros(maps[0].codes.shape, dtype=bool)
    out = []
    for year, m in enumerate(maps):
        codes = m.codes.copy()
        codes[seen] = CASHEW
        seen |= codes == CASHEW
        out.append(m.derive(codes, {"op": "temporal_persistence", "year_index": year}))
    return out


def apply_external_mask(classmap, builtup) -> ClassMap:
    """Force built-up wherever the external mask is set."""
    m = classmap if isinstance(classmap, ClassMap) else ClassMap(classmap)
    mask = np.asarray(builtup).astype(bool)
    _same_extent([m, mask])
    codes = m.codes.copy()
    codes[mask] = BUILTUP
    return m.derive(codes, {"op": "apply_external_mask", "pixels": int(mask.sum())})


def uncertainty_filter(classmap, unc, threshold: float = 0.06) -> ClassMap:
    """Set pixels whose uncertainty exceeds ``threshold`` to nodata."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    m = classmap if isinstance(classmap, ClassMap) else ClassMap(classmap)
    unc = np.asarray(unc)
    _same_extent([m, unc])
    codes = m.codes.copy()
    codes[unc > threshold] = NODATA
    t = threshold if math.isfinite(threshold) else "inf"
    return m.derive(codes, {"op": "uncertainty_filter", "threshold": t})
