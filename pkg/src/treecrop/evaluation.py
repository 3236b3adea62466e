"""Probability sampling, accuracy assessment and stratified area estimation.

The sampling design is two-phase: square clusters are drawn by simple random
sampling, then pixels are drawn per stratum (without replacement) inside the
chosen clusters.  Estimators are the usual stratified ones: with stratum
weights ``W_i = A_i / A``, cell proportions are ``p_ij = W_i n_ij / n_i.``
and class areas ``A_j = A * sum_i p_ij``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .raster import CASHEW, CROPLAND, MIXED

Z95 = 1.96

# (from, to) class codes of the seven strata, in allocation order
STRATA = (
    ("stable mixed trees/grassland", MIXED, MIXED),
    ("stable cashew", CASHEW, CASHEW),
    ("stable cropland/others", CROPLAND, CROPLAND),
    ("mixed trees/grassland to cashew", MIXED, CASHEW),
    ("cropland/others to cashew", CROPLAND, CASHEW),
    ("mixed trees/grassland to cropland/others", MIXED, CROPLAND),
    ("cropland/others to mixed trees/grassland", CROPLAND, MIXED),
)
STRATUM_NAMES = tuple(s[0] for s in STRATA)
DEFAULT_ALLOCATION = (300, 200, 400, 100, 100, 100, 200)


def change_strata(before, after) -> np.ndarray:
    """Stratum index (0..6) of every pixel; -1 for transitions outside the seven strata."""
    before = np.asarray(getattr(before, "codes", before))
    after = np.asarray(getattr(after, "codes", after))
    if before.shape != after.shape:
        raise ValueError("extent mismatch between epochs")
    out = np.full(before.shape, -1, dtype=np.int16)
    for h, (_, a, b) in enumerate(STRATA):
        out[(before == a) & (after == b)] = h
    return out


# ---------------------------------------------------------------------------
# Sampling design


@dataclass
class SamplePoint:
    point_id: int
    row: int
    col: int
    stratum: int
    reference: int | None = None
    predicted: int | None = None


@dataclass
class StratifiedDesign:
    cluster_size: int
    n_clusters: int
    allocation: tuple
    strata_areas: np.ndarray          # pixels per stratum over the whole region
    frame_sizes: np.ndarray           # pixels per stratum inside the selected clusters
    clusters: list                    # (row, col) origins of selected clusters
    seed: int
    strata_names: tuple = STRATUM_NAMES

    def __post_init__(self):
        if any(a <= 0 for a in self.allocation):
            raise ValueError("allocations must be positive")


def cluster_grid(shape, size: int):
    """Origins of the complete ``size x size`` clusters; partial edge clusters are discarded."""
    H, W = shape
    return [(r, c) for r in range(0, H - size + 1, size) for c in range(0, W - size + 1, size)]


def draw_design(maps, cluster_size: int = 32, n_clusters: int = 120,
                allocation=DEFAULT_ALLOCATION, seed: int = 0, strata=None):
    """Draw clusters, then stratified pixels inside them.

    ``maps`` are class maps for at least two epochs; strata come from the
    change between the first and the last.  A precomputed stratum raster may
    be passed as ``strata`` instead (values 0..len(allocation)-1, -1 outside).
    Returns ``(design, points)``.
    """
    if strata is None:
        if len(maps) < 2:
            raise ValueError("need maps for at least two epochs")
        strata = change_strata(maps[0], maps[-1])
    strata = np.asarray(strata)
    allocation = tuple(int(a) for a in allocation)
    if any(a <= 0 for a in allocation):
        raise ValueError("allocations must be positive")
    rng = np.random.default_rng([seed, 0x5A3])
    grid = cluster_grid(strata.shape, cluster_size)
    if not grid:
        raise ValueError("region smaller than one cluster")
    k = min(n_clusters, len(grid))
    chosen = sorted(rng.choice(len(grid), size=k, replace=False).tolist())
    clusters = [grid[i] for i in chosen]
    frame = np.zeros(strata.shape, dtype=bool)
    for r, c in clusters:
        frame[r:r + cluster_size, c:c + cluster_size] = True
    n_h = len(allocation)
    areas = np.array([(strata == h).sum() for h in range(n_h)], dtype=np.int64)
    sizes = np.array([((strata == h) & frame).sum() for h in range(n_h)], dtype=np.int64)
    points = []
    for h, n in enumerate(allocation):
        if sizes[h] < n:
            raise ValueError(f"stratum {h} has {sizes[h]} pixels in the frame, fewer than its allocation {n}")
        rows, cols = np.nonzero((strata == h) & frame)
        pick = np.sort(rng.choice(len(rows), size=n, replace=False))
        for i in pick:
            points.append(SamplePoint(len(points), int(rows[i]), int(cols[i]), h))
    design = StratifiedDesign(cluster_size, k, allocation, areas, sizes, clusters, seed)
    return design, points


def write_samples_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "row", "col", "stratum", "reference", "predicted"])
        for p in points:
            w.writerow([p.point_id, p.row, p.col, p.stratum,
                        "" if p.reference is None else p.reference,
                        "" if p.predicted is None else p.predicted])


def read_samples_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(SamplePoint(int(row["point_id"]), int(row["row"]), int(row["col"]),
                                   int(row["stratum"]),
                                   int(row["reference"]) if row["reference"] != "" else None,
                                   int(row["predicted"]) if row["predicted"] != "" else None))
    return out


# ---------------------------------------------------------------------------
# Confusion matrix and estimators


@dataclass
class ConfusionMatrix:
    counts: np.ndarray              # (n_strata, n_classes): stratum i, reference class j
    pred_counts: np.ndarray         # (n_classes, n_classes): predicted, reference
    class_names: tuple = ()
    weights: np.ndarray | None = None   # W_i = A_i / sum(A), once areas are attached

    def with_areas(self, strata_areas) -> "ConfusionMatrix":
        A = np.asarray(strata_areas, dtype=np.float64)
        if A.shape != (self.counts.shape[0],) or np.any(A < 0) or A.sum() <= 0:
            raise ValueError("one non-negative area per stratum required")
        return ConfusionMatrix(self.counts, self.pred_counts, self.class_names, A / A.sum())


def confusion(reference, predicted, strata, n_strata: int | None = None,
              n_classes: int | None = None, class_names=()) -> ConfusionMatrix:
    """Cross-tabulate sample labels by stratum and by predicted class."""
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    strata = np.asarray(strata, dtype=np.int64)
    if not reference.shape == predicted.shape == strata.shape:
        raise ValueError("reference, predicted and strata must pair up")
    n_classes = n_classes or len(class_names) or int(max(reference.max(), predicted.max())) + 1
    n_strata = n_strata or n_classes
    for name, v, hi in (("reference", reference, n_classes), ("predicted", predicted, n_classes),
                        ("stratum", strata, n_strata)):
        if v.size and (v.min() < 0 or v.max() >= hi):
            raise ValueError(f"{name} label outside the class set 0..{hi - 1}")
    counts = np.zeros((n_strata, n_classes), dtype=np.int64)
    np.add.at(counts, (strata, reference), 1)
    pred = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(pred, (predicted, reference), 1)
    return ConfusionMatrix(counts, pred, tuple(class_names))


@dataclass
class AreaEstimate:
    area: np.ndarray                 # per reference class, area units
    se: np.ndarray
    ci: np.ndarray                   # 1.96 * se
    total: float
    area_exact: list = field(default_factory=list)    # Fractions; sum equals the total exactly
    proportions: np.ndarray | None = None              # p_ij
    oa: float | None = None
    oa_ci: float | None = None
    ua: np.ndarray | None = None
    ua_ci: np.ndarray | None = None
    pa: np.ndarray | None = None
    pa_ci: np.ndarray | None = None

    def to_dict(self, class_names=()):
        names = list(class_names) or [str(j) for j in range(len(self.area))]
        out = {"total_area": float(self.total),
               "classes": [{"class": names[j], "area": float(self.area[j]),
                            "se": float(self.se[j]), "ci95": float(self.ci[j])}
                           for j in range(len(self.area))]}
        if self.oa is not None:
            out["oa"] = self.oa
            out["oa_ci95"] = self.oa_ci
            out["ua"] = [None if np.isnan(v) else float(v) for v in self.ua]
            out["ua_ci95"] = [None if np.isnan(v) else float(v) for v in self.ua_ci]
            out["pa"] = [None if np.isnan(v) else float(v) for v in self.pa]
            out["pa_ci95"] = [None if np.isnan(v) else float(v) for v in self.pa_ci]
        return out


def _as_fraction(v):
    return Fraction(int(v)) if float(v).is_integer() else Fraction(float(v))


def stratified_estimates(matrix, strata_areas, z: float = Z95) -> AreaEstimate:
    """Area, accuracy and their standard errors from a stratified sample.

    Accuracies pair stratum ``i`` with reference class ``i`` and are reported
    for the first ``min(n_strata, n_classes)`` classes.
    """
    n = np.asarray(getattr(matrix, "counts", matrix), dtype=np.int64)
    A = np.asarray(strata_areas, dtype=np.float64)
    if A.shape != (n.shape[0],):
        raise ValueError("one area per stratum required")
    n_i = n.sum(axis=1)
    if np.any(n_i == 0):
        raise ValueError(f"zero-sample stratum: {np.nonzero(n_i == 0)[0].tolist()}")
    if np.any(n_i < 2):
        raise ValueError("every stratum needs at least two samples for a variance")
    A_exact = [_as_fraction(a) for a in A]
    A_tot_exact = sum(A_exact)
    total = float(A_tot_exact)
    area_exact = [sum((A_exact[i] * int(n[i, j]) / int(n_i[i]) for i in range(n.shape[0])),
                      Fraction(0)) for j in range(n.shape[1])]
    W = A / A.sum()
    frac = n / n_i[:, None]
    p = W[:, None] * frac
    area = np.array([float(a) for a in area_exact])
    var_p = (W[:, None] ** 2 * frac * (1 - frac) / (n_i[:, None] - 1)).sum(axis=0)
    se = total * np.sqrt(var_p)
    est = AreaEstimate(area, se, z * se, total, area_exact, p)

    m = min(n.shape)
    diag = np.array([p[i, i] for i in range(m)])
    est.oa = float(diag.sum())
    ua = np.array([frac[i, i] for i in range(m)])
    # strata without a matching class contribute no correct samples and no variance
    est.oa_ci = float(z * np.sqrt((W[:m] ** 2 * ua * (1 - ua) / (n_i[:m] - 1)).sum()))
    est.ua = ua
    est.ua_ci = z * np.sqrt(ua * (1 - ua) / (n_i[:m] - 1))
    col = p.sum(axis=0)[:m]
    with np.errstate(divide="ignore", invalid="ignore"):
        pa = np.where(col > 0, diag / col, np.nan)
        N_i = A
        N_col = (N_i[:, None] * frac).sum(axis=0)[:m]
        pa_var = np.full(m, np.nan)
        for j in range(m):
            if col[j] <= 0:
                continue
            others = sum(N_i[i] ** 2 * frac[i, j] * (1 - frac[i, j]) / (n_i[i] - 1)
                         for i in range(n.shape[0]) if i != j)
            pa_var[j] = (N_i[j] ** 2 * (1 - pa[j]) ** 2 * ua[j] * (1 - ua[j]) / (n_i[j] - 1)
                         + pa[j] ** 2 * others) / N_col[j] ** 2
    est.pa = pa
    est.pa_ci = z * np.sqrt(pa_var)
    return est


def f1_scores(matrix) -> np.ndarray:
    """Per-class F1 from the pooled predicted x reference counts."""
    c = np.asarray(getattr(matrix, "pred_counts", matrix), dtype=np.float64)
    tp = np.diag(c)
    pred = c.sum(axis=1)
    ref = c.sum(axis=0)
    if np.any((pred == 0) & (ref == 0)):
        raise ValueError(f"empty class: {np.nonzero((pred == 0) & (ref == 0))[0].tolist()}")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(ref > 0, tp / ref, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return f1


# ---------------------------------------------------------------------------
# Cluster quality


def _points(x):
    """Members as rows; a 1-D array is a cluster of scalars."""
    x = np.asarray(x, np.float64)
    return x[:, None] if x.ndim == 1 else x


def _spread(X):
    """Root-mean of the per-dimension population variances."""
    return float(np.sqrt(X.var(axis=0).mean()))


def separability_index(a, b, per_dimension: bool = False) -> float:
    """Distance between cluster means over the sum of the clusters' spreads.

    The mean distance grows like ``sqrt(d)`` for a fixed per-dimension
    separation while the spreads do not, so values from spaces of different
    dimension are only comparable with ``per_dimension=True``, which divides
    by ``sqrt(d)``.
    """
    a, b = _points(a), _points(b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("degenerate cluster: need at least two members")
    denom = _spread(a) + _spread(b)
    num = float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))
    if per_dimension:
        num /= np.sqrt(a.shape[1])
    if denom == 0:
        return 0.0 if num == 0 else float("inf")
    return num / denom


def pairwise_separability(embeddings, assignments, min_members: int = 2,
                          per_dimension: bool = False) -> np.ndarray:
    """SI over every pair of clusters with at least ``min_members`` members."""
    X = np.asarray(embeddings, np.float64)
    assignments = np.asarray(assignments)
    ids = [j for j in np.unique(assignments) if (assignments == j).sum() >= min_members]
    return np.array([separability_index(X[assignments == i], X[assignments == j], per_dimension)
                     for i, j in itertools.combinations(ids, 2)])


def coefficient_of_variation(cluster) -> float:
    """Spread of a cluster over the norm of its mean."""
    X = _points(cluster)
    mu = float(np.linalg.norm(X.mean(axis=0)))
    if mu == 0:
        raise ValueError("undefined CV: cluster mean is zero")
    return _spread(X) / mu


# ---------------------------------------------------------------------------
# Temporal consistency


def temporal_consistency(maps, points, cls: int = CASHEW) -> float:
    """Fraction of points labelled ``cls`` in every year."""
    arrays = [np.asarray(getattr(m, "codes", m)) for m in maps]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("extent mismatch between years")
    pts = [(p.row, p.col) if isinstance(p, SamplePoint) else tuple(p) for p in points]
    if not pts:
        raise ValueError("no sample points")
    rows = np.array([r for r, _ in pts])
    cols = np.array([c for _, c in pts])
    ok = np.ones(len(pts), dtype=bool)
    for a in arrays:
        ok &= a[rows, cols] == cls
    return float(ok.mean())
