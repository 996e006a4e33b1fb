"""Spatial statistics for scattering and overlap of attention maps."""
from __future__ import annotations

from itertools import combinations

import numpy as np

from .errors import UndefinedMetricError, ValidationError

ROOK = "rook"
QUEEN = "queen"

_NEIGHBOURS = {
    ROOK: ((0, 1), (1, 0)),
    QUEEN: ((0, 1), (1, 0), (1, 1), (1, -1)),
}


def _values2d(amap):
    return np.asarray(getattr(amap, "values", amap), dtype=np.float64)


def _shifted_pairs(x: np.ndarray, di: int, dj: int):
    """Aligned views of ``x[i, j]`` and ``x[i + di, j + dj]`` over valid cells."""
    h, w = x.shape
    r0, r1 = 0, h - di
    c0, c1 = max(0, -dj), min(w, w - dj)
    return x[r0:r1, c0:c1], x[r0 + di:r1 + di, c0 + dj:c1 + dj]


def morans_i(amap, adjacency: str = ROOK) -> float:
    """Global Moran's I with binary, non-standardized adjacency weights.

    Parameters
    ----------
    amap : AttentionMap or 2-D array
    adjacency : {"rook", "queen"}
        4- or 8-neighbour contiguity.

    Returns
    -------
    float
        ``(N / S0) * sum_ij w_ij z_i z_j / sum_i z_i**2`` where ``z`` are the
        deviations from the mean and ``S0`` is the total weight. Values
        near 1 mean spatially compact activation.
    """
    if adjacency not in _NEIGHBOURS:
        raise ValidationError(f"adjacency must be 'rook' or 'queen', got {adjacency!r}")
    x = _values2d(amap)
    z = x - x.mean()
    denom = float((z * z).sum())
    if denom == 0:
        raise UndefinedMetricError("Moran's I is undefined for a constant map")
    cross = 0.0
    s0 = 0
    # each undirected neighbour pair is visited once; symmetric weights double both sums
    for di, dj in _NEIGHBOURS[adjacency]:
        a, b = _shifted_pairs(z, di, dj)
        cross += 2.0 * float((a * b).sum())
        s0 += 2 * a.size
    if s0 == 0:
        raise UndefinedMetricError("map has no neighbouring cells")
    return (z.size / s0) * cross / denom


def top_mass_cells(amap, q: float = 0.7) -> set:
    """Smallest set of highest cells holding at least fraction ``q`` of the mass.

    Cells are taken in decreasing value order, ties in row-major order.
    An all-zero map gives the empty set.
    """
    if not 0 < q < 1:
        raise ValidationError(f"q must lie in (0, 1), got {q}")
    v = _values2d(amap).ravel()
    total = v.sum()
    if total <= 0:
        return set()
    order = np.argsort(-v, kind="stable")
    cum = np.cumsum(v[order])
    n = int(np.searchsorted(cum, q * total, side="left")) + 1
    return set(order[:min(n, v.size)].tolist())


def overlap_ratio(map_m, map_n, q: float = 0.7) -> float:
    """Intersection over union of the two maps' top-``q`` mass cell sets."""
    a, b = _values2d(map_m), _values2d(map_n)
    if a.shape != b.shape:
        raise ValidationError(f"map shapes differ: {a.shape} vs {b.shape}")
    sa, sb = top_mass_cells(a, q), top_mass_cells(b, q)
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def centroid_spread(regions) -> float:
    """Mean distance between region centroids over unordered pairs (0 for one region)."""
    if len(regions) < 1:
        raise ValidationError("need at least one region")
    cents = [r.centroid for r in regions]
    dists = [float(np.hypot(a[0] - b[0], a[1] - b[1])) for a, b in combinations(cents, 2)]
    return float(np.mean(dists)) if dists else 0.0
