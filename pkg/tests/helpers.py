"""Constructed inputs shared by several test modules."""
import numpy as np

from attnguide import RegionConfig, identify_regions


def point_region_map(points, shape=(16, 16)):
    """Map with a single positive cell per point (value 1)."""
    v = np.zeros(shape)
    for p in points:
        v[p] = 1.0
    return v


def proportional_disjoint_regions():
    """Two far-apart regions whose values differ only by a factor of 2.

    The pattern (2, 2, 1) has norm 3, so the cosine of the two disk vectors
    is 18 / (3 * 6) = 1 with no rounding.
    """
    v = np.zeros((16, 16))
    for (ci, cj), scale in (((4, 4), 1.0), ((11, 10), 2.0)):
        v[ci, cj] = 2.0 * scale
        v[ci, cj + 1] = 2.0 * scale
        v[ci + 1, cj] = 1.0 * scale
    regions = identify_regions(v, RegionConfig(2, 2.0))
    return v, regions
