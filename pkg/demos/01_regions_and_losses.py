"""Grouping regions and the losses built on them, on a hand-made map.

Run with ``python demos/01_regions_and_losses.py``.
"""
# %% A map with three bumps: one strong, two weaker ones far away.
import numpy as np

from attnguide import (RegionConfig, agg_sub_loss, agg_sub_loss_cos, centroid_spread, identify_regions,
                       iso_loss, max_loss, morans_i)

rows, cols = np.indices((16, 16))


def bump(center, height=1.0, sigma=1.5):
    return height * np.exp(-((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2 * sigma ** 2))


scattered = bump((3, 3)) + 0.7 * bump((12, 4)) + 0.5 * bump((8, 13))

# %% The greedy search puts a disk on the strongest cell, then on the
# strongest cell outside every disk so far, and so on.
regions = identify_regions(scattered, RegionConfig(n_regions=3, radius=5))
for k, r in enumerate(regions):
    c = r.centroid
    print(f"region {k}: center {tuple(int(x) for x in r.mask.center)}, "
          f"centroid ({c.h:.2f}, {c.w:.2f}), {r.count} cells, mass {r.mass:.2f}")

# %% Aggregation sums centroid distances over ordered pairs, so it is
# twice the sum over unordered pairs, or N(N-1) times the mean spread.
print(f"aggregation loss      {agg_sub_loss(regions):8.3f}")
print(f"mean centroid spread  {centroid_spread(regions):8.3f}")
print(f"cosine aggregation    {agg_sub_loss_cos(regions, scattered):8.3f}")

# %% A compact version of the same subject scores lower on every count.
compact = bump((7, 7), sigma=2.5)
compact_regions = identify_regions(compact, RegionConfig(3, 5))
print(f"compact aggregation   {agg_sub_loss(compact_regions):8.3f}")
print(f"Moran's I scattered {morans_i(scattered):.3f} vs compact {morans_i(compact):.3f}")

# %% Isolation compares whole-map centroids of two subjects; it is 1 when
# they coincide and falls as they move apart.
other = bump((12, 12), sigma=2.5)
print(f"isolation, same place {iso_loss(compact, compact):.3f}; apart {iso_loss(compact, other):.3f}")
print(f"max loss of the compact map: {max_loss(compact):.3f}")
