"""Separating two subjects that start on top of each other.

The isolation loss rewards distance between the two maps' centroids,
scaled by the grid diagonal. With both subjects starting at one point, the
tiny initial noise decides which way they split.
"""
# %%
from attnguide.scenarios import coincident_pair

for seed in range(3):
    recs = coincident_pair(seed).run().all_records
    first, last = recs[0], recs[-1]
    print(f"seed {seed}: d/d_max {first.d_over_dmax:.3f} -> {last.d_over_dmax:.3f}, "
          f"overlap {first.overlap:.2f} -> {last.overlap:.2f}")

# %% Where did they go? The whole-map centroids at the end of seed 0:
final = coincident_pair(0).run().final
for tok, c in final.map_centroids.items():
    print(f"{tok}: ({c.h:.2f}, {c.w:.2f})")
