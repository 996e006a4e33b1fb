"""Euclidean against cosine aggregation on the same starting latents.

Cosine similarity compares the activation patterns inside two disks but
ignores where the disks are, so it does not pull region centres together.
The Euclidean form acts on centroid positions directly.
"""
# %%
import numpy as np

from attnguide import RegionConfig, agg_sub_loss, agg_sub_loss_cos, identify_regions
from attnguide.scenarios import scattered_subject

rows = []
for seed in range(8):
    euc = scattered_subject(seed, "euc").run().final.spread["subject"]
    cos = scattered_subject(seed, "cos").run().final.spread["subject"]
    rows.append((seed, euc, cos))
    print(f"seed {seed}: final spread euc {euc:6.2f}   cos {cos:6.2f}")
print("Euclidean tighter in", sum(e < c for _, e, c in rows), "of", len(rows))

# %% The extreme case: two disjoint regions with proportional values.
# The cosine loss is exactly zero although the regions are far apart.
v = np.zeros((16, 16))
for (i, j), s in (((4, 4), 1.0), ((11, 10), 2.0)):
    v[i, j] = v[i, j + 1] = 2 * s
    v[i + 1, j] = s

regs = identify_regions(v, RegionConfig(2, 2.0))
print(f"cosine loss {agg_sub_loss_cos(regs, v)}, Euclidean loss {agg_sub_loss(regs):.3f}")
