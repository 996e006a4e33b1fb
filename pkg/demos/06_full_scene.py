"""A cat and a red bowl: every loss at once.

The cat is an animal subject (two regions, radius growing from 2 to 8),
the bowl an object subject (three regions of radius 5) and "red" an
attribute bound to the bowl. Fifty steps, guidance on the first 25.
"""
# %%
from attnguide.io import trajectory_csv
from attnguide.scenarios import default_experiment

traj = default_experiment().run()
first, last = traj.records[0], traj.final
for name in ("agg_sub", "iso", "max", "agg_attr", "total"):
    print(f"{name:9s} {getattr(first.losses, name):9.3f} -> {getattr(last.losses, name):9.3f}")
print(f"cat/bowl overlap {first.overlap:.2f} -> {last.overlap:.2f}")

# %% The CSV written by the command-line tool, first lines:
print("\n".join(trajectory_csv(traj).splitlines()[:8]))
