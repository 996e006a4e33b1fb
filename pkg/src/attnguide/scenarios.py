"""Ready-made experiments used by the demos, the CLI and the acceptance suite.

Every scenario adds a background token with a constant latent level of 2,
so that subject maps sit near 0.1 away from their bumps instead of 0.5.
"""
from __future__ import annotations

import numpy as np

from .core import TokenSpec
from .losses import LossWeights, Metrics
from .sim import Blob, Experiment, SimConfig

BACKGROUND_LEVEL = 2.0


def scattered_centers(seed: int, n: int = 3, size: int = 16, margin: int = 2,
                      min_distance: float = 8.0) -> list[tuple[int, int]]:
    """``n`` integer centres at pairwise distance >= ``min_distance`` (rejection sampling)."""
    rng = np.random.default_rng([seed, 7])
    for _ in range(10_000):
        c = rng.integers(margin, size - margin, size=(n, 2))
        d = [np.hypot(*(c[i] - c[j])) for i in range(n) for j in range(i + 1, n)]
        if not d or min(d) >= min_distance:
            return [(int(a), int(b)) for a, b in c]
    raise RuntimeError("could not place centres; relax min_distance")


def scattered_subject(seed: int = 0, metric: str = "euc", steps: int = 25, alpha: float = 8.0,
                      amplitude: float = 3.0, sigma: float = 2.0) -> Experiment:
    """One object subject split into three far-apart bumps; aggregation and max losses only."""
    tokens = (TokenSpec("subject"), TokenSpec("background", "background"))
    cfg = SimConfig(tokens, total_steps=steps, optimize_steps=steps, alpha=alpha,
                    weights=LossWeights(1.25, 0.0, 0.25, 0.0), metrics=Metrics.parse(metric),
                    seed=seed)
    blobs = {"subject": [Blob(c, amplitude, sigma) for c in scattered_centers(seed)]}
    return Experiment(cfg, blobs, {"background": BACKGROUND_LEVEL})


def coincident_pair(seed: int = 0, steps: int = 25, alpha: float = 32.0, amplitude: float = 3.0,
                    sigma: float = 2.0) -> Experiment:
    """Two subjects whose bumps share one centre; isolation and max losses only."""
    tokens = (TokenSpec("subject_a"), TokenSpec("subject_b"), TokenSpec("background", "background"))
    rng = np.random.default_rng([seed, 9])
    center = tuple(int(x) for x in rng.integers(5, 11, size=2))
    cfg = SimConfig(tokens, total_steps=steps, optimize_steps=steps, alpha=alpha,
                    weights=LossWeights(0.0, 2.0, 0.25, 0.0), seed=seed)
    blobs = {"subject_a": [Blob(center, amplitude, sigma)], "subject_b": [Blob(center, amplitude, sigma)]}
    return Experiment(cfg, blobs, {"background": BACKGROUND_LEVEL})


def default_experiment(seed: int = 0, metric: str = "euc") -> Experiment:
    """A cat and a red bowl: a scattered animal, an object overlapping it, and its colour.

    Full loss with the default weights, 50 steps with guidance on the first 25.
    """
    tokens = (
        TokenSpec("sot", "background"),
        TokenSpec("cat", "subject", category="animal"),
        TokenSpec("red", "attribute", bound_subject="bowl"),
        TokenSpec("bowl", "subject", category="object"),
    )
    cfg = SimConfig(tokens, total_steps=50, optimize_steps=25, alpha=64.0,
                    metrics=Metrics.parse(metric), seed=seed)
    blobs = {
        "cat": [Blob((4, 4), 3.0, 2.0), Blob((11, 12), 3.0, 2.0)],
        "bowl": [Blob((9, 9), 3.0, 2.0), Blob((3, 12), 2.5, 1.5)],
        "red": [Blob((9, 8), 2.5, 2.0), Blob((13, 3), 2.0, 1.5)],
    }
    return Experiment(cfg, blobs, {"sot": BACKGROUND_LEVEL})
