"""Desk-scale guidance loop over an evolving latent.

A latent is a ``(T, H, W)`` tensor ``z``. Attention logits are read out
as ``S z``, where ``S`` blurs each token's grid with a row-normalized
Gaussian of width ``readout_sigma`` cells (``0`` makes ``S`` the identity,
so ``z`` are the logits themselves), and the attention stack is the
per-position softmax over tokens. During the first ``optimize_steps``
steps the latent takes one safeguarded step ``z - alpha * grad_z L``;
afterwards it only receives the optional noise.

Randomness comes from numpy's PCG64 generator seeded through
``SeedSequence``: ``[seed, 0]`` for the initial latent and
``[seed, 1, step]`` for the noise of each step, so every step is a pure
function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .core import (AttentionStack, Coord, TokenSpec, attributes_of, map_centroid, softmax_tokens,
                   subjects_of, validate_tokens)
from .errors import SimulationError, UndefinedMetricError, ValidationError
from .grad import gradient_under, softmax_backward
from .losses import LossBreakdown, LossWeights, Metrics, evaluate, select
from .metrics import ROOK, centroid_spread, morans_i, overlap_ratio
from .regions import DEFAULT_REGION_CONFIGS, GroupingRegion


@dataclass(frozen=True)
class Blob:
    """Gaussian bump ``amplitude * exp(-|x - center|^2 / (2 sigma^2))`` added to logits."""

    center: tuple
    amplitude: float = 4.0
    sigma: float = 1.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"blob sigma must be positive, got {self.sigma}")
        if not np.isfinite(self.amplitude):
            raise ValidationError("blob amplitude must be finite")


@dataclass(frozen=True)
class Latent:
    logits: np.ndarray
    tokens: tuple
    step: int = 0

    def __post_init__(self):
        z = np.array(self.logits, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != len(self.tokens):
            raise ValidationError(f"logits of shape {z.shape} do not match {len(self.tokens)} tokens")
        if not np.all(np.isfinite(z)):
            raise ValidationError("latent contains non-finite values")
        z.setflags(write=False)
        object.__setattr__(self, "logits", z)
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def attention(self, readout_sigma: float = 0.0) -> AttentionStack:
        z = Readout(self.logits.shape[1:], readout_sigma).forward(self.logits)
        return AttentionStack(softmax_tokens(z), self.tokens, self.step, normalized=True)


def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.eye(n)
    i = np.arange(n)
    b = np.exp(-((i[:, None] - i[None, :]) ** 2) / (2.0 * sigma * sigma))
    return b / b.sum(axis=1, keepdims=True)


class Readout:
    """Separable Gaussian map from latent to attention logits, with its adjoint."""

    def __init__(self, shape, sigma: float = 0.0):
        if sigma < 0 or not np.isfinite(sigma):
            raise ValidationError(f"readout sigma must be >= 0, got {sigma}")
        self.sigma = float(sigma)
        self.rows = _blur_matrix(shape[0], sigma)
        self.cols = _blur_matrix(shape[1], sigma)

    def forward(self, z: np.ndarray) -> np.ndarray:
        if self.sigma == 0:
            return np.asarray(z, dtype=np.float64)
        return np.einsum("ij,tjk,lk->til", self.rows, z, self.cols)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        if self.sigma == 0:
            return g
        return np.einsum("ji,tjk,kl->til", self.rows, g, self.cols)


@lru_cache(maxsize=32)
def _readout(shape, sigma):
    return Readout(shape, sigma)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``alpha`` is a constant step size or one value per optimized step; a step
    that would raise the total loss is retried at half size, at most
    ``max_halvings`` times, and skipped if none succeeds. ``noise`` is the
    initial scale of per-step Gaussian noise on the latent, decaying linearly
    to 0 at the last step; ``init_noise`` perturbs the initial latent.
    ``readout_sigma`` is the width of the latent-to-logit blur.
    """

    tokens: tuple
    height: int = 16
    width: int = 16
    total_steps: int = 50
    optimize_steps: int = 25
    alpha: float | tuple = 0.5
    max_halvings: int = 10
    weights: LossWeights = LossWeights()
    region_cfgs: Mapping = field(default_factory=dict)
    metrics: Metrics = Metrics()
    noise: float = 0.0
    init_noise: float = 0.1
    seed: int = 0
    adjacency: str = ROOK
    overlap_q: float = 0.7
    readout_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        validate_tokens(self.tokens)
        if not self.tokens:
            raise ValidationError("need at least one token")
        if self.height < 1 or self.width < 1:
            raise ValidationError("grid dimensions must be positive")
        if not 0 <= self.optimize_steps <= self.total_steps:
            raise ValidationError("need 0 <= optimize_steps <= total_steps")
        alphas = self.alpha if isinstance(self.alpha, (tuple, list)) else (self.alpha,)
        if not all(np.isfinite(a) and a > 0 for a in alphas):
            raise ValidationError("step sizes must be positive")
        if isinstance(self.alpha, (tuple, list)):
            if len(self.alpha) < self.optimize_steps:
                raise ValidationError("alpha schedule shorter than optimize_steps")
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.max_halvings < 0:
            raise ValidationError("max_halvings must be >= 0")
        if self.noise < 0 or self.init_noise < 0:
            raise ValidationError("noise scales must be >= 0")
        if self.readout_sigma < 0:
            raise ValidationError("readout_sigma must be >= 0")
        cfgs = dict(DEFAULT_REGION_CONFIGS)
        cfgs.update(self.region_cfgs or {})
        object.__setattr__(self, "region_cfgs", cfgs)

    @property
    def readout(self) -> Readout:
        return _readout((self.height, self.width), self.readout_sigma)

    @property
    def token_ids(self) -> tuple:
        return tuple(t.id for t in self.tokens)

    def alpha_at(self, step: int) -> float:
        if isinstance(self.alpha, tuple):
            return self.alpha[step]
        return float(self.alpha)

    def noise_at(self, step: int) -> float:
        if self.noise == 0:
            return 0.0
        if self.total_steps == 1:
            return self.noise
        return self.noise * (1.0 - step / (self.total_steps - 1))


@dataclass(frozen=True)
class RegionRecord:
    center: tuple
    centroid: Coord
    count: int
    mass: float


@dataclass(frozen=True)
class StepRecord:
    """Observed state entering a step, plus the update taken from it.

    ``loss_after`` is the total loss of the updated latent (before noise),
    scored with this step's region settings; it never exceeds
    ``losses.total``.
    """

    step: int
    optimized: bool
    losses: LossBreakdown
    grad_norm: float
    alpha: float
    halvings: int
    regions: dict
    spread: dict
    map_centroids: dict
    morans: dict
    d_over_dmax: float
    overlap: float
    normalization_error: float
    loss_after: float = float("nan")
    attention: np.ndarray = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class Trajectory:
    records: list
    final: StepRecord
    final_latent: Latent
    config: SimConfig

    def __len__(self):
        return len(self.records)

    @property
    def final_stack(self) -> AttentionStack:
        return self.final_latent.attention(self.config.readout_sigma)

    @property
    def all_records(self) -> list:
        """Per-step records followed by the final state."""
        return list(self.records) + [self.final]

    def series(self, name: str) -> np.ndarray:
        """One scalar per step, e.g. ``"total"``, ``"agg_sub"``, ``"grad_norm"``."""
        if name in ("total", "agg_sub", "iso", "max", "agg_attr"):
            return np.array([getattr(r.losses, name) for r in self.records])
        return np.array([getattr(r, name) for r in self.records])


def init_latent(height: int, width: int, tokens: Sequence[TokenSpec], blobs: Mapping | None = None,
                seed: int = 0, noise: float = 0.0, baseline: Mapping | None = None) -> Latent:
    """Sum of Gaussian bumps per token plus seeded Gaussian noise.

    ``baseline`` adds a constant level to chosen tokens, e.g. a background
    token that soaks up attention away from the bumps.
    """
    ids = [t.id if isinstance(t, TokenSpec) else str(t) for t in tokens]
    blobs = blobs or {}
    baseline = baseline or {}
    unknown = (set(blobs) | set(baseline)) - set(ids)
    if unknown:
        raise ValidationError(f"blobs reference unknown tokens {sorted(unknown)}")
    logits = np.zeros((len(ids), height, width))
    for k, tok in enumerate(ids):
        logits[k] += float(baseline.get(tok, 0.0))
    rows, cols = np.indices((height, width))
    for k, tok in enumerate(ids):
        for b in blobs.get(tok, ()):
            if not isinstance(b, Blob):
                b = Blob(**b) if isinstance(b, Mapping) else Blob(*b)
            d2 = (rows - b.center[0]) ** 2 + (cols - b.center[1]) ** 2
            logits[k] += b.amplitude * np.exp(-d2 / (2.0 * b.sigma ** 2))
    if noise > 0:
        rng = np.random.default_rng([seed, 0])
        logits += noise * rng.standard_normal(logits.shape)
    return Latent(logits, tuple(ids), 0)


def _observe(z: np.ndarray, step: int, cfg: SimConfig):
    """Loss, latent gradient and metrics at latent ``z`` for ``step``."""
    readout = cfg.readout
    probs = softmax_tokens(readout.forward(z))
    probs.setflags(write=False)
    stack = AttentionStack(probs, cfg.token_ids, step, normalized=True)
    sel = select(stack, cfg.tokens, cfg.region_cfgs, step, max(cfg.optimize_steps, 1))
    losses = evaluate(probs, cfg.token_ids, cfg.tokens, sel, cfg.weights, cfg.metrics)
    g = readout.adjoint(softmax_backward(
        probs, gradient_under(probs, cfg.token_ids, cfg.tokens, sel, cfg.weights, cfg.metrics)))
    idx = {t: i for i, t in enumerate(cfg.token_ids)}

    regions, spread = {}, {}
    for tok in subjects_of(cfg.tokens) + attributes_of(cfg.tokens):
        regs = [GroupingRegion.from_map(probs[idx[tok.id]], m) for m in sel.masks[tok.id]]
        regions[tok.id] = tuple(RegionRecord(tuple(r.mask.center), r.centroid, r.count, r.mass)
                                for r in regs)
        spread[tok.id] = centroid_spread(regs) if regs else 0.0
    subs = subjects_of(cfg.tokens)
    cents, morans = {}, {}
    for s in subs:
        v = probs[idx[s.id]]
        cents[s.id] = map_centroid(v)
        try:
            morans[s.id] = morans_i(v, cfg.adjacency)
        except UndefinedMetricError:
            morans[s.id] = float("nan")
    d_max = float(np.hypot(cfg.height, cfg.width))
    dists, overlaps = [], []
    for m, n in combinations(subs, 2):
        a, b = cents[m.id], cents[n.id]
        dists.append(float(np.hypot(a.h - b.h, a.w - b.w)) / d_max)
        overlaps.append(overlap_ratio(probs[idx[m.id]], probs[idx[n.id]], cfg.overlap_q))
    norm_err = float(np.abs(probs.sum(axis=0) - 1.0).max())
    obs = dict(losses=losses, grad_norm=float(np.linalg.norm(g)), regions=regions, spread=spread,
               map_centroids=cents, morans=morans,
               d_over_dmax=float(np.mean(dists)) if dists else 0.0,
               overlap=float(np.mean(overlaps)) if overlaps else 0.0,
               normalization_error=norm_err, attention=probs)
    return obs, g


def _fresh_total(z: np.ndarray, step: int, cfg: SimConfig) -> float:
    probs = softmax_tokens(cfg.readout.forward(z))
    stack = AttentionStack(probs, cfg.token_ids, step)
    sel = select(stack, cfg.tokens, cfg.region_cfgs, step, max(cfg.optimize_steps, 1))
    return evaluate(probs, cfg.token_ids, cfg.tokens, sel, cfg.weights, cfg.metrics).total


def sim_step(latent: Latent, t: int, cfg: SimConfig) -> tuple[Latent, StepRecord]:
    """Observe the latent at step ``t`` and advance it by one step."""
    if not 0 <= t < cfg.total_steps:
        raise ValidationError(f"step {t} outside [0, {cfg.total_steps})")
    if latent.tokens != cfg.token_ids:
        raise ValidationError("latent tokens do not match the config")
    z = latent.logits
    obs, g = _observe(z, t, cfg)
    optimized = t < cfg.optimize_steps
    alpha_used, halvings = 0.0, 0
    if not (np.all(np.isfinite(g)) and np.isfinite(obs["losses"].total)):
        rec = StepRecord(t, optimized, alpha=float("nan"), halvings=0, **obs)
        raise SimulationError(f"non-finite loss or gradient at step {t}", rec)

    new_z = z
    current = obs["losses"].total
    loss_after = current
    if optimized and obs["grad_norm"] > 0:
        alpha = cfg.alpha_at(t)
        for halvings in range(cfg.max_halvings + 1):
            trial = z - alpha * g
            trial_loss = _fresh_total(trial, t, cfg)
            if trial_loss <= current:
                new_z, alpha_used, loss_after = trial, alpha, trial_loss
                break
            alpha *= 0.5
    scale = cfg.noise_at(t)
    if scale > 0:
        rng = np.random.default_rng([cfg.seed, 1, t])
        new_z = new_z + scale * rng.standard_normal(z.shape)
    rec = StepRecord(t, optimized, alpha=alpha_used, halvings=halvings, loss_after=loss_after, **obs)
    return Latent(new_z, latent.tokens, t + 1), rec


def run(cfg: SimConfig, blobs: Mapping | None = None, latent: Latent | None = None,
        baseline: Mapping | None = None) -> Trajectory:
    """Run all ``cfg.total_steps`` steps from ``latent`` or from ``init_latent(blobs, baseline)``."""
    if latent is None:
        latent = init_latent(cfg.height, cfg.width, cfg.tokens, blobs, cfg.seed, cfg.init_noise,
                             baseline)
    records = []
    for t in range(cfg.total_steps):
        latent, rec = sim_step(latent, t, cfg)
        records.append(rec)
    obs, _ = _observe(latent.logits, cfg.total_steps, cfg)
    final = StepRecord(cfg.total_steps, False, alpha=0.0, halvings=0,
                       loss_after=obs["losses"].total, **obs)
    return Trajectory(records, final, latent, cfg)


@dataclass(frozen=True)
class Experiment:
    """A simulation config together with its initial latent recipe."""

    config: SimConfig
    blobs: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def initial_latent(self) -> Latent:
        c = self.config
        return init_latent(c.height, c.width, c.tokens, self.blobs, c.seed, c.init_noise, self.baseline)

    def run(self) -> Trajectory:
        return run(self.config, latent=self.initial_latent())
