"""Analytic gradients of the guidance loss and a finite-difference check.

Gradients hold the current :class:`~attnguide.losses.Selection` fixed:
masks and argmax cells are recomputed from the input but not
differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .core import AttentionStack, TokenSpec, attributes_of, grid_coords, softmax_tokens, subjects_of
from .errors import ShapeError, ValidationError, ZeroMassError, ZeroVectorError
from .losses import (EUCLIDEAN, LossWeights, Metrics, Selection, _check_tokens, evaluate,
                     select)
from .regions import GroupingRegion

# smoothing inside the square root of distances, gradients only
DIST_EPS = 1e-8

ATTENTION = "attention"
LOGITS = "logits"


@dataclass(frozen=True)
class GradientField:
    """Gradient with the layout of its stack, ``(T, H, W)``."""

    values: np.ndarray
    tokens: tuple
    with_respect_to: str = ATTENTION

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __getitem__(self, token: str) -> np.ndarray:
        return self.values[self.tokens.index(token)]


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_cell: tuple  # (token, row, col)
    passed: bool
    rtol: float
    eps: float
    resolution: float = 0.0
    raw_max_rel_err: float = 0.0     # no round-off discount
    resolved_rel_err: float = 0.0    # no discount, cells with magnitude >= resolution / rtol only

    def as_dict(self):
        return {"max_abs_err": self.max_abs_err, "max_rel_err": self.max_rel_err,
                "worst_token": self.worst_cell[0], "worst_row": self.worst_cell[1],
                "worst_col": self.worst_cell[2], "pass": self.passed,
                "rtol": self.rtol, "eps": self.eps, "resolution": self.resolution,
                "raw_max_rel_err": self.raw_max_rel_err, "resolved_rel_err": self.resolved_rel_err}


# -- per-loss gradients on one map -------------------------------------------

def _agg_euclidean_grad(v: np.ndarray, masks) -> np.ndarray:
    """d/dv of sum over ordered pairs of centroid distances."""
    out = np.zeros_like(v)
    regions = [GroupingRegion.from_map(v, m) for m in masks]
    if len(regions) < 2:
        return out
    cents = np.array([r.centroid for r in regions])
    masses = [r.mass for r in regions]
    d_cent = np.zeros_like(cents)
    for i, k in combinations(range(len(regions)), 2):
        delta = cents[i] - cents[k]
        unit = delta / np.sqrt(delta @ delta + DIST_EPS * DIST_EPS)
        # ordered pairs (i, k) and (k, i) both contribute
        d_cent[i] += 2.0 * unit
        d_cent[k] -= 2.0 * unit
    for r, c, dc, mass in zip(regions, cents, d_cent, masses):
        contrib = ((r.coords - c) @ dc) / mass
        np.add.at(out, (r.coords[:, 0], r.coords[:, 1]), contrib)
    return out


def _cos_grad(a: np.ndarray, b: np.ndarray):
    """Cosine similarity of (a, b) and its gradient with respect to a and b."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    cos = float(a @ b / (na * nb))
    ga = b / (na * nb) - cos * a / (na * na)
    gb = a / (na * nb) - cos * b / (nb * nb)
    return cos, ga, gb


def _agg_cosine_grad(v: np.ndarray, masks) -> np.ndarray:
    out = np.zeros_like(v)
    if len(masks) < 2:
        return out
    h, w = v.shape
    positions, valid, vecs = [], [], []
    for m in masks:
        pos = m.full_disk()
        ok = (pos[:, 0] >= 0) & (pos[:, 0] < h) & (pos[:, 1] >= 0) & (pos[:, 1] < w)
        vec = np.zeros(len(pos))
        vec[ok] = v[pos[ok, 0], pos[ok, 1]]
        positions.append(pos)
        valid.append(ok)
        vecs.append(vec)
    grads = [np.zeros_like(x) for x in vecs]
    for i, k in combinations(range(len(vecs)), 2):
        if len(vecs[i]) != len(vecs[k]):
            raise ShapeError("cosine aggregation needs regions of equal radius")
        _, gi, gk = _cos_grad(vecs[i], vecs[k])
        grads[i] -= 2.0 * gi
        grads[k] -= 2.0 * gk
    for pos, ok, g in zip(positions, valid, grads):
        np.add.at(out, (pos[ok, 0], pos[ok, 1]), g[ok])
    return out


def _iso_euclidean_grad(a: np.ndarray, b: np.ndarray):
    """Gradients of ``1 - d/d_max`` with respect to both maps."""
    g = grid_coords(*a.shape)
    ma, mb = a.sum(), b.sum()
    if not (ma > 0 and mb > 0):
        raise ZeroMassError("isolation loss needs maps with positive total value")
    ca = g.T @ a.ravel() / ma
    cb = g.T @ b.ravel() / mb
    delta = ca - cb
    h, w = a.shape
    d_max = np.sqrt(w * w + h * h)
    unit = delta / np.sqrt(delta @ delta + DIST_EPS * DIST_EPS)
    ga = -((g - ca) @ unit) / (ma * d_max)
    gb = ((g - cb) @ unit) / (mb * d_max)
    return ga.reshape(a.shape), gb.reshape(b.shape)


def _iso_cosine_grad(a: np.ndarray, b: np.ndarray):
    _, ga, gb = _cos_grad(a.ravel(), b.ravel())
    return ga.reshape(a.shape), gb.reshape(b.shape)


def gradient_under(values: np.ndarray, stack_tokens: Sequence[str], tokens: Sequence[TokenSpec],
                   selection: Selection, weights: LossWeights = LossWeights(),
                   metrics: Metrics = Metrics()) -> np.ndarray:
    """Gradient of :func:`~attnguide.losses.evaluate` with respect to ``values``."""
    stack_tokens = tuple(stack_tokens)
    idx = {tok: i for i, tok in enumerate(stack_tokens)}
    out = np.zeros_like(values, dtype=np.float64)
    subs = subjects_of(tokens)
    attrs = attributes_of(tokens)
    agg_grad = _agg_euclidean_grad if metrics.aggregation == EUCLIDEAN else _agg_cosine_grad
    iso_grad = _iso_euclidean_grad if metrics.isolation == EUCLIDEAN else _iso_cosine_grad

    if subs:
        if weights.agg_sub:
            for s in subs:
                i = idx[s.id]
                out[i] += weights.agg_sub / len(subs) * agg_grad(values[i], selection.masks[s.id])
        if weights.max:
            for s in subs:
                i = idx[s.id]
                r, c = divmod(selection.argmax[s.id], values.shape[2])
                out[i, r, c] -= weights.max / len(subs)
        pairs = list(combinations(subs, 2))
        if weights.iso and pairs:
            scale = weights.iso / len(pairs)
            for m, n in pairs:
                i, j = idx[m.id], idx[n.id]
                ga, gb = iso_grad(values[i], values[j])
                out[i] += scale * ga
                out[j] += scale * gb
    if attrs and weights.agg_attr:
        for t in attrs:
            i = idx[t.id]
            out[i] += weights.agg_attr / len(attrs) * agg_grad(values[i], selection.masks[t.id])
    return out


def loss_gradient(stack: AttentionStack, tokens: Sequence[TokenSpec], weights: LossWeights = LossWeights(),
                  region_cfgs=None, metrics: Metrics = Metrics(), step: int = 0,
                  total_opt_steps: int = 25) -> GradientField:
    """Gradient of the total loss with respect to the attention values."""
    _check_tokens(stack.tokens, tokens)
    sel = select(stack, tokens, region_cfgs, step, total_opt_steps)
    g = gradient_under(stack.values, stack.tokens, tokens, sel, weights, metrics)
    return GradientField(g, stack.tokens, ATTENTION)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient through the per-position softmax over axis 0."""
    inner = (probs * grad_probs).sum(axis=0, keepdims=True)
    return probs * (grad_probs - inner)


def latent_gradient(logits, stack_tokens: Sequence[str], tokens: Sequence[TokenSpec],
                    weights: LossWeights = LossWeights(), region_cfgs=None,
                    metrics: Metrics = Metrics(), step: int = 0, total_opt_steps: int = 25) -> GradientField:
    """Gradient of the total loss with respect to ``(T, H, W)`` logits.

    ``logits`` may also be a :class:`~attnguide.sim.Latent`.
    """
    if hasattr(logits, "logits"):
        logits = logits.logits
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("latent contains non-finite values")
    probs = softmax_tokens(z)
    stack = AttentionStack(probs, tuple(stack_tokens), normalized=True)
    g_attn = loss_gradient(stack, tokens, weights, region_cfgs, metrics, step, total_opt_steps)
    return GradientField(softmax_backward(probs, g_attn.values), stack.tokens, LOGITS)


# -- finite differences --------------------------------------------------------

def finite_diff_gradient(fn: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``point`` (any shape)."""
    if not eps > 0:
        raise ValidationError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        f_plus = fn(x)
        flat[k] = orig - eps
        f_minus = fn(x)
        flat[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss while perturbing element {k}")
        gflat[k] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def frozen_loss_fn(stack: AttentionStack, tokens, weights=LossWeights(), region_cfgs=None,
                   metrics=Metrics(), step=0, total_opt_steps=25):
    """Scalar loss of a ``(T, H, W)`` array with the selection taken from ``stack``."""
    sel = select(stack, tokens, region_cfgs, step, total_opt_steps)
    names = stack.tokens

    def fn(values):
        return evaluate(values, names, tokens, sel, weights, metrics).total

    return fn


def roundoff_resolution(loss_value: float, eps: float, factor: float = 4.0) -> float:
    """Smallest gradient difference a central quotient can resolve at this loss size.

    Each evaluation carries round-off of order ``u * |L|``; dividing by
    ``2 * eps`` turns that into an absolute floor on the quotient's accuracy.
    """
    return factor * np.finfo(np.float64).eps * max(abs(loss_value), 1.0) / eps


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray, tokens=None, rtol: float = 1e-5,
                      eps: float = 1e-6, resolution: float = 0.0) -> GradCheckReport:
    """Per-cell comparison of two gradient arrays.

    The relative error of a cell is ``max(|a - n| - resolution, 0) / max(|a|, |n|)``;
    ``resolution`` discounts what the finite-difference quotient cannot resolve
    (see :func:`roundoff_resolution`). Cells where both entries are 0 score 0.
    The report also carries the undiscounted maximum, overall and over the
    cells large enough for the discount to stay below ``rtol``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    abs_err = np.abs(a - n)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), np.finfo(np.float64).tiny)
    rel_err = np.maximum(abs_err - resolution, 0.0) / denom
    worst = np.unravel_index(int(np.argmax(rel_err)), a.shape)
    if rel_err[worst] == 0:
        worst = np.unravel_index(int(np.argmax(abs_err)), a.shape)
    max_rel = float(rel_err.max())
    raw = abs_err / denom
    resolved = denom >= (resolution / rtol if rtol > 0 else np.inf)
    raw_resolved = float(raw[resolved].max()) if resolved.any() else 0.0
    pos = tuple(int(x) for x in worst)
    if a.ndim == 3:
        cell = (tokens[pos[0]] if tokens is not None else pos[0], pos[1], pos[2])
    else:
        cell = (None,) + pos
    return GradCheckReport(float(abs_err.max()), max_rel, cell, bool(max_rel <= rtol), rtol, eps,
                           float(resolution), float(raw.max()), raw_resolved)


def gradcheck(stack: AttentionStack, tokens: Sequence[TokenSpec], weights: LossWeights = LossWeights(),
              region_cfgs=None, metrics: Metrics = Metrics(), eps: float = 1e-6, rtol: float = 1e-5,
              analytic: np.ndarray | None = None, step: int = 0, total_opt_steps: int = 25) -> GradCheckReport:
    """Compare :func:`loss_gradient` (or a supplied ``analytic`` array) with central differences."""
    if analytic is None:
        analytic = loss_gradient(stack, tokens, weights, region_cfgs, metrics, step, total_opt_steps).values
    fn = frozen_loss_fn(stack, tokens, weights, region_cfgs, metrics, step, total_opt_steps)
    numeric = finite_diff_gradient(fn, stack.values, eps)
    resolution = roundoff_resolution(fn(stack.values), eps)
    return compare_gradients(analytic, numeric, stack.tokens, rtol, eps, resolution)


GRADCHECK_TOKENS = (
    TokenSpec("subject_a", "subject", category="object"),
    TokenSpec("subject_b", "subject", category="animal"),
    TokenSpec("attribute_a", "attribute", bound_subject="subject_a"),
)


def random_stack(seed: int, height: int = 16, width: int = 16, tokens=GRADCHECK_TOKENS,
                 scale: float = 2.0) -> AttentionStack:
    """Softmax of seeded Gaussian logits (numpy PCG64), one map per token."""
    rng = np.random.default_rng(seed)
    logits = scale * rng.standard_normal((len(tokens), height, width))
    return AttentionStack(softmax_tokens(logits), tuple(t.id for t in tokens), normalized=True)


def gradcheck_sweep(n_seeds: int = 100, weights: LossWeights = LossWeights(), metrics: Metrics = Metrics(),
                    eps: float = 1e-6, rtol: float = 1e-5, tokens=GRADCHECK_TOKENS,
                    start_seed: int = 0, corrupt: bool = False) -> list[GradCheckReport]:
    """Gradcheck on ``n_seeds`` random 16x16 stacks.

    ``corrupt`` perturbs one analytic entry per stack to exercise the failure path.
    """
    reports = []
    for seed in range(start_seed, start_seed + n_seeds):
        stack = random_stack(seed, tokens=tokens)
        analytic = loss_gradient(stack, tokens, weights, None, metrics).values
        if corrupt:
            analytic = analytic.copy()
            analytic[0, 0, 0] += 1e-2 * (np.abs(analytic).max() + 1.0)
        reports.append(gradcheck(stack, tokens, weights, None, metrics, eps, rtol, analytic))
    return reports
