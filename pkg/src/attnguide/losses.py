"""Aggregation, isolation and max-activation losses and their weighted total.

Discrete choices (mask placement, argmax cells) are captured in a
:class:`Selection`. :func:`total_loss` recomputes the selection from the
stack; :func:`evaluate` takes one as given, which is what gradient code
and finite-difference checks need.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .core import (ATTRIBUTE, SUBJECT, AttentionStack, TokenSpec, attributes_of,
                   grid_coords, max_activation, subjects_of, validate_tokens)
from .errors import ShapeError, ValidationError, ZeroMassError, ZeroVectorError
from .regions import DEFAULT_REGION_CONFIGS, GroupingRegion, RegionConfig, place_masks

EUCLIDEAN = "euclidean"
COSINE = "cosine"
_METRIC_ALIASES = {"euc": EUCLIDEAN, "euclidean": EUCLIDEAN, "cos": COSINE, "cosine": COSINE}


def metric_name(name: str) -> str:
    try:
        return _METRIC_ALIASES[str(name).lower()]
    except KeyError:
        raise ValidationError(f"unknown metric {name!r}; use euclidean or cosine") from None


@dataclass(frozen=True)
class Metrics:
    """Distance form used by the aggregation and isolation losses."""

    aggregation: str = EUCLIDEAN
    isolation: str = EUCLIDEAN

    def __post_init__(self):
        object.__setattr__(self, "aggregation", metric_name(self.aggregation))
        object.__setattr__(self, "isolation", metric_name(self.isolation))

    @classmethod
    def parse(cls, text: str) -> "Metrics":
        """``"euc"``, ``"cos"`` (both losses) or ``"agg+iso"`` such as ``"euc+cos"``."""
        parts = str(text).split("+")
        if len(parts) == 1:
            return cls(parts[0], parts[0])
        if len(parts) == 2:
            return cls(*parts)
        raise ValidationError(f"cannot parse metric selection {text!r}")

    @property
    def label(self) -> str:
        short = {EUCLIDEAN: "euc", COSINE: "cos"}
        return f"{short[self.aggregation]}+{short[self.isolation]}"


@dataclass(frozen=True)
class LossWeights:
    agg_sub: float = 1.25
    iso: float = 2.0
    max: float = 0.25
    agg_attr: float = 0.75

    def __post_init__(self):
        for name in ("agg_sub", "iso", "max", "agg_attr"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self):
        return (self.agg_sub, self.iso, self.max, self.agg_attr)


@dataclass(frozen=True)
class LossBreakdown:
    agg_sub: float
    iso: float
    max: float
    agg_attr: float
    total: float
    per_token: dict = field(default_factory=dict)
    per_pair: dict = field(default_factory=dict)


# -- single losses -----------------------------------------------------------

def _pair_distance_sum(points) -> float:
    total = 0.0
    for (a, b) in combinations(points, 2):
        total += 2.0 * float(np.hypot(a[0] - b[0], a[1] - b[1]))
    return total


def agg_sub_loss(regions: Sequence[GroupingRegion]) -> float:
    """Sum of centroid distances over ordered region pairs (each pair counted twice)."""
    return _pair_distance_sum([r.centroid for r in regions])


def agg_attr_loss(attr_regions: Sequence[GroupingRegion]) -> float:
    """Aggregation loss on an attribute token's regions; same form as :func:`agg_sub_loss`."""
    return agg_sub_loss(attr_regions)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def agg_sub_loss_cos(regions: Sequence[GroupingRegion], full_map=None) -> float:
    """Cosine form of the aggregation loss: sum over ordered pairs of ``1 - cos``.

    Region vectors cover the full disk with clipped positions set to 0, so
    ``full_map`` is needed whenever a disk leaves the map. Without it the
    in-bounds values are zero-filled into disk order directly.
    """
    vecs = [_region_vector(r, full_map) for r in regions]
    total = 0.0
    for a, b in combinations(vecs, 2):
        if len(a) != len(b):
            raise ShapeError("cosine aggregation needs regions of equal radius")
        total += 2.0 * (1.0 - _cos(a, b))
    return total


def _region_vector(region: GroupingRegion, full_map=None) -> np.ndarray:
    if full_map is not None:
        return region.disk_vector(np.asarray(getattr(full_map, "values", full_map)))
    pos = region.mask.full_disk()
    lookup = {(int(i), int(j)): v for (i, j), v in zip(region.coords, region.values)}
    return np.array([lookup.get((int(i), int(j)), 0.0) for i, j in pos])


def _values2d(amap):
    return np.asarray(getattr(amap, "values", amap), dtype=np.float64)


def iso_loss(map_m, map_n) -> float:
    """``1 - d / d_max`` for the whole-map centroids of two subjects."""
    a, b = _values2d(map_m), _values2d(map_n)
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")
    g = grid_coords(*a.shape)
    ma, mb = a.sum(), b.sum()
    if not (ma > 0 and mb > 0):
        raise ZeroMassError("isolation loss needs maps with positive total value")
    ca = g.T @ a.ravel() / ma
    cb = g.T @ b.ravel() / mb
    d = float(np.hypot(*(ca - cb)))
    h, w = a.shape
    return 1.0 - d / float(np.sqrt(w * w + h * h))


def iso_loss_cos(map_m, map_n) -> float:
    """Cosine similarity of the flattened maps."""
    a, b = _values2d(map_m), _values2d(map_n)
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")
    return _cos(a.ravel(), b.ravel())


def max_loss(amap) -> float:
    """``1 - max`` of the map."""
    return 1.0 - max_activation(_values2d(amap))[1]


def iso_loss_all(stack: AttentionStack, tokens: Sequence[TokenSpec], metric: str = EUCLIDEAN) -> float:
    """Mean isolation loss over unordered subject pairs; 0 with fewer than two subjects."""
    subs = subjects_of(tokens)
    if not subs:
        raise ValidationError("need at least one subject token")
    fn = iso_loss if metric_name(metric) == EUCLIDEAN else iso_loss_cos
    pairs = list(combinations(subs, 2))
    if not pairs:
        return 0.0
    return float(np.mean([fn(stack[m.id], stack[n.id]) for m, n in pairs]))


def multi_encoder_weights(max_clip: float, max_t5: float) -> tuple[float, float]:
    """Split loss weight between two text encoders in proportion to their peak activations.

    Each weight is the exact ratio of the given floats, rounded once, so
    ``(0.3, 0.1)`` maps to ``(0.75, 0.25)`` rather than ``0.7499999999999999``.
    """
    if not (max_clip >= 0 and max_t5 >= 0) or not np.isfinite(max_clip + max_t5):
        raise ValidationError("peak activations must be finite and non-negative")
    tau = Fraction(max_clip) + Fraction(max_t5)
    if tau == 0:
        raise ZeroDivisionError("both peak activations are zero")
    return float(Fraction(max_clip) / tau), float(Fraction(max_t5) / tau)


# -- frozen selection --------------------------------------------------------

def region_config_for(token: TokenSpec, region_cfgs: Mapping | None = None) -> RegionConfig:
    """Region config by token id, then by category (``object``/``animal``/``attribute``)."""
    cfgs = dict(DEFAULT_REGION_CONFIGS)
    if region_cfgs:
        cfgs.update(region_cfgs)
    if token.id in cfgs:
        return cfgs[token.id]
    key = "attribute" if token.kind == ATTRIBUTE else token.category
    return cfgs[key]


@dataclass(frozen=True)
class Selection:
    """Discrete choices held fixed while differentiating.

    ``masks`` maps each subject and attribute id to its region masks;
    ``argmax`` maps each subject id to the flat index of its peak cell.
    """

    masks: dict
    argmax: dict


def select(stack: AttentionStack, tokens: Sequence[TokenSpec], region_cfgs=None,
           step: int = 0, total_opt_steps: int = 25) -> Selection:
    masks, argmax = {}, {}
    for tok in tokens:
        if tok.kind not in (SUBJECT, ATTRIBUTE):
            continue
        v = stack.values[stack.index(tok.id)]
        cfg = region_config_for(tok, region_cfgs).at(step, total_opt_steps)
        masks[tok.id] = tuple(place_masks(v, cfg))
        if tok.kind == SUBJECT:
            argmax[tok.id] = int(np.argmax(v))
    return Selection(masks, argmax)


def _check_tokens(stack_tokens, tokens):
    validate_tokens(tokens)
    missing = [t.id for t in tokens if t.id not in stack_tokens]
    if missing:
        raise ValidationError(f"tokens {missing} have no map in the stack")


def evaluate(values: np.ndarray, stack_tokens: Sequence[str], tokens: Sequence[TokenSpec],
             selection: Selection, weights: LossWeights = LossWeights(),
             metrics: Metrics = Metrics()) -> LossBreakdown:
    """Loss breakdown of a ``(T, H, W)`` array under a fixed selection."""
    stack_tokens = tuple(stack_tokens)
    idx = {tok: i for i, tok in enumerate(stack_tokens)}
    subs = subjects_of(tokens)
    attrs = attributes_of(tokens)
    per_token, per_pair = {}, {}

    def agg(tok_id):
        v = values[idx[tok_id]]
        regions = [GroupingRegion.from_map(v, m) for m in selection.masks[tok_id]]
        if metrics.aggregation == EUCLIDEAN:
            return agg_sub_loss(regions)
        return agg_sub_loss_cos(regions, v)

    agg_terms = []
    max_terms = []
    for s in subs:
        a = agg(s.id)
        m = 1.0 - float(values[idx[s.id]].flat[selection.argmax[s.id]])
        per_token[s.id] = {"agg_sub": a, "max": m}
        agg_terms.append(a)
        max_terms.append(m)
    attr_terms = []
    for t in attrs:
        a = agg(t.id)
        per_token[t.id] = {"agg_attr": a}
        attr_terms.append(a)
    iso_fn = iso_loss if metrics.isolation == EUCLIDEAN else iso_loss_cos
    iso_terms = []
    for m, n in combinations(subs, 2):
        val = iso_fn(values[idx[m.id]], values[idx[n.id]])
        per_pair[(m.id, n.id)] = val
        iso_terms.append(val)

    agg_sub = float(np.mean(agg_terms)) if agg_terms else 0.0
    mx = float(np.mean(max_terms)) if max_terms else 0.0
    agg_attr = float(np.mean(attr_terms)) if attr_terms else 0.0
    iso = float(np.mean(iso_terms)) if iso_terms else 0.0
    total = (weights.agg_sub * agg_sub + weights.iso * iso
             + weights.max * mx + weights.agg_attr * agg_attr)
    return LossBreakdown(agg_sub, iso, mx, agg_attr, total, per_token, per_pair)


def total_loss(stack: AttentionStack, tokens: Sequence[TokenSpec], weights: LossWeights = LossWeights(),
               region_cfgs=None, metrics: Metrics = Metrics(), step: int = 0,
               total_opt_steps: int = 25) -> LossBreakdown:
    """Weighted total of all losses, with regions and peaks found from ``stack``.

    Per-kind terms are averaged over tokens of that kind; isolation is the
    mean over subject pairs. ``step``/``total_opt_steps`` resolve scheduled radii.
    """
    _check_tokens(stack.tokens, tokens)
    sel = select(stack, tokens, region_cfgs, step, total_opt_steps)
    return evaluate(stack.values, stack.tokens, tokens, sel, weights, metrics)
