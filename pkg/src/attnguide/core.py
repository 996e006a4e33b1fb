"""Attention maps, token bookkeeping and the cross-attention softmax.

Arrays are stored token-major: an attention stack holds a ``(T, H, W)``
array, and map ``m`` is ``values[m]``. Cell coordinates are ``(row, col)``
with the origin at the centre of the top-left cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ShapeError, ValidationError, ZeroMassError

SUBJECT = "subject"
ATTRIBUTE = "attribute"
BACKGROUND = "background"
TOKEN_KINDS = (SUBJECT, ATTRIBUTE, BACKGROUND)
SUBJECT_CATEGORIES = ("object", "animal")


class Coord(NamedTuple):
    """Continuous (row, column) position in map-cell units."""

    h: float
    w: float


@dataclass(frozen=True)
class AttentionMap:
    """One token's ``H x W`` grid of non-negative attention scores."""

    values: np.ndarray
    token: str = ""
    timestep: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeError(f"attention map must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("attention map contains non-finite values")
        if np.any(v < 0):
            raise ValidationError("attention map contains negative values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def value(self, cell) -> float:
        """Stored score of ``cell = (row, col)``."""
        return float(self.values[cell[0], cell[1]])


@dataclass(frozen=True)
class TokenSpec:
    """A prompt token taking part in guidance.

    ``kind`` is ``"subject"``, ``"attribute"`` (bound to ``bound_subject``)
    or ``"background"`` (participates in the softmax only). ``category``
    selects the subject's region configuration (``"object"`` or ``"animal"``).
    """

    id: str
    kind: str = SUBJECT
    bound_subject: str | None = None
    category: str = "object"

    def __post_init__(self):
        if self.kind not in TOKEN_KINDS:
            raise ValidationError(f"token {self.id!r}: unknown kind {self.kind!r}")
        if self.kind == ATTRIBUTE and not self.bound_subject:
            raise ValidationError(f"attribute token {self.id!r} must name a bound subject")
        if self.kind != ATTRIBUTE and self.bound_subject is not None:
            raise ValidationError(f"token {self.id!r}: only attributes carry bound_subject")
        if self.kind == SUBJECT and self.category not in SUBJECT_CATEGORIES:
            raise ValidationError(f"subject {self.id!r}: unknown category {self.category!r}")


def validate_tokens(tokens: Sequence[TokenSpec]) -> None:
    """Check id uniqueness and attribute-to-subject bindings."""
    ids = [t.id for t in tokens]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate token ids in {ids}")
    subjects = {t.id for t in tokens if t.kind == SUBJECT}
    for t in tokens:
        if t.kind == ATTRIBUTE and t.bound_subject not in subjects:
            raise ValidationError(
                f"attribute {t.id!r} is bound to {t.bound_subject!r}, which is not a subject"
            )


def subjects_of(tokens: Iterable[TokenSpec]) -> list[TokenSpec]:
    return [t for t in tokens if t.kind == SUBJECT]


def attributes_of(tokens: Iterable[TokenSpec]) -> list[TokenSpec]:
    return [t for t in tokens if t.kind == ATTRIBUTE]


@dataclass(frozen=True)
class AttentionStack:
    """Attention maps of all tokens at one timestep, shape ``(T, H, W)``."""

    values: np.ndarray
    tokens: tuple = ()
    timestep: int = 0
    normalized: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"attention stack must be a non-empty (T, H, W) array, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("attention stack values must be finite and non-negative")
        tokens = tuple(self.tokens) if self.tokens else tuple(f"t{i}" for i in range(v.shape[0]))
        if len(tokens) != v.shape[0]:
            raise ShapeError(f"{len(tokens)} token ids for {v.shape[0]} maps")
        if len(set(tokens)) != len(tokens):
            raise ValidationError(f"duplicate token ids {tokens}")
        if self.normalized and not np.allclose(v.sum(axis=0), 1.0, rtol=0, atol=1e-6):
            raise ValidationError("stack flagged normalized but per-position sums differ from 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def from_maps(cls, maps: Sequence[AttentionMap], normalized: bool = False) -> "AttentionStack":
        if not maps:
            raise ValidationError("need at least one map")
        shapes = {m.shape for m in maps}
        steps = {m.timestep for m in maps}
        if len(shapes) != 1 or len(steps) != 1:
            raise ShapeError("maps must share dimensions and timestep")
        return cls(np.stack([m.values for m in maps]), tuple(m.token for m in maps),
                   maps[0].timestep, normalized)

    @property
    def shape(self):
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(token) from None

    def __getitem__(self, token: str) -> AttentionMap:
        return AttentionMap(self.values[self.index(token)], token, self.timestep)

    @property
    def maps(self) -> list[AttentionMap]:
        return [AttentionMap(v, tok, self.timestep) for v, tok in zip(self.values, self.tokens)]


def softmax_tokens(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 (tokens), independently at every spatial position."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def compute_attention(Q, K, d_k: int, shape=None, tokens=None, timestep: int = 0) -> AttentionStack:
    """Cross-attention maps ``softmax(Q K^T / sqrt(d_k))``.

    Parameters
    ----------
    Q : array_like, shape (N, d)
        One query per spatial position, row-major over the ``H x W`` grid.
    K : array_like, shape (T, d)
        One key per token.
    d_k : int
        Key dimensionality; must equal ``d``.
    shape : (int, int), optional
        Grid ``(H, W)`` with ``H * W == N``. Defaults to a square grid.

    Returns
    -------
    AttentionStack
        Normalized stack; the softmax runs over tokens at each position, so
        cell ``n`` of map ``m`` is entry ``(n, m)`` of the score matrix.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2:
        raise ShapeError("Q and K must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"inner dimensions differ: Q has {Q.shape[1]}, K has {K.shape[1]}")
    if int(d_k) != d_k or d_k <= 0:
        raise ValidationError(f"d_k must be a positive integer, got {d_k}")
    if d_k != Q.shape[1]:
        raise ShapeError(f"d_k={d_k} does not match key dimensionality {Q.shape[1]}")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(K))):
        raise ValidationError("Q and K must be finite")
    n = Q.shape[0]
    if shape is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ShapeError(f"N={n} is not a square; pass shape=(H, W)")
        shape = (side, side)
    h, w = shape
    if h * w != n:
        raise ShapeError(f"shape {shape} does not hold N={n} positions")
    scores = Q @ K.T / np.sqrt(d_k)
    probs = softmax_tokens(scores.T)  # (T, N)
    return AttentionStack(probs.reshape(K.shape[0], h, w), tokens or (), timestep, True)


def weighted_centroid(cells) -> Coord:
    """Value-weighted mean coordinate of ``cells``.

    ``cells`` is an iterable of ``((row, col), value)`` pairs. Raises
    ZeroMassError when the values sum to 0.
    """
    cells = list(cells)
    if not cells:
        raise ValidationError("weighted_centroid needs at least one cell")
    coords = np.array([c for c, _ in cells], dtype=np.float64).reshape(-1, 2)
    values = np.array([v for _, v in cells], dtype=np.float64)
    if np.any(values < 0):
        raise ValidationError("cell values must be non-negative")
    return Coord(*centroid_of(coords, values))


def centroid_of(coords: np.ndarray, values: np.ndarray):
    """Array form of :func:`weighted_centroid`; returns ``(h, w)`` floats."""
    total = values.sum()
    if not total > 0:
        raise ZeroMassError("cells carry zero total value; centroid undefined")
    # offsets from the first cell keep a single repeated coordinate exact
    origin = coords[0]
    h, w = (values @ (coords - origin)) / total + origin
    return float(h), float(w)


_grid_cache: dict = {}


def grid_coords(height: int, width: int) -> np.ndarray:
    """``(H*W, 2)`` row-major cell coordinates (read-only, cached)."""
    key = (height, width)
    g = _grid_cache.get(key)
    if g is None:
        rows, cols = np.indices((height, width))
        g = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
        g.setflags(write=False)
        _grid_cache[key] = g
    return g


def map_centroid(values) -> Coord:
    """Weighted centroid of a whole 2-D map."""
    v = np.asarray(getattr(values, "values", values), dtype=np.float64)
    return Coord(*centroid_of(grid_coords(*v.shape), v.ravel()))


def max_activation(amap) -> tuple[tuple[int, int], float]:
    """Location and value of the largest cell; ties go to the first in row-major order."""
    v = np.asarray(getattr(amap, "values", amap))
    flat = int(np.argmax(v))
    i, j = divmod(flat, v.shape[1])
    return (i, j), float(v[i, j])
