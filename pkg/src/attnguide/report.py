"""Structured analysis of one attention stack, rendered as text, JSON or CSV."""
from __future__ import annotations

import csv
import io
import json
import math
from itertools import combinations
from typing import Sequence

from .core import AttentionStack, TokenSpec, map_centroid, subjects_of
from .errors import UndefinedMetricError
from .losses import LossWeights, Metrics, region_config_for, total_loss
from .metrics import ROOK, centroid_spread, morans_i
from .regions import identify_regions
from .io import format_number

REGION_COLUMNS = ["token", "region", "center_row", "center_col", "centroid_row", "centroid_col",
                  "count", "mass"]


def default_tokens(stack: AttentionStack) -> tuple[TokenSpec, ...]:
    """Treat every map as an object subject when no token roles are given."""
    return tuple(TokenSpec(t) for t in stack.tokens)


def region_table(stack: AttentionStack, tokens: Sequence[TokenSpec], region_cfgs=None,
                 step: int = 0, total_opt_steps: int = 25) -> list[dict]:
    rows = []
    for tok in tokens:
        if tok.kind == "background":
            continue
        cfg = region_config_for(tok, region_cfgs).at(step, total_opt_steps)
        for k, r in enumerate(identify_regions(stack[tok.id], cfg)):
            rows.append({"token": tok.id, "region": k,
                         "center_row": int(r.mask.center[0]), "center_col": int(r.mask.center[1]),
                         "centroid_row": r.centroid.h, "centroid_col": r.centroid.w,
                         "count": r.count, "mass": r.mass})
    return rows


def analyze(stack: AttentionStack, tokens: Sequence[TokenSpec] | None = None,
            weights: LossWeights = LossWeights(), region_cfgs=None, metrics: Metrics = Metrics(),
            adjacency: str = ROOK, step: int = 0, total_opt_steps: int = 25) -> dict:
    """Losses, per-subject Moran's I, pairwise isolation and region table of one stack."""
    tokens = tuple(tokens) if tokens else default_tokens(stack)
    L = total_loss(stack, tokens, weights, region_cfgs, metrics, step, total_opt_steps)
    subs = subjects_of(tokens)
    moran = {}
    for s in subs:
        try:
            moran[s.id] = morans_i(stack[s.id], adjacency)
        except UndefinedMetricError:
            moran[s.id] = math.nan
    d_max = math.hypot(stack.height, stack.width)
    pairs = []
    for m, n in combinations(subs, 2):
        a, b = map_centroid(stack[m.id]), map_centroid(stack[n.id])
        d = math.hypot(a.h - b.h, a.w - b.w)
        pairs.append({"m": m.id, "n": n.id, "iso": L.per_pair[(m.id, n.id)],
                      "distance": d, "d_over_dmax": d / d_max})
    regions = region_table(stack, tokens, region_cfgs, step, total_opt_steps)
    spread = {}
    for tok in tokens:
        if tok.kind == "background":
            continue
        cfg = region_config_for(tok, region_cfgs).at(step, total_opt_steps)
        regs = identify_regions(stack[tok.id], cfg)
        spread[tok.id] = centroid_spread(regs) if regs else 0.0
    return {
        "tokens": [{"id": t.id, "kind": t.kind} for t in tokens],
        "metrics": metrics.label,
        "losses": {"agg_sub": L.agg_sub, "iso": L.iso, "max": L.max, "agg_attr": L.agg_attr,
                   "total": L.total},
        "per_token": L.per_token,
        "morans_i": moran,
        "adjacency": adjacency,
        "spread": spread,
        "pairs": pairs,
        "regions": regions,
    }


def _num(x):
    return format_number(x) if isinstance(x, float) else str(x)


def to_text(report: dict) -> str:
    """``section.key = value`` lines; numbers use the shortest round-trip form."""
    out = [f"# metric {report['metrics']}, adjacency {report['adjacency']}"]
    out += [f"losses.{k} = {_num(v)}" for k, v in report["losses"].items()]
    for tok, terms in report["per_token"].items():
        out += [f"per_token.{tok}.{k} = {_num(v)}" for k, v in terms.items()]
    out += [f"morans_i.{tok} = {_num(v)}" for tok, v in report["morans_i"].items()]
    out += [f"spread.{tok} = {_num(v)}" for tok, v in report["spread"].items()]
    for p in report["pairs"]:
        out += [f"pair.{p['m']}:{p['n']}.{k} = {_num(p[k])}" for k in ("iso", "distance", "d_over_dmax")]
    out.append("")
    out.append("# regions")
    out.append(" ".join(REGION_COLUMNS))
    out += [" ".join(_num(r[c]) for c in REGION_COLUMNS) for r in report["regions"]]
    return "\n".join(out) + "\n"


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def to_json(report: dict) -> str:
    """JSON with the same numbers as :func:`to_text`; NaN becomes null."""
    return json.dumps(_json_safe(report), indent=2) + "\n"


def regions_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REGION_COLUMNS)
    for r in rows:
        w.writerow([_num(r[c]) for c in REGION_COLUMNS])
    return buf.getvalue()
