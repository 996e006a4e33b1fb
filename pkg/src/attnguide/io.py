"""File formats: attention map files, experiment configs, trajectory CSVs and PGM heatmaps.

Map file layout (plain text, one record per line)::

    AMAP 1 H W T
    <T token ids separated by spaces>
    <T blocks of H lines, each holding W decimal values>

Values are written with 17 significant digits, so write -> parse -> write
reproduces the same bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import jsonschema
import numpy as np

from .core import TokenSpec, AttentionStack
from .errors import ConfigError, MapFileError
from .losses import LossWeights, Metrics
from .regions import RegionConfig
from .sim import Blob, Experiment, SimConfig, Trajectory

MAGIC = "AMAP"
VERSION = "1"


# -- map files ---------------------------------------------------------------

def format_value(x: float) -> str:
    return "%.17g" % x


def write_map_file(stack: AttentionStack) -> bytes:
    """Serialize a stack in the canonical map-file format."""
    t, h, w = stack.shape
    for tok in stack.tokens:
        if not tok or any(c.isspace() for c in tok):
            raise MapFileError(f"token id {tok!r} cannot be written (empty or contains whitespace)")
    lines = [f"{MAGIC} {VERSION} {h} {w} {t}", " ".join(stack.tokens)]
    for block in stack.values:
        lines.extend(" ".join(format_value(v) for v in row) for row in block)
    return ("\n".join(lines) + "\n").encode("ascii")


def _parse_int(text, what, lineno):
    try:
        value = int(text)
    except ValueError:
        raise MapFileError(f"{what} must be an integer, got {text!r}", lineno) from None
    if value < 1:
        raise MapFileError(f"{what} must be positive, got {value}", lineno)
    return value


def parse_map_file(data: bytes | str, timestep: int = 0) -> AttentionStack:
    """Parse a map file into an :class:`AttentionStack`.

    Blank lines are skipped. Every error is a :class:`MapFileError` carrying the
    offending line number. The stack is flagged normalized when every position
    sums to 1 within 1e-6.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MapFileError(f"file is not valid UTF-8 text ({exc.reason})", 1) from None
    lines = [(n, ln.strip()) for n, ln in enumerate(data.splitlines(), start=1) if ln.strip()]
    if not lines:
        raise MapFileError("empty file: missing 'AMAP' header", 1)

    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 5 or parts[0] != MAGIC:
        raise MapFileError(f"malformed header {header!r}; expected 'AMAP 1 H W T'", lineno)
    if parts[1] != VERSION:
        raise MapFileError(f"unsupported format version {parts[1]!r}", lineno)
    h = _parse_int(parts[2], "H", lineno)
    w = _parse_int(parts[3], "W", lineno)
    t = _parse_int(parts[4], "T", lineno)

    if len(lines) < 2:
        raise MapFileError("unexpected end of file: missing token id line", lineno + 1)
    lineno, id_line = lines[1]
    tokens = id_line.split()
    if len(tokens) != t:
        raise MapFileError(f"header declares T={t} tokens but {len(tokens)} ids are listed", lineno)
    if len(set(tokens)) != t:
        raise MapFileError("duplicate token ids", lineno)

    body = lines[2:]
    values = np.empty((t, h, w))
    for k in range(t):
        for i in range(h):
            pos = k * h + i
            if pos >= len(body):
                last = body[-1][0] if body else lineno
                raise MapFileError(
                    f"unexpected end of file: missing block {k + 1} of {t} "
                    f"(token {tokens[k]!r}), row {i + 1} of {h}", last + 1)
            n, text = body[pos]
            fields = text.split()
            if len(fields) != w:
                raise MapFileError(f"expected {w} values, found {len(fields)}", n)
            for j, f in enumerate(fields):
                try:
                    v = float(f)
                except ValueError:
                    raise MapFileError(f"column {j + 1}: not a number: {f!r}", n) from None
                if not math.isfinite(v):
                    raise MapFileError(f"column {j + 1}: non-finite value {f!r}", n)
                if v < 0:
                    raise MapFileError(f"column {j + 1}: negative value {f!r}", n)
                values[k, i, j] = v
    if len(body) > t * h:
        raise MapFileError(f"trailing data after {t} blocks of {h} rows", body[t * h][0])
    normalized = bool(np.allclose(values.sum(axis=0), 1.0, rtol=0, atol=1e-6))
    return AttentionStack(values, tuple(tokens), timestep, normalized)


def read_map_file(path) -> AttentionStack:
    return parse_map_file(Path(path).read_bytes())


# -- experiment configs ------------------------------------------------------

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_METRIC = {"type": "string", "enum": ["euc", "cos", "euclidean", "cosine"]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["tokens"],
    "properties": {
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "total_steps": {"type": "integer", "minimum": 1},
        "optimize_steps": {"type": "integer", "minimum": 0},
        "alpha": {"anyOf": [_POS, {"type": "array", "items": _POS, "minItems": 1}]},
        "max_halvings": {"type": "integer", "minimum": 0},
        "noise": _NONNEG,
        "init_noise": _NONNEG,
        "readout_sigma": _NONNEG,
        "adjacency": {"enum": ["rook", "queen"]},
        "overlap_q": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "heatmap_every": {"type": "integer", "minimum": 1},
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _NONNEG for k in ("agg_sub", "iso", "max", "agg_attr")},
        },
        "metrics": {"anyOf": [
            {"type": "string", "pattern": "^(euc|cos|euclidean|cosine)(\\+(euc|cos|euclidean|cosine))?$"},
            {"type": "object", "additionalProperties": False,
             "properties": {"aggregation": _METRIC, "isolation": _METRIC}},
        ]},
        "tokens": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id"],
                "properties": {
                    "id": {"type": "string", "pattern": "^\\S+$"},
                    "kind": {"enum": ["subject", "attribute", "background"]},
                    "bound_subject": {"type": ["string", "null"]},
                    "category": {"enum": ["object", "animal"]},
                },
            },
        },
        "regions": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "n_regions": {"type": "integer", "minimum": 1},
                    "radius": _POS,
                    "radius_end": {"anyOf": [_POS, {"type": "null"}]},
                },
            },
        },
        "blobs": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["center"],
                    "properties": {
                        "center": {"type": "array", "items": {"type": "number"},
                                   "minItems": 2, "maxItems": 2},
                        "amplitude": {"type": "number"},
                        "sigma": _POS,
                    },
                },
            },
        },
        "baseline": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """An experiment plus output options, as loaded from a JSON document."""

    experiment: Experiment
    heatmap_every: int = 1


def _schema_error(exc: jsonschema.ValidationError) -> ConfigError:
    where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
    return ConfigError(f"config {where}: {exc.message}")


def config_from_dict(doc: Mapping) -> ExperimentConfig:
    """Validate a config document and build the experiment it describes."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise _schema_error(exc) from None
    try:
        tokens = tuple(TokenSpec(**t) for t in doc["tokens"])
        metrics = doc.get("metrics", "euc")
        metrics = Metrics(**metrics) if isinstance(metrics, Mapping) else Metrics.parse(metrics)
        alpha = doc.get("alpha", 0.5)
        kwargs = {k: doc[k] for k in ("height", "width", "seed", "total_steps", "optimize_steps",
                                      "max_halvings", "noise", "init_noise", "readout_sigma",
                                      "adjacency", "overlap_q") if k in doc}
        cfg = SimConfig(
            tokens,
            alpha=tuple(alpha) if isinstance(alpha, list) else alpha,
            weights=LossWeights(**doc.get("weights", {})),
            region_cfgs={k: RegionConfig(**v) for k, v in doc.get("regions", {}).items()},
            metrics=metrics,
            **kwargs,
        )
        blobs = {tok: [Blob(tuple(b["center"]), **{k: v for k, v in b.items() if k != "center"})
                       for b in bs] for tok, bs in doc.get("blobs", {}).items()}
        exp = Experiment(cfg, blobs, dict(doc.get("baseline", {})))
        exp.initial_latent()  # catches blobs naming unknown tokens
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config: {exc}") from None
    return ExperimentConfig(exp, doc.get("heatmap_every", 1))


def load_config(source) -> ExperimentConfig:
    """Load a config from a path, a JSON string or an already-parsed dict."""
    if isinstance(source, Mapping):
        return config_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip()[:1] in ("{", "[")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(doc)


def config_to_dict(exp: Experiment | ExperimentConfig) -> dict:
    """Inverse of :func:`config_from_dict`; region configs are written in full."""
    heatmap_every = 1
    if isinstance(exp, ExperimentConfig):
        exp, heatmap_every = exp.experiment, exp.heatmap_every
    c = exp.config
    tokens = []
    for t in c.tokens:
        d = {"id": t.id, "kind": t.kind}
        if t.bound_subject is not None:
            d["bound_subject"] = t.bound_subject
        if t.kind == "subject":
            d["category"] = t.category
        tokens.append(d)
    return {
        "height": c.height, "width": c.width, "seed": c.seed,
        "total_steps": c.total_steps, "optimize_steps": c.optimize_steps,
        "alpha": list(c.alpha) if isinstance(c.alpha, tuple) else c.alpha,
        "max_halvings": c.max_halvings, "noise": c.noise, "init_noise": c.init_noise,
        "readout_sigma": c.readout_sigma, "adjacency": c.adjacency, "overlap_q": c.overlap_q,
        "heatmap_every": heatmap_every,
        "weights": dict(zip(("agg_sub", "iso", "max", "agg_attr"), c.weights.as_tuple())),
        "metrics": {"aggregation": c.metrics.aggregation, "isolation": c.metrics.isolation},
        "tokens": tokens,
        "regions": {k: {"n_regions": r.n_regions, "radius": r.radius, "radius_end": r.radius_end}
                    for k, r in sorted(c.region_cfgs.items())},
        "blobs": {tok: [{"center": list(b.center), "amplitude": b.amplitude, "sigma": b.sigma}
                        for b in bs] for tok, bs in exp.blobs.items()},
        "baseline": dict(exp.baseline),
    }


def dump_config(exp, indent: int = 2) -> str:
    return json.dumps(config_to_dict(exp), indent=indent, sort_keys=False) + "\n"


def with_overrides(exp: Experiment, metrics: Metrics | None = None, seed: int | None = None) -> Experiment:
    cfg = exp.config
    if metrics is not None:
        cfg = replace(cfg, metrics=metrics)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return replace(exp, config=cfg)


# -- trajectory CSV ----------------------------------------------------------

def format_number(x: float) -> str:
    """Shortest text that parses back to the same float."""
    return repr(float(x))


def trajectory_columns(traj: Trajectory) -> list[str]:
    subjects = [t.id for t in traj.config.tokens if t.kind == "subject"]
    return (["step", "total", "agg_sub", "iso", "max", "agg_attr", "grad_norm"]
            + [f"morans_i_{s}" for s in subjects] + ["d_over_dmax", "overlap_ratio"])


def trajectory_rows(traj: Trajectory) -> list[list]:
    """One row per step, then the state after the last step (``step == total_steps``)."""
    subjects = [t.id for t in traj.config.tokens if t.kind == "subject"]
    rows = []
    for r in traj.all_records:
        L = r.losses
        rows.append([r.step, L.total, L.agg_sub, L.iso, L.max, L.agg_attr, r.grad_norm]
                    + [r.morans[s] for s in subjects] + [r.d_over_dmax, r.overlap])
    return rows


def trajectory_csv(traj: Trajectory) -> str:
    c = traj.config
    buf = io.StringIO()
    buf.write("# attnguide trajectory\n")
    buf.write(f"# metric: {c.metrics.label} (aggregation={c.metrics.aggregation}, "
              f"isolation={c.metrics.isolation})\n")
    buf.write(f"# seed: {c.seed}\n")
    buf.write(f"# steps: {c.total_steps} optimized: {c.optimize_steps}\n")
    buf.write(f"# tokens: {' '.join(f'{t.id}:{t.kind}' for t in c.tokens)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trajectory_columns(traj))
    for row in trajectory_rows(traj):
        writer.writerow([str(row[0])] + [format_number(x) for x in row[1:]])
    return buf.getvalue()


def read_trajectory_csv(text: str) -> tuple[dict, list[str], list[list[float]]]:
    """Parse :func:`trajectory_csv` output into (metadata, columns, rows)."""
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition(":")
            if sep:
                meta[key.strip()] = value.strip()
        elif line:
            body.append(line)
    reader = csv.reader(body)
    columns = next(reader)
    rows = [[float(x) for x in row] for row in reader]
    return meta, columns, rows


# -- PGM heatmaps ------------------------------------------------------------

def pgm_bytes(values) -> bytes:
    """Binary (P5) 8-bit grayscale image, min-max scaled; a constant map is all black."""
    v = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("heatmap needs a 2-D array")
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        pixels = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(v.shape, dtype=np.uint8)
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Decode the P5 files written by :func:`pgm_bytes`."""
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ValueError("not a P5 image")
    w, h = (int(x) for x in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only 8-bit images are supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_outputs(traj: Trajectory, out_dir, heatmap_every: int = 1,
                  config_text: str | None = None) -> list[Path]:
    """Write ``trajectory.csv`` and ``heatmaps/step_XXX_<token>.pgm`` under ``out_dir``.

    Heatmaps cover every ``heatmap_every``-th step plus the final state, for
    all tokens except background ones.
    """
    out = Path(out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "trajectory.csv"
    p.write_text(trajectory_csv(traj))
    written.append(p)
    if config_text is not None:
        p = out / "config.json"
        p.write_text(config_text)
        written.append(p)
    ids = traj.config.token_ids
    shown = [i for i, t in enumerate(traj.config.tokens) if t.kind != "background"]
    for rec in traj.all_records:
        if rec.step % heatmap_every and rec.step != traj.config.total_steps:
            continue
        for i in shown:
            p = out / "heatmaps" / f"step_{rec.step:03d}_{ids[i]}.pgm"
            p.write_bytes(pgm_bytes(rec.attention[i]))
            written.append(p)
    return written


__all__ = [
    "CONFIG_SCHEMA", "ExperimentConfig", "config_from_dict", "config_to_dict", "dump_config",
    "format_value", "load_config", "parse_map_file", "pgm_bytes", "read_map_file", "read_pgm",
    "read_trajectory_csv", "trajectory_columns", "trajectory_csv", "trajectory_rows",
    "with_overrides", "write_map_file", "write_outputs",
]
