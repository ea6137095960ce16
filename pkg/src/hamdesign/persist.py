"""On-disk formats: trace CSV, grid CSV and JSON reports.

Floats are written with ``repr`` so every value round-trips exactly.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

REPORT_SCHEMA_VERSION = 1
TRACE_FIXED = ("step", "stage", "event", "loss")
TRACE_TAIL = ("gradnorm", "steplen", "beta", "reset", "seconds", "evals")


class SchemaVersionError(ValueError):
    """A persisted document was written by an incompatible schema version."""


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def trace_columns(term_columns, n_params: int, timing: bool = True) -> list[str]:
    tail = [c for c in TRACE_TAIL if timing or c != "seconds"]
    return list(TRACE_FIXED) + list(term_columns) + tail + [f"gamma_{i}" for i in range(n_params)]


def trace_rows(records, term_columns, stage: str = "main", timing: bool = True):
    for r in records:
        row = {"step": r.step, "stage": stage, "event": r.event, "loss": r.loss}
        for c in term_columns:
            row[c] = r.terms.get(c, math.nan)
        row.update(gradnorm=r.grad_norm, steplen=r.step_length, beta=r.beta, reset=r.reset, evals=r.evals)
        if timing:
            row["seconds"] = r.seconds
        for i, g in enumerate(r.gamma):
            row[f"gamma_{i}"] = g
        yield row


class TraceWriter:
    """Append-only CSV writer: one header, then one row per optimizer step."""

    def __init__(self, path, term_columns, n_params: int, timing: bool = True):
        self.path = Path(path)
        self.term_columns = list(term_columns)
        self.columns = trace_columns(term_columns, n_params, timing)
        self.timing = timing
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def append(self, records, stage: str = "main"):
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in trace_rows(records, self.term_columns, stage, self.timing):
                w.writerow([_fmt(row[c]) for c in self.columns])


def write_trace(path, records, term_columns, n_params: int, stage: str = "main", timing: bool = True):
    TraceWriter(path, term_columns, n_params, timing).append(records, stage)


def read_csv(path) -> list[dict]:
    """Rows as dicts; numeric cells become floats, empty cells None."""
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                else:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out


def trace_gamma(row: dict) -> np.ndarray:
    keys = sorted((k for k in row if k.startswith("gamma_")), key=lambda k: int(k[6:]))
    return np.array([row[k] for k in keys], dtype=float)


def write_grid(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def dump_document(doc: dict, kind: str) -> str:
    body = {"schema_version": REPORT_SCHEMA_VERSION, "kind": kind}
    body.update(doc)
    return json.dumps(_jsonable(body), indent=2, sort_keys=False) + "\n"


def load_document(text: str, kind: str) -> dict:
    doc = json.loads(text)
    version = doc.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise SchemaVersionError(f"{kind} document has schema_version {version!r}; this build reads "
                                 f"version {REPORT_SCHEMA_VERSION}. Re-run the experiment or migrate "
                                 f"the file before loading.")
    if doc.get("kind") != kind:
        raise SchemaVersionError(f"expected a {kind} document, found {doc.get('kind')!r}")
    return doc
