"""Flat-file output: CSV tables and JSON documents.

Floats are written with ``repr``, the shortest decimal string that parses
back to the same double (at most 17 significant digits), so every emitted
value round-trips bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .model import ObservationSet

FIELD_COLUMNS = ("s", "truth", "prior_mean", "map_mean", "lower95", "upper95")
POINT_COLUMNS = ("sensor", "s", "xbar", "L", "observation")


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def _writable_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise InvalidInputError(f"output directory {out} is not writable")
    return out


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise InvalidInputError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


def write_json(path, obj) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise InvalidInputError(f"cannot write {path}: {exc}") from exc
    return path


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc


def field_rows(s, truth, prior_mean, posterior):
    return zip(s, truth, prior_mean, posterior.mean, posterior.lower95, posterior.upper95)


def point_rows(obs: ObservationSet, xbar):
    """Long format: one row per raw observation."""
    for i, sensor in enumerate(obs.sensors):
        for x in sensor.observations:
            yield (sensor.id, sensor.location[0], xbar[i], sensor.n_obs, x)


def emit_plotdata(result, path) -> dict[str, Path]:
    """Write ``field.csv`` and ``points.csv`` for a pipeline result.

    ``field.csv`` holds one row per regression point with the truth, the
    fitted prior mean, the MAP mean and its 95% band; ``points.csv`` holds
    the raw observations next to their sensor's sample mean and count.
    """
    out = _writable_dir(path)
    problem = result.problem
    s = problem.grid.coords
    files = {
        "field": write_csv(out / "field.csv", FIELD_COLUMNS,
                           field_rows(s, problem.truth(s), result.prior_mean, result.posterior)),
        "points": write_csv(out / "points.csv", POINT_COLUMNS,
                            point_rows(problem.observations, problem.system.xbar)),
    }
    return files


def coverage_from_csv(path) -> float:
    header, rows = read_csv(path)
    col = {name: k for k, name in enumerate(header)}
    hits = [r[col["lower95"]] <= r[col["truth"]] <= r[col["upper95"]] for r in rows]
    return sum(hits) / len(hits)


def emit_dataset(obs: ObservationSet, path) -> Path:
    out = _writable_dir(path)
    rows = ((s.id, s.location[0], j + 1, x) for s in obs.sensors for j, x in enumerate(s.observations))
    return write_csv(out / "observations.csv", ("sensor", "s", "sample", "observation"), rows)


def emit_fit(result, path) -> dict[str, Path]:
    """Everything ``fit`` produces: config, ML result, metrics, field data
    and, for in-network runs, the per-round message trace."""
    out = _writable_dir(path)
    files = {
        "config": write_json(out / "config.json", result.problem.config.to_dict()),
        "ml": write_json(out / "ml_result.json", result.ml.to_dict()),
        "metrics": write_json(out / "metrics.json", {
            "mode": result.mode,
            "metrics": result.metrics.to_dict(),
            "comparison": result.comparison,
        }),
    }
    files.update(emit_plotdata(result, out))
    if result.trace is not None:
        trace_path = out / "trace.csv"
        try:
            with open(trace_path, "w", newline="", encoding="utf-8") as fh:
                result.trace.to_csv(fh)
        except OSError as exc:
            raise InvalidInputError(f"cannot write {trace_path}: {exc}") from exc
        files["trace"] = trace_path
    return files
