"""On-disk formats: trajectory JSONL, metrics CSV and SVG line charts."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..envs import Trajectory
from ..exceptions import ContractError, ParseError
from ..optim import METRIC_FIELDS
from ..segmentation import Segmentation, validate

TRAJ_KEYS = ("id", "prompt", "tokens", "old_logprobs", "entropies", "reward", "boundaries")
METRICS_HEADER = ",".join(METRIC_FIELDS)


@dataclass(frozen=True)
class TrajectoryRecord:
    id: int
    trajectory: Trajectory
    segmentation: Segmentation


def as_records(batch) -> list[TrajectoryRecord]:
    """Accept a :class:`~sapolab.optim.Batch`, records, or (trajectory, segmentation) pairs."""
    if hasattr(batch, "trajectories"):
        pairs = zip(batch.trajectories, batch.segmentations)
    else:
        items = list(batch)
        if items and isinstance(items[0], TrajectoryRecord):
            return items
        pairs = items
    return [TrajectoryRecord(i, t, s) for i, (t, s) in enumerate(pairs)]


def _encode(rec: TrajectoryRecord) -> str:
    t = rec.trajectory
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps({
        "id": rec.id,
        "prompt": list(t.prompt),
        "tokens": list(t.tokens),
        "old_logprobs": [float(x) for x in t.old_logprobs],
        "entropies": [float(x) for x in t.entropies],
        "reward": t.reward,
        "boundaries": list(rec.segmentation.end_boundaries),
    }, allow_nan=False)


def dump_trajectories(batch, path) -> int:
    records = as_records(batch)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_encode(rec) + "\n")
    return len(records)


def _int_list(obj, key, line):
    v = obj[key]
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise ParseError("expected a list of integers", line, key)
    return v


def _float_list(obj, key, line):
    v = obj[key]
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ParseError("expected a list of numbers", line, key)
    return [float(x) for x in v]


def _decode(text: str, line: int) -> TrajectoryRecord:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line) from None
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", line)
    for key in TRAJ_KEYS:
        if key not in obj:
            raise ParseError("missing key", line, key)
    if not isinstance(obj["id"], int):
        raise ParseError("expected an integer", line, "id")
    if not isinstance(obj["reward"], (int, float)) or isinstance(obj["reward"], bool):
        raise ParseError("expected a number", line, "reward")
    prompt = _int_list(obj, "prompt", line)
    tokens = _int_list(obj, "tokens", line)
    lps = _float_list(obj, "old_logprobs", line)
    ents = _float_list(obj, "entropies", line)
    bounds = _int_list(obj, "boundaries", line)
    try:
        traj = Trajectory(prompt, tokens, lps, ents, obj["reward"])
    except ContractError as exc:
        raise ParseError(str(exc), line, "tokens") from None
    seg = Segmentation(tuple(bounds)) if bounds else None
    problems = validate(seg, traj.T) if seg else ["empty boundary list"]
    if problems:
        raise ParseError("segmentation invariant violated: " + "; ".join(problems), line, "boundaries")
    return TrajectoryRecord(obj["id"], traj, seg)


def load_trajectories(path) -> list[TrajectoryRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if text.strip():
                out.append(_decode(text, lineno))
    return out


# metrics


def _fmt(x) -> str:
    # repr keeps full precision and is stable across runs
    return repr(int(x)) if isinstance(x, (int, np.integer)) else repr(float(x))


def metrics_csv_text(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def write_metrics_csv(rows: Iterable[Sequence], path) -> None:
    Path(path).write_text(metrics_csv_text(rows), encoding="utf-8")


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != METRICS_HEADER:
            raise ParseError("metrics header does not match schema", 1)
        rows = [[float(x) for x in r] for r in reader]
    data = np.array(rows, dtype=float).reshape(len(rows), len(METRIC_FIELDS))
    return {name: data[:, j] for j, name in enumerate(METRIC_FIELDS)}


def write_table_csv(header: Sequence[str], rows: Iterable[Sequence], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, int, np.number)) and not isinstance(v, bool) else v
                        for v in r])


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")


# plots


def line_chart_svg(series: dict[str, tuple], path, title: str = "", xlabel: str = "step", ylabel: str = "") -> None:
    """Write a line chart with one line per ``name -> (x, y)`` entry.

    The SVG carries no timestamp and fixed element ids, so identical inputs
    give identical bytes.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "sapolab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, (x, y) in series.items():
            y = np.asarray(y, dtype=float)
            ax.plot(x, np.where(np.isfinite(y), y, math.nan), label=name)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
