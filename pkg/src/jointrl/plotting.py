"""Line charts of metrics streams, written as byte-reproducible SVG."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .training import read_metrics


class UnknownKeyError(KeyError):
    def __init__(self, key, available):
        self.key, self.available = key, sorted(available)
        super().__init__(f"unknown metric {key!r}; available: {', '.join(self.available) or '(none)'}")

    def __str__(self):
        return self.args[0]


def _flatten(rec: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in rec.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[name] = float(v)
    return out


def series(records, key: str) -> tuple[list[int], list[float]]:
    """``(steps, values)`` for a dotted key over step-bearing records; nulls are skipped."""
    xs, ys = [], []
    for rec in records:
        if "step" not in rec or rec.get("kind") == "header":
            continue
        flat = _flatten(rec)
        if key in flat and key != "step":
            xs.append(int(rec["step"]))
            ys.append(flat[key])
    return xs, ys


def available_keys(records) -> set[str]:
    keys = set()
    for rec in records:
        if rec.get("kind") != "header":
            keys |= set(_flatten(rec))
    keys.discard("step")
    return keys


def plot_metrics(records, keys, title: str | None = None) -> bytes:
    """One line chart per key, stacked vertically; raises ``UnknownKeyError`` for absent keys.

    An empty stream yields empty axes rather than an error.
    """
    keys = list(keys)
    if records:
        avail = available_keys(records)
        for k in keys:
            if k not in avail:
                raise UnknownKeyError(k, avail)
    with matplotlib.rc_context({"svg.hashsalt": "jointrl", "svg.fonttype": "none", "path.simplify": False}):
        fig = Figure(figsize=(6.0, 2.4 * max(len(keys), 1)))
        axes = fig.subplots(max(len(keys), 1), 1, squeeze=False)[:, 0]
        for ax, key in zip(axes, keys or [None]):
            if key is not None:
                xs, ys = series(records, key)
                ax.plot(xs, ys, marker="o" if len(xs) < 30 else None, linewidth=1.2)
                ax.set_ylabel(key)
            ax.set_xlabel("step")
            ax.grid(alpha=0.3)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def plot_file(metrics_path, keys, out_path) -> Path:
    records = read_metrics(metrics_path)
    data = plot_metrics(records, keys)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    return out
