"""Truncation-rank sweeps: approximation error against compressed parameter ratio."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, SelectionError
from .linalg import as_matrix, frobenius, svd

SIG = 9


@dataclass(frozen=True)
class RankPoint:
    r: int
    p: float
    error: float  # absolute Frobenius error
    relative_error: float  # error / ||W||_F


@dataclass(frozen=True)
class RankCurve:
    name: str
    d: int
    k: int
    norm: float
    points: tuple[RankPoint, ...]

    @property
    def ranks(self) -> list[int]:
        return [pt.r for pt in self.points]

    @property
    def errors(self) -> np.ndarray:
        return np.array([pt.error for pt in self.points])

    @property
    def relative_errors(self) -> np.ndarray:
        return np.array([pt.relative_error for pt in self.points])


def default_ranks(d: int, k: int) -> list[int]:
    """Powers of two below ``min(d, k)``, then ``min(d, k)`` itself."""
    n = min(d, k)
    out = [1 << i for i in range(n.bit_length()) if (1 << i) < n]
    return out + [n]


def tail_errors(sigma: np.ndarray) -> np.ndarray:
    """``out[r] = sqrt(sum_{i >= r} sigma_i^2)`` for r = 0..n; non-increasing by construction."""
    tail = np.cumsum((sigma**2)[::-1])[::-1]
    return np.sqrt(np.append(tail, 0.0))


def analyze_matrix(w, r_values=None, name: str = "") -> RankCurve:
    """One SVD, reused for every rank: the error at ``r`` is the root tail sum of squared singular values."""
    w = as_matrix(w)
    d, k = w.shape
    n = min(d, k)
    ranks = default_ranks(d, k) if r_values is None else [int(r) for r in r_values]
    if not ranks:
        raise ArgumentError("r_values must not be empty")
    if any(r < 1 or r > n for r in ranks):
        raise ArgumentError(f"ranks must lie in [1, {n}] for a {d}x{k} matrix")
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise ArgumentError("r_values must be strictly ascending")
    sigma = svd(w).sigma
    tails = tail_errors(sigma)
    norm = frobenius(w)
    points = tuple(
        RankPoint(r, r * (d + k) / (d * k), float(tails[r]), float(tails[r] / norm) if norm > 0 else 0.0)
        for r in ranks
    )
    return RankCurve(name, d, k, norm, points)


def analyze_tensors(tensors: dict[str, np.ndarray], names=None) -> list[RankCurve]:
    """Curves for every 2-D tensor (or the given names), ordered by tensor name."""
    chosen = sorted(names if names is not None else (n for n, v in tensors.items() if np.ndim(v) == 2))
    missing = [n for n in chosen if n not in tensors]
    if missing:
        raise ArgumentError(f"unknown tensor(s): {', '.join(missing)}")
    return [analyze_matrix(tensors[n], name=n) for n in chosen]


@dataclass(frozen=True)
class RankSelection:
    name: str
    rank: int
    criterion: str  # "error_tolerance" or "param_budget"
    threshold: float
    error: float
    relative_error: float
    p: float


def select_rank(
    curve: RankCurve,
    error_tolerance: float | None = None,
    param_budget: float | None = None,
    relative: bool = True,
) -> RankSelection:
    """Smallest sampled rank within ``error_tolerance``, or largest with ``p <= param_budget``.

    Exactly one criterion must be given. The tolerance applies to the
    relative error unless ``relative`` is false.
    """
    if (error_tolerance is None) == (param_budget is None):
        raise ArgumentError("give exactly one of error_tolerance and param_budget")
    if not curve.points:
        raise ArgumentError("cannot select a rank from an empty curve")
    if error_tolerance is not None:
        key = (lambda pt: pt.relative_error) if relative else (lambda pt: pt.error)
        hits = [pt for pt in curve.points if key(pt) <= error_tolerance]
        if not hits:
            raise SelectionError(f"{curve.name or 'matrix'}: no sampled rank reaches error tolerance {error_tolerance:g}")
        pt, crit, thr = hits[0], "error_tolerance", error_tolerance
    else:
        hits = [pt for pt in curve.points if pt.p <= param_budget]
        if not hits:
            raise SelectionError(f"{curve.name or 'matrix'}: no sampled rank fits parameter budget p <= {param_budget:g}")
        pt, crit, thr = hits[-1], "param_budget", param_budget
    return RankSelection(curve.name, pt.r, crit, float(thr), pt.error, pt.relative_error, pt.p)


# -- reports -------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.{SIG}g}"


def _round(x: float) -> float | str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(_fmt(x))


def _stem(name: str, index: int) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "matrix"
    return f"{index:03d}_{safe}"


def curve_csv(curve: RankCurve) -> str:
    """Columns ``r,p,error`` with relative error, 9 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["r", "p", "error"])
    for pt in curve.points:
        writer.writerow([pt.r, _fmt(pt.p), _fmt(pt.relative_error)])
    return buf.getvalue()


def parse_curve_csv(text: str) -> list[tuple[int, float, float]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["r", "p", "error"]:
        raise ArgumentError("not a rank-curve CSV (expected header r,p,error)")
    return [(int(r), float(p), float(e)) for r, p, e in rows[1:]]


def summary(curves, selections) -> dict:
    return {
        "error_metric": "relative_frobenius",
        "curves": [
            {
                "name": c.name,
                "d": c.d,
                "k": c.k,
                "norm": _round(c.norm),
                "file": _stem(c.name, i) + ".csv",
                "points": [[pt.r, _round(pt.p), _round(pt.relative_error), _round(pt.error)] for pt in c.points],
            }
            for i, c in enumerate(curves)
        ],
        "selections": [
            {
                "name": s.name,
                "rank": s.rank,
                "criterion": s.criterion,
                "threshold": _round(s.threshold),
                "p": _round(s.p),
                "error": _round(s.relative_error),
                "abs_error": _round(s.error),
            }
            for s in selections
        ],
    }


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report file {path}: {exc.strerror}") from exc


def emit_report(curves, selections, out_dir, figures: bool = True) -> list[Path]:
    """Write one CSV per curve, ``summary.json`` and optionally PNG figures; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create report directory {out}: {exc.strerror}") from exc
    curves = list(curves)
    written = []
    for i, c in enumerate(curves):
        path = out / (_stem(c.name, i) + ".csv")
        _write(path, curve_csv(c).encode())
        written.append(path)
    path = out / "summary.json"
    _write(path, (json.dumps(summary(curves, list(selections)), indent=2, sort_keys=True) + "\n").encode())
    written.append(path)
    if figures and curves:
        written.extend(plot_curves(curves, out))
    return written


def plot_curves(curves, out_dir) -> list[Path]:
    """Error against rank and against compressed ratio, one line per tensor."""
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    out = Path(out_dir)
    paths = []
    for stem, xlabel, xs in (
        ("rank_error", "rank r", lambda c: c.ranks),
        ("ratio_error", "compressed parameter ratio p", lambda c: [pt.p for pt in c.points]),
    ):
        fig = Figure(figsize=(6.0, 4.0), dpi=100)
        FigureCanvasAgg(fig)
        ax = fig.add_subplot(1, 1, 1)
        for c in curves:
            ax.plot(xs(c), c.relative_errors, marker="o", markersize=3, linewidth=1, label=c.name or "matrix")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("relative approximation error")
        if stem == "rank_error":
            ax.set_xscale("log", base=2)
        ax.grid(True, alpha=0.3)
        if len(curves) <= 12:
            ax.legend(fontsize=6, loc="upper right")
        fig.tight_layout()
        path = out / f"{stem}.png"
        # No software/date metadata so repeated runs are byte-identical.
        fig.savefig(path, format="png", metadata={"Software": None})
        paths.append(path)
    return paths
