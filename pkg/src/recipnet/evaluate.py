"""RMSE/bias, Gaussian KDE of errors, reciprocity gaps, and report files."""
import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1
KDE_POINTS = 512

# Full-scale values reported on real drive-test and backhaul measurements. Kept
# only as labelled context; the synthetic pipeline cannot reproduce them.
PUBLISHED_REFERENCE = {
    "note": "full-scale published values on non-redistributable measurements; not reproducible here",
    "mean_rmse_db_no_augmentation": {"identity": 7.35, "reflected": 16.20, "backhaul": 7.33},
    "mean_rmse_db_4pct_augmentation": {"identity": 7.32, "reflected": 7.76, "backhaul": 7.16},
    "mean_rmse_db_25pct_augmentation": {"identity": 7.36, "reflected": 7.42, "backhaul": 7.09},
    "reciprocity_gap_db": {"no_augmentation": {"mean": 12.50, "sd": 9.48},
                           "4pct": {"mean": -0.05, "sd": 4.74},
                           "25pct": {"mean": -0.02, "sd": 3.90}},
}


class DegenerateBandwidthError(ValueError):
    pass


def _pair(predictions, measurements):
    p = np.asarray(predictions, dtype=np.float64).ravel()
    m = np.asarray(measurements, dtype=np.float64).ravel()
    if p.shape != m.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {m.size} measurements")
    if p.size == 0:
        raise ValueError("empty input")
    return p, m


def rmse(predictions, measurements) -> float:
    p, m = _pair(predictions, measurements)
    return float(np.sqrt(np.mean((p - m) ** 2)))


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=np.float64)
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise DegenerateBandwidthError("all samples identical; automatic bandwidth is zero")
    return 1.06 * sd * x.size ** (-0.2)


def kde(errors, bandwidth=None, points=KDE_POINTS):
    """Gaussian KDE on a uniform grid over ``[min - 3h, max + 3h]``.

    ``bandwidth=None`` uses Silverman's rule. Returns ``(grid, density, h)``.
    """
    x = np.asarray(errors, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("kde needs at least 2 samples")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DegenerateBandwidthError(f"bandwidth must be positive, got {h}")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, points)
    dens = np.zeros(points)
    # chunked to bound memory on large error vectors
    for s in range(0, x.size, 4096):
        z = (grid[:, None] - x[None, s:s + 4096]) / h
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= x.size * h * math.sqrt(2 * math.pi)
    return grid, dens, h


def trapezoid(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


@dataclass
class EvalReport:
    label: str
    errors: np.ndarray
    rmse: float
    mean_error: float
    sd_error: float
    kde_x: np.ndarray
    kde_density: np.ndarray
    bandwidth: float
    bandwidth_rule: str = "silverman"
    gaps: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"label": self.label, "errors": self.errors.tolist(), "rmse": self.rmse,
             "mean_error": self.mean_error, "sd_error": self.sd_error,
             "kde": {"x_db": self.kde_x.tolist(), "density": self.kde_density.tolist(),
                     "bandwidth": self.bandwidth, "rule": self.bandwidth_rule},
             "meta": self.meta}
        if self.gaps is not None:
            d["reciprocity_gaps"] = self.gaps.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        gaps = d.get("reciprocity_gaps")
        return cls(d["label"], np.asarray(d["errors"], dtype=np.float64), d["rmse"], d["mean_error"],
                   d["sd_error"], np.asarray(d["kde"]["x_db"]), np.asarray(d["kde"]["density"]),
                   d["kde"]["bandwidth"], d["kde"].get("rule", "silverman"),
                   None if gaps is None else np.asarray(gaps, dtype=np.float64), d.get("meta", {}))


def make_report(label, predictions, measurements, bandwidth=None, gaps=None, meta=None) -> EvalReport:
    p, m = _pair(predictions, measurements)
    err = p - m
    x, dens, h = kde(err, bandwidth)
    return EvalReport(label, err, float(np.sqrt(np.mean(err ** 2))), float(np.mean(err)),
                      float(np.std(err)), x, dens, h,
                      "silverman" if bandwidth is None else "fixed",
                      None if gaps is None else np.asarray(gaps, dtype=np.float64), dict(meta or {}))


@dataclass
class GapSummary:
    gaps: np.ndarray
    mean: float
    sd: float


def reciprocity_gap(model, pairs) -> GapSummary:
    """Prediction on each identity profile minus prediction on its reflection.

    ``model`` is :class:`~recipnet.nn.ModelParams` or any callable mapping a
    (N, 4, L, W) array to N predictions. ``pairs`` is a sequence of
    ``(identity, reflected)`` profiles or a tuple of two stacked arrays.
    Measurement labels are never read.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        xa, xb = pairs
    else:
        pairs = list(pairs)
        if any(len(pr) != 2 for pr in pairs):
            raise ValueError("every item must be an (identity, reflected) pair")
        xa = np.stack([_channels(a) for a, _ in pairs])
        xb = np.stack([_channels(b) for _, b in pairs])
    if xa.shape != xb.shape:
        raise ValueError("unpaired input: identity and reflected sets differ in shape")
    predict = model if callable(model) else _model_predictor(model)
    gaps = np.asarray(predict(xa), dtype=np.float64) - np.asarray(predict(xb), dtype=np.float64)
    return GapSummary(gaps, float(np.mean(gaps)), float(np.std(gaps)))


def _channels(p):
    return p.channels if hasattr(p, "channels") else np.asarray(p)


def _model_predictor(params):
    from .nn import forward
    return lambda x: forward(params, x)


# --------------------------------------------------------------------------
# emission


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False)


def summary_table(results, testset):
    """Rows ``[holdout, mean, sd, mean, sd, ...]`` over sorted n, plus a Mean row.

    ``results`` is an iterable of dicts with ``holdout``, ``n``, ``status`` and
    ``rmse[testset]``; SD is the sample SD of per-repeat RMSE.
    """
    cells = {}
    for r in results:
        if r.get("status") != "ok":
            continue
        cells.setdefault((r["holdout"], r["n"]), []).append(r["rmse"][testset])
    holdouts = sorted({h for h, _ in cells})
    ns = sorted({n for _, n in cells})
    header = ["holdout"] + [f"n={n} {s}" for n in ns for s in ("mean", "sd")]
    rows = []
    for h in holdouts:
        row = [h]
        for n in ns:
            v = np.asarray(cells.get((h, n), []), dtype=np.float64)
            row += [float(v.mean()) if v.size else float("nan"),
                    float(v.std(ddof=1)) if v.size > 1 else 0.0]
        rows.append(row)
    if rows:
        cols = np.asarray([r[1:] for r in rows], dtype=np.float64)
        rows.append(["Mean"] + [float(c) for c in cols.mean(axis=0)])
    return header, rows


def _fmt(v):
    return v if isinstance(v, str) else repr(float(v))


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def emit_report(reports, destination, results=None, metadata=None):
    """Write ``report.json``, ``summary_<testset>.csv`` and ``kde_<label>.csv``.

    Output is byte-for-byte deterministic for identical inputs.
    """
    os.makedirs(destination, exist_ok=True)
    written = []
    doc = {"schema_version": SCHEMA_VERSION, "published_reference": PUBLISHED_REFERENCE,
           "metadata": metadata or {}, "reports": [r.to_dict() for r in reports]}
    if results is not None:
        doc["summaries"] = {}
        testsets = sorted({k for r in results if r.get("status") == "ok" for k in r["rmse"]})
        for ts in testsets:
            header, rows = summary_table(results, ts)
            doc["summaries"][ts] = {"header": header, "rows": rows}
            path = os.path.join(destination, f"summary_{ts}.csv")
            write_csv(path, header, rows)
            written.append(path)
    path = os.path.join(destination, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_json(doc))
    written.append(path)
    for r in reports:
        path = os.path.join(destination, f"kde_{r.label}.csv")
        write_csv(path, ["x_db", "density"], zip(r.kde_x, r.kde_density))
        written.append(path)
    return written


def load_reports(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return [EvalReport.from_dict(d) for d in doc["reports"]], doc
