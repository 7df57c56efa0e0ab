"""
Relative orientation/translation errors of any predictor (regressor or
baseline), normalized cumulative histograms, median tables and reports.

Predictions are aligned with manifest records by position: prediction k is
scored against record k.

Report files:

    <stem>.json   full report (per-pair errors, bin edges, cumulative series, medians)
    <stem>.csv    pair_id,method,roe_deg,rte_deg
    <stem>_roe.svg, <stem>_rte.svg   cumulative curves, one polyline per method
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

import util
from geom import roe, rte
from util import RelPoseError

logger = logging.getLogger(__name__)

DEFAULT_EDGES = tuple(float(e) for e in range(0, 181))
ERRORS_HEADER = ["pair_id", "method", "roe_deg", "rte_deg"]
SUMMARY_HEADER = ["method", "pairs", "median_roe_deg", "median_rte_deg"]
METRICS = ("roe", "rte")
MEAN_ROW = "mean"

SVG_WIDTH = 640
SVG_HEIGHT = 400
SVG_MARGIN = 50
_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class EvaluationError(RelPoseError):
    module = "evaluation"


class LengthMismatchError(EvaluationError):
    pass


class EmptyInputError(EvaluationError):
    pass


class IoFailureError(EvaluationError):
    pass


class PairError(NamedTuple):
    pair_id: int
    method: str
    roe_deg: float
    rte_deg: float
    scene: str = "all"


@dataclass
class ErrorReport:
    """
    :param errors: per-pair errors of every method, sorted by (method, pair_id)
    :param bin_edges: histogram edges in degrees
    :param cumulative: method -> {"roe": series, "rte": series}
    :param medians: method -> {"roe": median, "rte": median}
    """

    errors: list
    bin_edges: list = field(default_factory=lambda: list(DEFAULT_EDGES))
    cumulative: dict = field(default_factory=dict)
    medians: dict = field(default_factory=dict)

    @property
    def methods(self):
        return sorted({e.method for e in self.errors})

    def method_errors(self, method, metric):
        return [getattr(e, f"{metric}_deg") for e in self.errors if e.method == method]


def evaluate(predictions, records, method="cnn"):
    """
    Per-pair errors of predictions against the ground truth of manifest records.

    :param predictions: list of RelativePose
    :param records: list of PairRecord (same order as predictions)
    :param method: method tag stored with every error
    :return: list of PairError, ordered by pair id
    :raises LengthMismatchError: when the two lists differ in length
    """
    if len(predictions) != len(records):
        raise LengthMismatchError(f"{len(predictions)} predictions for {len(records)} records")
    errors = [
        PairError(k, method, roe(p.dq, r.pose.dq), rte(p.dt, r.pose.dt), getattr(r, "scene", "all"))
        for k, (p, r) in enumerate(zip(predictions, records))
    ]
    logger.debug(f"Evaluated {len(errors)} pairs for method {method}")
    return errors


def cumulative_histogram(errors, bin_edges=DEFAULT_EDGES):
    """
    Normalized cumulative histogram: the value at edge e is the fraction of errors <= e.

    :raises EmptyInputError: when there are no errors
    """
    values = np.sort(np.asarray(errors, dtype=np.float64))
    if values.size == 0:
        raise EmptyInputError("cannot build a histogram of zero errors")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 1 or np.any(np.diff(edges) <= 0):
        raise EvaluationError("bin edges must be strictly increasing")
    return np.searchsorted(values, edges, side="right") / values.size


def median(values):
    """Median with the even-count convention: mean of the two central values."""
    if len(values) == 0:
        return float("nan")
    return float(pd.Series(values, dtype=np.float64).median())


def build_report(errors, bin_edges=DEFAULT_EDGES):
    """Collects per-pair errors of one or more methods into an ErrorReport."""
    if not errors:
        raise EmptyInputError("no errors to report")
    report = ErrorReport(sorted(errors, key=lambda e: (e.method, e.pair_id)), [float(e) for e in bin_edges])
    for method in report.methods:
        report.cumulative[method] = {
            m: cumulative_histogram(report.method_errors(method, m), bin_edges).tolist() for m in METRICS
        }
        report.medians[method] = {m: median(report.method_errors(method, m)) for m in METRICS}
    return report


def _errors_frame(errors):
    return pd.DataFrame([e._asdict() for e in errors], columns=list(PairError._fields))


def summarize(reports):
    """
    Median ROE/RTE per method.

    :param reports: ErrorReport or list of ErrorReport
    :return: pandas DataFrame with SUMMARY_HEADER columns, one row per method
    """
    if isinstance(reports, ErrorReport):
        reports = [reports]
    df = _errors_frame([e for r in reports for e in r.errors])
    if df.empty:
        raise EmptyInputError("no errors to summarize")
    table = df.groupby("method").agg(
        pairs=("pair_id", "size"), median_roe_deg=("roe_deg", "median"), median_rte_deg=("rte_deg", "median")
    )
    return table.reset_index()[SUMMARY_HEADER]


def scene_table(report):
    """
    Median ROE/RTE per (method, scene), followed for every method by a row holding
    the mean of its per-scene medians.
    """
    df = _errors_frame(report.errors)
    if df.empty:
        raise EmptyInputError("no errors to tabulate")
    per_scene = (
        df.groupby(["method", "scene"])
        .agg(median_roe_deg=("roe_deg", "median"), median_rte_deg=("rte_deg", "median"))
        .reset_index()
    )
    rows = []
    for method, group in per_scene.groupby("method", sort=True):
        rows.append(group)
        rows.append(
            pd.DataFrame(
                [
                    {
                        "method": method,
                        "scene": MEAN_ROW,
                        "median_roe_deg": group["median_roe_deg"].mean(),
                        "median_rte_deg": group["median_rte_deg"].mean(),
                    }
                ]
            )
        )
    return pd.concat(rows, ignore_index=True)


def write_table(path, df):
    try:
        df.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def write_errors_csv(path, errors):
    rows = [{"pair_id": e.pair_id, "method": e.method, "roe_deg": repr(e.roe_deg), "rte_deg": repr(e.rte_deg)} for e in errors]
    try:
        util.write_csv(path, ERRORS_HEADER, rows)
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def write_report(path, report):
    """JSON with every float at full precision (round-trips losslessly)."""
    data = {
        "bin_edges": report.bin_edges,
        "cumulative": report.cumulative,
        "errors": [e._asdict() for e in report.errors],
        "medians": report.medians,
    }
    try:
        util.write_json(path, data)
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def read_report(path):
    try:
        data = util.read_json(path)
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    try:
        errors = [
            PairError(int(e["pair_id"]), str(e["method"]), float(e["roe_deg"]), float(e["rte_deg"]), str(e.get("scene", "all")))
            for e in data["errors"]
        ]
        return ErrorReport(errors, list(data["bin_edges"]), dict(data["cumulative"]), dict(data["medians"]))
    except (KeyError, TypeError, ValueError) as e:
        raise EvaluationError(f"malformed report {path}: {e}") from e


def read_errors_csv(path):
    """Per-pair errors from the CSV written by write_errors_csv()."""
    df = pd.read_csv(path)
    return [
        PairError(int(r.pair_id), str(r.method), float(r.roe_deg), float(r.rte_deg)) for r in df.itertuples(index=False)
    ]


def _svg_xy(edge, value, max_edge):
    pw = SVG_WIDTH - 2 * SVG_MARGIN
    ph = SVG_HEIGHT - 2 * SVG_MARGIN
    x = SVG_MARGIN + pw * min(edge, max_edge) / max_edge
    y = SVG_MARGIN + ph * (1.0 - value)
    return f"{x:.3f},{y:.3f}"


def plot_cumulative(report, path, metric="roe", max_edge=180.0):
    """
    Writes the cumulative curves of one metric as a standalone SVG: x axis
    0..180 degrees, y axis 0..1, one polyline per method.
    """
    if metric not in METRICS:
        raise EvaluationError(f"unknown metric {metric}, expected one of {METRICS}")
    left, top = SVG_MARGIN, SVG_MARGIN
    right, bottom = SVG_WIDTH - SVG_MARGIN, SVG_HEIGHT - SVG_MARGIN
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<line class="axis" x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{bottom}" x2="{left}" y2="{top}" stroke="black"/>',
    ]
    for tick in range(0, int(max_edge) + 1, 30):
        x = left + (right - left) * tick / max_edge
        lines.append(f'<text x="{x:.3f}" y="{bottom + 18}" font-size="11" text-anchor="middle">{tick}</text>')
    for k in range(0, 5):
        y = bottom - (bottom - top) * k / 4
        lines.append(f'<text x="{left - 8}" y="{y:.3f}" font-size="11" text-anchor="end">{k / 4:.2f}</text>')
    label = "relative orientation error (deg)" if metric == "roe" else "relative translation error (deg)"
    lines.append(f'<text x="{(left + right) / 2:.3f}" y="{SVG_HEIGHT - 10}" font-size="12" text-anchor="middle">{label}</text>')

    for k, method in enumerate(report.methods):
        series = report.cumulative[method][metric]
        points = " ".join(
            _svg_xy(e, v, max_edge) for e, v in zip(report.bin_edges, series) if e <= max_edge
        )
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        lines.append(
            f'<polyline data-method="{method}" fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        lines.append(
            f'<text x="{right - 4}" y="{top + 14 * (k + 1)}" font-size="11" text-anchor="end" fill="{color}">{method}</text>'
        )
    lines.append("</svg>")
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def write_outputs(report, out_dir, stem="report"):
    """Writes the JSON report, the per-pair CSV, both SVG plots and the summary tables."""
    write_report(os.path.join(out_dir, f"{stem}.json"), report)
    write_errors_csv(os.path.join(out_dir, f"{stem}.csv"), report.errors)
    for metric in METRICS:
        plot_cumulative(report, os.path.join(out_dir, f"{stem}_{metric}.svg"), metric)
    write_table(os.path.join(out_dir, "summary.csv"), summarize(report))
    write_table(os.path.join(out_dir, "scenes.csv"), scene_table(report))
    for method in report.methods:
        med = report.medians[method]
        if math.isfinite(med["roe"]):
            logger.info(f"{method}: median ROE {med['roe']:.2f} deg, median RTE {med['rte']:.2f} deg")
