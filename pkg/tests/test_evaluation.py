import math
import re

import numpy as np
import pandas as pd
import pytest

import util
from evaluation import (
    DEFAULT_EDGES,
    EmptyInputError,
    ErrorReport,
    EvaluationError,
    LengthMismatchError,
    PairError,
    build_report,
    cumulative_histogram,
    evaluate,
    median,
    plot_cumulative,
    read_errors_csv,
    read_report,
    scene_table,
    summarize,
    write_outputs,
    write_report,
)
from geom import RelativePose, quat_normalize
from synthdata import PairRecord


def random_record(rng, scene="all"):
    pose = RelativePose(quat_normalize(rng.normal(size=4)), rng.normal(size=3) / 3.0)
    pose = RelativePose(pose.dq, pose.dt / np.linalg.norm(pose.dt))
    return PairRecord("a.ppm", "b.ppm", pose, scene=scene)


@pytest.fixture
def records():
    rng = util.make_rng(0, "records")
    return [random_record(rng, scene=f"s{k % 2}") for k in range(10)]


@pytest.fixture
def report():
    errors = [PairError(k, "cnn", float(k), float(2 * k), f"s{k % 2}") for k in range(10)]
    errors += [PairError(k, "sift", float(k) / 2, 90.0, f"s{k % 2}") for k in range(10)]
    return build_report(errors)


class TestHistogram:
    def test_examples(self):
        np.testing.assert_array_equal(cumulative_histogram([0.5, 1.5, 2.5], [0, 1, 2, 3]), [0, 1 / 3, 2 / 3, 1])
        np.testing.assert_array_equal(cumulative_histogram([1.0, 1.0], [0.0, 1.0]), [0.0, 1.0])

    def test_default_edges(self):
        h = cumulative_histogram([0.0, 179.5, 45.0, 90.0])
        assert len(h) == 181 == len(DEFAULT_EDGES)
        assert h[0] == 0.25
        assert h[-1] == 1.0
        assert np.all(np.diff(h) >= 0)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            cumulative_histogram([])

    def test_bad_edges(self):
        with pytest.raises(EvaluationError):
            cumulative_histogram([1.0], [0, 2, 1])


class TestMedian:
    @pytest.mark.parametrize("values, expected", [([3, 1, 2], 2.0), ([4, 1, 3, 2], 2.5), ([7], 7.0)])
    def test_examples(self, values, expected):
        assert median(values) == expected

    def test_empty_is_nan(self):
        assert math.isnan(median([]))


class TestEvaluate:
    def test_identity_predictor(self, records):
        errors = evaluate([r.pose for r in records], records, "oracle")
        assert [e.pair_id for e in errors] == list(range(10))
        assert all(e.method == "oracle" for e in errors)
        assert max(e.roe_deg for e in errors) < 1e-6
        assert max(e.rte_deg for e in errors) < 1e-6
        assert errors[3].scene == "s1"

    def test_flipped_translation(self, records):
        flipped = [RelativePose(r.pose.dq, -r.pose.dt) for r in records]
        assert all(e.rte_deg == pytest.approx(180.0) for e in evaluate(flipped, records))

    def test_length_mismatch(self, records):
        with pytest.raises(LengthMismatchError):
            evaluate([r.pose for r in records[:-1]], records)


class TestReport:
    def test_medians_and_series(self, report):
        assert report.methods == ["cnn", "sift"]
        assert report.medians["cnn"] == {"roe": 4.5, "rte": 9.0}
        assert report.medians["sift"]["roe"] == 2.25
        series = report.cumulative["cnn"]["roe"]
        assert series[0] == 0.1
        assert series[9] == 1.0
        assert report.cumulative["sift"]["rte"][89] == 0.0
        assert report.cumulative["sift"]["rte"][90] == 1.0

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            build_report([])

    def test_summary(self, report):
        table = summarize(report)
        assert list(table.columns) == ["method", "pairs", "median_roe_deg", "median_rte_deg"]
        assert table.to_dict("records") == [
            {"method": "cnn", "pairs": 10, "median_roe_deg": 4.5, "median_rte_deg": 9.0},
            {"method": "sift", "pairs": 10, "median_roe_deg": 2.25, "median_rte_deg": 90.0},
        ]

    def test_scene_table(self, report):
        table = scene_table(report)
        cnn = table[table.method == "cnn"].set_index("scene")
        # s0 holds the even pair ids, s1 the odd ones
        assert cnn.loc["s0", "median_roe_deg"] == 4.0
        assert cnn.loc["s1", "median_roe_deg"] == 5.0
        assert cnn.loc["mean", "median_roe_deg"] == 4.5
        assert list(table.scene) == ["s0", "s1", "mean", "s0", "s1", "mean"]

    def test_json_round_trip(self, tmp_path, report):
        path = tmp_path / "r.json"
        write_report(path, report)
        loaded = read_report(path)
        assert loaded.errors == report.errors
        assert loaded.medians == report.medians
        assert loaded.cumulative == report.cumulative

    def test_malformed(self, tmp_path):
        path = tmp_path / "r.json"
        util.write_json(path, {"errors": [{"pair_id": 0}]})
        with pytest.raises(EvaluationError, match="malformed"):
            read_report(path)


class TestOutputs:
    def test_files(self, tmp_path, report):
        write_outputs(report, str(tmp_path))
        for name in ("report.json", "report.csv", "report_roe.svg", "report_rte.svg", "summary.csv", "scenes.csv"):
            assert (tmp_path / name).is_file()
        errors = read_errors_csv(tmp_path / "report.csv")
        assert [(e.pair_id, e.method, e.roe_deg) for e in errors] == [
            (e.pair_id, e.method, e.roe_deg) for e in report.errors
        ]
        summary = pd.read_csv(tmp_path / "summary.csv")
        assert list(summary.method) == ["cnn", "sift"]

    def test_svg(self, tmp_path, report):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        plot_cumulative(report, a, "roe")
        plot_cumulative(report, b, "roe")
        text = a.read_text()
        assert text == b.read_text()
        assert text.startswith("<svg")
        polylines = re.findall(r'<polyline data-method="(\w+)"[^>]* points="([^"]+)"', text)
        assert [m for m, _ in polylines] == ["cnn", "sift"]
        for _, points in polylines:
            xy = np.array([[float(v) for v in p.split(",")] for p in points.split()])
            assert len(xy) == 181
            assert np.all(np.diff(xy[:, 0]) > 0)
            # svg y grows downwards, so a cumulative curve never goes down
            assert np.all(np.diff(xy[:, 1]) <= 0)

    def test_unknown_metric(self, tmp_path, report):
        with pytest.raises(EvaluationError):
            plot_cumulative(report, tmp_path / "x.svg", "speed")

    def test_methods_of_empty_report(self):
        assert ErrorReport([]).methods == []
