import csv
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ecdf_kde_integral
from recipnet.evaluate import (DegenerateBandwidthError, EvalReport, emit_report, kde, load_reports,
                               make_report, reciprocity_gap, rmse, silverman_bandwidth,
                               summary_table)


def test_rmse_hand_value():
    assert rmse([100, 110, 95], [100, 100, 100]) == pytest.approx(math.sqrt(125 / 3))
    assert rmse([100, 110, 95], [100, 100, 100]) == pytest.approx(6.455, abs=5e-4)


def test_rmse_rejects_mismatch():
    with pytest.raises(ValueError):
        rmse([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


def test_silverman_formula():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    assert silverman_bandwidth(x) == pytest.approx(1.06 * np.std(x, ddof=1) * 4 ** -0.2)


def test_kde_grid_and_density():
    rng = np.random.default_rng(0)
    e = rng.normal(1.0, 5.0, 3000)
    x, d, h = kde(e)
    assert x.size == d.size == 512
    assert x[0] == pytest.approx(e.min() - 3 * h) and x[-1] == pytest.approx(e.max() + 3 * h)
    assert np.all(d >= 0)
    assert abs(ecdf_kde_integral(x, d) - 1.0) <= 1e-3


def test_kde_matches_direct_sum():
    e = np.array([-1.0, 0.5, 2.0, 2.5])
    x, d, h = kde(e, bandwidth=0.7)
    k = 3
    want = np.mean(np.exp(-0.5 * ((x[k] - e) / 0.7) ** 2)) / (0.7 * math.sqrt(2 * math.pi))
    assert d[k] == pytest.approx(want)


def test_kde_degenerate_and_too_small():
    with pytest.raises(DegenerateBandwidthError):
        kde([3.0, 3.0, 3.0])
    with pytest.raises(ValueError):
        kde([1.0])
    with pytest.raises(DegenerateBandwidthError):
        kde([1.0, 2.0], bandwidth=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(200, 3000), st.floats(0.5, 20.0), st.integers(0, 10**6))
def test_kde_integrates_to_one(n, sigma, seed):
    e = np.random.default_rng(seed).normal(0.0, sigma, n)
    x, d, _ = kde(e)
    assert abs(ecdf_kde_integral(x, d) - 1.0) <= 1e-3


def test_gap_symmetric_model_is_zero():
    rng = np.random.default_rng(1)
    a = rng.random((20, 4, 8, 4))
    b = a[:, :, ::-1, ::-1].copy()
    sym = lambda x: x.sum(axis=(1, 2, 3))
    g = reciprocity_gap(sym, (a, b))
    assert np.max(np.abs(g.gaps)) < 1e-9 and g.mean == pytest.approx(0.0, abs=1e-9)


def test_gap_orientation_sensitive_model():
    a = np.zeros((3, 4, 8, 4))
    a[:, 0, 0, :] = 1.0
    b = a[:, :, ::-1, ::-1].copy()
    g = reciprocity_gap(lambda x: 10 * x[:, 0, 0, 0], (a, b))
    assert np.all(g.gaps == 10.0) and g.sd == 0.0


def test_gap_rejects_unpaired():
    with pytest.raises(ValueError):
        reciprocity_gap(lambda x: x.sum(axis=(1, 2, 3)), (np.zeros((2, 4, 4, 4)), np.zeros((3, 4, 4, 4))))


def _results():
    out = []
    for h, base in (("A", 7.0), ("B", 9.0)):
        for n in (0, 80):
            for k, v in enumerate((base, base + 1, base + 2)):
                out.append({"holdout": h, "n": n, "repeat": k, "status": "ok",
                            "rmse": {"identity": v - (n > 0), "reflected": v + 3}})
    out.append({"holdout": "A", "n": 0, "repeat": 9, "status": "failed", "rmse": {}})
    return out


def test_summary_table_shape_and_values():
    header, rows = summary_table(_results(), "identity")
    assert header == ["holdout", "n=0 mean", "n=0 sd", "n=80 mean", "n=80 sd"]
    assert rows[0] == ["A", 8.0, 1.0, 7.0, 1.0]
    assert rows[1] == ["B", 10.0, 1.0, 9.0, 1.0]
    assert rows[2] == ["Mean", 9.0, 1.0, 8.0, 1.0]


def test_make_report_fields():
    r = make_report("identity", [100, 110, 95], [100, 100, 100])
    assert r.rmse == pytest.approx(6.455, abs=5e-4)
    assert r.mean_error == pytest.approx(5 / 3)
    assert r.bandwidth_rule == "silverman"
    again = EvalReport.from_dict(r.to_dict())
    assert again.rmse == r.rmse and np.array_equal(again.kde_density, r.kde_density)


def test_emit_report_files_and_determinism(tmp_path):
    rng = np.random.default_rng(2)
    meas = rng.normal(110, 10, 500)
    reports = [make_report("identity", meas + rng.normal(0, 7, 500), meas),
               make_report("reflected", meas + rng.normal(3, 9, 500), meas, gaps=rng.normal(0, 4, 500))]
    a, b = tmp_path / "a", tmp_path / "b"
    emit_report(reports, a, results=_results(), metadata={"seed": 1})
    emit_report(reports, b, results=_results(), metadata={"seed": 1})
    names = sorted(os.listdir(a))
    assert names == ["kde_identity.csv", "kde_reflected.csv", "report.json",
                     "summary_identity.csv", "summary_reflected.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    with open(a / "kde_identity.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x_db", "density"] and len(rows) == 513
    loaded, doc = load_reports(a / "report.json")
    assert [r.label for r in loaded] == ["identity", "reflected"]
    assert doc["published_reference"]["reciprocity_gap_db"]["no_augmentation"]["mean"] == 12.50
    for r in loaded:
        assert abs(ecdf_kde_integral(r.kde_x, r.kde_density) - 1.0) <= 1e-3
