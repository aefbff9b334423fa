import csv
import math

import numpy as np
import pytest

from kneemorph.metrics import evaluate_run, mse, nmse, psnr, summarize, write_records, write_summary


def test_mse_closed_forms():
    a = np.random.default_rng(0).standard_normal((4, 4))
    assert mse(a, a) == 0.0
    assert mse(a, a + 0.1) == pytest.approx(0.01, abs=1e-15)


def test_mse_scalar_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    acc = 0.0
    for u, v in zip(a.ravel(), b.ravel()):
        acc += (u - v) ** 2
    assert mse(a, b) == pytest.approx(acc / a.size, abs=1e-12)


def test_psnr_closed_forms():
    a = np.zeros((4, 4))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1, max_i=1.0) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.2, max_i=2.0) == pytest.approx(10 * math.log10(4 / 0.04), abs=1e-9)
    assert 10 * math.log10(4 / 0.04) == pytest.approx(20.0, abs=1e-12)


def test_nmse_closed_forms():
    a = np.random.default_rng(2).standard_normal((6, 6))
    assert nmse(a, a) == 0.0
    assert nmse(a, np.full_like(a, a.mean())) == pytest.approx(1.0, abs=1e-9)


def test_nmse_scalar_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    m = sum(a.ravel()) / a.size
    num = den = 0.0
    for u, v in zip(a.ravel(), b.ravel()):
        num += (u - v) ** 2
        den += (u - m) ** 2
    assert nmse(a, b) == pytest.approx(num / den, abs=1e-12)


def test_nmse_constant_real_raises():
    with pytest.raises(ValueError):
        nmse(np.ones((3, 3)), np.zeros((3, 3)))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        mse(np.zeros((2, 2)), np.zeros((2, 3)))


def _run(n=7, seed=4):
    rng = np.random.default_rng(seed)
    sources = rng.uniform(-1, 1, (n, 8, 8))
    flows = rng.uniform(-1, 1, (n, 2, 8, 8))
    truth = {e: rng.uniform(-1, 1, (n, 8, 8)) for e in (0.25, 0.5, 0.75)}
    return evaluate_run(flows, sources, truth)


def test_record_count_and_consistency():
    records, _ = _run()
    assert len(records) == 7 * 3
    for r in records:
        assert r.psnr_db == pytest.approx(10 * math.log10(4 / r.mse), abs=1e-9)


def _sorted_quantile(vals, q):
    # closest-rank linear interpolation from an explicit sort
    s = sorted(vals)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def test_summary_matches_sort_oracle():
    records, summary = _run(n=9)
    for row in summary:
        vals = [getattr(r, row["metric"]) for r in records if r.eta == row["eta"]]
        assert row["median"] == pytest.approx(_sorted_quantile(vals, 0.5), abs=1e-12)
        assert row["q1"] == pytest.approx(_sorted_quantile(vals, 0.25), abs=1e-12)
        assert row["q3"] == pytest.approx(_sorted_quantile(vals, 0.75), abs=1e-12)
        assert row["mean"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)


def test_shared_flow_equals_broadcast():
    rng = np.random.default_rng(5)
    sources = rng.uniform(-1, 1, (3, 8, 8))
    flow = rng.uniform(-1, 1, (2, 8, 8))
    truth = {e: rng.uniform(-1, 1, (3, 8, 8)) for e in (0.25, 0.5, 0.75)}
    a, _ = evaluate_run(flow, sources, truth)
    b, _ = evaluate_run(np.stack([flow] * 3), sources, truth)
    assert a == b


def test_missing_truth_raises():
    with pytest.raises(KeyError):
        evaluate_run(np.zeros((2, 4, 4)), np.zeros((1, 4, 4)), {0.5: np.zeros((1, 4, 4))})


def test_csv_writers(tmp_path):
    records, summary = _run(n=2)
    write_records(tmp_path / "e.csv", records)
    write_summary(tmp_path / "s.csv", summary)
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and float(rows[0]["psnr_db"]) == records[0].psnr_db
    with open(tmp_path / "s.csv") as fh:
        assert next(csv.reader(fh)) == ["eta", "metric", "median", "q1", "q3", "mean"]
    assert len(summarize(records)) == 9
