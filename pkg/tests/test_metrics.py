import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mamba_va.data import VaSeries
from mamba_va.errors import InsufficientDataError
from mamba_va.metrics import EvalReport, MomentAccumulator, ccc, ccc_direct, evaluate, fold_report, p_va

# validation-set CCCs per fold, as published; columns valence, arousal, average
TABLE_1 = [
    (0, 0.5454, 0.3848, "0.4651"),
    (1, 0.5423, 0.3612, "0.4517"),
    (2, 0.5362, 0.4310, "0.4836"),
    (3, 0.5231, 0.3413, "0.4322"),
    (4, 0.5216, 0.3540, "0.4378"),
    (5, 0.5305, 0.4275, "0.4790"),
]

series = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=60)


def _naive(x, y):
    """Single-pass textbook formula with explicit Python loops."""
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * cov / (vx + vy + (mx - my) ** 2)


class TestCcc:
    def test_perfect_agreement(self):
        assert ccc([0.1, 0.5, -0.3], [0.1, 0.5, -0.3]).ccc == pytest.approx(1.0, abs=1e-15)

    def test_constant_prediction(self):
        r = ccc([0.2, 0.2, 0.2], [0.1, 0.5, -0.3])
        assert r.cov_xy == 0 and r.ccc == 0

    def test_four_sevenths(self):
        r = ccc([1, 2, 3], [2, 3, 4])
        assert r.var_x == pytest.approx(2 / 3) and r.var_y == pytest.approx(2 / 3) and r.cov_xy == pytest.approx(2 / 3)
        assert abs(r.ccc - 4 / 7) <= 1e-12
        assert abs(_naive([1, 2, 3], [2, 3, 4]) - 4 / 7) <= 1e-12

    def test_degenerate_flag(self):
        r = ccc([1.0, 1.0], [1.0, 1.0])
        assert r.degenerate and r.ccc == 0.0

    def test_mask(self):
        r = ccc([1, 2, 3, 99], [2, 3, 4, -99], mask=[True, True, True, False])
        assert r.ccc == pytest.approx(4 / 7, abs=1e-12) and r.n == 3

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            ccc([1.0], [1.0])

    def test_chunked_matches_direct(self, rng):
        x, y = rng.standard_normal(10_007), rng.standard_normal(10_007) + 0.3
        for chunk in (1, 7, 1000, 1 << 16):
            assert abs(ccc(x, y, chunk=chunk).ccc - ccc_direct(x, y).ccc) < 1e-12

    def test_accumulator_order_of_chunks(self, rng):
        x, y = rng.standard_normal(500), rng.standard_normal(500)
        acc = MomentAccumulator()
        for i in range(0, 500, 37):
            acc.update(x[i : i + 37], y[i : i + 37])
        assert acc.result().ccc == pytest.approx(ccc_direct(x, y).ccc, abs=1e-13)

    @settings(max_examples=200, deadline=None)
    @given(series, st.data())
    def test_invariants(self, xs, data):
        ys = data.draw(st.lists(st.floats(-10, 10, allow_nan=False), min_size=len(xs), max_size=len(xs)))
        x, y = np.array(xs), np.array(ys)
        assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
        r = ccc(x, y)
        assert r.ccc == pytest.approx(ccc(y, x).ccc, abs=1e-12)
        assert abs(r.ccc) <= abs(r.pearson) + 1e-12
        assert abs(r.pearson) <= 1 + 1e-12
        assert ccc(x, x).ccc == pytest.approx(1.0, abs=1e-12)
        assert r.ccc == pytest.approx(_naive(xs, ys), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(series, st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariance(self, xs, scale, shift):
        x = np.array(xs)
        assume(np.ptp(x) > 1e-2)
        y = x[::-1] + np.linspace(0, 1, x.size)
        assert ccc(scale * x + shift, scale * y + shift).ccc == pytest.approx(ccc(x, y).ccc, abs=1e-9)


class TestPva:
    @pytest.mark.parametrize("fold,v,a,avg", TABLE_1)
    def test_table_rows(self, fold, v, a, avg):
        assert f"{p_va(v, a):.4f}" == avg

    def test_fold_zero(self):
        assert abs(p_va(0.5454, 0.3848) - 0.4651) < 1e-15

    def test_baseline(self):
        assert p_va(0.24, 0.20) == 0.22

    def test_perfect(self):
        assert p_va(1, 1) == 1


class TestEvaluate:
    def _labels(self, rng, n=50):
        return VaSeries.from_values(rng.uniform(-1, 1, n), rng.uniform(-1, 1, n))

    def test_identical(self, rng):
        lab = self._labels(rng)
        assert evaluate(lab.as_array(), lab).p_va == pytest.approx(1.0, abs=1e-12)

    def test_zero_predictions(self, rng):
        lab = self._labels(rng)
        r = evaluate(np.zeros((50, 2)), lab)
        assert r.p_va == 0 and r.ccc_v == 0 and r.ccc_a == 0

    def test_invalid_frames_excluded(self, rng):
        lab = self._labels(rng)
        lab.valence[:5] = -5
        lab = VaSeries.from_values(lab.valence, lab.arousal)
        pred = lab.as_array().copy()
        pred[:5] = 0.9
        r = evaluate(pred, lab)
        assert r.n_valid == 45 and r.p_va == pytest.approx(1.0, abs=1e-12)

    def test_concatenation_not_average(self, rng):
        labs = [self._labels(rng, 30), self._labels(rng, 40)]
        preds = [rng.uniform(-1, 1, (30, 2)), rng.uniform(-1, 1, (40, 2))]
        r = evaluate(preds, labs)
        cat_pred = np.concatenate(preds)
        cat_v = np.concatenate([l.valence for l in labs])
        assert r.ccc_v == pytest.approx(ccc_direct(cat_pred[:, 0], cat_v).ccc, abs=1e-12)

    def test_fold_two_row(self):
        assert EvalReport.from_cccs(0.5362, 0.4310).row(2) == "2,0.5362,0.4310,0.4836"

    def test_misaligned(self, rng):
        with pytest.raises(ValueError):
            evaluate(np.zeros((3, 2)), self._labels(rng, 4))


class TestFoldReport:
    def test_six_folds_match_table(self):
        table = fold_report([(f, EvalReport.from_cccs(v, a)) for f, v, a, _ in TABLE_1])
        rows = table.table_rows()
        for (fold, v, a, avg), row in zip(TABLE_1, rows):
            assert row[0] == str(fold)
            assert f"{row[1]:.4f}" == f"{v:.4f}" and f"{row[2]:.4f}" == f"{a:.4f}" and f"{row[3]:.4f}" == avg
        assert rows[-2][0] == "Mean" and rows[-1][0] == "Baseline"
        text = table.to_text()
        assert "0.4651" in text and "0.2200" in text

    def test_single_fold_has_no_aggregate(self):
        rows = fold_report([EvalReport.from_cccs(0.5, 0.4)], baseline=False).table_rows()
        assert len(rows) == 1 and rows[0][0] == "0"

    def test_empty(self):
        with pytest.raises(ValueError):
            fold_report([])

    def test_csv_header(self):
        csv_text = fold_report([EvalReport.from_cccs(0.5, 0.4, 10)]).to_csv()
        assert csv_text.splitlines()[0] == "fold,ccc_valence,ccc_arousal,p_va,n_valid"
        assert csv_text.splitlines()[1] == "0,0.5000,0.4000,0.4500,10"


def test_golden_row_format(request):
    golden = (request.path.parent / "golden" / "evaluate_row.txt").read_text(encoding="utf-8")
    rendered = "fold,ccc_valence,ccc_arousal,p_va\n" + EvalReport.from_cccs(0.5362, 0.4310).row(2) + "\n"
    assert rendered == golden


def test_loss_arithmetic_fold_zero():
    assert math.isclose(1 - p_va(0.5454, 0.3848), 0.5349, abs_tol=1e-12)
