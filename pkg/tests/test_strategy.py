import csv
import dataclasses
import datetime as dt
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrmcnn.cnn import TrainingTrace
from qrmcnn.market_data import OptionQuoteRow
from qrmcnn.qrm import build_problem, solve
from qrmcnn.strategy import (
    ConfusionMatrix,
    EmptyInput,
    EvaluationReport,
    IoFailure,
    LengthMismatch,
    MissingEstimate,
    evaluate,
    qrm_decision,
    report_tables,
)


def row(est_p1, bid=2.9, ask=3.1, **kw):
    base = dict(option_name="X 2020-02-21 C100", date=dt.date(2020, 1, 2),
                option_bid_0=bid, option_ask_0=ask, est_p1=est_p1)
    base.update(kw)
    return OptionQuoteRow(**base)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


class TestQrmDecision:
    def test_equal_buys(self):
        assert qrm_decision(row(3.0)) == 1

    def test_below_holds(self):
        assert qrm_decision(row(2.99)) == 0

    def test_missing(self):
        with pytest.raises(MissingEstimate):
            qrm_decision(row(None))

    @settings(max_examples=30, deadline=None)
    @given(value=st.floats(0.01, 1000.0))
    def test_constant_market(self, value):
        flat = OptionQuoteRow(
            option_name="FLAT C100", date=dt.date(2020, 1, 2),
            **{f"option_{side}_{d}": value for side in ("bid", "ask") for d in ("m2", "m1", "0")},
            stock_bid_0=99.0, stock_ask_0=101.0, ivol_0=0.2,
        )
        sol = solve(build_problem(flat))
        est = dataclasses.replace(flat, est_p1=sol.est_1, est_p2=sol.est_2)
        assert abs(est.est_p1 - value) < 1e-8
        assert qrm_decision(est) == 1

    @settings(max_examples=100, deadline=None)
    @given(bid=st.floats(0.01, 100), spread=st.floats(0, 10), est=st.floats(0.01, 200),
           scale=st.sampled_from([0.01, 0.5, 2.0, 8.0, 100.0]))
    def test_rescaling_invariance(self, bid, spread, est, scale):
        # power-of-two and decimal scalings; only exact ties may flip under rounding
        a = row(est, bid=bid, ask=bid + spread)
        b = row(est * scale, bid=bid * scale, ask=(bid + spread) * scale)
        mid = (bid + bid + spread) / 2
        if abs(est - mid) > 1e-9 * mid:
            assert qrm_decision(a) == qrm_decision(b)


class TestEvaluate:
    def test_arithmetic(self):
        decisions = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
        labels = [1, 1, 0, 1, 1, 1, 0, 0, 0, 0]
        r = evaluate(decisions, labels, threshold=0.5, method_name="m")
        assert r.matrix == ConfusionMatrix(tp=2, fp=1, tn=4, fn=3)
        assert r.accuracy == 0.6
        assert r.precision == 2 / 3
        assert r.recall == 0.4
        assert r.threshold == 0.5

    def test_all_negative(self):
        r = evaluate([0] * 6, [1, 0, 1, 0, 0, 1])
        assert r.precision is None and r.profitable_rate is None and r.loss_rate is None
        assert r.recall == 0.0

    def test_perfect(self):
        labels = [1, 0, 1, 1, 0]
        r = evaluate(labels, labels)
        assert (r.accuracy, r.precision, r.recall) == (1.0, 1.0, 1.0)

    def test_no_positive_labels(self):
        assert evaluate([1, 0], [0, 0]).recall is None

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate([1, 0], [1])

    def test_empty(self):
        with pytest.raises(EmptyInput):
            evaluate([], [])

    @settings(max_examples=200, deadline=None)
    @given(pairs=st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
    def test_invariants(self, pairs):
        d, t = zip(*pairs)
        r = evaluate(d, t)
        m = r.matrix
        assert m.total == len(pairs)
        assert r.accuracy == (m.tp + m.tn) / m.total
        assert r.profitable_rate == r.precision
        for x in (r.accuracy, r.precision, r.recall):
            assert x is None or 0 <= x <= 1
        if r.precision is not None:
            assert r.loss_rate == 1 - r.precision

    def test_dict_round_trip(self):
        r = evaluate([1, 0, 0], [1, 1, 0], threshold=0.54, method_name="CNN")
        assert EvaluationReport.from_dict(r.to_dict()) == r


def report_with_precision(p, name="CNN Approach"):
    # 7 buys, 4 correct -> 0.5714...
    return EvaluationReport(ConfusionMatrix(4, 3, 5, 1), 0.6, p, 0.8, 0.54, name)


class TestReportTables:
    def test_files_and_profit_row(self, tmp_path):
        out = io.StringIO()
        summary = report_tables([report_with_precision(4 / 7)], tmp_path, stream=out)
        assert summary == out.getvalue()
        assert "57.14% / 42.86%" in summary
        assert "paper-reported" in summary
        profits = read_csv(tmp_path / "profits.csv")
        assert profits[0] == ["method", "profitable", "loss", "source"]
        assert profits[1] == ["CNN Approach", "57.14%", "42.86%", "computed"]

    def test_profit_rows_sum_to_100(self, tmp_path):
        reports = [report_with_precision(p, f"m{k}") for k, p in enumerate(np.linspace(0, 1, 37))]
        report_tables(reports, tmp_path, stream=io.StringIO())
        for rec in read_csv(tmp_path / "profits.csv")[1:]:
            a, b = (float(x.rstrip("%")) for x in rec[1:3])
            assert round(a + b, 2) == 100.0

    def test_reference_rows_labelled(self, tmp_path):
        report_tables([report_with_precision(0.5)], tmp_path, stream=io.StringIO())
        rows = read_csv(tmp_path / "metrics.csv")
        reference = [r for r in rows[1:] if r[-1] == "paper-reported"]
        computed = [r for r in rows[1:] if r[-1] == "computed"]
        assert len(computed) == 1
        assert ["QRM", "49.77%", "55.77%", "52.43%"] == reference[0][:4]
        assert ["CNN Approach", "51.49%", "57.14%", "2.78%"] == reference[1][:4]

    def test_empty_trace_header_only(self, tmp_path):
        report_tables([report_with_precision(0.5)], tmp_path, stream=io.StringIO())
        assert (tmp_path / "loss_trace.csv").read_text() == "epoch,train_loss\n"

    def test_trace(self, tmp_path):
        report_tables([report_with_precision(0.5)], tmp_path, TrainingTrace([0.7, 0.6]), stream=io.StringIO())
        assert read_csv(tmp_path / "loss_trace.csv") == [["epoch", "train_loss"], ["1", "0.7"], ["2", "0.6"]]

    def test_order_preserved(self, tmp_path):
        reports = [report_with_precision(0.5, "zeta"), report_with_precision(0.5, "alpha")]
        report_tables(reports, tmp_path, stream=io.StringIO())
        names = [r[0] for r in read_csv(tmp_path / "metrics.csv")[1:3]]
        assert names == ["zeta", "alpha"]

    def test_confusion(self, tmp_path):
        report_tables([report_with_precision(0.5)], tmp_path, stream=io.StringIO())
        assert read_csv(tmp_path / "confusion.csv") == [
            ["actual", "predicted_0", "predicted_1"], ["0", "5", "3"], ["1", "1", "4"]]

    def test_na(self, tmp_path):
        r = evaluate([0, 0, 0], [1, 0, 1], method_name="CNN App 1.0")
        summary = report_tables([r], tmp_path, stream=io.StringIO())
        rec = read_csv(tmp_path / "metrics.csv")[1]
        assert rec[2] == "N/A" and rec[3] == "0.00%"
        assert "N/A" in summary

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyInput):
            report_tables([], tmp_path)

    def test_io_failure(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoFailure):
            report_tables([report_with_precision(0.5)], blocker / "sub", stream=io.StringIO())
