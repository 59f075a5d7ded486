"""Buy/hold decisions, confusion matrices and the metric/report tables."""

from __future__ import annotations

import csv
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Sequence

from .cnn import TrainingTrace
from .market_data import OptionQuoteRow

# published reference figures, shown next to computed results and never mixed with them
PAPER_REPORTED = (
    ("QRM", 0.4977, 0.5577, 0.5243),
    ("CNN Approach", 0.5149, 0.5714, 0.0278),
)
REPORT_FILES = ("metrics.csv", "profits.csv", "loss_trace.csv", "confusion.csv")


class MissingEstimate(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvaluationReport:
    matrix: ConfusionMatrix
    accuracy: float
    precision: float | None  # None when nothing was bought
    recall: float | None  # None when nothing actually rose
    threshold: float | None
    method_name: str

    @property
    def profitable_rate(self) -> float | None:
        return self.precision

    @property
    def loss_rate(self) -> float | None:
        return None if self.precision is None else 1.0 - self.precision

    def to_dict(self) -> dict:
        d = asdict(self)
        d["matrix"] = asdict(self.matrix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(ConfusionMatrix(**d["matrix"]), d["accuracy"], d["precision"], d["recall"],
                   d["threshold"], d["method_name"])


def qrm_decision(row: OptionQuoteRow) -> int:
    """Buy when tomorrow's minimizer estimate is at least today's option mid."""
    if row.est_p1 is None:
        raise MissingEstimate(f"{row.row_id}: est_p1 unpopulated")
    real_0 = row.option_mid("0")
    if real_0 is None:
        raise MissingEstimate(f"{row.row_id}: no option quote for today")
    return int(row.est_p1 >= real_0)


def direction_label(row: OptionQuoteRow) -> int:
    return int(row.option_mean_p1 > row.option_mid("0"))


def evaluate(decisions: Sequence[int], labels: Sequence[int], threshold: float | None = None,
             method_name: str = "") -> EvaluationReport:
    if len(decisions) != len(labels):
        raise LengthMismatch(f"{len(decisions)} decisions vs {len(labels)} labels")
    if len(decisions) == 0:
        raise EmptyInput("nothing to evaluate")
    tp = fp = tn = fn = 0
    for d, t in zip(decisions, labels):
        d, t = int(d), int(t)
        if d and t:
            tp += 1
        elif d:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    m = ConfusionMatrix(tp, fp, tn, fn)
    return EvaluationReport(
        matrix=m,
        accuracy=(tp + tn) / m.total,
        precision=tp / (tp + fp) if tp + fp else None,
        recall=tp / (tp + fn) if tp + fn else None,
        threshold=threshold,
        method_name=method_name,
    )


def pct(x: float | None) -> str:
    return "N/A" if x is None else f"{100 * x:.2f}%"


def _profit_cells(precision: float | None) -> tuple[str, str]:
    if precision is None:
        return "N/A", "N/A"
    profit = round(100 * precision, 2)
    # loss is the complement of the rounded figure so each row sums to 100%
    return f"{profit:.2f}%", f"{100 - profit:.2f}%"


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_trace(trace: TrainingTrace | None, stream: IO[str]) -> None:
    """Two-column ``epoch,train_loss`` CSV; header only when there is no trace."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["epoch", "train_loss"])
    for k, v in enumerate(trace.train_loss if trace else []):
        writer.writerow([k + 1, repr(float(v))])


def read_trace(stream: IO[str]) -> TrainingTrace:
    reader = csv.reader(stream)
    if next(reader, None) != ["epoch", "train_loss"]:
        raise ValueError("not a loss trace CSV")
    return TrainingTrace([float(rec[1]) for rec in reader if rec])


def report_tables(reports: Sequence[EvaluationReport], out: str | Path, trace: TrainingTrace | None = None,
                  stream: IO[str] | None = None) -> str:
    """Write metrics, profits, loss-trace and confusion CSVs; return (and print) a summary.

    The confusion matrix written is the first report's.
    """
    if not reports:
        raise EmptyInput("no reports")
    out = Path(out)
    stream = sys.stdout if stream is None else stream
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_tables(reports, out, trace)
    except OSError as exc:
        raise IoFailure(f"cannot write report tables to {out}: {exc}") from exc
    return _summary(reports, stream)


def _write_tables(reports: Sequence[EvaluationReport], out: Path, trace: TrainingTrace | None) -> None:
    metrics = [[r.method_name, pct(r.accuracy), pct(r.precision), pct(r.recall),
                "" if r.threshold is None else f"{r.threshold:.2f}", r.matrix.total, "computed"]
               for r in reports]
    metrics += [[name, pct(a), pct(p), pct(rc), "", "", "paper-reported"] for name, a, p, rc in PAPER_REPORTED]
    _write_csv(out / "metrics.csv", ["method", "accuracy", "precision", "recall", "threshold", "n", "source"], metrics)

    profits = [[r.method_name, *_profit_cells(r.precision), "computed"] for r in reports]
    profits += [[name, *_profit_cells(p), "paper-reported"] for name, _, p, _ in PAPER_REPORTED]
    _write_csv(out / "profits.csv", ["method", "profitable", "loss", "source"], profits)

    with (out / "loss_trace.csv").open("w", newline="", encoding="utf-8") as fh:
        write_trace(trace, fh)

    m = reports[0].matrix
    _write_csv(out / "confusion.csv", ["actual", "predicted_0", "predicted_1"],
               [["0", m.tn, m.fp], ["1", m.fn, m.tp]])


def _summary(reports: Sequence[EvaluationReport], stream: IO[str]) -> str:
    m = reports[0].matrix
    width = max(len(r.method_name) for r in reports)
    width = max(width, *(len(n) + len(" (paper-reported)") for n, *_ in PAPER_REPORTED))
    lines = [f"{'method':<{width}}  {'accuracy':>9}  {'precision':>9}  {'recall':>8}  profitable / loss"]
    for r in reports:
        profit, lost = _profit_cells(r.precision)
        lines.append(f"{r.method_name:<{width}}  {pct(r.accuracy):>9}  {pct(r.precision):>9}  "
                     f"{pct(r.recall):>8}  {profit} / {lost}")
    for name, a, p, rc in PAPER_REPORTED:
        profit, lost = _profit_cells(p)
        label = f"{name} (paper-reported)"
        lines.append(f"{label:<{width}}  {pct(a):>9}  {pct(p):>9}  {pct(rc):>8}  {profit} / {lost}")
    lines.append(f"confusion [{reports[0].method_name}]: tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn}")
    summary = "\n".join(lines) + "\n"
    stream.write(summary)
    return summary
