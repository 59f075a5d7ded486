"""Quote-file schema, CSV reading/writing and the synthetic market generator.

One row holds one option on one trading day. Day offsets are relative to the
row's own date: ``m2`` is two trading days back, ``p1`` the next trading day.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
import re
from dataclasses import dataclass, fields
from typing import IO, Iterable, NamedTuple

import numpy as np

from .bs import BsParams, bs_call

QUOTE_COLUMNS = (
    "option_name", "grid_count", "beta", "date",
    "option_ask_m2", "option_ask_m1", "option_ask_0",
    "option_bid_m2", "option_bid_m1", "option_bid_0",
    "stock_ask_0", "stock_bid_0", "stock_ask_m1", "stock_bid_m1",
    "stock_ask_m2", "stock_bid_m2", "stock_ask_p1", "stock_bid_p1",
    "ivol_m2", "ivol_m1", "ivol_0", "ivol_p1", "ivol_p2",
    "est_p1", "est_p2", "option_mean_p1", "option_mean_p2",
    "option_ask_p1", "option_ask_p2", "option_bid_p1", "option_bid_p2",
    "option_type",
)
# appended by the qrm stage
QRM_COLUMNS = ("minimizer_error_p1", "minimizer_error_p2", "residual_norm")

DAYS = ("m2", "m1", "0", "p1", "p2")
_MEAN_RTOL = 1e-9
_STRIKE_RE = re.compile(r"(?:^|\s)[CP](\d+(?:\.\d+)?)\s*$")


class QuoteError(Exception):
    pass


class EmptyInput(QuoteError):
    pass


class MissingColumn(QuoteError):
    def __init__(self, name):
        super().__init__(f"missing column {name!r}")
        self.name = name


class NonNumericField(QuoteError):
    def __init__(self, row, column, value):
        super().__init__(f"line {row}: column {column!r} has unparseable value {value!r}")
        self.row = row
        self.column = column


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class OptionQuoteRow:
    option_name: str
    date: dt.date
    option_type: str = "call"
    grid_count: int | None = None
    beta: float | None = None
    option_ask_m2: float | None = None
    option_ask_m1: float | None = None
    option_ask_0: float | None = None
    option_bid_m2: float | None = None
    option_bid_m1: float | None = None
    option_bid_0: float | None = None
    stock_ask_0: float | None = None
    stock_bid_0: float | None = None
    stock_ask_m1: float | None = None
    stock_bid_m1: float | None = None
    stock_ask_m2: float | None = None
    stock_bid_m2: float | None = None
    stock_ask_p1: float | None = None
    stock_bid_p1: float | None = None
    ivol_m2: float | None = None
    ivol_m1: float | None = None
    ivol_0: float | None = None
    ivol_p1: float | None = None
    ivol_p2: float | None = None
    est_p1: float | None = None
    est_p2: float | None = None
    option_mean_p1: float | None = None
    option_mean_p2: float | None = None
    option_ask_p1: float | None = None
    option_ask_p2: float | None = None
    option_bid_p1: float | None = None
    option_bid_p2: float | None = None
    minimizer_error_p1: float | None = None
    minimizer_error_p2: float | None = None
    residual_norm: float | None = None

    @property
    def is_call(self) -> bool:
        return self.option_type == "call"

    @property
    def row_id(self) -> str:
        return f"{self.option_name}@{self.date.isoformat()}"

    @property
    def strike(self) -> float | None:
        """Strike encoded at the end of the option name, e.g. ``XYZ 2020-03-20 C101.5``."""
        m = _STRIKE_RE.search(self.option_name)
        return float(m.group(1)) if m else None

    def option_mid(self, day: str = "0") -> float | None:
        bid = getattr(self, f"option_bid_{day}")
        ask = getattr(self, f"option_ask_{day}")
        if bid is None or ask is None:
            return None
        return 0.5 * (bid + ask)

    def stock_mid(self, day: str = "0") -> float | None:
        bid = getattr(self, f"stock_bid_{day}")
        ask = getattr(self, f"stock_ask_{day}")
        if bid is None or ask is None:
            return None
        return 0.5 * (bid + ask)


_INT_FIELDS = {"grid_count"}


def violations(row: OptionQuoteRow) -> list[str]:
    """Reasons a row breaks the schema invariants (empty list for a valid row)."""
    reasons = []
    for kind, days in (("option", DAYS), ("stock", ("m2", "m1", "0", "p1"))):
        for d in days:
            bid = getattr(row, f"{kind}_bid_{d}")
            ask = getattr(row, f"{kind}_ask_{d}")
            if bid is not None and ask is not None and bid > ask:
                reasons.append(f"bid exceeds ask ({kind} day {d})")
    for d in DAYS:
        vol = getattr(row, f"ivol_{d}")
        if vol is not None and not vol > 0:
            reasons.append(f"nonpositive ivol (day {d})")
    for d in ("p1", "p2"):
        mean = getattr(row, f"option_mean_{d}")
        mid = row.option_mid(d)
        if mean is not None and mid is not None:
            if abs(mean - mid) > _MEAN_RTOL * max(1.0, abs(mid)):
                reasons.append(f"option mean differs from bid/ask mid (day {d})")
    if row.grid_count is not None and row.grid_count < 4:
        reasons.append("grid_count below 4")
    if row.beta is not None and row.beta < 0:
        reasons.append("negative beta")
    if row.option_type not in ("call", "put"):
        reasons.append(f"unknown option type {row.option_type!r}")
    for f in fields(row):
        v = getattr(row, f.name)
        if isinstance(v, float) and not math.isfinite(v):
            reasons.append(f"non-finite {f.name}")
    return reasons


class Rejection(NamedTuple):
    line: int
    row_id: str
    reasons: list[str]


class ParseResult(NamedTuple):
    accepted: list[OptionQuoteRow]
    rejected: list[Rejection]


def _convert(name: str, raw: str, line: int):
    raw = raw.strip()
    if name == "option_name":
        return raw
    if name == "option_type":
        return {"c": "call", "p": "put"}.get(raw.lower(), raw.lower())
    if name == "date":
        try:
            return dt.date.fromisoformat(raw)
        except ValueError:
            raise NonNumericField(line, name, raw) from None
    if raw == "":
        return None
    try:
        return int(raw) if name in _INT_FIELDS else float(raw)
    except ValueError:
        raise NonNumericField(line, name, raw) from None


def parse_quotes(stream: IO[str] | IO[bytes]) -> ParseResult:
    """Read a quote CSV. Rows breaking invariants are rejected with reasons."""
    text = stream.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    if not text.strip():
        raise EmptyInput("no header line")
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in reader.fieldnames or []]
    reader.fieldnames = header
    for name in QUOTE_COLUMNS:
        if name not in header:
            raise MissingColumn(name)
    present = [f.name for f in fields(OptionQuoteRow) if f.name in header]

    accepted, rejected = [], []
    for record in reader:
        line = reader.line_num
        values = {name: _convert(name, record[name] or "", line) for name in present}
        row = OptionQuoteRow(**values)
        reasons = violations(row)
        if reasons:
            rejected.append(Rejection(line, row.row_id, reasons))
        else:
            accepted.append(row)
    return ParseResult(accepted, rejected)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, dt.date):
        return value.isoformat()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_quotes(rows: Iterable[OptionQuoteRow], stream: IO[str], with_qrm: bool = False) -> None:
    columns = QUOTE_COLUMNS + (QRM_COLUMNS if with_qrm else ())
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(getattr(row, c)) for c in columns])


@dataclass(frozen=True)
class SyntheticMarketConfig:
    n_options: int = 1000
    seed: int = 0
    drift: float = 0.0
    true_vol: float = 0.2
    spread_frac: float = 0.01
    strike_band: tuple[float, float] = (0.9, 1.1)
    maturity_days: int = 30
    rate: float = 0.0
    start_price: float = 100.0
    start_date: dt.date = dt.date(2020, 1, 2)

    def validate(self) -> None:
        lo, hi = self.strike_band
        checks = [
            (self.n_options >= 0, "n_options must be nonnegative"),
            (self.true_vol > 0, "true_vol must be positive"),
            (0 <= self.spread_frac < 0.5, "spread_frac must lie in [0, 0.5)"),
            (0 < lo <= hi, "strike_band must satisfy 0 < low <= high"),
            (self.maturity_days >= 3, "maturity_days must be at least 3"),
            (self.rate >= 0, "rate must be nonnegative"),
            (self.start_price > 0, "start_price must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidConfig(msg)


_SEED_MASK = (1 << 64) - 1
# path covers days -3..+2; day -3 is an unquoted anchor
_PATH_DAYS = (-3, -2, -1, 0, 1, 2)


def _synthetic_row(cfg: SyntheticMarketConfig, index: int) -> OptionQuoteRow:
    rng = np.random.default_rng([cfg.seed & _SEED_MASK, index])
    step = 1.0 / 252.0
    shocks = rng.standard_normal(len(_PATH_DAYS) - 1)
    log_steps = (cfg.drift - 0.5 * cfg.true_vol ** 2) * step + cfg.true_vol * math.sqrt(step) * shocks
    path = cfg.start_price * np.exp(np.concatenate([[0.0], np.cumsum(log_steps)]))
    spot = dict(zip(_PATH_DAYS, path.tolist()))
    lo, hi = cfg.strike_band
    strike = round(spot[0] * rng.uniform(lo, hi), 2)

    date = dt.date.fromisoformat(str(np.busday_offset(cfg.start_date, index % 252, roll="forward")))
    expiry = dt.date.fromisoformat(str(np.busday_offset(date, cfg.maturity_days, roll="forward")))
    f = cfg.spread_frac
    values = {}
    for d, tag in zip((-2, -1, 0, 1, 2), DAYS):
        price = bs_call(BsParams(spot[d], strike, cfg.true_vol, (cfg.maturity_days - d) / 252.0, cfg.rate))
        values[f"option_ask_{tag}"] = price * (1 + f)
        values[f"option_bid_{tag}"] = price * (1 - f)
        values[f"ivol_{tag}"] = cfg.true_vol
        if d <= 1:
            values[f"stock_ask_{tag}"] = spot[d] * (1 + f)
            values[f"stock_bid_{tag}"] = spot[d] * (1 - f)
    for tag in ("p1", "p2"):
        values[f"option_mean_{tag}"] = 0.5 * (values[f"option_bid_{tag}"] + values[f"option_ask_{tag}"])
    return OptionQuoteRow(
        option_name=f"SYN{index:06d} {expiry.isoformat()} C{strike:.2f}",
        date=date,
        option_type="call",
        **values,
    )


def generate_synthetic(config: SyntheticMarketConfig) -> list[OptionQuoteRow]:
    """Geometric-Brownian stock paths with Black-Scholes call quotes.

    Each option draws from its own generator seeded by ``(seed, index)``, so
    the output does not depend on generation order.
    """
    config.validate()
    return [_synthetic_row(config, i) for i in range(config.n_options)]
