"""Thirteen-element normalized input vectors, direction labels and dataset splits."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, replace
from typing import IO, NamedTuple, Sequence

import numpy as np

from .market_data import OptionQuoteRow

N_FEATURES = 13
FEATURE_COLUMNS = tuple(f"f{k:02d}" for k in range(1, N_FEATURES + 1))
GROUPS = ("train", "validation", "test")
SD_FLOOR = 1e-9

# reference partition sizes for 92,846 option-days; fractions are these ratios
REFERENCE_SPLIT = (70_322, 9_875, 12_649)

_WINDOW = ("option_ask_0", "option_ask_m1", "option_ask_m2", "option_bid_0", "option_bid_m1", "option_bid_m2")


class FeatureError(ValueError):
    pass


class MissingQuotes(FeatureError):
    pass


class MissingField(FeatureError):
    def __init__(self, name, row_id=""):
        super().__init__(f"{row_id}: missing field {name!r}" if row_id else f"missing field {name!r}")
        self.name = name


class EmptyDataset(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    mu: float
    sd: float

    def __post_init__(self):
        if self.values.shape != (N_FEATURES,):
            raise FeatureError(f"expected {N_FEATURES} features, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FeatureError("non-finite feature value")
        if not self.sd > 0:
            raise FeatureError("normalization scale must be positive")


@dataclass(frozen=True)
class LabeledExample:
    features: FeatureVector
    label: int
    row_id: str
    group: str = ""
    date: dt.date | None = None


def normalization_stats(row: OptionQuoteRow) -> tuple[float, float]:
    """Mean and population standard deviation of the six recent option quotes."""
    quotes = [getattr(row, name) for name in _WINDOW]
    if any(q is None for q in quotes):
        raise MissingQuotes(f"{row.row_id}: option bid/ask for days -2..0 incomplete")
    mu = sum(quotes) / 6.0
    sd = math.sqrt(sum((q - mu) ** 2 for q in quotes) / 6.0)
    return mu, max(sd, SD_FLOOR)


def normalize_option(u: float, mu: float, sd: float) -> float:
    return (u - mu) / sd


def normalize_stock(s: float, strike: float, mu: float, sd: float) -> float:
    return ((s - strike) - mu) / sd


def build_example(row: OptionQuoteRow) -> LabeledExample:
    required = ("stock_ask_0", "stock_bid_0") + _WINDOW + ("ivol_0", "ivol_m1", "ivol_m2",
                                                          "est_p1", "est_p2", "option_mean_p1")
    for name in required:
        if getattr(row, name) is None:
            raise MissingField(name, row.row_id)
    strike = row.strike
    if strike is None:
        raise MissingField("strike", row.row_id)

    mu, sd = normalization_stats(row)
    values = [
        normalize_stock(row.stock_ask_0, strike, mu, sd),
        normalize_stock(row.stock_bid_0, strike, mu, sd),
        *(normalize_option(getattr(row, name), mu, sd) for name in _WINDOW),
        row.ivol_0, row.ivol_m1, row.ivol_m2,
        normalize_option(row.est_p1, mu, sd),
        normalize_option(row.est_p2, mu, sd),
    ]
    label = int(row.option_mean_p1 > row.option_mid("0"))
    return LabeledExample(FeatureVector(np.array(values, dtype=float), mu, sd), label, row.row_id, date=row.date)


class Partition(NamedTuple):
    train: list[LabeledExample]
    validation: list[LabeledExample]
    test: list[LabeledExample]


def split_sizes(n: int) -> tuple[int, int, int]:
    """Partition sizes; validation and test are rounded, train takes the remainder."""
    total = sum(REFERENCE_SPLIT)
    n_val = (2 * n * REFERENCE_SPLIT[1] + total) // (2 * total)
    n_test = (2 * n * REFERENCE_SPLIT[2] + total) // (2 * total)
    return n - n_val - n_test, n_val, n_test


def split(examples: Sequence[LabeledExample], seed: int, mode: str = "random") -> Partition:
    """Shuffle (or sort by date) and cut into train / validation / test."""
    n = len(examples)
    if n == 0:
        raise EmptyDataset("nothing to split")
    if mode == "random":
        order = np.random.default_rng(seed & ((1 << 64) - 1)).permutation(n)
    elif mode == "chronological":
        order = sorted(range(n), key=lambda k: (examples[k].date or dt.date.min, examples[k].row_id))
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    n_train, n_val, _ = split_sizes(n)
    bounds = (0, n_train, n_train + n_val, n)
    parts = []
    for g, (lo, hi) in zip(GROUPS, zip(bounds, bounds[1:])):
        parts.append([replace(examples[k], group=g) for k in order[lo:hi]])
    return Partition(*parts)


@dataclass
class FeatureTable:
    """Column-oriented view of a features CSV."""

    row_ids: list[str]
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray

    def subset(self, group: str) -> "FeatureTable":
        mask = self.groups == group
        return FeatureTable([r for r, m in zip(self.row_ids, mask) if m], self.X[mask], self.y[mask], self.groups[mask])

    def __len__(self):
        return len(self.row_ids)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample]) -> "FeatureTable":
        X = np.array([e.features.values for e in examples], dtype=float).reshape(len(examples), N_FEATURES)
        return cls([e.row_id for e in examples], X, np.array([e.label for e in examples], dtype=int),
                   np.array([e.group for e in examples], dtype=object))


def write_features(examples: Sequence[LabeledExample], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(("row_id",) + FEATURE_COLUMNS + ("label", "group"))
    for e in examples:
        writer.writerow([e.row_id, *(repr(float(v)) for v in e.features.values), e.label, e.group])


def read_features(stream: IO[str]) -> FeatureTable:
    reader = csv.DictReader(stream)
    expected = ("row_id",) + FEATURE_COLUMNS + ("label", "group")
    missing = [c for c in expected if c not in (reader.fieldnames or ())]
    if missing:
        raise MissingField(missing[0])
    ids, rows, labels, groups = [], [], [], []
    for rec in reader:
        ids.append(rec["row_id"])
        rows.append([float(rec[c]) for c in FEATURE_COLUMNS])
        labels.append(int(rec["label"]))
        groups.append(rec["group"])
    X = np.array(rows, dtype=float).reshape(len(rows), N_FEATURES)
    return FeatureTable(ids, X, np.array(labels, dtype=int), np.array(groups, dtype=object))
