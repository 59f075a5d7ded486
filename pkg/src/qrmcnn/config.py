"""Flat ``dotted.key = value`` pipeline configuration."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .cnn import VARIANT_LAYERS, CnnConfig
from .market_data import InvalidConfig, SyntheticMarketConfig
from .qrm import SolverConfig

SEED_LIMIT = 1 << 64


class ConfigError(ValueError):
    pass


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _seed(raw: str) -> int:
    value = int(raw, 0)
    if not 0 <= value < SEED_LIMIT:
        raise ValueError("seeds are unsigned 64-bit integers")
    return value


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(","))


def _choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return raw
    return parse


# key -> (parser, default); a None default means "derive" (seeds) or "module default"
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (_seed, 0),
    "synth.n_options": (int, 1000),
    "synth.seed": (_seed, None),
    "synth.drift": (float, 0.0),
    "synth.true_vol": (float, 0.2),
    "synth.spread_frac": (float, 0.01),
    "synth.strike_low": (float, 0.9),
    "synth.strike_high": (float, 1.1),
    "synth.maturity_days": (int, 30),
    "synth.rate": (float, 0.0),
    "synth.start_price": (float, 100.0),
    "synth.start_date": (dt.date.fromisoformat, dt.date(2020, 1, 2)),
    "qrm.beta": (float, None),
    "qrm.n_s": (int, None),
    "qrm.n_t": (int, None),
    "qrm.cg_tol": (float, 1e-10),
    "qrm.cg_max_iter": (int, 50_000),
    "qrm.workers": (int, 1),
    "qrm.calls_only": (_bool, True),
    "features.split_seed": (_seed, None),
    "features.split_mode": (_choice("random", "chronological"), "random"),
    "cnn.variant": (_choice(*VARIANT_LAYERS), "approach_1_1"),
    "cnn.width": (int, 8),
    "cnn.channels": (_ints, None),
    "cnn.epochs": (int, 100),
    "cnn.lr": (float, 0.05),
    "cnn.seed": (_seed, None),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class PipelineConfig:
    values: Mapping[str, Any]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> "PipelineConfig":
        raw: dict[str, str] = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            raw.update(parse_config_text(text, str(path)))
        raw.update(overrides or {})
        return cls.from_raw(raw)

    @classmethod
    def from_raw(cls, raw: Mapping[str, str]) -> "PipelineConfig":
        values = {key: default for key, (_, default) in KEYS.items()}
        for key, text in raw.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[key] = KEYS[key][0](text)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def seed_for(self, key: str) -> int:
        value = self.values[key]
        return self.values["seed"] if value is None else value

    def validate(self) -> None:
        try:
            self.synthetic().validate()
            self.cnn().validate()
        except (InvalidConfig, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self["qrm.workers"] < 1:
            raise ConfigError("qrm.workers must be at least 1")
        if self["qrm.beta"] is not None and self["qrm.beta"] < 0:
            raise ConfigError("qrm.beta must be nonnegative")
        for key in ("qrm.n_s", "qrm.n_t"):
            if self[key] is not None and self[key] < 2:
                raise ConfigError(f"{key} must be at least 2")
        if not self["qrm.cg_tol"] > 0 or self["qrm.cg_max_iter"] < 1:
            raise ConfigError("qrm.cg_tol and qrm.cg_max_iter must be positive")
        channels = self["cnn.channels"]
        if channels is not None and len(channels) != VARIANT_LAYERS[self["cnn.variant"]]:
            raise ConfigError(f"cnn.channels needs {VARIANT_LAYERS[self['cnn.variant']]} entries "
                              f"for {self['cnn.variant']}")

    def synthetic(self) -> SyntheticMarketConfig:
        return SyntheticMarketConfig(
            n_options=self["synth.n_options"],
            seed=self.seed_for("synth.seed"),
            drift=self["synth.drift"],
            true_vol=self["synth.true_vol"],
            spread_frac=self["synth.spread_frac"],
            strike_band=(self["synth.strike_low"], self["synth.strike_high"]),
            maturity_days=self["synth.maturity_days"],
            rate=self["synth.rate"],
            start_price=self["synth.start_price"],
            start_date=self["synth.start_date"],
        )

    def solver(self) -> SolverConfig:
        return SolverConfig(beta=self["qrm.beta"], n_s=self["qrm.n_s"], n_t=self["qrm.n_t"],
                            cg_tol=self["qrm.cg_tol"], cg_max_iter=self["qrm.cg_max_iter"])

    def cnn(self) -> CnnConfig:
        variant = self["cnn.variant"]
        channels = self["cnn.channels"] or (self["cnn.width"],) * VARIANT_LAYERS[variant]
        return CnnConfig(variant=variant, channels=tuple(channels), learning_rate=self["cnn.lr"],
                         epochs=self["cnn.epochs"], seed=self.seed_for("cnn.seed"))
