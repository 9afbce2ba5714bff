"""Run configuration: a flat ``key = value`` text file mirrored by CLI flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Bad configuration key or value (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    command: str = ""
    # inputs
    input: str = ""
    gdp: str = ""
    matrices: str = ""
    metrics: str = ""
    datasets: str = ""
    digit_level: int = 4
    # regularization
    regularization: str = "threshold"
    hmm_rule: str = "expected"
    # plane analysis
    coords: str = "tied-rank"
    grid_nx: int = 20
    grid_ny: int = 20
    grid_min_count: int = 5
    minima_bootstrap: int = 200
    null_models: str = "EE,DD,FF"
    null_count: int = 100
    null_year: int = 0
    # forecasting
    kernel_sigma: float | None = None
    B: int = 1000
    N: int = 100
    dts: str = "3,4,5"
    methods: str = "spsb,nwkr,random,static,autocorrelation"
    schedule: str = "100,1000,10000,100000"
    queries: int = 30
    analogues: int = 500
    # synthetic data
    generator: str = "nested"
    countries: int = 20
    products: int = 40
    years: int = 20
    noise: float = 0.0
    entities: int = 50
    drift: str = "sink"
    drift_strength: float = 0.2
    diffusion: float = 0.05
    seed: int = 0
    output: str = ""

    def __post_init__(self):
        checks = {
            "regularization": ("threshold", "hmm"),
            "hmm_rule": ("expected", "top2"),
            "coords": ("tied-rank", "raw"),
            "generator": ("nested", "flicker", "drift"),
            "drift": ("none", "constant", "sink", "swirl"),
        }
        for key, allowed in checks.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        if self.digit_level not in (4, 6):
            raise ConfigError(f"digit_level must be 4 or 6; got {self.digit_level}")
        if self.kernel_sigma is not None and not self.kernel_sigma > 0:
            raise ConfigError("kernel_sigma must be positive (or 'auto')")
        for key in ("grid_nx", "grid_ny", "grid_min_count", "B", "N", "queries", "analogues"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1")
        for key in ("dts", "schedule"):
            try:
                vals = self.int_list(key)
            except ValueError:
                raise ConfigError(f"{key} must be a comma-separated list of integers") from None
            if not vals or min(vals) < 1:
                raise ConfigError(f"{key} needs positive integers")

    def int_list(self, key: str) -> list[int]:
        return [int(v) for v in getattr(self, key).split(",") if v.strip()]

    def str_list(self, key: str) -> list[str]:
        return [v.strip() for v in getattr(self, key).split(",") if v.strip()]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return (base or cls()).with_strings(values)

    def with_strings(self, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            parsed[key] = _parse(key, types[key], value)
        return self.replace(**parsed)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, kind: str, value: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "float | None":
            return None if value in ("", "auto", "none") else float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value
