"""Flat ``key = value`` scenario files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

from .errors import ConfigError

AUTO = "auto"
MODES = ("passive", "probing")


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario parameters.

    ``T``, ``t_star`` and ``theta`` may be the string ``"auto"``; they are
    resolved by the pipeline and echoed in the report. Fields left as
    ``None`` take the built-in system's defaults.
    """

    system: str
    mode: str = "probing"
    name: Optional[str] = None
    delta_x: Optional[float] = None
    k_xtilde: Optional[float] = None
    eps_xtilde: Optional[float] = None
    eps_y: Optional[float] = None
    sigma: Optional[float] = None
    r: Optional[float] = None
    R_m: Optional[float] = None
    nu: Optional[float] = None
    T: Union[float, str, None] = None
    t_star: Union[float, str, None] = None
    theta: Union[float, str, None] = None
    h_step: Optional[float] = None
    periods: Optional[int] = None
    duration: Optional[float] = None
    seed: int = 0
    x0: Optional[tuple] = None
    xhat0: Optional[tuple] = None
    max_steps: Optional[int] = None
    fit_horizon: Optional[float] = None
    fit_step: Optional[float] = None
    samples: Optional[int] = None
    probe_level: Optional[float] = None
    tolerance: Optional[float] = None
    source: Optional[str] = field(default=None, compare=False)

    @property
    def label(self) -> str:
        return self.name or self.system.replace(":", "_").replace(".", "_")

    def with_overrides(self, **kw) -> "ScenarioConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return validate(replace(self, **kw)) if kw else self

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "source"}


GLOBAL_DEFAULTS = dict(
    k_xtilde=0.05, eps_xtilde=0.1, eps_y=0.01, sigma=0.45, r=0.5, R_m=0.5, nu=1.0, T=0.05, t_star=0.01,
    theta=AUTO, h_step=1e-3, periods=10, duration=10.0, max_steps=5_000_000, fit_horizon=20.0, fit_step=0.05,
    samples=1000, probe_level=1.0, tolerance=1e-6,
)

_FLOAT_KEYS = {"delta_x", "k_xtilde", "eps_xtilde", "eps_y", "sigma", "r", "R_m", "nu", "h_step", "duration",
               "fit_horizon", "fit_step", "probe_level", "tolerance"}
_POSITIVE_KEYS = _FLOAT_KEYS - {"sigma", "probe_level"}
_AUTO_KEYS = {"T", "t_star", "theta"}
_INT_KEYS = {"periods", "seed", "max_steps", "samples"}
_VECTOR_KEYS = {"x0", "xhat0"}
_STRING_KEYS = {"system", "mode", "name"}
KNOWN_KEYS = _FLOAT_KEYS | _AUTO_KEYS | _INT_KEYS | _VECTOR_KEYS | _STRING_KEYS


def _number(text: str, key: str, line: Optional[int]) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}", line=line, field=key) from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: value must be finite", line=line, field=key)
    return v


def _parse_value(key: str, text: str, line: Optional[int]):
    if key in _STRING_KEYS:
        return text
    if key in _AUTO_KEYS:
        return AUTO if text.lower() == AUTO else _number(text, key, line)
    if key in _INT_KEYS:
        v = _number(text, key, line)
        if v != int(v):
            raise ConfigError(f"{key}: expected an integer, got {text!r}", line=line, field=key)
        return int(v)
    if key in _VECTOR_KEYS:
        parts = [p for p in text.replace(",", " ").split() if p]
        if not parts:
            raise ConfigError(f"{key}: empty vector", line=line, field=key)
        return tuple(_number(p, key, line) for p in parts)
    return _number(text, key, line)


def parse_text(text: str, source: Optional[str] = None) -> ScenarioConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", line=lineno)
        key, _, value = (s.strip() for s in body.partition("="))
        if not key or not value:
            raise ConfigError(f"expected 'key = value', got {body!r}", line=lineno)
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno, field=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, field=key)
        values[key] = _parse_value(key, value, lineno)
    if "system" not in values:
        raise ConfigError("missing required key 'system'", field="system")
    return validate(ScenarioConfig(**values, source=source))


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    return parse_text(text, source=str(p))


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    """Field-level checks that do not need the system definition."""
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}", field="mode")
    if cfg.mode == "probing" and cfg.delta_x is None:
        raise ConfigError("probing mode requires delta_x", field="delta_x")
    for key in _POSITIVE_KEYS | {"T", "t_star", "theta"}:
        v = getattr(cfg, key)
        if v is not None and v != AUTO and not v > 0:
            raise ConfigError(f"{key} must be positive, got {v}", field=key)
    if cfg.sigma is not None and cfg.sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {cfg.sigma}", field="sigma")
    if cfg.theta not in (None, AUTO) and cfg.theta < 1:
        raise ConfigError(f"theta must be at least 1, got {cfg.theta}", field="theta")
    for key in ("periods", "max_steps", "samples"):
        v = getattr(cfg, key)
        if v is not None and v < 1:
            raise ConfigError(f"{key} must be at least 1, got {v}", field=key)
    if cfg.samples is not None and cfg.samples < 1000:
        raise ConfigError("samples must be at least 1000", field="samples")
    if isinstance(cfg.T, float) and isinstance(cfg.t_star, float) and cfg.t_star >= cfg.T:
        raise ConfigError(f"t_star ({cfg.t_star}) must be smaller than T ({cfg.T})", field="t_star")
    return cfg


def resolve_defaults(cfg: ScenarioConfig, scenario_defaults: dict) -> ScenarioConfig:
    """Fill unset fields from the system's defaults, then the global ones."""
    fill = {}
    for key, default in GLOBAL_DEFAULTS.items():
        if getattr(cfg, key) is None:
            fill[key] = scenario_defaults.get(key, default)
    return validate(replace(cfg, **fill))
