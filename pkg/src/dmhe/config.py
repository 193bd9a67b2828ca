"""Run configuration: INI file with sections, overridable from the command line."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


_SECTIONS = {
    "run": ("model", "case", "seed", "steps", "out"),
    "analysis": ("horizon", "w_bar", "v_bar", "rank_tol", "cond_tol", "restarts"),
    "estimation": ("q_std", "r_std", "p_state_std", "p_param_std", "mismatch", "noise_level", "max_iter"),
}


@dataclass
class RunConfig:
    model: str = "cstr4"
    case: str = "2"
    seed: int = 0
    steps: int = 500
    out: str = "out"
    horizon: int = 10
    w_bar: float = 1e-3
    v_bar: float = 1e-3
    rank_tol: Optional[float] = None
    cond_tol: float = 1e8
    restarts: int = 10
    q_std: float = 0.05
    r_std: float = 0.05
    p_state_std: float = 0.1
    p_param_std: float = 0.07
    mismatch: float = 0.05
    noise_level: float = 1e-3
    max_iter: int = 200

    def validate(self) -> "RunConfig":
        if self.case not in ("1", "2", "3", "4", "all"):
            raise ConfigError(f"case must be 1, 2, 3, 4 or all, got {self.case!r}")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.w_bar < 0 or self.v_bar < 0 or self.noise_level < 0 or self.mismatch < 0:
            raise ConfigError("noise levels and mismatch must be non-negative")
        if self.rank_tol is not None and self.rank_tol <= 0:
            raise ConfigError("rank_tol must be positive")
        if min(self.q_std, self.r_std, self.p_state_std, self.p_param_std) <= 0:
            raise ConfigError("weight standard deviations must be positive")
        if self.cond_tol < 1 or self.restarts < 0 or self.max_iter < 1:
            raise ConfigError("cond_tol >= 1, restarts >= 0 and max_iter >= 1 are required")
        return self

    def update(self, **kw) -> "RunConfig":
        for k, v in kw.items():
            if v is None:
                continue
            if not hasattr(self, k):
                raise ConfigError(f"unknown setting {k!r}")
            setattr(self, k, _coerce(k, v))
        return self

    def to_ini(self, path) -> Path:
        cp = configparser.ConfigParser()
        d = asdict(self)
        for sec, keys in _SECTIONS.items():
            cp[sec] = {k: "" if d[k] is None else str(d[k]) for k in keys}
        path = Path(path)
        with open(path, "w") as fh:
            cp.write(fh)
        return path


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    t = _TYPES[key]
    if isinstance(value, str):
        value = value.strip()
    try:
        if t in ("int", int):
            return int(value)
        if t in ("float", float):
            return float(value)
        if t in ("Optional[float]",):
            return None if value in ("", None, "none", "None") else float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {key}: {value!r}") from None


def load_config(path=None, **overrides) -> RunConfig:
    """Defaults, then the INI file, then non-None overrides (flags win)."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for sec in cp.sections():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            for k, v in cp[sec].items():
                if k not in _SECTIONS[sec]:
                    raise ConfigError(f"unknown key {k!r} in [{sec}]")
                setattr(cfg, k, _coerce(k, v))
    cfg.update(**overrides)
    return cfg.validate()
