"""Flat key=value configuration with the S3DIS-style defaults."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    k: int = 24
    beta: float = 0.04
    tau: float = 0.3
    mu: float = -1.0
    nu: float = 0.5
    lam: float = 0.1          # file key: lambda
    omega: float = 0.01
    epsilon_lo: float = 0.9
    epsilon_hi: float = 1.0
    gamma: float = 1.0
    k_tilde: int = 12
    stages: int = 2
    dims: tuple[int, ...] = (16, 32)
    lr: float = 0.01
    epochs: int = 150
    seed: int = 0
    cross_mask_mode: str = "single"
    apm_detach: bool = True

    def validate(self) -> None:
        if self.epsilon_lo > self.epsilon_hi:
            raise ConfigError("epsilon_lo must be <= epsilon_hi")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if len(self.dims) != self.stages:
            raise ConfigError("dims must list one width per stage")
        if self.cross_mask_mode not in ("single", "sum"):
            raise ConfigError("cross_mask_mode must be single or sum")
        if self.k < 2 or self.k_tilde < 2:
            raise ConfigError("k and k_tilde must be >= 2")


# file key -> dataclass field
_KEY_TO_FIELD = {f.name: f.name for f in fields(Config)} | {"lambda": "lam"}
del _KEY_TO_FIELD["lam"]


def _parse_value(key: str, raw: str, lineno: int):
    try:
        if key in ("k", "k_tilde", "stages", "epochs", "seed"):
            return int(raw)
        if key == "dims":
            return tuple(int(t) for t in raw.replace(",", " ").split())
        if key == "cross_mask_mode":
            if raw not in ("single", "sum"):
                raise ValueError(raw)
            return raw
        if key == "apm_detach":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r} for key {key!r}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse `key = value` lines over defaults; later duplicates win."""
    cfg = base or Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg = replace(cfg, **{_KEY_TO_FIELD[key]: _parse_value(key, raw, lineno)})
    try:
        cfg.validate()
    except ConfigError as e:
        raise ConfigError(str(e)) from None
    return cfg


def apply_overrides(cfg: Config, pairs: list[str]) -> Config:
    """Apply repeated --set key=value overrides."""
    for i, pair in enumerate(pairs, start=1):
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"unknown key {key!r}")
        cfg = replace(cfg, **{_KEY_TO_FIELD[key]: _parse_value(key, raw, i)})
    cfg.validate()
    return cfg


def config_to_text(cfg: Config) -> str:
    """Serialize in the same key=value syntax parse_config accepts."""
    lines = []
    for f in fields(Config):
        key = "lambda" if f.name == "lam" else f.name
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = format(v, ".9g")
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
