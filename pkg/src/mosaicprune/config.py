"""Flat ``key=value`` run configuration.

Lines look like ``lambda = 0.0001``; ``#`` starts a comment. Command-line
``--key value`` flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .schedule import DEFAULT_BETAS, FAMILIES
from .trajectory import WEIGHTINGS, PresetLookupError, lookup_allocation, parse_preset


class ConfigError(ValueError):
    pass


# file/flag spelling -> dataclass field, where they differ
ALIASES = {"lambda": "lam", "out-dir": "out_dir"}


@dataclass(frozen=True)
class RunConfig:
    # schedule and trajectory analysis
    family: str = "linear"
    T: int = 1000
    beta_start: float | None = None
    beta_end: float | None = None
    lam: float = 1e-4
    M: float = 0.55
    signal_power: float = 1.0
    curve_file: str = ""
    # allocation
    aggregate: float = 0.3
    preset: str = ""
    weighting: str = "step"
    plan: str = ""
    # sampling
    sampler: str = "ddim"
    steps: int = 20
    cfg_scale: float = 1.0
    n_samples: int = 16
    # model
    image_size: int = 8
    patch: int = 2
    d_model: int = 64
    n_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    # training
    epochs: int = 30
    batch_size: int = 128
    lr: float = 2e-3
    train_size: int = 8192
    max_steps: int = 0
    # calibration and pruning
    n_calib: int = 1024
    cfg_calib: bool = False
    damping: float = 1e-2
    # evaluation
    n_eval: int = 256
    baseline: str = "none"
    # files and run control
    checkpoint: str = ""
    dense: str = ""
    mosaic: str = ""
    seed: int = 0
    out_dir: str = "."
    workers: int = 1

    def validate(self) -> "RunConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.family in FAMILIES, f"family must be one of {FAMILIES}")
        need(self.T >= 2, "T must be >= 2")
        lo, hi = DEFAULT_BETAS[self.family]
        bs = lo if self.beta_start is None else self.beta_start
        be = hi if self.beta_end is None else self.beta_end
        need(0 < bs <= be < 1, "need 0 < beta_start <= beta_end < 1")
        need(self.lam >= 0, "lambda must be >= 0")
        need(0 < self.M < 1, "M must lie in (0, 1)")
        need(self.signal_power > 0, "signal_power must be > 0")
        need(0 <= self.aggregate < 1, "aggregate must lie in [0, 1)")
        need(self.weighting in WEIGHTINGS[:2], "weighting must be 'uniform' or 'step'")
        if self.preset:
            try:
                lookup_allocation(None, *parse_preset(self.preset))
            except PresetLookupError as exc:
                raise ConfigError(str(exc)) from None
        need(self.sampler in ("ddim", "ddpm"), "sampler must be ddim or ddpm")
        need(1 <= self.steps <= self.T, "steps must lie in 1..T")
        need(self.cfg_scale >= 0, "cfg_scale must be >= 0")
        need(self.d_model % self.n_heads == 0, "d_model must be divisible by n_heads")
        need(self.image_size % self.patch == 0, "image_size must be divisible by patch")
        for name in ("n_samples", "d_model", "n_heads", "depth", "mlp_ratio", "batch_size", "train_size",
                     "n_calib", "n_eval", "workers"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.epochs >= 0 and self.max_steps >= 0, "epochs and max_steps must be >= 0")
        need(self.lr > 0, "lr must be > 0")
        need(self.damping > 0, "damping must be > 0")
        need(self.baseline in ("none", "uniform"), "baseline must be none or uniform")
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        hints = {f.name: f.type for f in dataclasses.fields(cls)}
        updates = {}
        for raw_key, raw in values.items():
            key = ALIASES.get(raw_key, raw_key.replace("-", "_"))
            if key not in hints:
                raise ConfigError(f"unknown config key {raw_key!r}")
            updates[key] = _coerce(key, hints[key], str(raw).strip())
        return dataclasses.replace(base, **updates)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_mapping(parse_kv(text))


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _coerce(key, hint, raw: str):
    hint = str(hint)
    try:
        if hint.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint.startswith("int"):
            return int(raw)
        if hint.startswith("float"):
            if raw.lower() in ("", "none", "default") and "None" in hint:
                return None
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
