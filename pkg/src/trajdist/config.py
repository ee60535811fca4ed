"""Experiment configuration and the flat key=value config-file format.

Config files hold one `key = value` pair per line (# comments allowed).
Keys map one-to-one onto ExperimentConfig / BenchmarkConfig fields; unknown
keys are errors. The TRAJDIST_OUT environment variable, when set, overrides
the output directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ValidationError
from .taxdata import BenchmarkConfig

OUT_DIR_ENV = "TRAJDIST_OUT"

VARIANTS = (
    "full",
    "sup_only",
    "multi_task",
    "no_cross_domain",
    "no_cross_class",
    "no_historical",
    "no_projection",
)


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    variant: str = "full"
    lam: float = 1.0
    kappa: float = 100.0
    tau: float = 0.98
    buffer_k: int = 16
    buffer_t: int = 16
    eta: float = 0.05
    lr_decay_factor: float = 1.0
    lr_decay_at: float = 0.6
    iterations: int = 2000
    batch_size: int = 16
    hidden_dims: tuple[int, ...] = (32, 32)
    support_fraction: float = 0.5
    new_class_weight: float = 1.0
    penalty_clip_ratio: float = 1.0
    pseudo_threshold: float = 0.0
    pseudo_warmup: int = 300
    pseudo_balance: bool = True
    pseudo_sinkhorn: int = 3
    pseudo_erm_weight: float = 1.0
    pseudo_anchor_only: bool = False
    seed: int = 0
    data_seed: int | None = None
    out_dir: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )
        if not (0.0 < self.tau <= 1.0):
            raise ValidationError("tau must be in (0, 1]")
        if self.lam < 0.0:
            raise ValidationError("lambda must be >= 0")
        if self.kappa <= 0.0:
            raise ValidationError("kappa must be > 0")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be >= 1")
        if not (0.0 <= self.support_fraction <= 1.0):
            raise ValidationError("support_fraction must be in [0, 1]")

    def resolved_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def resolved_benchmark(self) -> BenchmarkConfig:
        return replace(self.benchmark, seed=self.resolved_data_seed())

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV, self.out_dir))


# Config-file key -> (owner, field name). "lambda" is the file-facing
# spelling of the penalty weight.
_BENCH_KEYS = {
    f.name: f for f in fields(BenchmarkConfig) if f.name != "seed"
}
_EXP_KEYS = {
    f.name: f for f in fields(ExperimentConfig) if f.name not in ("benchmark", "lam")
}
_ALIASES = {"lambda": "lam"}


def _parse_value(raw: str, typ: str):
    raw = raw.strip()
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    if typ == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"expected boolean, got {raw!r}")
    if typ == "tuple[int, ...]":
        if not raw:
            return ()
        return tuple(int(t) for t in raw.split(","))
    if typ == "int | None":
        return None if raw.lower() == "none" else int(raw)
    return raw


def parse_config_text(text: str) -> ExperimentConfig:
    bench_kwargs: dict = {}
    exp_kwargs: dict = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in seen:
            raise ValidationError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key == "lam":
            exp_kwargs["lam"] = float(raw)
        elif key in _BENCH_KEYS:
            bench_kwargs[key] = _parse_value(raw, str(_BENCH_KEYS[key].type))
        elif key in _EXP_KEYS:
            exp_kwargs[key] = _parse_value(raw, str(_EXP_KEYS[key].type))
        else:
            raise ValidationError(f"line {lineno}: unknown config key {key!r}")
    return ExperimentConfig(benchmark=BenchmarkConfig(**bench_kwargs), **exp_kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def config_to_text(config: ExperimentConfig) -> str:
    """Serialize a config in the flat file format (round-trips via parse)."""
    lines = []
    for f in fields(BenchmarkConfig):
        if f.name == "seed":
            continue
        lines.append(f"{f.name} = {getattr(config.benchmark, f.name)}")
    for f in fields(ExperimentConfig):
        if f.name == "benchmark":
            continue
        name = "lambda" if f.name == "lam" else f.name
        val = getattr(config, f.name)
        if f.name == "hidden_dims":
            val = ",".join(str(v) for v in val)
        lines.append(f"{name} = {val}")
    return "\n".join(lines) + "\n"
