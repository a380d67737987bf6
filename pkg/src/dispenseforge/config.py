"""Run configuration: a flat ``key=value`` text file.

Every field of :class:`Config` is a recognised key; ``default.cfg`` shipped
with the package lists them all with their defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class Config:
    # grid
    width_cells: int = 64
    height_cells: int = 64
    cell_size: float = 1.0
    gap_height: float = 1.0
    # geometry
    min_path_length: float = 0.5
    # flow oracle
    deposit_step_fraction: float = 0.25
    nozzle_radius: float = 1.0
    compress_tol: float = 1e-7
    compress_max_iters: int = 50000
    occupancy_threshold: float = 0.5
    # quality objective
    w_coverage: float = 1.0
    w_overflow: float = 1.0
    w_void: float = 4.0
    penalty_max: float = 6.0
    # soft rasterizer
    sigma: float = 1.5
    sigma_decay: float = 0.9
    sigma_decay_every: int = 10
    sigma_min: float = 0.75
    # datagen
    n_areas: int = 5000
    area_min_fraction: float = 0.15
    area_max_fraction: float = 0.70
    max_notches: int = 4
    template_prob: float = 0.5
    chamfer: bool = False
    recipe_attempts: int = 100
    path_bbox_prob: float = 0.7
    mirror_augment: bool = False
    rotate_augment: bool = False
    # training
    surrogate_epochs: int = 50
    process_epochs: int = 100
    patience: int = 15
    learning_rate: float = 0.000574
    batch_size: int = 8
    surrogate_learning_rate: float = 0.001
    surrogate_batch_size: int = 16
    oracle_every: int = 5
    oracle_val_areas: int = 64
    # refinement
    refine_steps: int = 200
    refine_learning_rate: float = 0.05
    # runtime
    threads: int = 1
    timing_in_logs: bool = False

    @property
    def grid(self):
        from .geometry import GridSpec

        return GridSpec(self.width_cells, self.height_cells, self.cell_size, self.gap_height)

    @property
    def weights(self):
        return (self.w_coverage, self.w_overflow, self.w_void)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(raw: str, kind, line: int):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {getattr(kind, '__name__', kind)}", line) from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    base = base or Config()
    kinds = {f.name: f.type for f in fields(Config)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r}", lineno)
        changes[key] = _parse_value(raw, kinds[key], lineno)
    cfg = dataclasses.replace(base, **changes)
    try:
        cfg.grid
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def default_config_text() -> str:
    return resources.files("dispenseforge").joinpath("default.cfg").read_text(encoding="utf-8")
