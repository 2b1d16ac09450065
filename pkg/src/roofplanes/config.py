"""Run configuration: every tunable in one flat, validated record.

Config files hold ``key = value`` lines; ``#`` starts a comment. Unknown keys
are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional

from .superpoints import GrowthParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # superpoints
    n: int = 100
    # neighborhoods and features
    k_normals: int = 16
    k_features: int = 16
    k_contour: int = 16
    tau: float = math.pi / 2
    # region growing
    t_dist: float = 0.05
    t_norm: float = 0.1
    k_growth: int = 16
    min_region: int = 10
    refit_period: int = 32
    min_width: float = 1.0
    # boundary refinement
    lam: float = 20.0
    k_boundary: int = 10
    local_iters: int = 3
    noise_gate: float = 0.1  # 0 disables NOISE absorption
    # plane completion
    min_points: int = 10
    dist_floor: float = 0.01
    norm_floor: float = 0.02
    # evaluation
    iou_threshold: float = 0.5
    # degradation
    seed: int = 0
    keep_fraction: float = 0.5
    spacing: float = 1.0
    max_shift: float = 0.4
    max_offset: float = 0.5
    swap_radius: float = 0.5
    # batch
    jobs: int = 0  # 0 = all cores

    def validate(self) -> "RunConfig":
        def check(name, ok, what):
            if not ok:
                raise ConfigError(f"invalid {name} = {getattr(self, name)!r}: {what}")

        check("n", self.n >= 2, "must be >= 2")
        check("k_normals", self.k_normals >= 3, "must be >= 3")
        check("k_features", self.k_features >= 3, "must be >= 3")
        check("k_contour", self.k_contour >= 4, "must be >= 4")
        check("tau", 0 < self.tau < 2 * math.pi, "must lie in (0, 2*pi)")
        check("t_dist", self.t_dist > 0, "must be > 0")
        check("t_norm", 0 < self.t_norm <= 1, "must lie in (0, 1]")
        check("k_growth", self.k_growth >= 3, "must be >= 3")
        check("min_region", self.min_region >= 3, "must be >= 3")
        check("refit_period", self.refit_period >= 1, "must be >= 1")
        check("min_width", self.min_width >= 0, "must be >= 0")
        check("lam", self.lam > 1, "must be > 1")
        check("k_boundary", self.k_boundary >= 2, "must be >= 2")
        check("local_iters", self.local_iters >= 1, "must be >= 1")
        check("noise_gate", self.noise_gate >= 0, "must be >= 0")
        check("min_points", self.min_points >= 1, "must be >= 1")
        check("dist_floor", self.dist_floor > 0, "must be > 0")
        check("norm_floor", 0 < self.norm_floor <= 1, "must lie in (0, 1]")
        check("iou_threshold", 0 < self.iou_threshold <= 1, "must lie in (0, 1]")
        check("keep_fraction", 0 < self.keep_fraction <= 1, "must lie in (0, 1]")
        check("spacing", self.spacing > 0, "must be > 0")
        check("max_shift", 0 <= self.max_shift < self.spacing / 2, "must lie in [0, spacing/2)")
        check("max_offset", self.max_offset >= 0, "must be >= 0")
        check("swap_radius", self.swap_radius > 0, "must be > 0")
        check("jobs", self.jobs >= 0, "must be >= 0")
        return self

    def growth_params(self) -> GrowthParams:
        return GrowthParams(self.t_dist, self.t_norm, self.k_growth, self.min_region,
                            self.refit_period, self.min_width)

    def with_overrides(self, overrides: Mapping[str, str]) -> "RunConfig":
        return replace(self, **_coerce(overrides, "override"))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values: Dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls(**_coerce(values, source))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    @classmethod
    def load(cls, path=None, overrides: Optional[Mapping[str, str]] = None) -> "RunConfig":
        cfg = cls.from_file(path) if path else cls()
        if overrides:
            cfg = cfg.with_overrides(overrides)
        return cfg.validate()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(values: Mapping[str, str], source: str) -> dict:
    out = {}
    for key, value in values.items():
        if key not in _TYPES:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        typ = _TYPES[key]
        try:
            out[key] = typ(value) if typ is not int else int(str(value), 10)
        except (TypeError, ValueError):
            raise ConfigError(f"{source}: invalid {typ.__name__} for {key!r}: {value!r}") from None
        if typ is float and not math.isfinite(out[key]):
            raise ConfigError(f"{source}: {key!r} must be finite")
    return out
