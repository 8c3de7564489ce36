from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import DomainError
from .gaussians import OptimConfig
from .mesh import DEFAULT_TAU
from .recon import KEYFRAME_STRIDE
from .routes import RouteParams


@dataclass(frozen=True)
class PipelineConfig:
    width: int = 1024
    height: int = 512
    tau: float = DEFAULT_TAU
    keyframe_stride: int = KEYFRAME_STRIDE
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    route: RouteParams = field(default_factory=RouteParams)
    seed: int = 0

    def __post_init__(self):
        if self.width != 2 * self.height or self.height < 2:
            raise DomainError(f"resolution must satisfy W = 2H >= 4, got {self.width}x{self.height}")
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if self.keyframe_stride < 1:
            raise DomainError("keyframe stride must be >= 1")
        if self.optimizer.iters < 0 or not self.optimizer.lr > 0:
            raise DomainError("optimizer needs iters >= 0 and lr > 0")
        r = self.route
        if not (r.min_len >= 0 and r.n_frames >= 2 and 0 < r.lam <= 1 and r.iters >= 0):
            raise DomainError("route parameters out of range")
        if not (r.step > 0 and r.margin >= 0 and r.max_attempts >= 1):
            raise DomainError("route parameters out of range")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        if "optimizer" in data:
            data["optimizer"] = OptimConfig(**data["optimizer"])
        if "route" in data:
            data["route"] = RouteParams(**data["route"])
        return cls(**data)
