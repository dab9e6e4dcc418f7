"""Unlearning a synthesized image by Fisher-preconditioned loss ascent."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import KV_SEGMENTS, DiffusionConfig, Example, NumericError, ParamVector, loss_gradient
from .fisher import FisherDiagonal, precondition
from .rng import derive_seed, tag


@dataclass(frozen=True)
class UnlearnConfig:
    alpha: float = 0.01
    steps: int = 1
    mask: tuple[str, ...] = KV_SEGMENTS
    stride: int = 10
    region: np.ndarray | None = field(default=None, compare=False)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(self.mask))
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.region is not None:
            r = np.asarray(self.region, dtype=bool)
            if not r.any():
                raise ValueError("region mask has no active pixel")
            object.__setattr__(self, "region", r)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "steps": self.steps,
            "mask": list(self.mask),
            "stride": self.stride,
            "region": None if self.region is None else self.region.astype(int).tolist(),
            "seed": self.seed,
        }


def step_seed(seed: int, step: int) -> int:
    """Noise seed for unlearning step ``step``; step 0 uses ``seed`` itself."""
    return seed if step == 0 else derive_seed(seed, tag("unlearn-step"), step)


def _region(cfg: UnlearnConfig, dcfg: DiffusionConfig):
    if cfg.region is None:
        return None
    if cfg.region.shape != dcfg.image_shape and cfg.region.size != dcfg.image_dim:
        raise ValueError("region mask does not match the image shape")
    return cfg.region.reshape(-1)


def _ascend(theta0: ParamVector, zhat: Example, cfg: UnlearnConfig, dcfg: DiffusionConfig, direction) -> ParamVector:
    if zhat.c >= dcfg.num_classes:
        raise ValueError("query condition out of range")
    region = _region(cfg, dcfg)
    mask = theta0.mask(cfg.mask)
    theta = theta0.values.astype(np.float64)
    for s in range(cfg.steps):
        g = loss_gradient(zhat, theta0.with_values(theta), cfg.stride, step_seed(cfg.seed, s), dcfg, region)
        upd = cfg.alpha * direction(g).values
        upd = np.where(mask, upd, 0.0)
        if not np.all(np.isfinite(upd)):
            worst = max(theta0.names, key=lambda n: np.nanmax(np.abs(np.nan_to_num(upd[theta0.slice(n)], nan=np.inf)), initial=0))
            raise NumericError(f"non-finite update at step {s}", worst)
        theta = theta + upd
    out = theta.astype(np.float32)
    out[~mask] = theta0.values[~mask]
    return theta0.with_values(out)


def unlearn(theta0: ParamVector, F: FisherDiagonal, zhat: Example, cfg: UnlearnConfig, dcfg: DiffusionConfig) -> ParamVector:
    """θ ← θ + α F⁻¹∇L(ẑ, θ) on the masked segments, ``cfg.steps`` times."""
    if [tuple(s) for s in F.layout] != theta0.layout:
        raise ValueError("Fisher and parameter layouts differ")
    return _ascend(theta0, zhat, cfg, dcfg, lambda g: precondition(g, F, cfg.mask))


def unlearn_sgd_baseline(theta0: ParamVector, zhat: Example, cfg: UnlearnConfig, dcfg: DiffusionConfig) -> ParamVector:
    """Same loop with the raw gradient (no Fisher preconditioning)."""
    return _ascend(theta0, zhat, cfg, dcfg, lambda g: g)
