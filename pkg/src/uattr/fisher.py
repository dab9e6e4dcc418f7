"""Diagonal Fisher information of the training loss and its damped inverse."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import FISHER_MAGIC, array_sha256, read_container, write_container
from .datasets import Dataset
from .diffusion import DiffusionConfig, NumericError, ParamVector, row_gradients
from .rng import keyed_integers, keyed_normal, tag

CHUNK = 256
DAMPING = 1e-8
# absolute floor so an all-zero Fisher still inverts to finite values
_ABS_FLOOR = 1e-30


@dataclass
class FisherDiagonal:
    values: np.ndarray
    layout: list
    sample_count: int
    damping: float = DAMPING

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("Fisher values must be finite and nonnegative")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.damping <= 0:
            raise ValueError("damping must be > 0")

    def as_params(self) -> ParamVector:
        return ParamVector(self.values, self.layout)

    def denominator(self) -> np.ndarray:
        """F + λ·mean(F), floored to stay invertible."""
        return self.values + max(self.damping * float(self.values.mean()), _ABS_FLOOR)


def _tree_sum(parts: list[np.ndarray]) -> np.ndarray:
    """Pairwise reduction in a fixed order (bit-stable for a given chunk count)."""
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def fisher_draws(ds: Dataset, draw_index: np.ndarray, seed: int, cfg: DiffusionConfig, flip_augment: bool = True):
    """Rows (x, c, t, eps) for the given draw indices.

    Draws pick from the id-sorted example list, so the estimate does not
    depend on the order of ``ds.examples``.
    """
    order = np.argsort(ds.ids, kind="stable")
    X = ds.images.reshape(len(ds), -1)[order].astype(np.float64)
    C = ds.labels[order]
    pick = keyed_integers(seed, tag("fisher-example"), draw_index, high=len(ds))
    x = X[pick]
    if flip_augment:
        flips = keyed_integers(seed, tag("fisher-flip"), draw_index, high=2).astype(bool)
        xf = ds.images[..., ::-1].reshape(len(ds), -1)[order][pick].astype(np.float64)
        x = np.where(flips[:, None], xf, x)
    t = 1 + keyed_integers(seed, tag("fisher-t"), draw_index, high=cfg.T)
    eps = keyed_normal(seed, tag("fisher-eps"), draw_index, size=cfg.image_dim)
    return x, C[pick], t, eps


def estimate_fisher(ds: Dataset, theta0: ParamVector, draws: int, seed: int, cfg: DiffusionConfig,
                    flip_augment: bool = True, draw_offset: int = 0, grad_fn=None) -> FisherDiagonal:
    """Mean squared per-draw gradient; each draw samples (example, timestep, noise).

    ``grad_fn(theta, x, c, t, eps)`` replaces the denoiser gradient (used by
    tests with closed-form models).
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    grad_fn = grad_fn or (lambda th, x, c, t, e: row_gradients(th, x, c, t, e, cfg))
    sums = []
    for start in range(draw_offset, draw_offset + draws, CHUNK):
        idx = np.arange(start, min(start + CHUNK, draw_offset + draws), dtype=np.int64)
        x, c, t, eps = fisher_draws(ds, idx, seed, cfg, flip_augment)
        g = np.asarray(grad_fn(theta0, x, c, t, eps), dtype=np.float64)
        bad = ~np.all(np.isfinite(g), axis=1)
        if bad.any():
            raise NumericError(f"non-finite gradient in Fisher draw {int(idx[np.argmax(bad)])}")
        sums.append((g * g).sum(axis=0))
    values = _tree_sum(sums) / draws
    return FisherDiagonal(values, theta0.layout, draws)


def precondition(g: ParamVector, F: FisherDiagonal, mask) -> ParamVector:
    """g / (F + λ·mean F) on the masked segments, zero elsewhere."""
    if g.layout != [tuple(s) for s in F.layout]:
        raise ValueError("gradient and Fisher layouts differ")
    m = g.mask(mask)
    out = np.where(m, np.asarray(g.values, dtype=np.float64) / F.denominator(), 0.0)
    return g.with_values(out)


def save_fisher(path, F: FisherDiagonal, provenance: dict) -> str:
    header = dict(
        provenance,
        kind="fisher",
        sample_count=F.sample_count,
        damping=F.damping,
        layout=[list(s) for s in F.layout],
    )
    return write_container(path, FISHER_MAGIC, header, F.values)


def load_fisher(path) -> tuple[FisherDiagonal, dict]:
    header, payload = read_container(path, FISHER_MAGIC)
    layout = [tuple(s) for s in header["layout"]]
    return FisherDiagonal(payload.astype(np.float64), layout, header["sample_count"], header["damping"]), header


def theta_hash(theta: ParamVector) -> str:
    return array_sha256(theta.values)
