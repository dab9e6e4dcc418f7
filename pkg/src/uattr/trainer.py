"""Deterministic from-scratch training of the denoiser (base and leave-K-out models)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import CHECKPOINT_MAGIC, read_container, write_container
from .datasets import Dataset, leave_out
from .diffusion import DenoiserSpec, DiffusionConfig, NumericError, ParamVector, _backward, _batch_losses, _flatten, _region_weights, init_params
from .rng import keyed_integers, keyed_normal, keyed_uniform, tag

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    flip_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    theta: ParamVector
    epoch_losses: list[float]
    provenance: dict = field(default_factory=dict)


def epoch_batches(all_ids: np.ndarray, seed: int, epoch: int, batch_size: int) -> list[np.ndarray]:
    """Batches over the full id space; order depends on (seed, epoch, id) only."""
    u = keyed_uniform(seed, tag("shuffle"), epoch, all_ids, size=1)[:, 0]
    order = all_ids[np.argsort(u, kind="stable")]
    return [order[s : s + batch_size] for s in range(0, len(order), batch_size)]


def train(ds: Dataset, tcfg: TrainConfig, dcfg: DiffusionConfig, removed=()) -> TrainResult:
    """Train from scratch on ``ds``.

    The schedule is laid out over ids ``0..spec.n-1`` so that removing examples
    only shrinks the batches they belonged to; every other example keeps its
    batch slot, timestep, noise and flip draw.
    """
    if len(ds) == 0:
        raise TrainingError("cannot train on an empty dataset")
    spec = DenoiserSpec.for_config(dcfg)
    theta = init_params(dcfg, tcfg.seed).values.astype(np.float32)
    velocity = np.zeros_like(theta, dtype=np.float64)
    layout = spec.layout()

    pos = {int(i): k for k, i in enumerate(ds.ids)}
    X = ds.images.reshape(len(ds), -1).astype(np.float64)
    Xf = ds.images[..., ::-1].reshape(len(ds), -1).astype(np.float64)
    C = ds.labels
    all_ids = np.arange(max(ds.spec.n, int(ds.ids.max()) + 1), dtype=np.int64)
    w = _region_weights(None, dcfg.image_dim)

    epoch_losses = []
    for epoch in range(tcfg.epochs):
        total, count = 0.0, 0
        for b, batch in enumerate(epoch_batches(all_ids, tcfg.seed, epoch, tcfg.batch_size)):
            live = np.array([i for i in batch if int(i) in pos], dtype=np.int64)
            if live.size == 0:
                continue
            rows = np.array([pos[int(i)] for i in live])
            t = 1 + keyed_integers(tcfg.seed, tag("train-t"), epoch, live, high=dcfg.T)
            eps = keyed_normal(tcfg.seed, tag("train-eps"), epoch, live, size=dcfg.image_dim)
            x = X[rows]
            if tcfg.flip_augment:
                flips = keyed_integers(tcfg.seed, tag("train-flip"), epoch, live, high=2).astype(bool)
                x = np.where(flips[:, None], Xf[rows], x)
            p = spec.unpack(ParamVector(theta, layout))
            try:
                losses, g = _batch_losses(p, spec, dcfg, x, C[rows], t, eps, w, want_grad=True,
                                          row_weights=np.full(len(live), 1.0 / len(live)))
            except NumericError as exc:
                raise TrainingError(f"divergence at epoch {epoch}, batch {b}: {exc}") from exc
            grad = _flatten(g, spec, per_example=False)
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {b}")
            velocity = tcfg.momentum * velocity + grad
            theta = (theta - tcfg.learning_rate * velocity).astype(np.float32)
            total += float(losses.sum())
            count += len(live)
        mean = total / count
        if not np.isfinite(mean):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        epoch_losses.append(mean)
        log.debug("epoch %d loss %.5f", epoch, mean)
    removed = sorted(int(i) for i in removed)
    prov = {
        "dataset_digest": ds.digest(),
        "removed_ids": removed,
        "k": len(removed),
        "n_train": len(ds),
        "train": tcfg.to_dict(),
        "diffusion": dcfg.to_dict(),
    }
    return TrainResult(ParamVector(theta, layout), epoch_losses, prov)


def retrain_leave_k(ds: Dataset, removed, tcfg: TrainConfig, dcfg: DiffusionConfig) -> TrainResult:
    """Leave-K-out model: drop ``removed`` then train from scratch."""
    removed = sorted({int(i) for i in removed})
    res = train(leave_out(ds, removed), tcfg, dcfg, removed=removed)
    res.provenance["base_dataset_digest"] = ds.digest()
    return res


def save_checkpoint(path, theta: ParamVector, header: dict) -> str:
    header = dict(header, kind=header.get("kind", "checkpoint"), layout=[list(s) for s in theta.layout])
    return write_container(path, CHECKPOINT_MAGIC, header, theta.values)


def load_checkpoint(path) -> tuple[ParamVector, dict]:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    layout = [tuple(s) for s in header["layout"]]
    return ParamVector(payload, layout), header


def write_train_log(path, epoch_losses) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,mean_loss"] + [f"{e},{l:.10g}" for e, l in enumerate(epoch_losses)]
    path.write_text("\n".join(lines) + "\n")
