"""Per-training-image influence scores and top-K selection."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .diffusion import DiffusionConfig, Example, ParamVector, per_example_gradients, strided_losses, strided_timesteps
from .fisher import FisherDiagonal
from .rng import keyed_bits, keyed_uniform, tag


def query_hash(zhat: Example) -> str:
    h = hashlib.sha256()
    h.update(np.array([zhat.c], dtype="<i8").tobytes())
    h.update(np.asarray(zhat.x, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


@dataclass
class ScoreTable:
    method: str
    query_hash: str
    ids: np.ndarray
    score: np.ndarray
    score_flipped: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=np.float64)
        if self.score_flipped is not None:
            self.score_flipped = np.asarray(self.score_flipped, dtype=np.float64)
        if len(np.unique(self.ids)) != len(self.ids) or self.score.shape != self.ids.shape:
            raise ValueError("every id needs exactly one score")
        if not np.all(np.isfinite(self.final)):
            raise ValueError("scores must be finite")

    @property
    def final(self) -> np.ndarray:
        """Max over the original and flipped orientation when both are present."""
        if self.score_flipped is None:
            return self.score
        return np.maximum(self.score, self.score_flipped)

    @property
    def scores(self) -> dict[int, float]:
        return dict(zip(self.ids.tolist(), self.final.tolist()))

    def __len__(self) -> int:
        return len(self.ids)


def top_k(st: ScoreTable, k: int) -> list[int]:
    """Ids of the k largest final scores; ties go to the smaller id."""
    if not 1 <= k <= len(st):
        raise ValueError(f"k must lie in [1, {len(st)}]")
    order = np.lexsort((st.ids, -st.final))
    return st.ids[order[:k]].tolist()


def _orientations(ds: Dataset, use_flip: bool):
    X = ds.images
    yield X
    if use_flip:
        yield X[..., ::-1]


def score_unlearning(ds: Dataset, theta0: ParamVector, theta_unlearned: ParamVector, stride: int, seed: int,
                     cfg: DiffusionConfig, flip_augment: bool = True, zhat: Example | None = None) -> ScoreTable:
    """τ(z) = L(z, θ₋ẑ) − L(z, θ₀) with both losses sharing noise keys."""
    if not theta0.same_layout(theta_unlearned):
        raise ValueError("checkpoint layouts differ")
    out = []
    for X in _orientations(ds, flip_augment):
        after = strided_losses(X, ds.labels, ds.ids, theta_unlearned, stride, seed, cfg)
        before = strided_losses(X, ds.labels, ds.ids, theta0, stride, seed, cfg)
        out.append(after - before)
    return ScoreTable(
        "unlearning", query_hash(zhat) if zhat is not None else "",
        ds.ids, out[0], out[1] if flip_augment else None,
        {"stride": stride, "seed": seed, "flip_augment": flip_augment},
    )


def score_pixel_cosine(ds: Dataset, zhat: Example, flip_augment: bool = True) -> ScoreTable:
    """Cosine similarity of flattened pixels; zero-norm images score 0."""
    q = np.asarray(zhat.x, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    out = []
    for X in _orientations(ds, flip_augment):
        M = X.reshape(len(ds), -1).astype(np.float64)
        norms = np.linalg.norm(M, axis=1) * qn
        dots = M @ q
        out.append(np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0))
    return ScoreTable("pixel_cosine", query_hash(zhat), ds.ids, out[0], out[1] if flip_augment else None,
                      {"flip_augment": flip_augment})


def sign_projection(seed: int, rows: np.ndarray, ncols: int) -> np.ndarray:
    """±1/sqrt(proj_dim)-free sign matrix rows, keyed by (seed, row, column)."""
    bits = keyed_bits(seed, tag("projection"), np.asarray(rows)[:, None], np.arange(ncols)[None, :])
    return np.where((bits >> np.uint64(63)) == 1, 1.0, -1.0)


def _project(G: np.ndarray, proj_dim: int, seed: int, block: int = 256) -> np.ndarray:
    out = np.empty((G.shape[0], proj_dim))
    for s in range(0, proj_dim, block):
        rows = np.arange(s, min(s + block, proj_dim))
        out[:, rows] = G @ sign_projection(seed, rows, G.shape[1]).T
    return out / np.sqrt(proj_dim)


def _train_gradients(ds: Dataset, theta0: ParamVector, ts, seed: int, cfg: DiffusionConfig, mask: np.ndarray,
                     flip_augment: bool, chunk_rows: int = 512):
    """Masked per-example gradients for every orientation, chunked over examples."""
    step = max(1, chunk_rows // len(ts))
    outs = []
    for X in _orientations(ds, flip_augment):
        parts = []
        for s in range(0, len(ds), step):
            sl = slice(s, s + step)
            g = per_example_gradients(X[sl], ds.labels[sl], ds.ids[sl], theta0, ts, seed, cfg)
            parts.append(g[:, mask])
        outs.append(np.concatenate(parts) if parts else np.zeros((0, int(mask.sum()))))
    return outs


def _influence_scores(ds, theta0, F, gq, ts, proj_dim, seed, cfg, mask, flip_augment):
    """⟨P F^-1/2 g(z), P F^-1/2 g_q⟩ for every orientation (proj_dim 0 = exact)."""
    inv_sqrt = 1.0 / np.sqrt(F.denominator()[mask])
    q = gq[mask] * inv_sqrt
    outs = []
    for G in _train_gradients(ds, theta0, ts, seed, cfg, mask, flip_augment):
        G = G * inv_sqrt
        if proj_dim == 0:
            outs.append(G @ q)
        else:
            both = _project(np.vstack([G, q[None]]), proj_dim, seed)
            outs.append(both[:-1] @ both[-1])
    return outs


def _mask_of(theta0: ParamVector, mask) -> np.ndarray:
    return theta0.mask(theta0.names if mask is None else mask)


def score_influence_projected(ds: Dataset, theta0: ParamVector, F: FisherDiagonal, zhat: Example, proj_dim: int,
                              stride: int, seed: int, cfg: DiffusionConfig, mask=None,
                              flip_augment: bool = True, method: str = "projected_influence") -> ScoreTable:
    """Projected influence ∇L(z)ᵀF⁻¹∇L(ẑ) with strided losses on both sides.

    ``mask`` restricts to parameter segments (default: all); ``proj_dim=0``
    computes the exact inner product.
    """
    if proj_dim < 0:
        raise ValueError("proj_dim must be >= 0")
    ts = strided_timesteps(stride, cfg)
    m = _mask_of(theta0, mask)
    gq = per_example_gradients(zhat.x[None], [zhat.c], [zhat.id], theta0, ts, seed, cfg)[0]
    outs = _influence_scores(ds, theta0, F, gq, ts, proj_dim, seed, cfg, m, flip_augment)
    return ScoreTable(method, query_hash(zhat), ds.ids, outs[0], outs[1] if flip_augment else None,
                      {"proj_dim": proj_dim, "stride": stride, "seed": seed,
                       "mask": None if mask is None else list(mask), "flip_augment": flip_augment})


def score_influence_ensemble(ds: Dataset, members, zhat: Example, proj_dim: int, stride: int, seed: int,
                             cfg: DiffusionConfig, mask=None, flip_augment: bool = True) -> ScoreTable:
    """Mean projected-influence table over independently trained (θ, F) pairs."""
    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one model")
    tabs = [score_influence_projected(ds, th, F, zhat, proj_dim, stride, seed, cfg, mask, flip_augment)
            for th, F in members]
    if len(tabs) == 1:
        return tabs[0]
    score = np.mean([t.score for t in tabs], axis=0)
    flipped = np.mean([t.score_flipped for t in tabs], axis=0) if flip_augment else None
    return ScoreTable(tabs[0].method, tabs[0].query_hash, ds.ids, score, flipped,
                      dict(tabs[0].params, ensemble=len(tabs)))


def score_single_timestep_variant(ds: Dataset, theta0: ParamVector, F: FisherDiagonal, zhat: Example, t_fixed: int,
                                  seed: int, cfg: DiffusionConfig, proj_dim: int = 0, stride: int = 10, mask=None,
                                  flip_augment: bool = True) -> ScoreTable:
    """Influence scores whose query gradient uses timestep ``t_fixed`` only."""
    if not 1 <= t_fixed <= cfg.T:
        raise IndexError(f"t_fixed must lie in [1, {cfg.T}]")
    ts = strided_timesteps(stride, cfg)
    m = _mask_of(theta0, mask)
    gq = per_example_gradients(zhat.x[None], [zhat.c], [zhat.id], theta0, [t_fixed], seed, cfg)[0]
    outs = _influence_scores(ds, theta0, F, gq, ts, proj_dim, seed, cfg, m, flip_augment)
    return ScoreTable("single_timestep", query_hash(zhat), ds.ids, outs[0], outs[1] if flip_augment else None,
                      {"t_fixed": t_fixed, "proj_dim": proj_dim, "stride": stride, "seed": seed,
                       "mask": None if mask is None else list(mask), "flip_augment": flip_augment})


def score_random(ds: Dataset, seed: int, qhash: str = "") -> ScoreTable:
    """Seeded uniform scores; top-K of this table is a uniform random subset."""
    u = keyed_uniform(seed, tag("random-scores"), ds.ids, size=1)[:, 0]
    return ScoreTable("random", qhash, ds.ids, u, None, {"seed": seed})


def save_scores(st: ScoreTable, csv_path, provenance: dict | None = None) -> Path:
    """Write ``id,score,score_flipped,score_final`` plus a JSON sidecar."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    flipped = st.score_flipped if st.score_flipped is not None else [None] * len(st)
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["id", "score", "score_flipped", "score_final"])
        for i, s, sf, fin in zip(st.ids.tolist(), st.score.tolist(), list(flipped), st.final.tolist()):
            wr.writerow([i, repr(s), "" if sf is None else repr(float(sf)), repr(fin)])
    sidecar = {"method": st.method, "query_hash": st.query_hash, "params": st.params, "provenance": provenance or {}}
    side = csv_path.with_suffix(".json")
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return side


def load_scores(csv_path) -> ScoreTable:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    ids, s, sf = [], [], []
    with open(csv_path, newline="") as f:
        for row in csv.DictReader(f):
            ids.append(int(row["id"]))
            s.append(float(row["score"]))
            sf.append(None if row["score_flipped"] == "" else float(row["score_flipped"]))
    flipped = None if any(v is None for v in sf) else np.array(sf)
    return ScoreTable(meta["method"], meta["query_hash"], ids, s, flipped, meta["params"])
