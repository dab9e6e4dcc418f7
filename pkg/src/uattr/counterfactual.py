"""Leave-K-out counterfactual evaluation: retrain without attributed images, measure ΔL and ΔG."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .attribution import ScoreTable, query_hash, score_random, top_k
from .container import array_sha256
from .datasets import Dataset
from .diffusion import DiffusionConfig, Example, ParamVector, sample, strided_loss
from .encoder import ConvEncoder, feature_distance
from .rng import derive_seed, tag
from .trainer import TrainConfig, load_checkpoint, retrain_leave_k, save_checkpoint, write_train_log

log = logging.getLogger(__name__)

QUERY_ID_BASE = 1_000_000_000


@dataclass(frozen=True)
class Query:
    """A synthesized image x̂ with the eps_seed (and optional start image) that produced it.

    With ``init`` set, x̂ = G_θ₀(eps_seed, c) started from ``init`` noised to
    ``t_start`` rather than from pure noise.
    """

    index: int
    example: Example
    eps_seed: int
    group_id: int | None = None
    init: np.ndarray | None = field(default=None, compare=False, repr=False)
    t_start: int | None = None

    @property
    def hash(self) -> str:
        return query_hash(self.example)

    def generate(self, theta: ParamVector, dcfg: DiffusionConfig) -> np.ndarray:
        return sample(theta, self.example.c, self.eps_seed, dcfg, init=self.init, t_start=self.t_start)


def query_seed(seed: int, index: int) -> int:
    return derive_seed(seed, tag("query"), index)


def synthesize_queries(theta0: ParamVector, classes, seed: int, dcfg: DiffusionConfig) -> list[Query]:
    """Plain samples from θ₀, one per class entry."""
    out = []
    for q, c in enumerate(classes):
        s = query_seed(seed, q)
        x = sample(theta0, int(c), s, dcfg).astype(np.float32)
        out.append(Query(q, Example(x, int(c), QUERY_ID_BASE + q), s))
    return out


def group_seeded_queries(ds: Dataset, theta0: ParamVector, group_ids, t_start: int, seed: int,
                         dcfg: DiffusionConfig) -> list[Query]:
    """One query per planted group: the group image re-generated by θ₀ from timestep ``t_start``.

    ``t_start=0`` uses the group image itself as x̂.
    """
    out = []
    for q, g in enumerate(group_ids):
        members = ds.group_members(g)
        if not members:
            raise KeyError(f"no planted group {g}")
        ref = ds.by_id(members[0])
        s = query_seed(seed, q)
        if t_start == 0:
            out.append(Query(q, Example(ref.x.copy(), ref.c, QUERY_ID_BASE + q), s, int(g)))
            continue
        base = np.asarray(ref.x, dtype=np.float32)
        x = sample(theta0, ref.c, s, dcfg, init=base, t_start=t_start).astype(np.float32)
        out.append(Query(q, Example(x, ref.c, QUERY_ID_BASE + q), s, int(g), base, int(t_start)))
    return out


@dataclass
class CounterfactualReport:
    query: int
    query_hash: str
    method: str
    k: int
    delta_loss: float
    delta_gen_mse: float
    delta_gen_feat: float
    checkpoints: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not all(np.isfinite([self.delta_loss, self.delta_gen_mse, self.delta_gen_feat])):
            raise ValueError("report values must be finite")


class CurvePoint(NamedTuple):
    k: int
    mean_delta_loss: float
    se_delta_loss: float
    mean_delta_gen: float
    mean_delta_gen_feat: float = 0.0


@dataclass
class RandomReferenceCurve:
    points: list[CurvePoint]
    models_per_k: int

    def __post_init__(self):
        if self.models_per_k < 1:
            raise ValueError("models_per_k must be >= 1")
        ks = [p.k for p in self.points]
        if ks != sorted(ks):
            raise ValueError("curve points must be sorted by k")


class EquivalentK(NamedTuple):
    k: float
    out_of_range: str  # "", "above" or "below"


@dataclass
class EvalContext:
    """Everything needed to score a leave-K-out model against the base model."""

    ds: Dataset
    theta0: ParamVector
    tcfg: TrainConfig
    dcfg: DiffusionConfig
    loss_seed: int = 0
    loss_stride: int = 1
    encoder: ConvEncoder | None = None
    checkpoint_dir: Path | None = None
    jobs: int = 1
    _base_cache: dict = field(default_factory=dict, repr=False)

    def base_terms(self, q: Query):
        if q.index not in self._base_cache:
            loss = strided_loss(q.example, self.theta0, self.loss_stride, self.loss_seed, self.dcfg)
            img = q.generate(self.theta0, self.dcfg)
            self._base_cache[q.index] = (loss, img)
        return self._base_cache[q.index]

    def measure(self, q: Query, theta_k: ParamVector):
        """(ΔL, ΔG_mse, ΔG_feat) of ``theta_k`` relative to θ₀ for query ``q``."""
        base_loss, base_img = self.base_terms(q)
        dl = strided_loss(q.example, theta_k, self.loss_stride, self.loss_seed, self.dcfg) - base_loss
        img = q.generate(theta_k, self.dcfg)
        mse = float(((img - base_img) ** 2).mean())
        feat = 0.0
        if self.encoder is not None:
            feat = float(feature_distance(self.encoder, base_img[None], img[None])[0])
        return float(dl), mse, feat


def _train_job(args):
    ds, removed, tcfg, dcfg = args
    return retrain_leave_k(ds, removed, tcfg, dcfg)


def _job_path(ctx: EvalContext, name: str) -> Path | None:
    return None if ctx.checkpoint_dir is None else Path(ctx.checkpoint_dir) / name / "checkpoint.bin"


def _expected_provenance(ctx: EvalContext, removed) -> dict:
    return {"base_dataset_digest": ctx.ds.digest(), "removed_ids": sorted(int(i) for i in removed),
            "train": ctx.tcfg.to_dict(), "diffusion": ctx.dcfg.to_dict()}


def retrain_many(ctx: EvalContext, jobs: list[tuple[str, list[int]]]) -> dict[str, ParamVector]:
    """Train (or reload cached) leave-K-out models; keyed by job name."""
    out, todo = {}, []
    for name, removed in jobs:
        if not removed:
            out[name] = ctx.theta0
            continue
        path = _job_path(ctx, name)
        if path is not None and path.exists():
            theta, header = load_checkpoint(path)
            prov = header.get("provenance", {})
            if all(prov.get(k) == v for k, v in _expected_provenance(ctx, removed).items()):
                out[name] = theta
                continue
        todo.append((name, removed))
    args = [(ctx.ds, removed, ctx.tcfg, ctx.dcfg) for _, removed in todo]
    if ctx.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=ctx.jobs) as pool:
            results = list(pool.map(_train_job, args))
    else:
        results = [_train_job(a) for a in args]
    for (name, removed), res in zip(todo, results):
        path = _job_path(ctx, name)
        if path is not None:
            base = array_sha256(ctx.theta0.values)
            sha = save_checkpoint(path, res.theta, {"provenance": res.provenance, "base_hash": base})
            write_train_log(path.parent / "train_log.csv", res.epoch_losses)
            manifest = {"kind": "leave_k", "checkpoint_sha256": sha, "base_hash": base, "provenance": res.provenance}
            (path.parent / "manifest.json").write_text(dumps(manifest) + "\n")
        out[name] = res.theta
        log.info("trained %s (k=%d)", name, len(removed))
    return out


def eval_leave_k(ctx: EvalContext, tables: dict[int, ScoreTable], k: int, queries: list[Query]) -> list[CounterfactualReport]:
    """Retrain without each query's top-k and report ΔL, ΔG_mse, ΔG_feat.

    ``tables`` maps query index to that query's ScoreTable.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    jobs = []
    for q in queries:
        if q.eps_seed is None:
            raise ValueError(f"query {q.index} has no eps_seed")
        st = tables[q.index]
        removed = top_k(st, k) if k > 0 else []
        jobs.append((f"{st.method}_q{q.index}_k{k}", removed))
    models = retrain_many(ctx, jobs)
    reports = []
    for q, (name, _) in zip(queries, jobs):
        dl, mse, feat = ctx.measure(q, models[name])
        reports.append(CounterfactualReport(q.index, q.hash, tables[q.index].method, k, dl, mse, feat,
                                            {"leave_k": name if k > 0 else "base"}))
    return reports


def random_tables(ds: Dataset, k: int, model: int, seed: int) -> ScoreTable:
    return score_random(ds, derive_seed(seed, tag("random-removal"), k, model))


def random_reference(ctx: EvalContext, k_grid, models_per_k: int, queries: list[Query], seed: int):
    """Random-removal curve; each (k, model) removal set is shared by all queries.

    Returns the curve and the underlying per-(query, model) reports.
    """
    k_grid = list(k_grid)
    if k_grid != sorted(k_grid):
        raise ValueError("k_grid must be ascending")
    if models_per_k < 1:
        raise ValueError("models_per_k must be >= 1")
    points, reports = [], []
    for k in k_grid:
        dls, dgs, dfs = [], [], []
        for m in range(models_per_k):
            st = random_tables(ctx.ds, k, m, seed)
            removed = top_k(st, k) if k > 0 else []
            name = f"random_m{m}_k{k}"
            theta_k = retrain_many(ctx, [(name, removed)])[name]
            for q in queries:
                dl, mse, feat = ctx.measure(q, theta_k)
                reports.append(CounterfactualReport(q.index, q.hash, "random", k, dl, mse, feat,
                                                    {"leave_k": name if k > 0 else "base", "model": m}))
                dls.append(dl)
                dgs.append(mse)
                dfs.append(feat)
        se = float(np.std(dls, ddof=1) / np.sqrt(len(dls))) if len(dls) > 1 else 0.0
        points.append(CurvePoint(k, float(np.mean(dls)), se, float(np.mean(dgs)), float(np.mean(dfs))))
    return RandomReferenceCurve(points, models_per_k), reports


def equivalent_random_k(curve: RandomReferenceCurve, delta_loss: float) -> EquivalentK:
    """Invert the random curve by piecewise-linear interpolation of mean ΔL onto k."""
    if len(curve.points) < 2:
        raise ValueError("curve needs at least two points")
    ks = np.array([p.k for p in curve.points], dtype=np.float64)
    ys = np.array([p.mean_delta_loss for p in curve.points], dtype=np.float64)
    if delta_loss > ys.max():
        return EquivalentK(float(ks[int(np.argmax(ys))]), "above")
    if delta_loss < ys.min():
        return EquivalentK(float(ks[int(np.argmin(ys))]), "below")
    for i in range(len(ks) - 1):
        y0, y1 = ys[i], ys[i + 1]
        if delta_loss == y0:
            return EquivalentK(float(ks[i]), "")
        if min(y0, y1) <= delta_loss <= max(y0, y1):
            frac = (delta_loss - y0) / (y1 - y0)
            return EquivalentK(float(ks[i] + frac * (ks[i + 1] - ks[i])), "")
    return EquivalentK(float(ks[-1]), "")


def summarize(reports: list[CounterfactualReport]) -> list[dict]:
    """Mean and standard error per (method, k)."""
    groups: dict[tuple[str, int], list[CounterfactualReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.k), []).append(r)
    rows = []
    for (method, k), rs in sorted(groups.items()):
        dl = np.array([r.delta_loss for r in rs])
        rows.append({
            "method": method,
            "k": k,
            "n": len(rs),
            "mean_delta_loss": float(dl.mean()),
            "se_delta_loss": float(dl.std(ddof=1) / np.sqrt(len(dl))) if len(dl) > 1 else 0.0,
            "mean_delta_gen_mse": float(np.mean([r.delta_gen_mse for r in rs])),
            "mean_delta_gen_feat": float(np.mean([r.delta_gen_feat for r in rs])),
        })
    return rows


REPORT_FIELDS = ["query", "method", "k", "delta_loss", "delta_gen_mse", "delta_gen_feat"]


def write_reports(path, reports: list[CounterfactualReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(REPORT_FIELDS)
        for r in sorted(reports, key=lambda r: (r.method, r.k, r.query, r.checkpoints.get("model", 0))):
            wr.writerow([r.query, r.method, r.k, repr(r.delta_loss), repr(r.delta_gen_mse), repr(r.delta_gen_feat)])


def read_reports(path) -> list[CounterfactualReport]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(CounterfactualReport(int(row["query"]), "", row["method"], int(row["k"]), float(row["delta_loss"]),
                                            float(row["delta_gen_mse"]), float(row["delta_gen_feat"])))
    return out


def write_curve(path, curve: RandomReferenceCurve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["k", "mean_delta_loss", "se_delta_loss", "mean_delta_gen_mse", "mean_delta_gen_feat", "models_per_k"])
        for p in curve.points:
            wr.writerow([p.k, repr(p.mean_delta_loss), repr(p.se_delta_loss), repr(p.mean_delta_gen),
                         repr(p.mean_delta_gen_feat), curve.models_per_k])


def read_curve(path) -> RandomReferenceCurve:
    pts, mpk = [], 1
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            pts.append(CurvePoint(int(row["k"]), float(row["mean_delta_loss"]), float(row["se_delta_loss"]),
                                  float(row["mean_delta_gen_mse"]), float(row["mean_delta_gen_feat"])))
            mpk = int(row["models_per_k"])
    return RandomReferenceCurve(pts, mpk)


def report_to_dict(r: CounterfactualReport) -> dict:
    return asdict(r)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
