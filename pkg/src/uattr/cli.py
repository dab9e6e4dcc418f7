"""Command-line pipeline: generate, train, fisher, unlearn, attribute, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attribution as attr
from .config import ConfigError, RunConfig, load_config, resolve_root
from .container import IMAGES_MAGIC, canonical_json, file_sha256, read_container, write_container
from .counterfactual import (
    EvalContext,
    Query,
    equivalent_random_k,
    eval_leave_k,
    group_seeded_queries,
    random_reference,
    read_curve,
    read_reports,
    summarize,
    write_curve,
    write_reports,
)
from .datasets import Dataset, generate, ingest_pgm, load_dataset, save_dataset
from .diffusion import Example
from .encoder import ConvEncoder, train_encoder
from .fisher import estimate_fisher, load_fisher, save_fisher, theta_hash
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, write_train_log
from .unlearn import unlearn

log = logging.getLogger("uattr")


class CliError(Exception):
    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind, self.extra = kind, extra

    def to_json(self) -> str:
        return json.dumps({"error": self.kind, "message": str(self), **self.extra}, sort_keys=True)


# -- provenance helpers ------------------------------------------------------

def _h(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def stage_hash(cfg: RunConfig, stage: str) -> str:
    """Hash of every config section that influences ``stage`` (paths excluded)."""
    c, s = cfg.to_dict(), cfg.to_dict()["seeds"]
    parts = {
        "data": lambda: [c["dataset"], s["dataset"]],
        "base": lambda: [stage_hash(cfg, "data"), c["diffusion"], c["train"], s["train"], c["attribution"]["ensemble"]],
        "fisher": lambda: [stage_hash(cfg, "base"), c["fisher"], s["fisher"]],
        "queries": lambda: [stage_hash(cfg, "base"), c["queries"], s["queries"]],
        "unlearned": lambda: [stage_hash(cfg, "fisher"), stage_hash(cfg, "queries"), c["unlearn"], s["unlearn"]],
        "scores": lambda: [stage_hash(cfg, "unlearned"), c["attribution"], s["attribution"]],
        "eval": lambda: [stage_hash(cfg, "scores"), c["eval"], s["eval"], s["encoder"]],
    }
    return _h(parts[stage]())


def rel(cfg: RunConfig, path: Path) -> str:
    return Path(path).resolve().relative_to(cfg.root.resolve()).as_posix()


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def need(cfg: RunConfig, path: Path) -> Path:
    if not Path(path).exists():
        raise CliError("dependency missing", f"expected artifact {rel(cfg, path)} (run the upstream command first)",
                       path=rel(cfg, path))
    return Path(path)


def upstream(cfg: RunConfig, manifest_path: Path, stage: str) -> dict:
    """Load an upstream manifest and verify it matches the config and the files on disk."""
    man = json.loads(need(cfg, manifest_path).read_text())
    if man.get("config_hash") != stage_hash(cfg, stage):
        raise CliError("provenance conflict", f"{rel(cfg, manifest_path)} was built from a different configuration",
                       path=rel(cfg, manifest_path), stage=stage)
    for name, sha in man.get("outputs", {}).items():
        p = need(cfg, cfg.root / name)
        if file_sha256(p) != sha:
            raise CliError("provenance conflict", f"{name} does not match the hash recorded in {rel(cfg, manifest_path)}",
                           path=name)
    return man


def outputs(cfg: RunConfig, paths) -> dict:
    return {rel(cfg, p): file_sha256(p) for p in sorted(paths, key=str)}


def _manifest(cfg: RunConfig, command: str, stage: str, inputs: dict, outs, **extra) -> dict:
    return {"command": command, "config_hash": stage_hash(cfg, stage), "inputs": inputs,
            "outputs": outputs(cfg, outs), **extra}


def _pool_map(fn, args, jobs: int):
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, args))
    return [fn(a) for a in args]


# -- loaders -----------------------------------------------------------------

def _data(cfg):
    man = upstream(cfg, cfg.path("data") / "manifest.json", "data")
    return load_dataset(cfg.path("data")), man


def _base_runs(cfg) -> list[str]:
    return ["base"] + [f"base_e{e}" for e in range(1, cfg.attribution.ensemble)]


def _base(cfg, name="base"):
    man = upstream(cfg, cfg.path("runs") / name / "manifest.json", "base")
    theta, _ = load_checkpoint(cfg.path("runs") / name / "checkpoint.bin")
    return theta, man


def _fisher_path(cfg, name="base") -> Path:
    p = cfg.path("fisher")
    return p if name == "base" else p.with_name(f"{p.stem}_{name}{p.suffix}")


def _fisher(cfg, name="base"):
    man = upstream(cfg, cfg.path("fisher").parent / "manifest.json", "fisher")
    F, _ = load_fisher(need(cfg, _fisher_path(cfg, name)))
    return F, man


def _queries(cfg, ds: Dataset) -> tuple[list[Query], dict]:
    qdir = cfg.path("queries")
    man = upstream(cfg, qdir / "manifest.json", "queries")
    meta = json.loads((qdir / "queries.json").read_text())
    header, payload = read_container(qdir / "images.bin", IMAGES_MAGIC)
    imgs = payload.reshape((header["count"],) + tuple(header["image_shape"]))
    out = []
    for row, x in zip(meta, imgs):
        init = None
        if row["t_start"]:
            init = np.asarray(ds.by_id(ds.group_members(row["group_id"])[0]).x, dtype=np.float32)
        ex = Example(x.copy(), row["class"], row["id"])
        out.append(Query(row["index"], ex, row["eps_seed"], row["group_id"], init, row["t_start"] or None))
    return out, man


def _dcfg(cfg):
    return cfg.diffusion_config()


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> dict:
    d = cfg.dataset
    if d.pgm_dir:
        ds = ingest_pgm(cfg.root / d.pgm_dir, cfg.root / d.pgm_labels, tuple(d.image_shape), d.num_classes)
    else:
        ds = generate(cfg.dataset_spec())
    csv_path, blob = save_dataset(ds, cfg.path("data"))
    man = _manifest(cfg, "generate", "data", {}, [csv_path, blob], dataset_digest=ds.digest(), n=len(ds))
    write_json(cfg.path("data") / "manifest.json", man)
    return {"dataset": rel(cfg, cfg.path("data")), "n": len(ds)}


def _train_job(a):
    ds, tcfg, dcfg = a
    return train(ds, tcfg, dcfg)


def cmd_train(cfg: RunConfig, args) -> dict:
    ds, dman = _data(cfg)
    base_t = cfg.train_config()
    names = _base_runs(cfg)
    tcfgs = [TrainConfig(**dict(base_t.to_dict(), seed=base_t.seed + e)) for e in range(len(names))]
    results = _pool_map(_train_job, [(ds, t, _dcfg(cfg)) for t in tcfgs], args.jobs)
    for name, res in zip(names, results):
        rdir = cfg.path("runs") / name
        ck = rdir / "checkpoint.bin"
        save_checkpoint(ck, res.theta, {"provenance": res.provenance})
        write_train_log(rdir / "train_log.csv", res.epoch_losses)
        man = _manifest(cfg, "train", "base", dman["outputs"], [ck, rdir / "train_log.csv"],
                        provenance=res.provenance, theta_hash=theta_hash(res.theta))
        write_json(rdir / "manifest.json", man)
    return {"runs": names, "final_loss": results[0].epoch_losses[-1]}


def _fisher_job(a):
    ds, theta, draws, seed, dcfg, flip = a
    return estimate_fisher(ds, theta, draws, seed, dcfg, flip)


def cmd_fisher(cfg: RunConfig, args) -> dict:
    ds, _ = _data(cfg)
    draws = cfg.fisher.draws_per_example * len(ds)
    names, thetas, inputs = _base_runs(cfg), [], {}
    for name in names:
        theta, man = _base(cfg, name)
        thetas.append(theta)
        inputs.update(man["outputs"])
    jobs = [(ds, th, draws, cfg.seeds.fisher, _dcfg(cfg), cfg.train.flip_augment) for th in thetas]
    paths = []
    for name, th, F in zip(names, thetas, _pool_map(_fisher_job, jobs, args.jobs)):
        p = _fisher_path(cfg, name)
        save_fisher(p, F, {"theta_hash": theta_hash(th), "seed": cfg.seeds.fisher, "run": name})
        paths.append(p)
    write_json(cfg.path("fisher").parent / "manifest.json",
               _manifest(cfg, "fisher", "fisher", inputs, paths, draws=draws))
    return {"draws": draws, "files": [rel(cfg, p) for p in paths]}


def _write_queries(cfg, queries: list[Query], inputs: dict) -> None:
    qdir = cfg.path("queries")
    meta = [{"index": q.index, "id": q.example.id, "class": q.example.c, "eps_seed": q.eps_seed,
             "group_id": q.group_id, "t_start": q.t_start or 0, "hash": q.hash} for q in queries]
    write_json(qdir / "queries.json", meta)
    imgs = np.stack([q.example.x for q in queries]) if queries else np.zeros((0,) + tuple(cfg.dataset.image_shape))
    write_container(qdir / "images.bin", IMAGES_MAGIC,
                    {"kind": "queries", "count": len(queries), "image_shape": list(cfg.dataset.image_shape)},
                    imgs.reshape(-1))
    write_json(qdir / "manifest.json",
               _manifest(cfg, "unlearn", "queries", inputs, [qdir / "queries.json", qdir / "images.bin"]))


def _unlearn_job(a):
    theta, F, zhat, ucfg, dcfg = a
    return unlearn(theta, F, zhat, ucfg, dcfg)


def cmd_unlearn(cfg: RunConfig, args) -> dict:
    ds, _ = _data(cfg)
    theta, bman = _base(cfg)
    F, fman = _fisher(cfg)
    dcfg = _dcfg(cfg)
    queries = group_seeded_queries(ds, theta, cfg.queries.groups, cfg.queries.t_start, cfg.seeds.queries, dcfg)
    _write_queries(cfg, queries, bman["outputs"])
    queries, qman = _queries(cfg, ds)
    ucfg = cfg.unlearn_config(len(ds))
    results = _pool_map(_unlearn_job, [(theta, F, q.example, ucfg, dcfg) for q in queries], args.jobs)
    udir, paths = cfg.path("unlearned"), []
    for q, th in zip(queries, results):
        p = udir / f"q{q.index:02d}.bin"
        prov = {"base_hash": theta_hash(theta), "query_hash": q.hash, "unlearn": ucfg.to_dict(),
                "alpha_config": cfg.unlearn.alpha, "scale_by_n": cfg.unlearn.scale_by_n, "n_train": len(ds)}
        save_checkpoint(p, th, {"kind": "unlearned", "provenance": prov})
        paths.append(p)
    inputs = {**bman["outputs"], **fman["outputs"], **qman["outputs"]}
    write_json(udir / "manifest.json", _manifest(cfg, "unlearn", "unlearned", inputs, paths,
                                                 effective_alpha=ucfg.alpha))
    return {"queries": len(queries), "effective_alpha": ucfg.alpha}


def _score_job(a):
    method, ds, theta, F_or_members, theta_u, q, cfg = a
    at, dcfg, seed = cfg.attribution, cfg.diffusion_config(), cfg.seeds.attribution
    zhat = q.example
    if method == "unlearning":
        return attr.score_unlearning(ds, theta, theta_u, at.stride, seed, dcfg, at.flip_augment, zhat)
    if method == "pixel_cosine":
        return attr.score_pixel_cosine(ds, zhat, at.flip_augment)
    if method == "projected_influence":
        return attr.score_influence_ensemble(ds, F_or_members, zhat, at.proj_dim, at.stride, seed, dcfg,
                                             at.influence_mask, at.flip_augment)
    if method == "single_timestep":
        F = F_or_members[0][1]
        return attr.score_single_timestep_variant(ds, theta, F, zhat, at.t_fixed, seed, dcfg, at.proj_dim, at.stride,
                                                  at.influence_mask, at.flip_augment)
    raise ValueError(method)


def cmd_attribute(cfg: RunConfig, args) -> dict:
    ds, _ = _data(cfg)
    theta, bman = _base(cfg)
    queries, qman = _queries(cfg, ds)
    uman = upstream(cfg, cfg.path("unlearned") / "manifest.json", "unlearned")
    members = []
    for name in _base_runs(cfg):
        th, _ = _base(cfg, name)
        F, fman = _fisher(cfg, name)
        members.append((th, F))
    jobs, where = [], []
    for method in cfg.attribution.methods:
        for q in queries:
            th_u = None
            if method == "unlearning":
                th_u, _ = load_checkpoint(need(cfg, cfg.path("unlearned") / f"q{q.index:02d}.bin"))
            jobs.append((method, ds, theta, members, th_u, q, cfg))
            where.append(cfg.path("scores") / method / f"q{q.index:02d}.csv")
    tables = _pool_map(_score_job, jobs, args.jobs)
    inputs = {**bman["outputs"], **fman["outputs"], **qman["outputs"], **uman["outputs"]}
    paths = []
    for p, st in zip(where, tables):
        side = attr.save_scores(st, p, {"inputs": inputs, "config_hash": stage_hash(cfg, "scores")})
        paths += [p, side]
    write_json(cfg.path("scores") / "manifest.json", _manifest(cfg, "attribute", "scores", inputs, paths))
    return {"tables": len(tables), "methods": list(cfg.attribution.methods)}


def _encoder(cfg, ds) -> tuple[ConvEncoder, Path]:
    p = cfg.path("eval") / "encoder.bin"
    enc = train_encoder(ds.images, ds.labels, ds.spec.num_classes, cfg.seeds.encoder, epochs=cfg.eval.encoder_epochs)
    enc.save(p, {"seed": cfg.seeds.encoder, "epochs": cfg.eval.encoder_epochs})
    return ConvEncoder.load(p), p


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    ds, _ = _data(cfg)
    theta, bman = _base(cfg)
    queries, _ = _queries(cfg, ds)
    sman = upstream(cfg, cfg.path("scores") / "manifest.json", "scores")
    enc, enc_path = _encoder(cfg, ds)
    ctx = EvalContext(ds, theta, cfg.train_config(), _dcfg(cfg), loss_seed=cfg.seeds.eval,
                      loss_stride=cfg.eval.loss_stride, encoder=enc, checkpoint_dir=cfg.path("runs"), jobs=args.jobs)
    tables = {}
    for method in cfg.eval.methods:
        tables[method] = {q.index: attr.load_scores(need(cfg, cfg.path("scores") / method / f"q{q.index:02d}.csv"))
                          for q in queries}
    edir = cfg.path("eval")
    job_list = [{"method": m, "k": k, "query": q.index} for m in cfg.eval.methods for k in cfg.eval.k_grid
                for q in queries]
    job_list += [{"method": "random", "k": k, "model": m} for k in cfg.eval.k_grid for m in range(cfg.eval.models_per_k)]
    write_json(edir / "jobs.json", job_list)
    reports = []
    for method in cfg.eval.methods:
        for k in cfg.eval.k_grid:
            reports += eval_leave_k(ctx, tables[method], k, queries)
            log.info("evaluated %s k=%d", method, k)
    curve, rand_reports = random_reference(ctx, [0] + list(cfg.eval.k_grid), cfg.eval.models_per_k, queries,
                                           cfg.seeds.eval)
    write_reports(edir / "reports.csv", reports)
    write_reports(edir / "random_reports.csv", rand_reports)
    write_curve(edir / "random_curve.csv", curve)
    eq_rows = _equivalent_rows(summarize(reports), curve)
    _write_rows(edir / "equivalent_k.csv", eq_rows, ["method", "k", "mean_delta_loss", "equivalent_k", "out_of_range"])
    outs = [edir / n for n in ("reports.csv", "random_reports.csv", "random_curve.csv", "equivalent_k.csv",
                               "jobs.json", "encoder.bin")]
    write_json(edir / "manifest.json", _manifest(cfg, "evaluate", "eval", {**bman["outputs"], **sman["outputs"]}, outs))
    return {"reports": len(reports), "random_reports": len(rand_reports)}


def _equivalent_rows(summary, curve) -> list[dict]:
    rows = []
    for r in summary:
        if r["method"] == "random":
            continue
        eq = equivalent_random_k(curve, r["mean_delta_loss"])
        rows.append({"method": r["method"], "k": r["k"], "mean_delta_loss": r["mean_delta_loss"],
                     "equivalent_k": eq.k, "out_of_range": eq.out_of_range})
    return rows


def _write_rows(path: Path, rows, fields) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fields, lineterminator="\n", extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _fmt(v) -> str:
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def _md_table(rows, fields) -> list[str]:
    out = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    out += ["| " + " | ".join(_fmt(r[f]) for f in fields) + " |" for r in rows]
    return out


def cmd_report(cfg: RunConfig, args) -> dict:
    from . import plotting

    edir, rdir = cfg.path("eval"), cfg.path("report")
    eman = upstream(cfg, edir / "manifest.json", "eval")
    reports = read_reports(need(cfg, edir / "reports.csv"))
    rand = read_reports(need(cfg, edir / "random_reports.csv"))
    curve = read_curve(need(cfg, edir / "random_curve.csv"))
    summary = summarize(reports + rand)
    eq_rows = _equivalent_rows(summary, curve)
    fields = ["method", "k", "n", "mean_delta_loss", "se_delta_loss", "mean_delta_gen_mse", "mean_delta_gen_feat"]
    _write_rows(rdir / "summary.csv", summary, fields)
    figs = [
        plotting.plot_delta_loss(summarize(reports), curve, rdir / "delta_loss.svg"),
        plotting.plot_equivalent_k(eq_rows, rdir / "equivalent_k.svg"),
        plotting.plot_delta_gen(summary, rdir / "delta_gen_mse.svg"),
        plotting.plot_delta_gen(summary, rdir / "delta_gen_feat.svg", "mean_delta_gen_feat",
                                "mean ΔG (encoder 1 − cosine)"),
    ]
    lines = ["# Attribution evaluation summary", "",
             f"Queries: {len({r.query for r in reports})}; random models per k: {curve.models_per_k}.", "",
             "## Leave-K-out loss and generation change", ""]
    lines += _md_table(summary, fields)
    lines += ["", "## Equivalent number of random removals", ""]
    lines += _md_table(eq_rows, ["method", "k", "mean_delta_loss", "equivalent_k", "out_of_range"])
    kmax = max((r.k for r in reports), default=None)
    by = {(r.method, r.query): r.delta_loss for r in reports if r.k == kmax}
    if ("unlearning" in {m for m, _ in by}) and ("projected_influence" in {m for m, _ in by}):
        qs = sorted({q for m, q in by if m == "unlearning"})
        wins = np.mean([by[("unlearning", q)] > by[("projected_influence", q)] for q in qs])
        lines += ["", f"Unlearning beats projected influence at k={kmax} on {wins:.0%} of queries."]
    lines += ["", "## Figures", ""] + [f"![{p.stem}]({p.name})" for p in figs]
    md = rdir / "summary.md"
    md.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_json(rdir / "manifest.json", _manifest(cfg, "report", "eval", eman["outputs"], [md, rdir / "summary.csv", *figs]))
    return {"report": rel(cfg, md)}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "fisher": cmd_fisher,
    "unlearn": cmd_unlearn,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", help="workspace root (default: $UATTR_WORKSPACE)")
    common.add_argument("--config", help="run config JSON (default: <workspace>/config.json if present)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="uattr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "all"):
        sub.add_parser(name, parents=[common], help="run every stage in order" if name == "all" else f"{name} stage")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise CliError("invalid arguments", "--jobs must be >= 1")
        root = resolve_root(args.workspace)
        cfg_path = args.config
        if cfg_path is None and (root / "config.json").exists():
            cfg_path = root / "config.json"
        cfg = load_config(cfg_path, args.overrides, root)
        names = list(COMMANDS) if args.command == "all" else [args.command]
        for name in names:
            result = COMMANDS[name](cfg, args)
            print(json.dumps({"command": name, "status": "ok", **result}, sort_keys=True))
    except CliError as exc:
        print(exc.to_json(), file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(json.dumps({"error": "invalid config", "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 2
    except (ValueError, KeyError, IndexError, ArithmeticError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
