import numpy as np
import pytest

from uattr.attribution import ScoreTable, score_pixel_cosine
from uattr.counterfactual import (
    CounterfactualReport,
    CurvePoint,
    EvalContext,
    RandomReferenceCurve,
    equivalent_random_k,
    eval_leave_k,
    group_seeded_queries,
    random_reference,
    random_tables,
    read_curve,
    read_reports,
    summarize,
    synthesize_queries,
    write_curve,
    write_reports,
)
from uattr.datasets import DatasetSpec, PlantedGroup, generate
from uattr.encoder import train_encoder
from uattr.trainer import TrainConfig, train

FAST = TrainConfig(epochs=3, batch_size=16)


@pytest.fixture(scope="module")
def ctx(small_ds, dcfg):
    theta0 = train(small_ds, FAST, dcfg).theta
    return EvalContext(small_ds, theta0, FAST, dcfg, loss_seed=4, loss_stride=10)


@pytest.fixture(scope="module")
def queries(small_ds, ctx, dcfg):
    return group_seeded_queries(small_ds, ctx.theta0, [0, 1], 10, 2, dcfg)


def _tables(small_ds, queries):
    return {q.index: score_pixel_cosine(small_ds, q.example) for q in queries}


def test_queries_are_deterministic(small_ds, ctx, queries, dcfg):
    again = group_seeded_queries(small_ds, ctx.theta0, [0, 1], 10, 2, dcfg)
    for a, b in zip(queries, again):
        assert np.array_equal(a.example.x, b.example.x) and a.eps_seed == b.eps_seed
    assert np.array_equal(queries[0].generate(ctx.theta0, dcfg).astype(np.float32), queries[0].example.x)
    raw = group_seeded_queries(small_ds, ctx.theta0, [0], 0, 2, dcfg)[0]
    assert np.array_equal(raw.example.x, small_ds.by_id(small_ds.group_members(0)[0]).x)
    plain = synthesize_queries(ctx.theta0, [0, 3], 2, dcfg)
    assert [q.example.c for q in plain] == [0, 3]
    with pytest.raises(KeyError):
        group_seeded_queries(small_ds, ctx.theta0, [42], 10, 2, dcfg)


def test_k_zero_is_all_zero(small_ds, ctx, queries):
    for r in eval_leave_k(ctx, _tables(small_ds, queries), 0, queries):
        assert r.delta_loss == 0.0 and r.delta_gen_mse == 0.0 and r.delta_gen_feat == 0.0


def test_leave_k_is_deterministic(small_ds, ctx, queries):
    a = eval_leave_k(ctx, _tables(small_ds, queries), 3, queries)
    b = eval_leave_k(ctx, _tables(small_ds, queries), 3, queries)
    assert [(r.delta_loss, r.delta_gen_mse) for r in a] == [(r.delta_loss, r.delta_gen_mse) for r in b]
    assert all(r.k == 3 and r.method == "pixel_cosine" for r in a)


def test_random_reference_with_one_model(small_ds, ctx, queries):
    curve, reports = random_reference(ctx, [0, 4], 1, queries, seed=8)
    assert [p.k for p in curve.points] == [0, 4]
    assert curve.points[0].mean_delta_loss == 0.0
    tables = {q.index: random_tables(small_ds, 4, 0, 8) for q in queries}
    direct = eval_leave_k(ctx, tables, 4, queries)
    assert curve.points[1].mean_delta_loss == pytest.approx(np.mean([r.delta_loss for r in direct]), rel=1e-12)
    assert len(reports) == 2 * len(queries)
    with pytest.raises(ValueError):
        random_reference(ctx, [4, 0], 1, queries, seed=8)
    with pytest.raises(ValueError):
        random_reference(ctx, [0], 0, queries, seed=8)


def test_checkpoint_cache_is_reused(small_ds, ctx, queries, tmp_path):
    cached = EvalContext(ctx.ds, ctx.theta0, ctx.tcfg, ctx.dcfg, ctx.loss_seed, ctx.loss_stride, checkpoint_dir=tmp_path)
    a = eval_leave_k(cached, _tables(small_ds, queries), 2, queries)
    ckpt = tmp_path / "pixel_cosine_q0_k2" / "checkpoint.bin"
    assert ckpt.exists() and (ckpt.parent / "manifest.json").exists() and (ckpt.parent / "train_log.csv").exists()
    stamp = ckpt.stat().st_mtime_ns
    b = eval_leave_k(cached, _tables(small_ds, queries), 2, queries)
    assert ckpt.stat().st_mtime_ns == stamp
    assert [r.delta_loss for r in a] == [r.delta_loss for r in b]
    # a cache written for a different training config is not trusted
    other = EvalContext(ctx.ds, ctx.theta0, TrainConfig(epochs=2, batch_size=16), ctx.dcfg, 4, 10, checkpoint_dir=tmp_path)
    eval_leave_k(other, _tables(small_ds, queries), 2, queries)
    assert ckpt.stat().st_mtime_ns != stamp


def test_feature_distance_term(small_ds, ctx, queries):
    enc = train_encoder(small_ds.images, small_ds.labels, 4, seed=1, epochs=1)
    with_enc = EvalContext(ctx.ds, ctx.theta0, ctx.tcfg, ctx.dcfg, 4, 10, encoder=enc)
    rs = eval_leave_k(with_enc, _tables(small_ds, queries), 3, queries)
    assert all(0.0 <= r.delta_gen_feat <= 2.0 for r in rs)
    assert any(r.delta_gen_feat > 0 for r in rs)


def test_removing_the_group_beats_random(dcfg):
    ds = generate(DatasetSpec(n=200, planted_groups=(PlantedGroup(0, 0, 10, 0.0),), seed=0))
    tcfg = TrainConfig()
    theta0 = train(ds, tcfg, dcfg).theta
    ctx = EvalContext(ds, theta0, tcfg, dcfg, loss_seed=1, loss_stride=10)
    qs = group_seeded_queries(ds, theta0, [0], 0, 2, dcfg)
    members = ds.group_members(0)
    oracle = ScoreTable("oracle", "", ds.ids, np.isin(ds.ids, members).astype(float))
    hit = eval_leave_k(ctx, {0: oracle}, 10, qs)[0]
    curve, _ = random_reference(ctx, [10], 2, qs, seed=3)
    assert hit.delta_loss > curve.points[0].mean_delta_loss


def _curve(ys, ks=(0, 10, 20, 40)):
    return RandomReferenceCurve([CurvePoint(k, y, 0.0, 0.0) for k, y in zip(ks, ys)], 1)


def test_equivalent_k_interpolation():
    c = _curve([0.0, 0.1, 0.2, 0.6])
    assert equivalent_random_k(c, 0.15) == (15.0, "")
    assert equivalent_random_k(c, 0.4) == (30.0, "")
    assert equivalent_random_k(c, 0.1) == (10.0, "")
    assert equivalent_random_k(c, 0.0) == (0.0, "")
    assert equivalent_random_k(c, 0.9) == (40.0, "above")
    assert equivalent_random_k(c, -0.1) == (0.0, "below")
    with pytest.raises(ValueError):
        equivalent_random_k(_curve([0.0], ks=(0,)), 0.0)


def test_report_and_curve_validation():
    with pytest.raises(ValueError):
        CounterfactualReport(0, "", "m", -1, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        CounterfactualReport(0, "", "m", 1, np.nan, 0.0, 0.0)
    with pytest.raises(ValueError):
        RandomReferenceCurve([CurvePoint(10, 0, 0, 0), CurvePoint(5, 0, 0, 0)], 1)
    with pytest.raises(ValueError):
        RandomReferenceCurve([], 0)
    with pytest.raises(ValueError):
        eval_leave_k(None, {}, -1, [])


def test_summary_and_csv_roundtrip(tmp_path):
    reports = [CounterfactualReport(q, "", "m", 5, 0.1 * (q + 1), 0.01, 0.2) for q in range(3)]
    reports.append(CounterfactualReport(0, "", "random", 5, 0.05, 0.0, 0.0))
    rows = summarize(reports)
    m = next(r for r in rows if r["method"] == "m")
    assert m["n"] == 3 and m["mean_delta_loss"] == pytest.approx(0.2)
    assert m["se_delta_loss"] == pytest.approx(0.1 / np.sqrt(3))
    assert next(r for r in rows if r["method"] == "random")["se_delta_loss"] == 0.0
    write_reports(tmp_path / "r.csv", reports)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "query,method,k,delta_loss,delta_gen_mse,delta_gen_feat"
    back = read_reports(tmp_path / "r.csv")
    assert sorted(r.delta_loss for r in back) == sorted(r.delta_loss for r in reports)
    c = _curve([0.0, 0.1, 0.2, 0.6])
    write_curve(tmp_path / "c.csv", c)
    assert read_curve(tmp_path / "c.csv") == c
