import numpy as np
import pytest

from uattr.diffusion import KV_SEGMENTS, Example, NumericError, loss_gradient, strided_loss
from uattr.fisher import FisherDiagonal, precondition
from uattr.unlearn import UnlearnConfig, step_seed, unlearn, unlearn_sgd_baseline


@pytest.fixture(scope="module")
def zhat(small_ds):
    return Example(small_ds.by_id(small_ds.group_members(0)[0]).x.copy(), 0, 10_000)


def test_ascent(small_model, zhat, dcfg):
    theta, F = small_model
    cfg = UnlearnConfig(alpha=1e-4, seed=1)
    th = unlearn(theta, F, zhat, cfg, dcfg)
    assert strided_loss(zhat, th, cfg.stride, 1, dcfg) > strided_loss(zhat, theta, cfg.stride, 1, dcfg)


def test_mask_respect_and_no_mutation(small_model, zhat, dcfg):
    theta, F = small_model
    before = theta.values.copy()
    th = unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-4), dcfg)
    mask = theta.mask(KV_SEGMENTS)
    assert np.array_equal(th.values[~mask], theta.values[~mask])
    assert not np.array_equal(th.values[mask], theta.values[mask])
    assert np.array_equal(theta.values, before)


def test_single_step_direction(small_model, zhat, dcfg):
    theta, F = small_model
    a = 1e-9
    th = unlearn(theta, F, zhat, UnlearnConfig(alpha=a, seed=2), dcfg)
    expect = precondition(loss_gradient(zhat, theta, 10, 2, dcfg), F, KV_SEGMENTS).values
    d = th.values.astype(np.float64) - theta.values
    cos = d @ expect / (np.linalg.norm(d) * np.linalg.norm(expect))
    assert cos > 0.999


def test_full_region_equals_no_region(small_model, zhat, dcfg):
    theta, F = small_model
    a = unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-4), dcfg)
    b = unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-4, region=np.ones((1, 8, 8), dtype=bool)), dcfg)
    assert np.array_equal(a.values, b.values)


def test_region_changes_the_update(small_model, zhat, dcfg):
    theta, F = small_model
    region = np.zeros((1, 8, 8), dtype=bool)
    region[:, :4, :4] = True
    a = unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-4), dcfg)
    b = unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-4, region=region), dcfg)
    assert not np.array_equal(a.values, b.values)


def test_sgd_baseline_definition(small_model, zhat, dcfg):
    theta, _ = small_model
    assert np.array_equal(unlearn_sgd_baseline(theta, zhat, UnlearnConfig(alpha=0.0), dcfg).values, theta.values)
    cfg = UnlearnConfig(alpha=0.05, mask=tuple(theta.names), seed=4)
    g = loss_gradient(zhat, theta, cfg.stride, 4, dcfg).values
    expect = (theta.values.astype(np.float64) + 0.05 * g).astype(np.float32)
    assert np.array_equal(unlearn_sgd_baseline(theta, zhat, cfg, dcfg).values, expect)


def test_multi_step_rekeys_noise(small_model, zhat, dcfg):
    theta, F = small_model
    assert step_seed(7, 0) == 7 and step_seed(7, 1) != step_seed(7, 2)
    one = unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-5, steps=1), dcfg)
    three = unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-5, steps=3), dcfg)
    assert not np.array_equal(one.values, three.values)
    assert np.array_equal(three.values, unlearn(theta, F, zhat, UnlearnConfig(alpha=1e-5, steps=3), dcfg).values)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_errors(small_model, zhat, dcfg):
    theta, F = small_model
    with pytest.raises(ValueError):
        UnlearnConfig(steps=0)
    with pytest.raises(ValueError):
        UnlearnConfig(alpha=-1)
    with pytest.raises(ValueError):
        UnlearnConfig(region=np.zeros((1, 8, 8), dtype=bool))
    with pytest.raises(ValueError):
        unlearn(theta, F, Example(zhat.x, 7, 0), UnlearnConfig(), dcfg)
    bad_layout = FisherDiagonal(np.ones(3), [("w", 0, 3)], 1)
    with pytest.raises(ValueError):
        unlearn(theta, bad_layout, zhat, UnlearnConfig(), dcfg)
    with pytest.raises(NumericError) as exc:
        unlearn_sgd_baseline(theta, zhat, UnlearnConfig(alpha=np.inf), dcfg)
    assert exc.value.segment in KV_SEGMENTS
