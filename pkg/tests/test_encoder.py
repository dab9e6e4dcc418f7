import numpy as np
import pytest

from uattr.datasets import DatasetSpec, generate, leave_out
from uattr.encoder import ConvEncoder, _col2im, _im2col, feature_distance, train_encoder


def test_col2im_is_the_adjoint_of_im2col(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    d = rng.normal(size=(2, 8, 8, 27))
    assert np.sum(_im2col(x) * d) == pytest.approx(np.sum(x * _col2im(d, 3)), rel=1e-12)


def test_gradients_match_central_differences(rng):
    enc = ConvEncoder.init((1, 8, 8), 4, seed=2)
    x = rng.uniform(-1, 1, size=(5, 1, 8, 8))
    y = np.array([0, 1, 2, 3, 1])
    _, g = enc._grads(x, y)
    for name in ConvEncoder._names:
        arr = getattr(enc, name)
        for idx in list(np.ndindex(arr.shape))[:: max(1, arr.size // 4)][:4]:
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = enc._grads(x, y)[0]
            arr[idx] = old - 1e-6
            dn = enc._grads(x, y)[0]
            arr[idx] = old
            assert g[name][idx] == pytest.approx((up - dn) / 2e-6, rel=1e-4, abs=1e-8), name


def test_training_learns_the_classes():
    ds = generate(DatasetSpec(n=400, seed=1))
    enc = train_encoder(ds.images, ds.labels, 4, seed=0, epochs=6)
    held = generate(DatasetSpec(n=200, seed=2))
    acc = np.mean(enc.logits(held.images).argmax(axis=1) == held.labels)
    assert acc > 0.6


def test_feature_distance_properties(rng):
    enc = ConvEncoder.init((1, 8, 8), 4, seed=0)
    a = rng.uniform(-1, 1, size=(3, 1, 8, 8))
    np.testing.assert_array_equal(feature_distance(enc, a, a), np.zeros(3))
    b = rng.uniform(-1, 1, size=(3, 1, 8, 8))
    d = feature_distance(enc, a, b)
    assert np.all((d > 0) & (d <= 2))
    np.testing.assert_allclose(d, feature_distance(enc, b, a), rtol=1e-12)


def test_save_load_and_determinism(tmp_path):
    ds = leave_out(generate(DatasetSpec(n=40)), [])
    a = train_encoder(ds.images, ds.labels, 4, seed=3, epochs=1)
    b = train_encoder(ds.images, ds.labels, 4, seed=3, epochs=1)
    np.testing.assert_array_equal(a.flat(), b.flat())
    a.save(tmp_path / "e.bin")
    back = ConvEncoder.load(tmp_path / "e.bin")
    np.testing.assert_allclose(back.embed(ds.images[:4]), a.embed(ds.images[:4]), rtol=1e-5, atol=1e-6)
