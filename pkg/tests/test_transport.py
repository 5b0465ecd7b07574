import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.fft import dctn
from sklearn.exceptions import NotFittedError

from energyrecon.transport import (PatchFeatures, SinkhornUnderflowError, WassersteinConfig,
                                   apply_features, cost_matrix, extract_patches, fold_patches,
                                   patch_count, plan_cost_grad, round_to_marginals, sinkhorn_proximal,
                                   train_ae, wasserstein_loss)

from helpers import central_diff, natural_crops


def brute_force_ot(C):
    n = len(C)
    return min(sum(C[i, s[i]] for i in range(n)) for s in itertools.permutations(range(n))) / n


def test_patch_counts():
    assert np.array_equal(extract_patches(np.arange(9.0).reshape(1, 3, 3), 3), np.arange(9.0)[None])
    assert extract_patches(np.zeros((1, 4, 4)), 3).shape == (4, 9)
    assert patch_count((60, 60), 6, 3) == 361
    assert 10 * len(extract_patches(np.zeros((1, 60, 60)), 6, 3)) == 3610


def test_patch_order_is_row_major():
    img = np.arange(20.0).reshape(1, 4, 5)
    rows = extract_patches(img, 2, 1)
    assert np.array_equal(rows[1], [1, 2, 6, 7])
    assert np.array_equal(rows[4], [5, 6, 10, 11])


def test_patch_too_large():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((1, 4, 4)), 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 9), st.integers(3, 9), st.integers(1, 3), st.integers(1, 3))
def test_fold_is_adjoint_of_extract(h, w, n_p, stride):
    rng = np.random.default_rng(h * w + n_p)
    img = rng.normal(size=(2, h, w))
    rows = rng.normal(size=(patch_count((h, w), n_p, stride), 2 * n_p * n_p))
    lhs = np.sum(extract_patches(img, n_p, stride) * rows)
    assert lhs == pytest.approx(np.sum(img * fold_patches(rows, img.shape, n_p, stride)))


def test_id_features_zero_mean():
    rows = np.random.default_rng(0).random((20, 36))
    out = apply_features(PatchFeatures("ID"), rows)
    assert np.abs(out.mean(axis=1)).max() < 1e-12
    assert out.shape[1] == 36


def test_dct_features():
    op = PatchFeatures("DCT", 6)
    assert op.n_features_out == 35
    assert np.abs(op.transform(np.full((1, 36), 0.8))).max() < 1e-12
    patch = np.random.default_rng(1).random((6, 6))
    coeffs = op.transform(patch.reshape(1, -1))[0]
    full = dctn(patch, norm="ortho")
    # Parseval: the dropped DC term carries the rest of the norm
    assert np.linalg.norm(coeffs) ** 2 + full[0, 0] ** 2 == pytest.approx(np.sum(patch ** 2))
    assert np.allclose(np.sort(np.abs(coeffs)), np.sort(np.abs(full.ravel()[1:])))


def test_ae_rank_one_corpus():
    rng = np.random.default_rng(2)
    direction = rng.normal(size=16)
    direction -= direction.mean()
    corpus = rng.normal(size=(50, 1)) * direction + rng.normal(size=(50, 1))
    ae = train_ae(corpus, 1, 4)
    assert ae.reconstruction_error_ < 1e-20


def test_ae_matches_truncated_svd():
    rng = np.random.default_rng(3)
    corpus = rng.normal(size=(300, 16)) @ rng.normal(size=(16, 16))
    ae = train_ae(corpus, 5, 4)
    centered = corpus - corpus.mean(axis=1, keepdims=True)
    s = np.linalg.svd(centered, compute_uv=False)
    assert ae.reconstruction_error_ == pytest.approx(np.sum(s[5:] ** 2), rel=1e-6)
    assert np.allclose(ae.encoder_ @ ae.encoder_.T, np.eye(5), atol=1e-10)


def test_ae_errors():
    with pytest.raises(NotFittedError):
        PatchFeatures("AE", 4).transform(np.zeros((1, 16)))
    with pytest.raises(ValueError):
        train_ae(np.zeros((10, 16)), 16, 4)
    with pytest.raises(ValueError):
        PatchFeatures("DCT", 4).transform(np.zeros((1, 9)))


@pytest.mark.parametrize("kind", ["ID", "DCT", "AE"])
def test_features_mean_invariant(kind):
    rng = np.random.default_rng(4)
    op = PatchFeatures(kind, 4, n_components=6)
    if kind == "AE":
        op.fit(rng.random((100, 16)))
    rows = rng.random((10, 16))
    assert np.allclose(op.transform(rows + 0.37), op.transform(rows), atol=1e-12)


def test_cost_matrix_examples():
    assert np.array_equal(cost_matrix([[0.0], [1.0]], [[2.0], [3.0]], 1), [[2, 3], [1, 2]])
    rng = np.random.default_rng(5)
    v, w = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    for p in (1, 2, 3):
        loop = np.array([[np.sum(np.abs(a - b) ** p) ** (1 / p) for b in w] for a in v])
        assert np.allclose(cost_matrix(v, w, p), loop)
    C = cost_matrix(v, v)
    assert np.allclose(C, C.T) and np.all(np.diag(C) == 0)
    with pytest.raises(ValueError):
        cost_matrix(v, w[:, :2])


def test_sinkhorn_matches_brute_force():
    rng = np.random.default_rng(6)
    for trial in range(100):
        n = rng.integers(2, 7)
        v, w = rng.random((n, 1)) * 10, rng.random((n, 1)) * 10
        tp = sinkhorn_proximal(v, w, p=1, beta=1.0, n_iter=50)
        exact = brute_force_ot(cost_matrix(v, w))
        assert abs(tp.cost - exact) <= 0.02 * exact
        assert tp.marginal_error() < 1e-6
        assert tp.plan.min() >= 0
        assert tp.cost >= exact - 2 * np.log(n) - 1e-9


def test_sinkhorn_two_points():
    v = np.array([[0.0], [1.0]])
    tp = sinkhorn_proximal(v, v, beta=1.0, n_iter=50)
    assert tp.cost < 1e-6
    assert np.allclose(tp.plan, np.eye(2) / 2, atol=1e-6)


def test_sinkhorn_identical_sets_converge_to_zero():
    v = np.random.default_rng(7).random((8, 2)) * 5
    costs = [sinkhorn_proximal(v, v, n_iter=j).cost for j in (1, 5, 50)]
    assert costs[0] > costs[1] > costs[2]
    assert costs[2] < 1e-6
    assert np.allclose(sinkhorn_proximal(v, v, n_iter=50).plan, np.eye(8) / 8, atol=1e-6)


def test_sinkhorn_history_nonincreasing_with_exact_inner_steps():
    rng = np.random.default_rng(8)
    for _ in range(5):
        v, w = rng.normal(size=(30, 5)), rng.normal(size=(30, 5))
        hist = sinkhorn_proximal(v, w, n_iter=40, inner_iter=2000).history
        assert np.all(np.diff(hist[1:]) <= 1e-9)


def test_sinkhorn_history_drift_with_single_scaling():
    # one scaling pair per step only approximates the proximal step, so the
    # recorded cost may creep up slightly late in the run
    rng = np.random.default_rng(8)
    for _ in range(20):
        v, w = rng.normal(size=(30, 5)), rng.normal(size=(30, 5))
        hist = sinkhorn_proximal(v, w, n_iter=40).history
        assert np.max(np.diff(hist[1:])) <= 1e-2 * hist[-1]
        assert hist[-1] < hist[0]


def test_sinkhorn_underflow():
    with pytest.raises(SinkhornUnderflowError):
        sinkhorn_proximal(np.array([[0.0], [1.0]]), np.array([[1e6], [2e6]]), beta=1.0)
    with pytest.raises(ValueError):
        sinkhorn_proximal(np.zeros((2, 1)), np.zeros((2, 1)), beta=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10000))
def test_rounding_lands_on_polytope(n, seed):
    T = np.random.default_rng(seed).random((n, n)) / n ** 2 * 2
    R = round_to_marginals(T, np.full(n, 1.0 / n))
    assert R.min() >= 0
    assert np.abs(R.sum(axis=0) - 1 / n).max() < 1e-14
    assert np.abs(R.sum(axis=1) - 1 / n).max() < 1e-14


def test_plan_cost_gradient():
    rng = np.random.default_rng(9)
    v, w = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    plan = sinkhorn_proximal(v, w).plan
    d = rng.normal(size=v.shape)
    for p in (1, 2):
        g = plan_cost_grad(v, w, plan, p)
        fd = central_diff(lambda x: np.sum(plan * cost_matrix(x, w, p)), v, d)
        assert np.sum(g * d) == pytest.approx(fd, rel=1e-6)


def _setup(seed=10, kind="DCT"):
    crops = natural_crops(3, 16, seed=seed)
    feats = PatchFeatures(kind, 4)
    if kind == "AE":
        feats.fit(np.concatenate([extract_patches(c, 4, 1) for c in crops]))
    cfg = WassersteinConfig(patch_size=4, stride=2, p=1, beta=1.0, n_iter=50)
    return crops, feats, cfg


def test_wasserstein_identical_patches():
    crops, feats, cfg = _setup()
    recon = crops[0][None]
    refs = feats.transform(extract_patches(crops[0], 4, 2))
    cost, grad, _ = wasserstein_loss(recon, refs, feats, cfg, rng=0)
    assert cost < 1e-6
    assert np.abs(grad).max() < 1e-6


def test_wasserstein_gradient_with_frozen_plan():
    crops, feats, cfg = _setup()
    recon = crops[1][None, :, :8, :8].copy()
    refs = feats.transform(extract_patches(crops[2][:, :8, :8], 4, 2))
    cost, grad, tp = wasserstein_loss(recon, refs, feats, cfg, rng=0)
    d = np.random.default_rng(11).normal(size=recon.shape)

    def frozen(x):
        v = feats.transform(extract_patches(x[0], 4, 2))
        return np.sum(tp.plan * cost_matrix(v, refs, 1))

    assert np.sum(grad * d) == pytest.approx(central_diff(frozen, recon, d, 1e-7), rel=1e-5)


def test_wasserstein_descent_step():
    crops, feats, cfg = _setup()
    recon = crops[0][None] + 0.2 * np.random.default_rng(12).normal(size=(1, 1, 16, 16))
    refs = feats.transform(extract_patches(crops[0], 4, 2))
    cost, grad, _ = wasserstein_loss(recon, refs, feats, cfg, rng=0)
    new_cost, _, _ = wasserstein_loss(recon - 1e-3 * grad / np.abs(grad).max(), refs, feats, cfg, rng=0)
    assert new_cost < cost


@pytest.mark.parametrize("kind", ["ID", "DCT", "AE"])
def test_wasserstein_mean_invariance(kind):
    crops, feats, cfg = _setup(13, kind)
    recon = np.stack(crops[:2])
    refs = feats.transform(extract_patches(crops[2], 4, 2))
    a, ga, _ = wasserstein_loss(recon, refs, feats, cfg, rng=1)
    b, gb, _ = wasserstein_loss(recon + 0.3, refs, feats, cfg, rng=1)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)
    assert np.allclose(ga, gb, atol=1e-9)
