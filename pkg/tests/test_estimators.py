import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from energyrecon import EnergyReconstructor, SharedPriorReconstructor
from energyrecon.imaging import GaussianNoise, LaplaceNoise, psnr

from helpers import natural_crops


def _small(**kw):
    params = dict(steps=3, T=0.1, n_features=4, iterations=20, batch_size=2, crop=16, lr=4e-3,
                  loss="l2")
    params.update(kw)
    return EnergyReconstructor(**params)


def test_params_roundtrip_and_clone():
    est = _small(scheme="en", data_term="frechet")
    assert est.get_params()["scheme"] == "en"
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(steps=7).steps == 7


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        _small().predict([np.zeros((1, 8, 8))])


def test_fit_improves_over_observation():
    clean = natural_crops(6, 32, seed=11)
    est = _small().fit(clean)
    test = natural_crops(3, 32, seed=12)
    noisy = [GaussianNoise(25 / 255, seed=k).corrupt(y) for k, y in enumerate(test)]
    out = est.predict(noisy)
    assert len(out) == 3 and out[0].shape == test[0].shape
    base = np.mean([psnr(z, y) for z, y in zip(noisy, test)])
    assert est.score(noisy, test) > base
    assert est.history_ and est.T_ == est.controls_.T_su


def test_fit_is_deterministic():
    clean = natural_crops(4, 16, seed=13)
    a = _small(iterations=3).fit(clean)
    b = _small(iterations=3).fit(clean)
    for k, v in a.controls_.named_arrays().items():
        assert np.array_equal(v, b.controls_.named_arrays()[k])


def test_fit_with_pairs():
    clean = natural_crops(4, 16, seed=14)
    noisy = [LaplaceNoise(0.1, seed=k).corrupt(y) for k, y in enumerate(clean)]
    est = _small(iterations=3).fit(noisy, clean)
    assert np.isfinite(est.score(noisy, clean))
    with pytest.raises(ValueError):
        _small(iterations=1).fit(noisy, clean[:2])


def test_shared_prior_estimator():
    clean = natural_crops(4, 16, seed=15)
    base = _small(iterations=2).fit(clean)
    obs = [LaplaceNoise(25 / 255, seed=k).corrupt(y) for k, y in enumerate(natural_crops(3, 16, 16))]
    refs = natural_crops(3, 16, seed=17)
    shared = SharedPriorReconstructor(base, clean, alpha=0.5, patch_size=4, stride=2, iterations=2,
                                      crop=16, sinkhorn_iters=20)
    shared.fit(obs, refs)
    assert shared.controls_.term_un is not None
    # a divergence branch starts out as the supervised map
    start = SharedPriorReconstructor(base, clean, alpha=0.5, unsup_term="divergence", patch_size=4,
                                     stride=2, iterations=0, crop=16)
    start.fit(obs, refs)
    assert start.controls_.term_un.kind == "divergence"
    a, b = base.predict(obs), start.predict(obs)
    assert all(np.allclose(x, y, atol=1e-12) for x, y in zip(a, b))
    assert shared.controls_.tdv is not base.controls_.tdv
    assert len(shared.predict(obs)) == 3
    with pytest.raises(ValueError):
        SharedPriorReconstructor(base, None, alpha=0.5, patch_size=4, stride=2,
                                 iterations=1, crop=16).fit(obs, refs)


def test_shared_prior_with_autoencoder_features():
    clean = natural_crops(4, 16, seed=18)
    base = _small(iterations=1).fit(clean)
    shared = SharedPriorReconstructor(base, alpha=0.0, features="AE", patch_size=4, stride=2,
                                      iterations=1, crop=16, sinkhorn_iters=10)
    shared.fit(clean, natural_crops(3, 16, seed=19))
    assert np.isfinite(shared.history_[-1]["wasserstein-loss"])
