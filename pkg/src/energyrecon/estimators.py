"""scikit-learn style wrappers around the training loops."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datafid import make_data_term, term_like
from .flow import FlowConfig, rollout
from .imaging import make_noise, make_operator, psnr
from .learn import (ControlParams, ReferencePatches, SupervisedSource, TrainConfig, Trainer,
                    UnsupervisedSource, augment, random_crop, stream_rng)
from .tdv import TdvParams
from .transport import PatchFeatures, WassersteinConfig, extract_batch
from .validation import as_image_list, check_positive_int


def _batches(images):
    return [im[None] for im in as_image_list(images)]


class _ReconstructorMixin:
    def _flow(self, T):
        return FlowConfig(self.scheme, self.steps, T, self.T_max, self.cg_iters)

    def _reconstruct(self, Z, term, T):
        check_is_fitted(self, "controls_")
        cfg = self._flow(T)
        op = self._op()
        return [rollout(z, cfg, term, self.controls_.tdv, op).terminal[0] for z in _batches(Z)]

    def _op(self):
        return make_operator(self.operator)

    def score(self, Z, Y):
        """Mean PSNR of the reconstructions of ``Z`` against ``Y``."""
        X = self.predict(Z)
        Y = as_image_list(Y)
        return float(np.mean([psnr(x, y) for x, y in zip(X, Y)]))


class EnergyReconstructor(_ReconstructorMixin, BaseEstimator):
    """Energy-based reconstruction learned by supervised optimal control.

    ``fit(X)`` treats ``X`` as clean images and synthesizes observations with
    the configured noise model; ``fit(X, y)`` treats ``X`` as observations and
    ``y`` as their ground truth.  Image sides must be divisible by 4.
    """

    def __init__(self, scheme="impl", steps=10, T=1.0, T_max=1000.0, cg_iters=10,
                 data_term="scaled-l2", n_features=8, n_blocks=1, operator="identity",
                 noise="gaussian", sigma=25 / 255, loss="l1-iota", lr=4e-4, iterations=500,
                 batch_size=4, crop=32, augment=True, seed=0):
        self.scheme = scheme
        self.steps = steps
        self.T = T
        self.T_max = T_max
        self.cg_iters = cg_iters
        self.data_term = data_term
        self.n_features = n_features
        self.n_blocks = n_blocks
        self.operator = operator
        self.noise = noise
        self.sigma = sigma
        self.loss = loss
        self.lr = lr
        self.iterations = iterations
        self.batch_size = batch_size
        self.crop = crop
        self.augment = augment
        self.seed = seed

    def _init_controls(self, n_channels):
        tdv = TdvParams.initialize(n_channels, self.n_features, self.n_blocks,
                                   rng=stream_rng(self.seed, "init"))
        term = make_data_term(self.data_term, prox_mode=self.scheme == "impl")
        return ControlParams(tdv, term, self.T, T_max=self.T_max)

    def _train_config(self, **over):
        kw = dict(lr=self.lr, batch_size=self.batch_size, iterations=self.iterations,
                  loss=self.loss, crop=self.crop, augment=self.augment,
                  eval_interval=max(1, self.iterations), seed=self.seed)
        kw.update(over)
        return TrainConfig(**kw)

    def fit(self, X, y=None):
        check_positive_int(self.steps, "steps")
        images = as_image_list(X)
        self.n_channels_ = images[0].shape[0]
        controls = self._init_controls(self.n_channels_)
        if y is None:
            source = SupervisedSource(images, self._noise(), self._op())
        else:
            source = _PairSource(images, as_image_list(y), self._op())
        trainer = Trainer(controls, self._flow(self.T), self._train_config(), sup=source)
        trainer.run()
        self.controls_ = trainer.controls
        self.history_ = trainer.history
        self.T_ = self.controls_.T_su
        return self

    def _noise(self):
        if self.noise in ("gaussian", "laplace"):
            return make_noise(self.noise, sigma=self.sigma)
        return make_noise(self.noise)

    def predict(self, Z):
        check_is_fitted(self, "controls_")
        return self._reconstruct(Z, self.controls_.term_su, self.controls_.T_su)


class _PairSource:
    """Fixed (observation, ground truth) pairs; crops are taken jointly."""

    def __init__(self, observations, clean, op):
        if len(observations) != len(clean):
            raise ValueError("X and y differ in length")
        self.observations = observations
        self.clean = clean
        self.op = op

    def batch(self, rng, noise_rng, size, crop, do_augment=True):
        ys, zs = [], []
        for _ in range(size):
            k = rng.integers(len(self.clean))
            y, z = self.clean[k], self.observations[k]
            if crop is not None and y.shape == z.shape:
                stack = random_crop(np.concatenate([y, z]), crop, rng)
                y, z = stack[:len(y)], stack[len(y):]
            if do_augment:
                kk, flip = rng.integers(4), rng.integers(2)
                y, z = augment(y, kk, flip), augment(z, kk, flip)
            ys.append(y)
            zs.append(z)
        return np.stack(ys), np.stack(zs)


class SharedPriorReconstructor(_ReconstructorMixin, BaseEstimator):
    """Shared prior learning started from a fitted :class:`EnergyReconstructor`.

    ``fit(Z, refs)`` takes unsupervised observations ``Z`` and clean reference
    images ``refs`` (not paired with ``Z``).  The supervised branch keeps
    synthesizing observations from the base estimator's clean images
    ``sup_images``.  ``unsup_term`` names the unsupervised data-term family;
    it starts out reproducing the supervised term.
    """

    def __init__(self, base=None, sup_images=None, alpha=0.8, unsup_term="copy", features="DCT",
                 patch_size=6, stride=3, beta=1.0, sinkhorn_iters=50, lr=1e-4,
                 iterations=2000, batch_size=2, crop=24, loss="l2", seed=0):
        self.base = base
        self.sup_images = sup_images
        self.alpha = alpha
        self.unsup_term = unsup_term
        self.features = features
        self.patch_size = patch_size
        self.stride = stride
        self.beta = beta
        self.sinkhorn_iters = sinkhorn_iters
        self.lr = lr
        self.iterations = iterations
        self.batch_size = batch_size
        self.crop = crop
        self.loss = loss
        self.seed = seed

    # flow settings follow the base estimator
    @property
    def scheme(self):
        return self.base.scheme

    @property
    def steps(self):
        return self.base.steps

    @property
    def T_max(self):
        return self.base.T_max

    @property
    def cg_iters(self):
        return self.base.cg_iters

    @property
    def operator(self):
        return self.base.operator

    def fit(self, Z, refs):
        check_is_fitted(self.base, "controls_")
        controls = self.base.controls_.copy()
        term = None
        if self.unsup_term != "copy":
            term = term_like(controls.term_su, self.unsup_term, self.scheme == "impl",
                             controls.T_su / self.steps)
        controls.add_unsupervised(term)
        feats = PatchFeatures(self.features, self.patch_size, self.base.n_channels_)
        if self.features == "AE":
            feats.fit(extract_batch(as_image_list(refs), self.patch_size, 1))
        ref = ReferencePatches(refs, feats, self.patch_size)
        sup = None
        if self.alpha > 0:
            if self.sup_images is None:
                raise ValueError("alpha > 0 needs sup_images")
            sup = SupervisedSource(self.sup_images, self.base._noise(), self._op())
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, iterations=self.iterations,
                          loss=self.loss, alpha=self.alpha, crop=self.crop,
                          eval_interval=max(1, self.iterations), seed=self.seed)
        wcfg = WassersteinConfig(self.patch_size, self.stride, 1, self.beta, self.sinkhorn_iters)
        trainer = Trainer(controls, self._flow(controls.T_su), cfg, sup=sup,
                          unsup=UnsupervisedSource(Z, self._op()), refs=ref, wcfg=wcfg)
        trainer.run()
        self.controls_ = trainer.controls
        self.history_ = trainer.history
        return self

    def predict(self, Z):
        check_is_fitted(self, "controls_")
        return self._reconstruct(Z, self.controls_.term_un, self.controls_.T_un)
