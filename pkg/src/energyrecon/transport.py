"""Patch statistics and the proximal Sinkhorn approximation of Wasserstein distances.

A reconstruction is compared with reference patches through
``tr(C^T P)`` where ``C`` holds pairwise l^p distances of patch features and
``P`` is the transport plan returned by :func:`sinkhorn_proximal`.
Feature maps (mean removal, DCT without DC, linear autoencoder) are all linear
and mean-invariant, so they are stored as matrices.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .validation import as_image

FEATURE_KINDS = ("ID", "DCT", "AE")


class SinkhornUnderflowError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------
def extract_patches(img, n_p, stride=1):
    """All ``n_p x n_p`` windows of ``img`` (C, H, W) at ``stride``, row-major.

    Returns an array of shape ``(N, C * n_p * n_p)``.
    """
    img = as_image(img)
    c, h, w = img.shape
    if n_p > min(h, w):
        raise ValueError(f"patch size {n_p} exceeds image size {h}x{w}")
    win = sliding_window_view(img, (n_p, n_p), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(1, 2, 0, 3, 4).reshape(-1, c * n_p * n_p).copy()


def patch_count(shape, n_p, stride=1):
    h, w = shape[-2:]
    return ((h - n_p) // stride + 1) * ((w - n_p) // stride + 1)


def fold_patches(rows, shape, n_p, stride=1):
    """Adjoint of :func:`extract_patches`: overlapping contributions add up."""
    c, h, w = shape
    ny = (h - n_p) // stride + 1
    nx = (w - n_p) // stride + 1
    blocks = rows.reshape(ny, nx, c, n_p, n_p)
    out = np.zeros(shape)
    for i in range(n_p):
        for j in range(n_p):
            out[:, i:i + stride * ny:stride, j:j + stride * nx:stride] += \
                blocks[:, :, :, i, j].transpose(2, 0, 1)
    return out


def extract_batch(images, n_p, stride=1):
    """Patches of every image in a batch, stacked."""
    return np.concatenate([extract_patches(im, n_p, stride) for im in images])


def fold_batch(rows, shape, n_p, stride=1):
    b = shape[0]
    per = rows.shape[0] // b
    return np.stack([fold_patches(rows[k * per:(k + 1) * per], shape[1:], n_p, stride)
                     for k in range(b)])


def sample_reference_patches(images, n_p, n, rng, stride=1):
    """Draw ``n`` patches uniformly with replacement from all windows of ``images``."""
    sizes = [patch_count(im.shape, n_p, stride) for im in images]
    cum = np.cumsum(sizes)
    picks = rng.integers(0, cum[-1], size=n)
    out = np.empty((n, as_image(images[0]).shape[0] * n_p * n_p))
    for k, im in enumerate(images):
        lo = cum[k] - sizes[k]
        sel = (picks >= lo) & (picks < cum[k])
        if np.any(sel):
            out[sel] = extract_patches(im, n_p, stride)[picks[sel] - lo]
    return out


# --------------------------------------------------------------------------
# feature operators
# --------------------------------------------------------------------------
def mean_removal_matrix(dim):
    return np.eye(dim) - np.full((dim, dim), 1.0 / dim)


def dct_matrix(n):
    """Orthonormal 1D DCT-II matrix (rows are basis vectors)."""
    return dct(np.eye(n), type=2, norm="ortho", axis=0)


class PatchFeatures(TransformerMixin, BaseEstimator):
    """Linear, mean-invariant feature map on flattened patches.

    ``kind='ID'`` subtracts the patch mean, ``'DCT'`` keeps all orthonormal
    2D DCT-II coefficients except the constant one (per channel), and ``'AE'``
    projects mean-free patches onto their top principal subspace (the optimum
    of a linear autoencoder), learned in :meth:`fit`.
    """

    def __init__(self, kind="DCT", patch_size=6, n_channels=1, n_components=None):
        self.kind = kind
        self.patch_size = patch_size
        self.n_channels = n_channels
        self.n_components = n_components

    @property
    def input_dim(self):
        return self.n_channels * self.patch_size ** 2

    def _fixed_matrix(self):
        d = self.input_dim
        if self.kind == "ID":
            return mean_removal_matrix(d)
        if self.kind == "DCT":
            d1 = dct_matrix(self.patch_size)
            d2 = np.kron(d1, d1)[1:]
            k = d2.shape[1]
            rows = []
            for c in range(self.n_channels):
                block = np.zeros((d2.shape[0], d))
                block[:, c * k:(c + 1) * k] = d2
                rows.append(block)
            return np.vstack(rows)
        raise ValueError(f"unknown feature kind {self.kind!r}")

    def fit(self, X=None, y=None):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"kind must be one of {FEATURE_KINDS}")
        if self.kind != "AE":
            self.matrix_ = self._fixed_matrix()
            return self
        X = np.asarray(X, dtype=np.float64)
        d = self.input_dim
        if X.shape[1] != d:
            raise ValueError(f"expected rows of length {d}, got {X.shape[1]}")
        n_f = d - 1 if self.n_components is None else int(self.n_components)
        if not 1 <= n_f <= d - 1:
            raise ValueError(f"n_components must lie in [1, {d - 1}]")
        Xc = X - X.mean(axis=1, keepdims=True)
        evals, evecs = np.linalg.eigh(Xc.T @ Xc)
        order = np.argsort(evals)[::-1][:n_f]
        self.encoder_ = evecs[:, order].T
        self.decoder_ = self.encoder_.T
        self.matrix_ = self.encoder_ @ mean_removal_matrix(d)
        proj = (Xc @ self.encoder_.T) @ self.encoder_
        self.reconstruction_error_ = float(np.sum((Xc - proj) ** 2))
        return self

    def _check(self):
        if not hasattr(self, "matrix_"):
            if self.kind == "AE":
                raise NotFittedError("the AE feature map must be fitted on a patch corpus")
            self.fit()

    @property
    def n_features_out(self):
        self._check()
        return self.matrix_.shape[0]

    def transform(self, X):
        self._check()
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.matrix_.shape[1]:
            raise ValueError(f"expected rows of length {self.matrix_.shape[1]}, got {X.shape[1]}")
        return X @ self.matrix_.T

    def adjoint(self, G):
        """Pull feature-space gradients back to patch space."""
        self._check()
        return np.asarray(G) @ self.matrix_


def apply_features(op, patches):
    return op.transform(patches)


def train_ae(corpus, n_features, patch_size, n_channels=1):
    """Fit the linear autoencoder feature map on a corpus of flattened patches."""
    return PatchFeatures("AE", patch_size, n_channels, n_features).fit(corpus)


# --------------------------------------------------------------------------
# transport
# --------------------------------------------------------------------------
def cost_matrix(v, w, p=1):
    """``C[i, j] = ||v_i - w_j||_p``."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if v.shape[1] != w.shape[1]:
        raise ValueError(f"dimension mismatch: {v.shape[1]} vs {w.shape[1]}")
    if p == 1:
        return cdist(v, w, "cityblock")
    if p == 2:
        return cdist(v, w, "euclidean")
    return cdist(v, w, "minkowski", p=p)


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: float
    n_iter: int
    history: np.ndarray

    @property
    def N(self):
        return self.plan.shape[0]

    def marginal_error(self):
        target = 1.0 / self.N
        return max(np.max(np.abs(self.plan.sum(axis=1) - target)),
                   np.max(np.abs(self.plan.sum(axis=0) - target)))


_FLOOR = 1e-300


def round_to_marginals(T, mu):
    """Map a nonnegative plan onto the uniform transport polytope.

    Rows and then columns that exceed ``mu`` are scaled down, and the missing
    mass is added back as a rank-one nonnegative correction, so both marginals
    hold to rounding error while entries stay nonnegative.
    """
    T = T * np.minimum(1.0, mu / np.maximum(T.sum(axis=1), _FLOOR))[:, None]
    T = T * np.minimum(1.0, mu / np.maximum(T.sum(axis=0), _FLOOR))[None, :]
    er = np.maximum(mu - T.sum(axis=1), 0.0)
    ec = np.maximum(mu - T.sum(axis=0), 0.0)
    mass = er.sum()
    if mass > 0:
        T = T + np.outer(er, ec) / mass
    return T


def sinkhorn_proximal(v=None, w=None, p=1, beta=1.0, n_iter=50, cost=None,
                      round_plan=True, inner_iter=1):
    """Proximal Sinkhorn iterations with uniform marginals.

    Each outer step rescales the Gibbs kernel by the previous plan, i.e.
    ``Q = G * T``, then performs one pair of Sinkhorn scalings.  After the
    ``n_iter`` outer steps the plan is rounded onto the exact marginal
    constraints (see :func:`round_to_marginals`) unless ``round_plan`` is false.  Returns a
    :class:`TransportPlan` whose ``cost`` is ``tr(C^T T)``.

    ``inner_iter`` scaling pairs per outer step approach the exact proximal
    step; its cost history is then nonincreasing.  One pair is the default.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if n_iter < 1 or inner_iter < 1:
        raise ValueError("iteration counts must be at least 1")
    C = cost_matrix(v, w, p) if cost is None else np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    if n != m:
        raise ValueError("uniform-measure transport needs equally many points")
    mu = np.full(n, 1.0 / n)
    G = np.exp(-C / beta)
    if np.any(G.max(axis=1) == 0.0) or np.any(G.max(axis=0) == 0.0):
        raise SinkhornUnderflowError(
            "Gibbs kernel has an all-zero row or column; increase beta for this cost scale")
    b = mu.copy()
    T = np.ones((n, n))
    history = np.empty(n_iter)
    for j in range(n_iter):
        Q = G * T
        for _ in range(inner_iter):
            a = mu / np.maximum(Q @ b, _FLOOR)
            b = mu / np.maximum(Q.T @ a, _FLOOR)
        T = a[:, None] * Q * b[None, :]
        history[j] = np.sum(C * T)
    if not np.all(np.isfinite(T)):
        raise SinkhornUnderflowError("transport plan became non-finite; increase beta")
    if round_plan:
        T = round_to_marginals(T, mu)
    return TransportPlan(plan=T, cost=float(np.sum(C * T)), n_iter=n_iter, history=history)


def plan_cost_grad(v, w, plan, p=1, chunk=None):
    """Gradient of ``sum_ij P_ij ||v_i - w_j||_p`` in ``v`` with ``P`` held fixed."""
    n, d = v.shape
    out = np.empty_like(v)
    if chunk is None:
        chunk = max(1, int(2e7 // max(1, w.shape[0] * d)))
    for lo in range(0, n, chunk):
        diff = v[lo:lo + chunk, None, :] - w[None, :, :]
        P = plan[lo:lo + chunk, :, None]
        if p == 1:
            out[lo:lo + chunk] = np.sum(P * np.sign(diff), axis=1)
        else:
            norms = np.sum(np.abs(diff) ** p, axis=2, keepdims=True) ** (1.0 / p)
            scale = np.where(norms > 0, norms, 1.0) ** (p - 1)
            g = np.sign(diff) * np.abs(diff) ** (p - 1) / scale
            out[lo:lo + chunk] = np.sum(P * g, axis=1)
    return out


@dataclass
class WassersteinConfig:
    patch_size: int = 6
    stride: int = 3
    p: float = 1
    beta: float = 1.0
    n_iter: int = 50


def wasserstein_loss(recon, ref_features, features, cfg, rng=None):
    """Patch Wasserstein loss of a batch ``recon`` (B, C, H, W) and its gradient.

    ``ref_features`` are reference patches already mapped by ``features``.
    Patches of all images in the batch form one empirical measure.  If the
    counts differ, the larger set is subsampled (with ``rng``) to the smaller.
    The gradient treats the transport plan as fixed.
    """
    recon = np.asarray(recon, dtype=np.float64)
    patches = extract_batch(recon, cfg.patch_size, cfg.stride)
    feats = features.transform(patches)
    refs = np.asarray(ref_features, dtype=np.float64)
    rng = np.random.default_rng(rng)
    sel = np.arange(len(feats))
    if len(feats) > len(refs):
        sel = np.sort(rng.choice(len(feats), size=len(refs), replace=False))
    elif len(refs) > len(feats):
        refs = refs[np.sort(rng.choice(len(refs), size=len(feats), replace=False))]
    v = feats[sel]
    tp = sinkhorn_proximal(v, refs, p=cfg.p, beta=cfg.beta, n_iter=cfg.n_iter)
    gv = plan_cost_grad(v, refs, tp.plan, cfg.p)
    g_feats = np.zeros_like(feats)
    g_feats[sel] = gv
    g_patches = features.adjoint(g_feats)
    grad = fold_batch(g_patches, recon.shape, cfg.patch_size, cfg.stride)
    return tp.cost, grad, tp
