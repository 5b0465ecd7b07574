"""Learned pointwise data-fidelity terms.

Three families are provided, all acting componentwise on ``(Ax, z)``:

* :class:`ScaledL2` with ``D = xi/2 * ||Ax - z||^2``,
* :class:`FrechetSpline`, whose gradient is an odd, monotone cubic spline of
  the residual ``Ax - z``,
* :class:`DivergenceSpline`, whose gradient is a tensor-product cubic spline
  ``s(Ax, z) - s(z, z)``, monotone in ``Ax`` and zero on the diagonal.

In prox mode (semi-implicit scheme) the spline parametrizes the proximal map
of the data term instead of its gradient.
"""

import numpy as np
from sklearn.isotonic import isotonic_regression

#: knots beyond each end of the coefficient range, filled by edge extension
_GHOST = 2
#: number of evaluation points for the Lipschitz check of prox maps
LIPSCHITZ_GRID = 1024


def bspline3(t, deriv=0):
    """Centered cubic B-spline on [-2, 2] (or one of its first three derivatives)."""
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    sgn = np.sign(t)
    inner = a < 1.0
    outer = (a >= 1.0) & (a < 2.0)
    out = np.zeros_like(a)
    if deriv == 0:
        out[inner] = 2.0 / 3.0 - a[inner] ** 2 + 0.5 * a[inner] ** 3
        out[outer] = (2.0 - a[outer]) ** 3 / 6.0
    elif deriv == 1:
        out[inner] = -2.0 * a[inner] + 1.5 * a[inner] ** 2
        out[outer] = -0.5 * (2.0 - a[outer]) ** 2
        out *= sgn
    elif deriv == 2:
        out[inner] = -2.0 + 3.0 * a[inner]
        out[outer] = 2.0 - a[outer]
    elif deriv == 3:
        out[inner] = 3.0
        out[outer] = -1.0
        out *= sgn
    else:
        raise ValueError("deriv must be 0, 1, 2 or 3")
    return out


def spline_basis(x, j, n, Q):
    """Basis function ``j`` of an ``n``-knot spline on ``[-Q, Q]`` evaluated at ``x``."""
    return bspline3(np.asarray(x, dtype=np.float64) * n / Q - j)


def _local_weights(t, deriv):
    """Indices of the four active basis functions and their weights at ``t``."""
    base = np.floor(t).astype(np.int64)
    idx = np.stack([base - 1, base, base + 1, base + 2])
    w = bspline3(t[None] - idx, deriv)
    return idx, w


def max_spline_slope(full, offset, n, scale):
    """Exact supremum of ``d/dt sum_i full[i + offset] B3(t - i)`` over ``t in [-n, n]``, times ``scale``.

    ``full`` may be 2D, one spline per column.  The derivative is quadratic on
    each knot interval, so three samples per interval locate its maximum.
    """
    k = np.arange(-n, n, dtype=np.float64)
    t = np.stack([k, k + 0.5, k + 1.0])
    idx, w = _local_weights(t, 1)
    vals = np.einsum("abk,abk...->bk...", w, full[idx + offset])
    d0, dm, d1 = vals
    # quadratic through (0, d0), (1/2, dm), (1, d1)
    a = 2.0 * (d0 + d1) - 4.0 * dm
    b = 4.0 * dm - 3.0 * d0 - d1
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(a < 0, -b / (2.0 * a), 0.0)
    s = np.clip(s, 0.0, 1.0)
    vertex = a * s * s + b * s + d0
    return float(max(d0.max(), d1.max(), vertex.max())) * scale


class DataTerm:
    """Common interface.  ``coeffs`` is the learnable array."""

    prox_mode = False

    def _check_grad_mode(self):
        if self.prox_mode:
            raise ValueError("data term parametrizes a proximal map, not a gradient")

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.coeffs = self.coeffs.copy()
        return new


class ScaledL2(DataTerm):
    """``D(Ax, z) = xi / 2 * ||Ax - z||^2`` with a learned scale ``xi > 0``."""

    kind = "scaled-l2"
    floor = 1e-8

    def __init__(self, xi=1.0):
        if xi <= 0:
            raise ValueError("scale must be positive")
        self.coeffs = np.array(float(xi))

    @property
    def xi(self):
        return float(self.coeffs)

    def value(self, ax, z):
        return 0.5 * self.xi * np.sum((ax - z) ** 2)

    def grad(self, ax, z):
        return self.xi * (ax - z)

    def hess_diag(self, ax, z):
        return np.full(np.shape(ax), self.xi)

    def hess_deriv(self, ax, z):
        return np.zeros(np.shape(ax))

    def grad_coeff_vjp(self, ax, z, upstream):
        return np.array(np.sum((ax - z) * upstream))

    def hess_coeff_vjp(self, ax, z, upstream):
        return np.array(np.sum(upstream))

    def prox(self, v, z, step):
        return (v + step * self.xi * z) / (1.0 + step * self.xi)

    def prox_dv(self, v, z, step):
        return np.full(np.shape(v), 1.0 / (1.0 + step * self.xi))

    def prox_dstep(self, v, z, step):
        return self.xi * (z - v) / (1.0 + step * self.xi) ** 2

    def prox_coeff_vjp(self, v, z, step, upstream):
        return np.array(np.sum(step * (z - v) / (1.0 + step * self.xi) ** 2 * upstream))

    def project(self):
        if not isinstance(self.coeffs, np.ndarray):
            self.coeffs = np.array(self.coeffs, dtype=np.float64)
        self.coeffs[...] = max(float(self.coeffs), self.floor)
        return self

    def is_feasible(self, tol=0.0):
        return float(self.coeffs) > 0


class FrechetSpline(DataTerm):
    """Odd monotone spline ``g`` of the residual; ``grad D = g(Ax - z)``.

    ``coeffs`` holds ``xi_1..xi_n``; ``xi_0 = 0`` and ``xi_{-j} = -xi_j`` are
    implied.  In prox mode the map is ``prox(v) = z + g(v - z)``.
    """

    kind = "frechet"

    def __init__(self, n_knots=31, Q=2.0, prox_mode=False, coeffs=None, slope=1.0):
        self.n = int(n_knots)
        self.Q = float(Q)
        self.prox_mode = bool(prox_mode)
        if coeffs is None:
            # ramp coefficients reproduce g(r) = slope * r on the interior
            coeffs = slope * np.arange(1, self.n + 1) * self.Q / self.n
        self.coeffs = np.array(coeffs, dtype=np.float64)
        if self.coeffs.shape != (self.n,):
            raise ValueError(f"expected {self.n} coefficients")

    # full antisymmetric coefficient vector, indices -(n+G)..(n+G)
    def _full(self):
        half = np.concatenate([self.coeffs, np.repeat(self.coeffs[-1:], _GHOST)])
        return np.concatenate([-half[::-1], [0.0], half])

    def _full_adjoint(self, full_bar):
        m = self.n + _GHOST
        pos = full_bar[m + 1:]
        neg = full_bar[:m][::-1]
        half = pos - neg
        out = half[:self.n].copy()
        out[-1] += half[self.n:].sum()
        return out

    def _t(self, r):
        rc = np.clip(r, -self.Q, self.Q)
        inside = (r > -self.Q) & (r < self.Q)
        return rc * self.n / self.Q, inside

    def _eval(self, r, deriv):
        r = np.asarray(r, dtype=np.float64)
        t, inside = self._t(r)
        idx, w = _local_weights(t, deriv)
        full = self._full()
        out = np.sum(w * full[idx + self.n + _GHOST], axis=0) * (self.n / self.Q) ** deriv
        if deriv:
            out = np.where(inside, out, 0.0)
        return out

    def _coeff_vjp(self, r, upstream):
        r = np.asarray(r, dtype=np.float64)
        t, _ = self._t(r)
        idx, w = _local_weights(t, 0)
        full_bar = np.bincount((idx + self.n + _GHOST).ravel(),
                               weights=(w * upstream[None]).ravel(),
                               minlength=2 * (self.n + _GHOST) + 1)
        return self._full_adjoint(full_bar)

    def _coeff_vjp_deriv(self, r, upstream):
        r = np.asarray(r, dtype=np.float64)
        t, inside = self._t(r)
        idx, w = _local_weights(t, 1)
        w = w * np.where(inside, self.n / self.Q, 0.0)[None]
        full_bar = np.bincount((idx + self.n + _GHOST).ravel(),
                               weights=(w * upstream[None]).ravel(),
                               minlength=2 * (self.n + _GHOST) + 1)
        return self._full_adjoint(full_bar)

    def profile(self, r, deriv=0):
        """The 1D map ``g`` (or a derivative) at residual values ``r``."""
        return self._eval(r, deriv)

    def grad(self, ax, z):
        self._check_grad_mode()
        return self._eval(ax - z, 0)

    def hess_diag(self, ax, z):
        self._check_grad_mode()
        return self._eval(ax - z, 1)

    def hess_deriv(self, ax, z):
        self._check_grad_mode()
        return self._eval(ax - z, 2)

    def grad_coeff_vjp(self, ax, z, upstream):
        self._check_grad_mode()
        return self._coeff_vjp(ax - z, upstream)

    def hess_coeff_vjp(self, ax, z, upstream):
        self._check_grad_mode()
        return self._coeff_vjp_deriv(ax - z, upstream)

    def _check_prox_mode(self):
        if not self.prox_mode:
            raise ValueError("data term has no proximal parametrization")

    def prox(self, v, z, step):
        self._check_prox_mode()
        return z + self._eval(v - z, 0)

    def prox_dv(self, v, z, step):
        self._check_prox_mode()
        return self._eval(v - z, 1)

    def prox_dstep(self, v, z, step):
        return np.zeros(np.shape(v))

    def prox_coeff_vjp(self, v, z, step, upstream):
        self._check_prox_mode()
        return self._coeff_vjp(v - z, upstream)

    def max_grid_slope(self):
        grid = np.linspace(-self.Q, self.Q, LIPSCHITZ_GRID)
        vals = self._eval(grid, 0)
        return float(np.max(np.diff(vals) / np.diff(grid)))

    def max_slope(self):
        """Exact Lipschitz constant of the 1D map ``g``."""
        return max_spline_slope(self._full(), self.n + _GHOST, self.n, self.n / self.Q)

    def project(self):
        c = isotonic_regression(self.coeffs)
        self.coeffs[...] = np.maximum(c, 0.0)
        if self.prox_mode:
            slope = self.max_slope()
            if slope > 1.0:
                self.coeffs /= slope
        return self

    def is_feasible(self, tol=1e-12):
        c = self.coeffs
        ok = c.min() >= -tol and np.all(np.diff(c) >= -tol)
        if self.prox_mode:
            ok = ok and self.max_slope() <= 1.0 + 1e-9
        return bool(ok)


class DivergenceSpline(DataTerm):
    """Tensor-product spline ``s``; ``grad D = s(Ax, z) - s(z, z)``.

    ``coeffs[i + N, j + N]`` is the weight of ``phi_i(x) phi_j(y)``.  The
    constraints are monotonicity in ``i`` and a zero diagonal.  In prox mode
    the map is ``prox(v, z) = z + s(v, z) - s(z, z)``.
    """

    kind = "divergence"

    def __init__(self, half_width=15, Q=2.0, prox_mode=False, coeffs=None, slope=1.0):
        self.N = int(half_width)
        self.Q = float(Q)
        self.prox_mode = bool(prox_mode)
        size = 2 * self.N + 1
        if coeffs is None:
            k = np.arange(-self.N, self.N + 1)
            coeffs = slope * (k[:, None] - k[None, :]) * self.Q / self.N
        self.coeffs = np.array(coeffs, dtype=np.float64)
        if self.coeffs.shape != (size, size):
            raise ValueError(f"expected coefficients of shape {(size, size)}")

    def _full(self):
        return np.pad(self.coeffs, _GHOST, mode="edge")

    def _full_adjoint(self, full_bar):
        g = _GHOST
        out = full_bar[g:-g, g:-g].copy()
        out[0, :] += full_bar[:g, g:-g].sum(axis=0)
        out[-1, :] += full_bar[-g:, g:-g].sum(axis=0)
        out[:, 0] += full_bar[g:-g, :g].sum(axis=1)
        out[:, -1] += full_bar[g:-g, -g:].sum(axis=1)
        out[0, 0] += full_bar[:g, :g].sum()
        out[0, -1] += full_bar[:g, -g:].sum()
        out[-1, 0] += full_bar[-g:, :g].sum()
        out[-1, -1] += full_bar[-g:, -g:].sum()
        return out

    def _t(self, r):
        rc = np.clip(r, -self.Q, self.Q)
        inside = (r > -self.Q) & (r < self.Q)
        return rc * self.N / self.Q, inside

    def _surface(self, x, y, deriv):
        """``d^deriv s / dx^deriv`` at ``(x, y)``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        tx, inside = self._t(x)
        ty, _ = self._t(y)
        ix, wx = _local_weights(tx, deriv)
        iy, wy = _local_weights(ty, 0)
        full = self._full()
        off = self.N + _GHOST
        out = np.zeros(np.broadcast(x, y).shape)
        for a in range(4):
            for b in range(4):
                out += wx[a] * wy[b] * full[ix[a] + off, iy[b] + off]
        if deriv:
            out = np.where(inside, out * (self.N / self.Q) ** deriv, 0.0)
        return out

    def _surface_vjp(self, x, y, upstream, deriv):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        tx, inside = self._t(x)
        ty, _ = self._t(y)
        ix, wx = _local_weights(tx, deriv)
        iy, wy = _local_weights(ty, 0)
        if deriv:
            upstream = upstream * np.where(inside, (self.N / self.Q) ** deriv, 0.0)
        size = 2 * (self.N + _GHOST) + 1
        off = self.N + _GHOST
        flat_idx = ((ix[:, None] + off) * size + (iy[None, :] + off)).ravel()
        weights = (wx[:, None] * wy[None, :] * upstream[None, None]).ravel()
        full_bar = np.bincount(flat_idx, weights=weights, minlength=size * size)
        return self._full_adjoint(full_bar.reshape(size, size))

    def surface(self, x, y, deriv=0):
        return self._surface(x, y, deriv)

    def grad(self, ax, z):
        self._check_grad_mode()
        return self._surface(ax, z, 0) - self._surface(z, z, 0)

    def hess_diag(self, ax, z):
        self._check_grad_mode()
        return self._surface(ax, z, 1)

    def hess_deriv(self, ax, z):
        self._check_grad_mode()
        return self._surface(ax, z, 2)

    def grad_coeff_vjp(self, ax, z, upstream):
        self._check_grad_mode()
        return self._surface_vjp(ax, z, upstream, 0) - self._surface_vjp(z, z, upstream, 0)

    def hess_coeff_vjp(self, ax, z, upstream):
        self._check_grad_mode()
        return self._surface_vjp(ax, z, upstream, 1)

    def _check_prox_mode(self):
        if not self.prox_mode:
            raise ValueError("data term has no proximal parametrization")

    def prox(self, v, z, step):
        self._check_prox_mode()
        return z + self._surface(v, z, 0) - self._surface(z, z, 0)

    def prox_dv(self, v, z, step):
        self._check_prox_mode()
        return self._surface(v, z, 1)

    def prox_dstep(self, v, z, step):
        return np.zeros(np.shape(v))

    def prox_coeff_vjp(self, v, z, step, upstream):
        self._check_prox_mode()
        return self._surface_vjp(v, z, upstream, 0) - self._surface_vjp(z, z, upstream, 0)

    def _lipschitz_grid(self):
        v = np.linspace(-self.Q, self.Q, LIPSCHITZ_GRID)
        z = np.linspace(-self.Q, self.Q, 2 * self.N + 3)
        return v[:, None], z[None, :]

    def max_grid_slope(self):
        v, z = self._lipschitz_grid()
        vals = self._surface(v, z, 0)
        return float(np.max(np.diff(vals, axis=0) / np.diff(v, axis=0)))

    def max_slope(self):
        """Upper bound on the slope in ``x`` over all ``z``.

        For fixed ``z`` the x-profile mixes the columns with nonnegative weights
        summing to one, so the largest column slope bounds it.
        """
        return max_spline_slope(self._full(), self.N + _GHOST, self.N, self.N / self.Q)

    def project(self):
        c = self.coeffs
        size = 2 * self.N + 1
        for j in range(size):
            col = c[:, j]
            if j > 0:
                col[:j] = np.minimum(isotonic_regression(col[:j]), 0.0)
            col[j] = 0.0
            if j < size - 1:
                col[j + 1:] = np.maximum(isotonic_regression(col[j + 1:]), 0.0)
        if self.prox_mode:
            slope = self.max_slope()
            if slope > 1.0:
                c /= slope
        return self

    def is_feasible(self, tol=1e-12):
        c = self.coeffs
        ok = np.all(np.diff(c, axis=0) >= -tol) and np.all(np.abs(np.diag(c)) <= tol)
        if self.prox_mode:
            ok = ok and self.max_slope() <= 1.0 + 1e-9
        return bool(ok)


def make_data_term(kind, prox_mode=False, n_knots=31, half_width=15, Q=2.0, xi=1.0,
                   slope=None):
    """Build a data term initialized to mimic the squared l2 term."""
    if kind in ("scaled-l2", "l2"):
        return ScaledL2(xi)
    if slope is None:
        slope = 0.5 if prox_mode else 1.0
    if kind == "frechet":
        return FrechetSpline(n_knots, Q, prox_mode, slope=slope)
    if kind == "divergence":
        return DivergenceSpline(half_width, Q, prox_mode, slope=slope)
    raise ValueError(f"unknown data term {kind!r}")


def term_like(term, kind, prox_mode, step=None):
    """A ``kind`` term that initially acts like ``term``.

    A scaled l2 term is reproduced exactly by a linear spline: in gradient
    mode the slope is ``xi``, in prox mode it is ``1 / (1 + step * xi)``, the
    slope of the l2 proximal map at that step size.  Spline terms of the same
    kind and mode are copied.
    """
    if kind == term.kind and prox_mode == term.prox_mode:
        return term.copy()
    if not isinstance(term, ScaledL2):
        raise ValueError(f"cannot convert a {term.kind!r} term into {kind!r}")
    if kind in ("scaled-l2", "l2"):
        return ScaledL2(term.xi)
    if prox_mode:
        if step is None or step <= 0:
            raise ValueError("a positive step size is needed to match a proximal map")
        slope = 1.0 / (1.0 + step * term.xi)
    else:
        slope = term.xi
    return make_data_term(kind, prox_mode=prox_mode, slope=slope)


def grad_d(term, ax, z):
    return term.grad(ax, z)


def hess_d_diag(term, ax, z):
    return term.hess_diag(ax, z)


def prox_apply(term, v, z, step):
    return term.prox(v, z, step)


def project_constraints(term):
    """Nearest feasible copy of ``term`` (the input is left untouched)."""
    return term.copy().project()


def grad_d_wrt_coeffs(term, ax, z, upstream, step=None):
    """VJP of the gradient (or, in prox mode, of the prox map) in the coefficients.

    For prox-mode terms ``ax`` plays the role of the prox input ``v``.
    """
    if term.prox_mode:
        return term.prox_coeff_vjp(ax, z, step, upstream)
    return term.grad_coeff_vjp(ax, z, upstream)
