"""Total deep variation regularizer with hand-written reverse mode.

The regularizer is ``R(x) = sum_pixels w . N(K x)`` where ``K`` is a zero-mean
3x3 convolution, ``N`` a stack of three-scale U-Nets built from residual
blocks ``a + K2 phi(K1 a)`` and ``w`` a 1x1 convolution.

Besides the value and ``grad_x R``, training needs vector-Jacobian products
of the map ``(x, theta) -> grad_x R`` itself.  These are obtained by pushing a
tangent through the forward pass (forward mode) and then running reverse mode
over the combined primal/tangent computation.
"""

import numpy as np

from . import _ops

_SCALES = 3


def phi(x):
    """Log-Student-t activation ``0.5 * log(1 + x^2)``."""
    return 0.5 * np.log1p(x * x)


def phi_prime(x):
    return x / (1.0 + x * x)


def phi_second(x):
    x2 = x * x
    return (1.0 - x2) / (1.0 + x2) ** 2


class StaleTapeError(RuntimeError):
    """Raised when a tape is replayed after its parameters changed."""


class TdvParams:
    """Named parameter arrays of the regularizer network.

    ``arrays`` maps parameter names to float64 arrays.  ``version`` increases
    on every in-place modification so that tapes can detect staleness.
    """

    def __init__(self, arrays, n_channels, n_features, n_blocks):
        self.arrays = arrays
        self.n_channels = n_channels
        self.n_features = n_features
        self.n_blocks = n_blocks
        self.version = 0

    @classmethod
    def initialize(cls, n_channels=1, n_features=8, n_blocks=1, rng=None):
        rng = np.random.default_rng(rng)
        m = n_features

        def he(shape):
            fan_in = shape[1] * shape[2] * shape[3]
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        arrays = {"K": he((m, n_channels, 3, 3))}
        for i in range(n_blocks):
            for j in range(1, 6):
                arrays[f"b{i}.r{j}.k1"] = he((m, m, 3, 3))
                arrays[f"b{i}.r{j}.k2"] = he((m, m, 3, 3))
            for s in (1, 2):
                arrays[f"b{i}.down{s}"] = he((m, m, 3, 3))
                arrays[f"b{i}.up{s}"] = he((m, m, 3, 3))
        arrays["w"] = np.full(m, 1e-2)
        params = cls(arrays, n_channels, n_features, n_blocks)
        project_zero_mean(params, inplace=True)
        params.version = 0
        return params

    def names(self):
        return list(self.arrays)

    @property
    def n_params(self):
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self):
        new = TdvParams({k: v.copy() for k, v in self.arrays.items()},
                        self.n_channels, self.n_features, self.n_blocks)
        new.version = self.version
        return new

    def touch(self):
        self.version += 1

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def project_zero_mean(params, inplace=False):
    """Subtract the mean of every 3x3 slice of ``K`` so that each sums to zero."""
    target = params if inplace else params.copy()
    K = target.arrays["K"]
    K -= K.mean(axis=(2, 3), keepdims=True)
    target.touch()
    return target


class _Node:
    __slots__ = ("val", "dot", "bar", "dbar")

    def __init__(self, val, dot=None):
        self.val = val
        self.dot = dot
        self.bar = None
        self.dbar = None


def _acc(old, new):
    return new if old is None else old + new


class TdvTape:
    """Activations of one forward pass, replayable in reverse.

    When ``tangent`` is given, every activation also carries its directional
    derivative along ``tangent``.
    """

    def __init__(self, params, x, tangent=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != params.n_channels:
            raise ValueError(
                f"expected input of shape (B, {params.n_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        div = 2 ** (_SCALES - 1)
        if h % div or w % div:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {div}")
        self.params = params
        self.version = params.version
        self.x = x
        self.tangent = tangent
        self._backward_ops = []
        self._nodes = []
        self.value = self._forward()

    # -- recording helpers -------------------------------------------------
    def _node(self, val, dot=None):
        n = _Node(val, dot)
        self._nodes.append(n)
        return n

    def _conv(self, a, name, mode="zero"):
        weight = self.params.arrays[name]
        out = self._node(_ops.conv3x3(a.val, weight, mode),
                         None if a.dot is None else _ops.conv3x3(a.dot, weight, mode))

        def back(grads):
            if out.bar is not None:
                a.bar = _acc(a.bar, _ops.conv3x3_adjoint(out.bar, weight, mode))
                if grads is not None:
                    grads[name] += _ops.conv3x3_weight_grad(a.val, out.bar, mode)
            if out.dbar is not None:
                a.dbar = _acc(a.dbar, _ops.conv3x3_adjoint(out.dbar, weight, mode))
                if grads is not None:
                    grads[name] += _ops.conv3x3_weight_grad(a.dot, out.dbar, mode)

        self._backward_ops.append(back)
        return out

    def _linear(self, a, fwd, adj):
        out = self._node(fwd(a.val), None if a.dot is None else fwd(a.dot))

        def back(grads):
            if out.bar is not None:
                a.bar = _acc(a.bar, adj(out.bar))
            if out.dbar is not None:
                a.dbar = _acc(a.dbar, adj(out.dbar))

        self._backward_ops.append(back)
        return out

    def _act(self, a):
        d1 = phi_prime(a.val)
        out = self._node(phi(a.val), None if a.dot is None else d1 * a.dot)

        def back(grads):
            if out.bar is not None:
                a.bar = _acc(a.bar, d1 * out.bar)
            if out.dbar is not None:
                a.dbar = _acc(a.dbar, d1 * out.dbar)
                a.bar = _acc(a.bar, phi_second(a.val) * a.dot * out.dbar)

        self._backward_ops.append(back)
        return out

    def _add(self, a, b):
        dot = None if a.dot is None else a.dot + b.dot
        out = self._node(a.val + b.val, dot)

        def back(grads):
            for src in (a, b):
                if out.bar is not None:
                    src.bar = _acc(src.bar, out.bar)
                if out.dbar is not None:
                    src.dbar = _acc(src.dbar, out.dbar)

        self._backward_ops.append(back)
        return out

    def _residual(self, a, prefix):
        h = self._conv(a, prefix + ".k1")
        h = self._act(h)
        h = self._conv(h, prefix + ".k2")
        return self._add(a, h)

    def _down(self, a, name):
        return self._linear(self._conv(a, name), _ops.blur_down, _ops.blur_down_adjoint)

    def _up(self, a, name):
        return self._conv(self._linear(a, _ops.blur_up, _ops.blur_up_adjoint), name)

    # -- network -------------------------------------------------------------
    def _forward(self):
        xt = np.ascontiguousarray(self.x.transpose(1, 0, 2, 3))
        dt = None
        if self.tangent is not None:
            dt = np.ascontiguousarray(
                np.asarray(self.tangent, dtype=np.float64).transpose(1, 0, 2, 3))
        self._input = self._node(xt, dt)
        a = self._conv(self._input, "K", mode="edge")
        prev = None
        for i in range(self.params.n_blocks):
            a1 = self._residual(a, f"b{i}.r1")
            d = self._down(a1, f"b{i}.down1")
            if prev is not None:
                d = self._add(d, prev[0])
            a2 = self._residual(d, f"b{i}.r2")
            d = self._down(a2, f"b{i}.down2")
            if prev is not None:
                d = self._add(d, prev[1])
            a3 = self._residual(d, f"b{i}.r3")
            a4 = self._residual(self._add(self._up(a3, f"b{i}.up2"), a2), f"b{i}.r4")
            a5 = self._residual(self._add(self._up(a4, f"b{i}.up1"), a1), f"b{i}.r5")
            prev = (a4, a3)
            a = a5
        self._top = a
        w = self.params.arrays["w"]
        r = np.tensordot(w, a.val, axes=(0, 0))  # (B, H, W)
        self.pixelwise = r
        value = r.sum(axis=(1, 2))
        if a.dot is not None:
            self.value_dot = np.tensordot(w, a.dot, axes=(0, 0)).sum(axis=(1, 2))
        return value

    def backward(self, seed_value=1.0, seed_dot=0.0, param_grads=True):
        """Reverse sweep; returns ``(x_bar, tangent_bar, param_grads)``.

        Seeds weight the per-sample value and its directional derivative.
        With ``param_grads=False`` the weight gradients are skipped (``None``).
        """
        if self.version != self.params.version:
            raise StaleTapeError("parameters changed since this tape was recorded")
        for n in self._nodes:
            n.bar = None
            n.dbar = None
        grads = self.params.zeros_like() if param_grads else None
        w = self.params.arrays["w"]
        top = self._top
        if seed_value:
            top.bar = np.multiply.outer(w, np.ones_like(top.val[0])) * seed_value
            if param_grads:
                grads["w"] += seed_value * top.val.sum(axis=(1, 2, 3))
        if seed_dot:
            if top.dot is None:
                raise ValueError("tape was recorded without a tangent")
            top.dbar = np.multiply.outer(w, np.ones_like(top.val[0])) * seed_dot
            if param_grads:
                grads["w"] += seed_dot * top.dot.sum(axis=(1, 2, 3))
        for back in reversed(self._backward_ops):
            back(grads)
        inp = self._input
        x_bar = np.zeros_like(self.x) if inp.bar is None else inp.bar.transpose(1, 0, 2, 3)
        t_bar = None if inp.dbar is None else inp.dbar.transpose(1, 0, 2, 3)
        return np.ascontiguousarray(x_bar), t_bar, grads


def tdv_value(params, x):
    """Per-sample regularizer values of a batch ``x`` (B, C, H, W) and the tape."""
    tape = TdvTape(params, x)
    return tape.value, tape


def tdv_grad_x(params, tape):
    """``grad_x R`` from a recorded tape."""
    if tape.params is not params:
        raise StaleTapeError("tape belongs to a different parameter object")
    x_bar, _, _ = tape.backward(1.0, 0.0, param_grads=False)
    return x_bar


def tdv_grad(params, x):
    """Convenience: value and ``grad_x R`` in one call."""
    value, tape = tdv_value(params, x)
    return value, tdv_grad_x(params, tape)


def tdv_second_order(params, x, upstream):
    """Vector-Jacobian products of ``(x, theta) -> grad_x R(x, theta)``.

    Returns ``(hvp, theta_grads)`` where ``hvp = Hess_x R . upstream`` and
    ``theta_grads`` is the gradient of ``<grad_x R(x, theta), upstream>`` in
    ``theta`` (summed over the batch).
    """
    tape = TdvTape(params, x, tangent=upstream)
    hvp, _, grads = tape.backward(0.0, 1.0)
    return hvp, grads


def tdv_vjp_theta(params, tape, upstream):
    """Parameter part of :func:`tdv_second_order` for the input stored in ``tape``."""
    if tape.version != params.version:
        raise StaleTapeError("parameters changed since this tape was recorded")
    return tdv_second_order(params, tape.x, upstream)[1]
