"""Time discretizations of the gradient flow and reverse mode through them.

The state equation ``x' = -T (A^T grad D(Ax, z) + grad R(x))`` on [0, 1] is
discretized with ``S`` steps of size ``tau = T / S`` by one of

* ``expl``: explicit Euler,
* ``impl``: explicit step on ``R`` followed by the proximal map of ``D``
  (denoising only, ``A = Id``),
* ``en``: explicit step on ``R`` followed by one Newton step of the proximal
  problem, solved with a fixed number of conjugate-gradient iterations.

All functions operate on batches of shape ``(B, C, H, W)``.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .imaging import Identity
from .tdv import tdv_grad, tdv_second_order

SCHEMES = ("expl", "impl", "en")


class NumericalError(FloatingPointError):
    """A state became non-finite during a rollout."""


class CGNotConvergedWarning(RuntimeWarning):
    pass


@dataclass
class FlowConfig:
    scheme: str = "impl"
    steps: int = 10
    T: float = 1.0
    T_max: float = 1000.0
    cg_iters: int = 10
    cg_tol: float = 1e-10

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0.0 <= self.T <= self.T_max:
            raise ValueError(f"T={self.T} outside [0, {self.T_max}]")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be at least 1")

    @property
    def tau(self):
        return self.T / self.steps

    def with_T(self, T):
        return replace(self, T=float(T))


@dataclass
class StepRecord:
    x: np.ndarray
    grad_r: np.ndarray
    extra: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    states: list
    records: list
    z: np.ndarray

    @property
    def terminal(self):
        return self.states[-1]


def _op(op):
    return Identity() if op is None else op


def _check_scheme_op(cfg, op):
    if cfg.scheme == "impl" and not isinstance(op, Identity):
        raise ValueError("the semi-implicit scheme requires the identity operator")


def _reg_grad(params, x):
    if params is None:
        return np.zeros_like(x)
    return tdv_grad(params, x)[1]


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite state after step {step}; try a smaller T or more steps")


def _bdot(a, b):
    return np.sum(a * b, axis=(1, 2, 3), keepdims=True)


def _safe_div(num, den):
    ok = den != 0
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0), ok


def _newton_matvec(p, tau, h, op):
    return p / tau + op.adjoint(h * op.apply(p))


def conjugate_gradient(b, tau, h, op, iters, tol, trace=False):
    """Solve ``(I/tau + A^T diag(h) A) d = b`` per sample, starting from zero.

    Stops early once every sample's residual is below ``tol * ||b||``.
    With ``trace=True`` the iterates needed for reverse mode are returned.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = _bdot(r, r)
    stop = tol * tol * rr
    steps = []
    converged = bool(np.all(rr <= stop))
    for _ in range(iters):
        if converged:
            break
        Ap = _newton_matvec(p, tau, h, op)
        pAp = _bdot(p, Ap)
        alpha, _ = _safe_div(rr, pAp)
        x_new = x + alpha * p
        r_new = r - alpha * Ap
        rr_new = _bdot(r_new, r_new)
        beta, _ = _safe_div(rr_new, rr)
        if trace:
            steps.append(dict(p=p, Ap=Ap, pAp=pAp, rr=rr, alpha=alpha, beta=beta,
                              r_new=r_new, rr_new=rr_new))
        x, r, p, rr = x_new, r_new, r_new + beta * p, rr_new
        converged = bool(np.all(rr <= stop))
    if not converged:
        warnings.warn(f"CG residual above tolerance after {iters} iterations",
                      CGNotConvergedWarning, stacklevel=2)
    return (x, steps) if trace else x


def conjugate_gradient_reverse(d_bar, b, steps, tau, h, op):
    """Reverse mode through the recorded CG iterations.

    Returns adjoints ``(b_bar, h_bar, tau_bar)`` of the right-hand side, the
    Hessian diagonal and the step size.
    """
    xb = d_bar.copy()
    rb = np.zeros_like(b)
    pb = np.zeros_like(b)
    rrb = np.zeros((b.shape[0], 1, 1, 1))
    h_bar = np.zeros_like(h)
    tau_bar = 0.0
    for st in reversed(steps):
        p, Ap, pAp, rr = st["p"], st["Ap"], st["pAp"], st["rr"]
        alpha, beta, r_new, rr_new = st["alpha"], st["beta"], st["r_new"], st["rr_new"]
        # p_next = r_new + beta * p
        rb = rb + pb
        beta_bar = _bdot(pb, p)
        pb_k = beta * pb
        # beta = rr_new / rr
        inv_rr, ok_rr = _safe_div(1.0, rr)
        rrb = rrb + beta_bar * inv_rr
        rrb_k = np.where(ok_rr, -beta_bar * rr_new * inv_rr ** 2, 0.0)
        # rr_new = <r_new, r_new>
        rb = rb + 2.0 * rrb * r_new
        # r_new = r - alpha * Ap
        alpha_bar = -_bdot(rb, Ap)
        Ap_bar = -alpha * rb
        rb_k = rb
        # x_new = x + alpha * p
        alpha_bar = alpha_bar + _bdot(xb, p)
        pb_k = pb_k + alpha * xb
        # alpha = rr / pAp
        inv_pAp, ok_pAp = _safe_div(1.0, pAp)
        rrb_k = rrb_k + alpha_bar * inv_pAp
        pAp_bar = np.where(ok_pAp, -alpha_bar * rr * inv_pAp ** 2, 0.0)
        # pAp = <p, Ap>
        pb_k = pb_k + pAp_bar * Ap
        Ap_bar = Ap_bar + pAp_bar * p
        # Ap = p / tau + A^T (h * A p)
        pb_k = pb_k + _newton_matvec(Ap_bar, tau, h, op)
        tau_bar -= float(np.sum(p * Ap_bar)) / tau ** 2
        h_bar += op.apply(p) * op.apply(Ap_bar)
        rb, pb, rrb = rb_k, pb_k, rrb_k
    b_bar = rb + pb + 2.0 * rrb * b
    return b_bar, h_bar, tau_bar


# --------------------------------------------------------------------------
# single steps
# --------------------------------------------------------------------------
def _step(x, z, cfg, term, params, op, record):
    op = _op(op)
    _check_scheme_op(cfg, op)
    tau = cfg.tau
    g_r = _reg_grad(params, x)
    rec = StepRecord(x=x, grad_r=g_r)
    if cfg.scheme == "expl":
        ax = op.apply(x)
        g_d = op.adjoint(term.grad(ax, z))
        x_new = x - tau * (g_d + g_r)
        rec.extra["g_d"] = g_d
    elif cfg.scheme == "impl":
        v = x - tau * g_r
        x_new = term.prox(v, z, tau)
        rec.extra["v"] = v
    else:
        xh = x - tau * g_r
        if tau == 0.0:
            x_new = xh
            rec.extra.update(xh=xh, zero_step=True)
        else:
            r = op.apply(xh)
            b = op.adjoint(term.grad(r, z))
            h = term.hess_diag(r, z)
            d, trace = conjugate_gradient(b, tau, h, op, cfg.cg_iters, cfg.cg_tol, trace=True)
            x_new = xh - d
            rec.extra.update(xh=xh, r=r, b=b, h=h, cg=trace, zero_step=False)
    return (x_new, rec) if record else x_new


def step_expl(x, z, cfg, term, params, op=None):
    return _step(x, z, replace(cfg, scheme="expl"), term, params, op, False)


def step_impl(x, z, cfg, term, params, op=None):
    return _step(x, z, replace(cfg, scheme="impl"), term, params, op, False)


def step_en(x, z, cfg, term, params, op=None):
    return _step(x, z, replace(cfg, scheme="en"), term, params, op, False)


def rollout(z, cfg, term, params, op=None, x0=None):
    """Run ``cfg.steps`` steps from ``x0 = A_init z`` and record the trajectory."""
    op = _op(op)
    z = np.asarray(z, dtype=np.float64)
    x = op.init(z) if x0 is None else np.asarray(x0, dtype=np.float64)
    states = [x]
    records = []
    for s in range(cfg.steps):
        x, rec = _step(x, z, cfg, term, params, op, True)
        _check_finite(x, s + 1)
        states.append(x)
        records.append(rec)
    return Trajectory(states=states, records=records, z=z)


# --------------------------------------------------------------------------
# reverse mode
# --------------------------------------------------------------------------
def _reg_reverse(params, rec, xb, tau, grads_theta):
    """Adjoint of ``x -> x - tau grad R(x)``; returns ``(x_bar, tau_bar)``."""
    tau_bar = -float(np.sum(xb * rec.grad_r))
    if params is None:
        return xb, tau_bar
    hvp, g_theta = tdv_second_order(params, rec.x, xb)
    for k, v in g_theta.items():
        grads_theta[k] -= tau * v
    return xb - tau * hvp, tau_bar


def backprop_trajectory(traj, cfg, term, params, grad_terminal, op=None):
    """Gradients of ``loss(x_S)`` with respect to ``T``, the data-term coefficients and theta.

    ``grad_terminal`` is ``d loss / d x_S``.  Returns ``(grad_T, grad_coeffs,
    grad_theta)``; ``grad_theta`` is ``None`` when ``params`` is ``None``.
    """
    op = _op(op)
    if len(traj.records) != cfg.steps:
        raise ValueError("trajectory does not match the configured number of steps")
    tau = cfg.tau
    z = traj.z
    xb = np.asarray(grad_terminal, dtype=np.float64).copy()
    tau_bar = 0.0
    coeff_bar = np.zeros_like(term.coeffs)
    grads_theta = None if params is None else params.zeros_like()
    for rec in reversed(traj.records):
        if cfg.scheme == "expl":
            ax = op.apply(rec.x)
            axb = op.apply(xb)
            tau_bar -= float(np.sum(xb * (rec.extra["g_d"] + rec.grad_r)))
            coeff_bar -= tau * term.grad_coeff_vjp(ax, z, axb)
            data_part = op.adjoint(term.hess_diag(ax, z) * axb)
            x_reg, _ = _reg_reverse(params, rec, xb, tau, grads_theta)
            xb = x_reg - tau * data_part
        elif cfg.scheme == "impl":
            v = rec.extra["v"]
            vb = term.prox_dv(v, z, tau) * xb
            tau_bar += float(np.sum(term.prox_dstep(v, z, tau) * xb))
            coeff_bar += term.prox_coeff_vjp(v, z, tau, xb)
            xb, tb = _reg_reverse(params, rec, vb, tau, grads_theta)
            tau_bar += tb
        else:
            if rec.extra["zero_step"]:
                xhb = xb
            else:
                r, b, h = rec.extra["r"], rec.extra["b"], rec.extra["h"]
                b_bar, h_bar, tb = conjugate_gradient_reverse(-xb, b, rec.extra["cg"], tau, h, op)
                tau_bar += tb
                ab = op.apply(b_bar)
                rb = term.hess_diag(r, z) * ab + term.hess_deriv(r, z) * h_bar
                coeff_bar += term.grad_coeff_vjp(r, z, ab) + term.hess_coeff_vjp(r, z, h_bar)
                xhb = xb + op.adjoint(rb)
            xb, tb = _reg_reverse(params, rec, xhb, tau, grads_theta)
            tau_bar += tb
    return tau_bar / cfg.steps, coeff_bar, grads_theta
