"""Training of the control parameters: losses, ADAM, projections and the training loops.

The controls are the stopping times, the data-term coefficients and the
regularizer weights.  A supervised branch sees pairs of clean images and
synthetic observations, an unsupervised branch sees observations only and is
scored by the patch Wasserstein loss against reference patches.  The
regularizer weights are one object shared by both branches.
"""

import csv
import json
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .datafid import DivergenceSpline, FrechetSpline, ScaledL2
from .flow import FlowConfig, NumericalError, backprop_trajectory, rollout
from .imaging import Identity, psnr
from .tdv import TdvParams, project_zero_mean
from .transport import (PatchFeatures, WassersteinConfig, extract_patches,
                        wasserstein_loss)
from .validation import as_image_list, check_fraction

LOSSES = ("l1-iota", "l2")
STREAMS = {"data": 0, "init": 1, "batch": 2, "patches": 3, "noise": 4, "unsup": 5, "val": 6}
METRIC_COLUMNS = ("iteration", "loss", "sup-loss", "wasserstein-loss", "val-psnr", "wall-seconds")


def stream_rng(seed, stream, *keys):
    """Generator for a named sub-stream of the root seed, optionally keyed by e.g. the iteration."""
    key = (STREAMS[stream],) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------
def loss_sup(x, y, kind="l1-iota", iota=1e-3):
    """Per-image loss and its gradient in ``x``.

    ``l1-iota`` is ``sqrt(||x - y||^2 + iota^2)`` and ``l2`` is ``||x - y||``
    (with zero gradient at ``x = y``).  Batches of shape (B, C, H, W) give a
    value per image; a single image gives a scalar.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    single = x.ndim <= 3
    xb = x.reshape((1,) + x.shape) if single else x
    r = xb - y.reshape(xb.shape)
    sq = np.sum(r * r, axis=tuple(range(1, xb.ndim)))
    if kind == "l1-iota":
        if iota <= 0:
            raise ValueError("iota must be positive")
        val = np.sqrt(sq + iota * iota)
        grad = r / val.reshape((-1,) + (1,) * (xb.ndim - 1))
    elif kind == "l2":
        val = np.sqrt(sq)
        safe = np.where(val > 0, val, 1.0).reshape((-1,) + (1,) * (xb.ndim - 1))
        grad = np.where(val.reshape(safe.shape) > 0, r / safe, 0.0)
    else:
        raise ValueError(f"loss must be one of {LOSSES}")
    if single:
        return float(val[0]), grad[0]
    return val, grad


def cost_j(sup_losses, unsup_losses, alpha):
    """``alpha * mean(sup) + (1 - alpha) * mean(unsup)``."""
    alpha = check_fraction(alpha, "alpha")
    total = 0.0
    if alpha > 0:
        if len(sup_losses) == 0:
            raise ValueError("supervised batch is empty but alpha > 0")
        total += alpha * float(np.mean(sup_losses))
    if alpha < 1:
        if len(unsup_losses) == 0:
            raise ValueError("unsupervised batch is empty but alpha < 1")
        total += (1.0 - alpha) * float(np.mean(unsup_losses))
    return total


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------
class Adam:
    """ADAM with bias correction acting in place on a dict of named arrays."""

    def __init__(self, lr=4e-4, beta1=0.5, beta2=0.9, eps=1e-8):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
            if np.shape(g) != np.shape(params[name]):
                raise ValueError(f"gradient shape {np.shape(g)} does not match {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def config(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t}


# --------------------------------------------------------------------------
# controls
# --------------------------------------------------------------------------
class ControlParams:
    """Stopping times, data terms and the shared regularizer of both branches."""

    def __init__(self, tdv, term_su, T_su=1.0, term_un=None, T_un=None, T_max=1000.0):
        self.tdv = tdv
        self.term_su = term_su
        self.term_un = term_un
        self.T_max = float(T_max)
        self._T = {"su": np.array(float(T_su))}
        if term_un is not None:
            self._T["un"] = np.array(float(T_su if T_un is None else T_un))
        self.project()

    @property
    def T_su(self):
        return float(self._T["su"])

    @property
    def T_un(self):
        return float(self._T["un"]) if "un" in self._T else None

    def add_unsupervised(self, term_un=None, T_un=None):
        """Attach an unsupervised branch, by default a copy of the supervised one."""
        self.term_un = self.term_su.copy() if term_un is None else term_un
        self._T["un"] = np.array(self.T_su if T_un is None else float(T_un))
        # only the new branch; re-projecting theta would perturb it by rounding
        self.term_un.project()
        np.clip(self._T["un"], 0.0, self.T_max, out=self._T["un"])
        return self

    def named_arrays(self):
        out = {"T_su": self._T["su"], "xi_su": self.term_su.coeffs}
        if self.term_un is not None:
            out["T_un"] = self._T["un"]
            out["xi_un"] = self.term_un.coeffs
        for k, v in self.tdv.arrays.items():
            out["theta." + k] = v
        return out

    def project(self):
        self.term_su.project()
        if self.term_un is not None:
            self.term_un.project()
        project_zero_mean(self.tdv, inplace=True)
        for t in self._T.values():
            np.clip(t, 0.0, self.T_max, out=t)
        return self

    def copy(self):
        new = object.__new__(ControlParams)
        new.tdv = self.tdv.copy()
        new.term_su = self.term_su.copy()
        new.term_un = None if self.term_un is None else self.term_un.copy()
        new.T_max = self.T_max
        new._T = {k: v.copy() for k, v in self._T.items()}
        return new


def check_invariants(controls, tol=1e-10):
    """Names of violated constraints; empty when the controls are feasible."""
    bad = []
    for name, term in (("term_su", controls.term_su), ("term_un", controls.term_un)):
        if term is not None and not term.is_feasible():
            bad.append(f"{name} infeasible")
    K = controls.tdv.arrays["K"]
    if np.max(np.abs(K.sum(axis=(2, 3)))) > tol:
        bad.append("K not zero-mean")
    for k, t in controls._T.items():
        if not 0.0 <= float(t) <= controls.T_max:
            bad.append(f"T_{k} outside [0, T_max]")
    return bad


class InvariantMonitor:
    def __init__(self):
        self.checks = 0
        self.failures = []

    def record(self, iteration, problems):
        self.checks += 1
        self.failures.extend(f"iteration {iteration}: {p}" for p in problems)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------
def augment(img, k, flip):
    img = np.rot90(img, k, axes=(-2, -1))
    if flip:
        img = img[..., ::-1]
    return np.ascontiguousarray(img)


def random_crop(img, size, rng):
    _, h, w = img.shape
    if size is None:
        return img
    if size > min(h, w):
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    i = rng.integers(0, h - size + 1)
    j = rng.integers(0, w - size + 1)
    return img[:, i:i + size, j:j + size]


class SupervisedSource:
    """Clean images whose observations are synthesized as ``noise(A y)``."""

    def __init__(self, clean, noise, op=None):
        self.clean = as_image_list(clean)
        self.noise = noise
        self.op = Identity() if op is None else op

    def batch(self, rng, noise_rng, size, crop, do_augment=True):
        ys = []
        for _ in range(size):
            y = random_crop(self.clean[rng.integers(len(self.clean))], crop, rng)
            if do_augment:
                y = augment(y, rng.integers(4), rng.integers(2))
            ys.append(y)
        y = np.stack(ys)
        z = self.noise.corrupt(self.op.apply(y), rng=noise_rng)
        return y, z


class UnsupervisedSource:
    """Observations without ground truth."""

    def __init__(self, observations, op=None):
        self.observations = as_image_list(observations)
        self.op = Identity() if op is None else op

    def batch(self, rng, size, crop, do_augment=True):
        zs = []
        for _ in range(size):
            z = random_crop(self.observations[rng.integers(len(self.observations))], crop, rng)
            if do_augment:
                z = augment(z, rng.integers(4), rng.integers(2))
            zs.append(z)
        return np.stack(zs)


class ReferencePatches:
    """Bank of all patches of the reference images, sampled with replacement."""

    def __init__(self, images, features, patch_size=6):
        self.bank = np.concatenate([extract_patches(im, patch_size, 1)
                                    for im in as_image_list(images)])
        self.features = features
        self.patch_size = patch_size

    def sample(self, n, rng):
        return self.features.transform(self.bank[rng.integers(0, len(self.bank), size=n)])


class ValidationSet:
    """Fixed pairs of clean images and observations."""

    def __init__(self, clean, observations, op=None):
        self.clean = as_image_list(clean)
        self.observations = as_image_list(observations)
        if len(self.clean) != len(self.observations):
            raise ValueError("validation lists differ in length")
        self.op = Identity() if op is None else op

    @classmethod
    def synthesize(cls, clean, noise, op=None, seed=0):
        op = Identity() if op is None else op
        clean = as_image_list(clean)
        rng = stream_rng(seed, "val")
        obs = [noise.corrupt(op.apply(y[None]), rng=rng)[0] for y in clean]
        return cls(clean, obs, op)

    def noisy_psnr(self):
        return float(np.mean([psnr(self.op.init(z[None])[0], y)
                              for y, z in zip(self.clean, self.observations)]))

    def score(self, flow, term, tdv, T):
        cfg = flow.with_T(T)
        vals = []
        for y, z in zip(self.clean, self.observations):
            x = rollout(z[None], cfg, term, tdv, self.op).terminal[0]
            vals.append(psnr(x, y))
        return float(np.mean(vals))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    batch_size: int = 4
    unsup_batch_size: int = 0
    iterations: int = 500
    loss: str = "l1-iota"
    iota: float = 1e-3
    alpha: float = 1.0
    crop: int = 48
    augment: bool = True
    eval_interval: int = 50
    lr_milestone: int = 0
    lr_decay: float = 0.25
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.loss == "l1-iota" and self.iota <= 0:
            raise ValueError("iota must be positive")
        check_fraction(self.alpha, "alpha")
        if self.crop is not None and self.crop % 4:
            raise ValueError("crop must be divisible by 4")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be positive")

    def lr_at(self, iteration):
        if self.lr_milestone > 0:
            return self.lr * self.lr_decay ** (iteration // self.lr_milestone)
        return self.lr


def _theta(grads):
    return {"theta." + k: v for k, v in grads.items()}


class Trainer:
    """Runs the (shared-prior) training loop and keeps everything needed to resume.

    With ``alpha = 1`` and no unsupervised branch this is plain supervised
    training.  All randomness of iteration ``k`` comes from generators keyed by
    ``(seed, stream, k)``, so a resumed run continues bit-exactly.
    """

    def __init__(self, controls, flow, cfg, sup=None, unsup=None, refs=None, wcfg=None,
                 val=None, val_branch="su"):
        self.controls = controls
        self.flow = flow
        self.cfg = cfg
        self.sup = sup
        self.unsup = unsup
        self.refs = refs
        self.wcfg = WassersteinConfig() if wcfg is None else wcfg
        self.val = val
        self.val_branch = val_branch
        self.optimizer = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.iteration = 0
        self.history = []
        self.wall = 0.0
        self.monitor = InvariantMonitor()
        self._acc = []
        if cfg.alpha > 0 and sup is None:
            raise ValueError("alpha > 0 needs a supervised source")
        if cfg.alpha < 1:
            if unsup is None or refs is None:
                raise ValueError("alpha < 1 needs unsupervised observations and reference patches")
            if controls.term_un is None:
                controls.add_unsupervised()

    def _sup_branch(self, k):
        cfg, cp = self.cfg, self.controls
        y, z = self.sup.batch(stream_rng(cfg.seed, "batch", k), stream_rng(cfg.seed, "noise", k),
                              cfg.batch_size, cfg.crop, cfg.augment)
        fcfg = self.flow.with_T(cp.T_su)
        traj = rollout(z, fcfg, cp.term_su, cp.tdv, self.sup.op)
        vals, g = loss_sup(traj.terminal, y, cfg.loss, cfg.iota)
        gT, gc, gth = backprop_trajectory(traj, fcfg, cp.term_su, cp.tdv, g / len(vals),
                                          self.sup.op)
        return vals, gT, gc, gth

    def _unsup_branch(self, k):
        cfg, cp = self.cfg, self.controls
        size = cfg.unsup_batch_size or cfg.batch_size
        z = self.unsup.batch(stream_rng(cfg.seed, "unsup", k), size, cfg.crop, cfg.augment)
        fcfg = self.flow.with_T(cp.T_un)
        traj = rollout(z, fcfg, cp.term_un, cp.tdv, self.unsup.op)
        prng = stream_rng(cfg.seed, "patches", k)
        n = len(traj.terminal) * _count(traj.terminal.shape, self.wcfg)
        refs = self.refs.sample(n, prng)
        w, g, plan = wasserstein_loss(traj.terminal, refs, self.refs.features, self.wcfg, prng)
        gT, gc, gth = backprop_trajectory(traj, fcfg, cp.term_un, cp.tdv, g, self.unsup.op)
        return w, gT, gc, gth, plan

    def gradients(self, k=None):
        """Objective terms and control gradients at iteration ``k`` without stepping.

        Returns ``(J, sup_loss, w_loss, grads, plan)``; ``grads`` is keyed like
        :meth:`ControlParams.named_arrays`.
        """
        k = self.iteration if k is None else k
        a = self.cfg.alpha
        grads = {}
        theta = None
        sup_loss = w_loss = float("nan")
        sup_vals, un_vals = [], []
        plan = None
        if a > 0:
            sup_vals, gT, gc, gth = self._sup_branch(k)
            sup_loss = float(np.mean(sup_vals))
            grads["T_su"] = np.array(a * gT)
            grads["xi_su"] = a * gc
            theta = {n: a * g for n, g in gth.items()}
        if a < 1:
            w_loss, gT, gc, gth, plan = self._unsup_branch(k)
            un_vals = [w_loss]
            grads["T_un"] = np.array((1.0 - a) * gT)
            grads["xi_un"] = (1.0 - a) * gc
            if theta is None:
                theta = {n: (1.0 - a) * g for n, g in gth.items()}
            else:
                theta = {n: theta[n] + (1.0 - a) * gth[n] for n in theta}
        grads.update(_theta(theta))
        return cost_j(sup_vals, un_vals, a), sup_loss, w_loss, grads, plan

    def step(self):
        """One optimizer step; returns ``(J, mean sup loss, wasserstein loss)``."""
        cfg, cp = self.cfg, self.controls
        k = self.iteration
        J, sup_loss, w_loss, grads, plan = self.gradients(k)
        self.optimizer.step(cp.named_arrays(), grads, lr=cfg.lr_at(k))
        cp.project()
        cp.tdv.touch()
        self.iteration += 1
        if cfg.debug:
            problems = check_invariants(cp)
            if plan is not None and plan.marginal_error() > 1e-6:
                problems.append(f"plan marginal error {plan.marginal_error():.3g}")
            self.monitor.record(self.iteration, problems)
        return J, sup_loss, w_loss

    def validate(self):
        if self.val is None:
            return float("nan")
        cp = self.controls
        if self.val_branch == "un":
            return self.val.score(self.flow, cp.term_un, cp.tdv, cp.T_un)
        return self.val.score(self.flow, cp.term_su, cp.tdv, cp.T_su)

    def run(self, iterations=None, checkpoint_path=None, checkpoint_every=0, callback=None):
        total = self.cfg.iterations if iterations is None else iterations
        target = self.iteration + total
        start = time.perf_counter()
        base = self.wall
        while self.iteration < target:
            self._acc.append(self.step())
            if self.iteration % self.cfg.eval_interval == 0:
                acc = np.array(self._acc)
                self._acc = []
                self.wall = base + time.perf_counter() - start
                row = {"iteration": self.iteration, "loss": float(np.mean(acc[:, 0])),
                       "sup-loss": float(np.mean(acc[:, 1])),
                       "wasserstein-loss": float(np.mean(acc[:, 2])),
                       "val-psnr": self.validate(), "wall-seconds": self.wall}
                self.history.append(row)
                if callback is not None:
                    callback(row)
            if checkpoint_path and checkpoint_every and self.iteration % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, self.checkpoint())
        self.wall = base + time.perf_counter() - start
        return self

    def checkpoint(self):
        return Checkpoint(controls=self.controls, iteration=self.iteration,
                          optimizer=self.optimizer, train=asdict(self.cfg),
                          flow=asdict(self.flow), history=list(self.history),
                          features=None if self.refs is None else self.refs.features,
                          wall=self.wall, pending=[list(r) for r in self._acc])

    def restore(self, ckpt):
        """Continue from ``ckpt``: controls, optimizer state, counter and history."""
        self.controls = ckpt.controls
        if ckpt.optimizer is not None:
            self.optimizer = ckpt.optimizer
        self.iteration = ckpt.iteration
        self.history = list(ckpt.history)
        self.wall = ckpt.wall
        self._acc = [tuple(r) for r in ckpt.pending]
        if self.cfg.alpha < 1 and self.controls.term_un is None:
            self.controls.add_unsupervised()
        return self


def _count(shape, wcfg):
    h, w = shape[-2:]
    n_p, s = wcfg.patch_size, wcfg.stride
    return ((h - n_p) // s + 1) * ((w - n_p) // s + 1)


def train_supervised(sup, controls, flow, cfg, val=None, **run_kw):
    trainer = Trainer(controls, flow, cfg, sup=sup, val=val)
    return trainer.run(**run_kw)


def train_shared_prior(sup, unsup, refs, controls, flow, cfg, wcfg=None, val=None,
                       val_branch="un", **run_kw):
    trainer = Trainer(controls, flow, cfg, sup=sup, unsup=unsup, refs=refs, wcfg=wcfg,
                      val=val, val_branch=val_branch)
    return trainer.run(**run_kw)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
MAGIC = b"ERCKPT\x00\x00"
VERSION = 1
_ENDIAN_TAG = struct.pack("<I", 0x01020304)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    controls: ControlParams
    iteration: int = 0
    optimizer: Adam = None
    train: dict = None
    flow: dict = None
    history: list = None
    features: PatchFeatures = None
    wall: float = 0.0
    pending: list = None
    extra: dict = None

    def __post_init__(self):
        self.history = [] if self.history is None else self.history
        self.pending = [] if self.pending is None else self.pending
        self.extra = {} if self.extra is None else self.extra

    def flow_config(self):
        return FlowConfig(**self.flow) if self.flow else None


def term_spec(term):
    if isinstance(term, ScaledL2):
        return {"kind": term.kind}
    if isinstance(term, FrechetSpline):
        return {"kind": term.kind, "prox_mode": term.prox_mode, "n_knots": term.n, "Q": term.Q}
    if isinstance(term, DivergenceSpline):
        return {"kind": term.kind, "prox_mode": term.prox_mode, "half_width": term.N,
                "Q": term.Q}
    raise CheckpointError(f"cannot serialize data term {type(term).__name__}")


def term_from_spec(spec, coeffs):
    kind = spec["kind"]
    if kind == "scaled-l2":
        return ScaledL2(float(coeffs))
    if kind == "frechet":
        return FrechetSpline(spec["n_knots"], spec["Q"], spec["prox_mode"], coeffs=coeffs)
    if kind == "divergence":
        return DivergenceSpline(spec["half_width"], spec["Q"], spec["prox_mode"], coeffs=coeffs)
    raise CheckpointError(f"unknown data term kind {kind!r}")


def metrics_path(path):
    path = Path(path)
    return path.with_name(path.name + ".metrics.csv")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["iteration"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_COLUMNS:
            raise CheckpointError(f"unexpected metrics header {header}")
        return [{"iteration": int(r[0]), **{c: float(v) for c, v in zip(METRIC_COLUMNS[1:], r[1:])}}
                for r in reader]


def _tensors(ckpt):
    cp = ckpt.controls
    out = {"T_su": cp._T["su"], "xi_su": cp.term_su.coeffs}
    if cp.term_un is not None:
        out["T_un"] = cp._T["un"]
        out["xi_un"] = cp.term_un.coeffs
    for k, v in cp.tdv.arrays.items():
        out["theta." + k] = v
    if ckpt.optimizer is not None:
        for k, v in ckpt.optimizer.m.items():
            out["adam.m." + k] = v
        for k, v in ckpt.optimizer.v.items():
            out["adam.v." + k] = v
    if ckpt.features is not None and hasattr(ckpt.features, "matrix_"):
        out["features.matrix"] = ckpt.features.matrix_
    return out


def write_container(path, meta, tensors):
    """Header, JSON meta blob and named little-endian float64 tensors."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), _ENDIAN_TAG, struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def read_container(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if data[12:16] != _ENDIAN_TAG:
        raise CheckpointError("checkpoint endianness tag mismatch")
    (n_meta,) = struct.unpack_from("<Q", data, 16)
    pos = 24
    meta = json.loads(data[pos:pos + n_meta].decode("utf-8"))
    pos += n_meta
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos) \
            .reshape(shape).astype(np.float64)
        pos += 8 * size
    return meta, tensors


def save_checkpoint(path, ckpt, metrics=True):
    """Write the binary container and, if there is a history, its metrics CSV sidecar."""
    cp = ckpt.controls
    feats = ckpt.features
    meta = {
        "kind": "controls",
        "iteration": ckpt.iteration,
        "T_max": cp.T_max,
        "tdv": {"n_channels": cp.tdv.n_channels, "n_features": cp.tdv.n_features,
                "n_blocks": cp.tdv.n_blocks},
        "term_su": term_spec(cp.term_su),
        "term_un": None if cp.term_un is None else term_spec(cp.term_un),
        "optimizer": None if ckpt.optimizer is None else ckpt.optimizer.config(),
        "train": ckpt.train,
        "flow": ckpt.flow,
        "features": None if feats is None else feats.get_params(),
        "pending": ckpt.pending,
        "extra": ckpt.extra,
    }
    path = write_container(path, meta, _tensors(ckpt))
    if metrics and ckpt.history:
        write_metrics_csv(metrics_path(path), ckpt.history)
    return path


def load_checkpoint(path):
    meta, tensors = read_container(path)
    if meta.get("kind") != "controls":
        raise CheckpointError(f"{path} does not hold control parameters")
    t = meta["tdv"]
    arrays = {k[6:]: v for k, v in tensors.items() if k.startswith("theta.")}
    tdv = TdvParams(arrays, t["n_channels"], t["n_features"], t["n_blocks"])
    cp = object.__new__(ControlParams)
    cp.tdv = tdv
    cp.T_max = meta["T_max"]
    cp.term_su = term_from_spec(meta["term_su"], tensors["xi_su"])
    cp.term_un = None if meta["term_un"] is None else term_from_spec(meta["term_un"],
                                                                     tensors["xi_un"])
    cp._T = {"su": tensors["T_su"]}
    if "T_un" in tensors:
        cp._T["un"] = tensors["T_un"]
    opt = None
    if meta["optimizer"] is not None:
        o = meta["optimizer"]
        opt = Adam(o["lr"], o["beta1"], o["beta2"], o["eps"])
        opt.t = o["t"]
        opt.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        opt.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    feats = None
    if meta["features"] is not None:
        feats = PatchFeatures(**meta["features"])
        if "features.matrix" in tensors:
            feats.matrix_ = tensors["features.matrix"]
    history = []
    mpath = metrics_path(path)
    if mpath.exists():
        history = read_metrics_csv(mpath)
    return Checkpoint(controls=cp, iteration=meta["iteration"], optimizer=opt,
                      train=meta["train"], flow=meta["flow"], history=history, features=feats,
                      wall=history[-1]["wall-seconds"] if history else 0.0,
                      pending=meta["pending"], extra=meta.get("extra") or {})


def save_features(path, feats, extra=None):
    """Store a fitted feature map (e.g. a trained autoencoder) on its own."""
    meta = {"kind": "features", "features": feats.get_params(), "extra": extra or {}}
    tensors = {"features.matrix": feats.matrix_}
    if hasattr(feats, "encoder_"):
        tensors["features.encoder"] = feats.encoder_
    return write_container(path, meta, tensors)


def load_features(path):
    meta, tensors = read_container(path)
    if meta.get("kind") != "features":
        raise CheckpointError(f"{path} does not hold a feature map")
    feats = PatchFeatures(**meta["features"])
    feats.matrix_ = tensors["features.matrix"]
    if "features.encoder" in tensors:
        feats.encoder_ = tensors["features.encoder"]
        feats.decoder_ = feats.encoder_.T
    return feats


def config_from_dict(cls, values):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)
