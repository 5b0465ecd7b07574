"""Command-line entry point: ``energy-recon <command> --config FILE [--key value ...]``.

The configuration is a flat ``section.key = value`` text file.  Command-line
``--section.key value`` pairs override file values.  Every key is checked
against :data:`SCHEMA` before any work starts.
"""

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .datafid import make_data_term, term_like
from .flow import FlowConfig, NumericalError, rollout
from .imaging import (Identity, load_image, make_noise, make_operator, psnr, save_image)
from .learn import (ControlParams, ReferencePatches, SupervisedSource, TrainConfig, Trainer,
                    UnsupervisedSource, ValidationSet, load_checkpoint, load_features,
                    save_checkpoint, save_features, stream_rng, write_metrics_csv)
from .tdv import TdvParams
from .transport import PatchFeatures, WassersteinConfig, extract_batch, train_ae

COMMANDS = ("train-sup", "train-shared", "reconstruct", "eval", "consistency", "make-data",
            "train-ae")
IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm", ".tif", ".tiff", ".bmp", ".npy", ".jpg"}

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _strs(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


# key -> (parser, default)
SCHEMA = {
    "run.seed": (int, 0),
    "run.out": (str, "out"),
    "data.input_dir": (str, ""),
    "data.clean_dir": (str, ""),
    "data.unsup_dir": (str, ""),
    "data.ref_dir": (str, ""),
    "data.val_clean_dir": (str, ""),
    "data.val_observed_dir": (str, ""),
    "data.reference_dir": (str, ""),
    "data.test_dir": (str, ""),
    "noise.kind": (str, "gaussian"),
    "noise.sigma": (float, 25.0),
    "noise.fraction": (float, 0.1),
    "noise.peak": (float, 4.0),
    "operator.kind": (str, "identity"),
    "operator.scale": (int, 2),
    "operator.sigma": (float, 1.0),
    "operator.pattern": (str, "RGGB"),
    "flow.scheme": (str, "impl"),
    "flow.steps": (int, 10),
    "flow.T": (float, 1.0),
    "flow.T_max": (float, 1000.0),
    "flow.cg_iters": (int, 10),
    "tdv.n_features": (int, 8),
    "tdv.n_blocks": (int, 1),
    "term.kind": (str, "scaled-l2"),
    "term.prox_mode": (str, "auto"),
    "term.n_knots": (int, 31),
    "term.half_width": (int, 15),
    "term.Q": (float, 2.0),
    "term.xi": (float, 1.0),
    "term_un.kind": (str, "copy"),
    "train.lr": (float, 4e-4),
    "train.beta1": (float, 0.5),
    "train.beta2": (float, 0.9),
    "train.eps": (float, 1e-8),
    "train.batch_size": (int, 4),
    "train.unsup_batch_size": (int, 0),
    "train.iterations": (int, 500),
    "train.loss": (str, "l1-iota"),
    "train.iota": (float, 1e-3),
    "train.alpha": (float, 0.8),
    "train.crop": (int, 48),
    "train.augment": (_bool, True),
    "train.eval_interval": (int, 50),
    "train.lr_milestone": (int, 0),
    "train.lr_decay": (float, 0.25),
    "train.checkpoint_every": (int, 0),
    "train.debug": (_bool, False),
    "transport.features": (str, "DCT"),
    "transport.patch_size": (int, 6),
    "transport.stride": (int, 3),
    "transport.p": (float, 1.0),
    "transport.beta": (float, 1.0),
    "transport.iters": (int, 50),
    "transport.ae_path": (str, ""),
    "transport.n_components": (int, 0),
    "transport.ae_stride": (int, 1),
    "ckpt.init": (str, ""),
    "ckpt.path": (str, ""),
    "ckpt.resume": (str, ""),
    "reconstruct.branch": (str, "su"),
    "reconstruct.trajectory": (_bool, False),
    "reconstruct.format": (str, ""),
    "eval.y_channel": (_bool, False),
    "eval.border": (int, 0),
    "consistency.steps": (_ints, "5,10,20,40,80"),
    "consistency.reference_steps": (int, 320),
    "consistency.schemes": (_strs, "expl,en"),
    "consistency.crop": (int, 32),
    "make_data.unsupervised": (_bool, False),
    "make_data.format": (str, "npy"),
}


# output locations and resume points do not change what is computed
HASH_EXCLUDED = ("run.out", "ckpt.resume")


class ConfigError(ValueError):
    pass


class Config:
    """Validated flat configuration; ``explicit`` lists keys set by the user."""

    def __init__(self, values, explicit):
        self.values = values
        self.explicit = set(explicit)

    @classmethod
    def build(cls, text_pairs):
        raw = {}
        for key, value in text_pairs:
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            raw[key] = value
        values = {}
        for key, (parse, default) in SCHEMA.items():
            text = raw.get(key, default)
            try:
                values[key] = parse(text) if isinstance(text, str) else text
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        return cls(values, raw)

    def __getitem__(self, key):
        return self.values[key]

    def require(self, key):
        if not self.values[key]:
            raise ConfigError(f"{key} must be set for this command")
        return self.values[key]

    def require_dir(self, key):
        path = Path(self.require(key))
        if not path.is_dir():
            raise ConfigError(f"{key}: directory {path} does not exist")
        return path

    def canonical(self, skip=()):
        return "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values) if k not in skip)

    @property
    def hash(self):
        """Digest of every setting that can influence results (not where they are written)."""
        text = self.canonical(skip=HASH_EXCLUDED)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @property
    def out(self):
        out = Path(self.values["run.out"])
        out.mkdir(parents=True, exist_ok=True)
        return out


def read_config_file(path):
    pairs = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        pairs.append((key, value))
    return pairs


def parse_overrides(tokens):
    pairs = []
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"missing value for {tok}") from None
        pairs.append((key, value))
    return pairs


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------
def list_images(directory):
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no images found in {directory}")
    return files


def load_dir(directory):
    files = list_images(directory)
    return [f.stem for f in files], [load_image(f) for f in files]


def build_noise(cfg):
    kind = cfg["noise.kind"]
    if kind in ("gaussian", "laplace"):
        return make_noise(kind, sigma=cfg["noise.sigma"] / 255.0)
    if kind == "salt-pepper":
        return make_noise(kind, fraction=cfg["noise.fraction"])
    if kind == "poisson":
        return make_noise(kind, peak=cfg["noise.peak"])
    if kind == "mixture":
        return make_noise(kind)
    raise ConfigError(f"unknown noise kind {kind!r}")


def build_operator(cfg):
    try:
        return make_operator(cfg["operator.kind"], cfg["operator.scale"], cfg["operator.sigma"],
                             cfg["operator.pattern"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_flow(cfg, base=None):
    values = dict(base or {})
    for key in ("scheme", "steps", "T", "T_max", "cg_iters"):
        if base is None or f"flow.{key}" in cfg.explicit:
            values[key] = cfg[f"flow.{key}"]
    try:
        return FlowConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def build_term(cfg, scheme):
    mode = cfg["term.prox_mode"]
    prox = scheme == "impl" if mode == "auto" else _bool(mode)
    try:
        return make_data_term(cfg["term.kind"], prox, cfg["term.n_knots"], cfg["term.half_width"],
                              cfg["term.Q"], cfg["term.xi"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_train(cfg, alpha):
    try:
        return TrainConfig(
            lr=cfg["train.lr"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
            eps=cfg["train.eps"], batch_size=cfg["train.batch_size"],
            unsup_batch_size=cfg["train.unsup_batch_size"], iterations=cfg["train.iterations"],
            loss=cfg["train.loss"], iota=cfg["train.iota"], alpha=alpha, crop=cfg["train.crop"],
            augment=cfg["train.augment"], eval_interval=cfg["train.eval_interval"],
            lr_milestone=cfg["train.lr_milestone"], lr_decay=cfg["train.lr_decay"],
            seed=cfg["run.seed"], debug=cfg["train.debug"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def check_compatible(term, scheme, op):
    if term.prox_mode and scheme != "impl":
        raise ConfigError(f"data term parametrizes a proximal map; scheme {scheme!r} needs a "
                          "gradient-mode term")
    if not term.prox_mode and scheme == "impl" and term.kind != "scaled-l2":
        raise ConfigError("the semi-implicit scheme needs a prox-mode spline data term")
    if scheme == "impl" and not isinstance(op, Identity):
        raise ConfigError("the semi-implicit scheme requires operator.kind = identity")


def fresh_controls(cfg, n_channels, scheme):
    tdv = TdvParams.initialize(n_channels, cfg["tdv.n_features"], cfg["tdv.n_blocks"],
                               rng=stream_rng(cfg["run.seed"], "init"))
    return ControlParams(tdv, build_term(cfg, scheme), cfg["flow.T"], T_max=cfg["flow.T_max"])


def load_controls(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None


def build_features(cfg, n_channels):
    kind = cfg["transport.features"]
    if kind == "AE":
        path = cfg.require("transport.ae_path")
        try:
            return load_features(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load feature map {path}: {exc}") from None
    if kind not in ("ID", "DCT"):
        raise ConfigError(f"unknown feature operator {kind!r}")
    return PatchFeatures(kind, cfg["transport.patch_size"], n_channels).fit()


def paired_validation(cfg, op):
    if not cfg["data.val_clean_dir"]:
        return None
    names, clean = load_dir(cfg.require_dir("data.val_clean_dir"))
    if cfg["data.val_observed_dir"]:
        onames, obs = load_dir(cfg.require_dir("data.val_observed_dir"))
        if onames != names:
            raise ConfigError("validation clean and observed directories hold different files")
        return ValidationSet(clean, obs, op)
    return None


def _write_run_info(cfg, command):
    out = cfg.out
    (out / "config.txt").write_text(f"# command: {command}\n# config-hash: {cfg.hash}\n"
                                    + cfg.canonical() + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------
def cmd_make_data(cfg):
    src = cfg.require_dir("data.input_dir")
    noise = build_noise(cfg)
    op = build_operator(cfg)
    fmt = cfg["make_data.format"].lstrip(".")
    out = cfg.out
    rows = []
    for i, f in enumerate(list_images(src)):
        y = load_image(f)
        z = noise.corrupt(op.apply(y[None]), rng=stream_rng(cfg["run.seed"], "data", i))[0]
        if not cfg["make_data.unsupervised"]:
            save_image(y, out / "clean" / f"{f.stem}.{fmt}")
        save_image(z, out / "observed" / f"{f.stem}.{fmt}")
        rows.append([f.stem, noise.kind, json.dumps(noise.params(), sort_keys=True),
                     cfg["run.seed"], i, op.kind, cfg.hash])
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "noise", "noise-params", "seed", "stream-index", "operator",
                    "config-hash"])
        w.writerows(rows)
    return 0


def unsupervised_term(cfg, controls, flow):
    """Initial unsupervised data term; ``None`` copies the supervised one."""
    kind = cfg["term_un.kind"]
    if kind == "copy":
        return None
    prox = flow.scheme == "impl"
    try:
        return term_like(controls.term_su, kind, prox, controls.T_su / flow.steps)
    except ValueError:
        pass
    try:
        return make_data_term(kind, prox, cfg["term.n_knots"], cfg["term.half_width"],
                              cfg["term.Q"], cfg["term.xi"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train(cfg, alpha, shared):
    op = build_operator(cfg)
    out = cfg.out
    init = None
    if cfg["ckpt.init"]:
        init = load_controls(cfg["ckpt.init"])
    flow = build_flow(cfg, init.flow if init is not None and init.flow else None)
    sup = None
    n_channels = None
    if alpha > 0:
        _, clean = load_dir(cfg.require_dir("data.clean_dir"))
        n_channels = clean[0].shape[0]
        sup = SupervisedSource(clean, build_noise(cfg), op)
    unsup = refs = wcfg = None
    if shared and alpha < 1:
        _, obs = load_dir(cfg.require_dir("data.unsup_dir"))
        _, ref_images = load_dir(cfg.require_dir("data.ref_dir"))
        n_channels = obs[0].shape[0]
        feats = build_features(cfg, n_channels)
        refs = ReferencePatches(ref_images, feats, feats.patch_size)
        unsup = UnsupervisedSource(obs, op)
        wcfg = WassersteinConfig(feats.patch_size, cfg["transport.stride"], cfg["transport.p"],
                                 cfg["transport.beta"], cfg["transport.iters"])
    if init is not None:
        controls = init.controls
    else:
        if shared:
            raise ConfigError("train-shared needs ckpt.init (a supervised checkpoint)")
        controls = fresh_controls(cfg, n_channels, flow.scheme)
    check_compatible(controls.term_su, flow.scheme, op)
    if shared and controls.term_un is None:
        controls.add_unsupervised(unsupervised_term(cfg, controls, flow))
    tcfg = build_train(cfg, alpha)
    val = paired_validation(cfg, op)
    if val is None and not shared and cfg["data.val_clean_dir"]:
        _, vclean = load_dir(cfg.require_dir("data.val_clean_dir"))
        val = ValidationSet.synthesize(vclean, build_noise(cfg), op, seed=cfg["run.seed"])
    trainer = Trainer(controls, flow, tcfg, sup=sup, unsup=unsup, refs=refs, wcfg=wcfg, val=val,
                      val_branch="un" if shared else "su")
    if cfg["ckpt.resume"]:
        trainer.restore(load_controls(cfg["ckpt.resume"]))
    path = out / "checkpoint.bin"
    extra = {"config_hash": cfg.hash}

    def snapshot():
        ck = trainer.checkpoint()
        ck.extra = extra
        save_checkpoint(path, ck)

    remaining = max(0, tcfg.iterations - trainer.iteration)
    every = cfg["train.checkpoint_every"]
    done = 0
    while done < remaining:
        chunk = min(every, remaining - done) if every else remaining - done
        trainer.run(iterations=chunk)
        done += chunk
        snapshot()
    if remaining == 0:
        snapshot()
    write_metrics_csv(out / "metrics.csv", trainer.history)
    if cfg["train.debug"] and trainer.monitor.failures:
        print("\n".join(trainer.monitor.failures), file=sys.stderr)
    return 0


def cmd_train_sup(cfg):
    return _train(cfg, 1.0, shared=False)


def cmd_train_shared(cfg):
    return _train(cfg, cfg["train.alpha"], shared=True)


def _pad4(z, multiple=4):
    h, w = z.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return z, (h, w)
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(z, ((0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def cmd_reconstruct(cfg):
    ck = load_controls(cfg.require("ckpt.path"))
    names_files = list_images(cfg.require_dir("data.input_dir"))
    op = build_operator(cfg)
    flow = build_flow(cfg, ck.flow)
    branch = cfg["reconstruct.branch"]
    cp = ck.controls
    if branch == "su":
        term, T = cp.term_su, cp.T_su
    elif branch == "un" and cp.term_un is not None:
        term, T = cp.term_un, cp.T_un
    else:
        raise ConfigError(f"checkpoint has no {branch!r} branch")
    if "flow.T" in cfg.explicit:
        T = cfg["flow.T"]
    check_compatible(term, flow.scheme, op)
    flow = flow.with_T(T)
    out = cfg.out / "recon"
    out.mkdir(parents=True, exist_ok=True)
    for f in names_files:
        z = load_image(f)
        fmt = cfg["reconstruct.format"].lstrip(".") or f.suffix.lstrip(".")
        if isinstance(op, Identity):
            zp, (h, w) = _pad4(z)
        else:
            zp, (h, w) = z, None
        traj = rollout(zp[None], flow, term, cp.tdv, op)
        states = traj.states if cfg["reconstruct.trajectory"] else [traj.terminal]
        for k, x in enumerate(states):
            img = x[0] if h is None else x[0, :, :h, :w]
            if cfg["reconstruct.trajectory"]:
                save_image(img, out / "trajectory" / f"{f.stem}_step{k:03d}.{fmt}")
        img = traj.terminal[0] if h is None else traj.terminal[0, :, :h, :w]
        save_image(img, out / f"{f.stem}.{fmt}")
    return 0


def cmd_eval(cfg):
    ref_files = list_images(cfg.require_dir("data.reference_dir"))
    test_files = list_images(cfg.require_dir("data.test_dir"))
    refs = {f.stem: f for f in ref_files}
    tests = {f.stem: f for f in test_files}
    if set(refs) != set(tests):
        raise ConfigError("reference and test directories hold different image names")
    rows = []
    for name in sorted(refs):
        score = psnr(load_image(tests[name]), load_image(refs[name]),
                     y_channel=cfg["eval.y_channel"], border=cfg["eval.border"])
        rows.append((name, score))
    mean = float(np.mean([s for _, s in rows]))
    with open(cfg.out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "psnr"])
        for name, s in rows:
            w.writerow([name, repr(s)])
        w.writerow(["mean", repr(mean)])
    return 0


def consistency_errors(z, controls, term, scheme, steps, reference_steps, T, op=None):
    """``||x_S - x_ref||`` for each ``S`` in ``steps`` and the fitted log-log slope in ``1/S``."""
    def terminal(s):
        return rollout(z, FlowConfig(scheme, s, T, controls.T_max), term, controls.tdv,
                       op).terminal

    ref = terminal(reference_steps)
    errors = [float(np.linalg.norm(terminal(s) - ref)) for s in steps]
    slope = float("nan")
    if len(steps) > 1 and min(errors) > 0:
        slope = float(np.polyfit(np.log(1.0 / np.asarray(steps, dtype=float)), np.log(errors),
                                 1)[0])
    return errors, slope


def cmd_consistency(cfg):
    op = build_operator(cfg)
    if cfg["ckpt.path"]:
        ck = load_controls(cfg["ckpt.path"])
        controls = ck.controls
        T = cfg["flow.T"] if "flow.T" in cfg.explicit else controls.T_su
    else:
        controls = None
        T = cfg["flow.T"]
    size = cfg["consistency.crop"]
    if cfg["data.input_dir"]:
        img = load_image(list_images(cfg["data.input_dir"])[0])
    else:
        rng = stream_rng(cfg["run.seed"], "data")
        from scipy.ndimage import gaussian_filter
        img = gaussian_filter(rng.random((1, size, size)), (0, 2, 2))
    img = img[:, :size, :size]
    if img.shape[1] % 4 or img.shape[2] % 4:
        raise ConfigError("consistency.crop must give sides divisible by 4")
    if controls is None:
        controls = fresh_controls(cfg, img.shape[0], "expl")
    z = build_noise(cfg).corrupt(op.apply(img[None]), rng=stream_rng(cfg["run.seed"], "noise"))
    term = controls.term_su
    if term.prox_mode or "term.kind" in cfg.explicit:
        term = build_term(cfg, "expl")
    rows, slopes = [], []
    for scheme in cfg["consistency.schemes"]:
        if scheme not in ("expl", "en"):
            raise ConfigError(f"consistency supports expl and en, not {scheme!r}")
        errors, slope = consistency_errors(z, controls, term, scheme, cfg["consistency.steps"],
                                           cfg["consistency.reference_steps"], T, op)
        rows += [(scheme, s, e) for s, e in zip(cfg["consistency.steps"], errors)]
        slopes.append((scheme, slope, all(a > b for a, b in zip(errors, errors[1:]))))
    out = cfg.out
    with open(out / "consistency.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "steps", "error"])
        w.writerows([(a, b, repr(c)) for a, b, c in rows])
    with open(out / "consistency_slopes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "slope", "strictly-decreasing"])
        w.writerows([(a, repr(b), c) for a, b, c in slopes])
    return 0


def cmd_train_ae(cfg):
    _, images = load_dir(cfg.require_dir("data.ref_dir"))
    n_p = cfg["transport.patch_size"]
    corpus = extract_batch(images, n_p, cfg["transport.ae_stride"])
    dim = corpus.shape[1]
    n_f = cfg["transport.n_components"] or dim - 1
    try:
        feats = train_ae(corpus, n_f, n_p, images[0].shape[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    xc = corpus - corpus.mean(axis=1, keepdims=True)
    s = np.linalg.svd(xc, compute_uv=False)
    oracle = float(np.sum(s[n_f:] ** 2))
    out = cfg.out
    save_features(out / "ae.bin", feats, extra={"config_hash": cfg.hash})
    with open(out / "ae_report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_components", "reconstruction_error", "svd_oracle_error", "difference"])
        w.writerow([n_f, repr(feats.reconstruction_error_), repr(oracle),
                    repr(abs(feats.reconstruction_error_ - oracle))])
    return 0


HANDLERS = {
    "train-sup": cmd_train_sup,
    "train-shared": cmd_train_shared,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "consistency": cmd_consistency,
    "make-data": cmd_make_data,
    "train-ae": cmd_train_ae,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="energy-recon",
                                     description="Energy-based image reconstruction.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value configuration file")
    args, rest = parser.parse_known_args(argv)
    try:
        pairs = read_config_file(args.config) if args.config else []
        cfg = Config.build(pairs + parse_overrides(rest))
        _write_run_info(cfg, args.command)
        start = time.perf_counter()
        code = HANDLERS[args.command](cfg)
        print(f"{args.command} finished in {time.perf_counter() - start:.1f} s "
              f"(config {cfg.hash})")
        return code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
