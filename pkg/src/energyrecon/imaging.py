"""Images, forward operators, noise synthesis, PSNR and raster I/O.

Images are float64 arrays of shape ``(C, H, W)`` with intensities scaled to
[0, 1]; batches carry a leading axis ``(B, C, H, W)``.  Operators act on the
trailing three axes so they accept either form.
"""

import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

from .validation import as_image


class ShapeMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# linear forward operators
# --------------------------------------------------------------------------
class LinearOperator:
    """A linear map between image spaces with an exact adjoint."""

    kind = None

    def out_shape(self, in_shape):
        raise NotImplementedError

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, y):
        raise NotImplementedError

    def init(self, z):
        """Task-dependent initializer mapping an observation into image space."""
        raise NotImplementedError

    def _check(self, x, expected):
        if expected is not None and tuple(x.shape[-3:]) != tuple(expected):
            raise ShapeMismatchError(f"expected image shape {expected}, got {x.shape[-3:]}")


class Identity(LinearOperator):
    kind = "identity"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def apply(self, x):
        return np.asarray(x, dtype=np.float64)

    adjoint = apply
    init = apply


class GaussianDownsample(LinearOperator):
    """Gaussian blur (truncated at 4 sigma, unit sum) followed by stride-``scale`` sampling."""

    kind = "gaussian-downsample"

    def __init__(self, scale=2, sigma=1.0):
        if scale < 1 or int(scale) != scale:
            raise ValueError("scale must be a positive integer")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.scale = int(scale)
        self.sigma = float(sigma)
        radius = int(np.ceil(4.0 * self.sigma))
        t = np.arange(-radius, radius + 1)
        k = np.exp(-0.5 * (t / self.sigma) ** 2)
        self.kernel = k / k.sum()
        self.offset = self.scale // 2

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.scale or w % self.scale:
            raise ShapeMismatchError(f"{h}x{w} is not divisible by {self.scale}")
        return (c, h // self.scale, w // self.scale)

    def _blur(self, x):
        x = correlate1d(x, self.kernel, axis=-2, mode="constant")
        return correlate1d(x, self.kernel, axis=-1, mode="constant")

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.out_shape(x.shape[-3:])
        s, o = self.scale, self.offset
        return self._blur(x)[..., o::s, o::s].copy()

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        s, o = self.scale, self.offset
        up = np.zeros(y.shape[:-2] + (y.shape[-2] * s, y.shape[-1] * s))
        up[..., o::s, o::s] = y
        return self._blur(up)

    def init(self, z):
        return self.scale ** 2 * self.adjoint(z)


_BAYER = {
    "RGGB": {(0, 0): 0, (0, 1): 1, (1, 0): 1, (1, 1): 2},
    "GRBG": {(0, 0): 1, (0, 1): 0, (1, 0): 2, (1, 1): 1},
    "GBRG": {(0, 0): 1, (0, 1): 2, (1, 0): 0, (1, 1): 1},
    "BGGR": {(0, 0): 2, (0, 1): 1, (1, 0): 1, (1, 1): 0},
}


def _catmull_rom_upsample(s, phase, axis):
    """Double the length of ``s`` along ``axis``; samples sit at ``phase + 2k``."""
    s = np.moveaxis(s, axis, -1)
    n = s.shape[-1]
    p = np.concatenate([s[..., :1], s[..., :1], s, s[..., -1:], s[..., -1:]], axis=-1)
    # midpoint between sample k and k+1 for k = -1..n-1
    mid = (-p[..., 0:n + 1] + 9 * p[..., 1:n + 2] + 9 * p[..., 2:n + 3] - p[..., 3:n + 4]) / 16.0
    out = np.empty(s.shape[:-1] + (2 * n,))
    if phase == 0:
        out[..., 0::2] = s
        out[..., 1::2] = mid[..., 1:]
    else:
        out[..., 1::2] = s
        out[..., 0::2] = mid[..., :-1]
    return np.moveaxis(out, -1, axis)


class BayerMosaic(LinearOperator):
    """Color filter array sampling of an RGB image into a single channel."""

    kind = "bayer-mosaic"

    def __init__(self, pattern="RGGB"):
        if pattern not in _BAYER:
            raise ValueError(f"unknown Bayer pattern {pattern!r}")
        self.pattern = pattern
        self._sites = _BAYER[pattern]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != 3:
            raise ShapeMismatchError("Bayer sampling needs a 3-channel image")
        if h % 2 or w % 2:
            raise ShapeMismatchError("Bayer sampling needs even width and height")
        return (1, h, w)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.out_shape(x.shape[-3:])
        out = np.empty(x.shape[:-3] + (1,) + x.shape[-2:])
        for (i, j), c in self._sites.items():
            out[..., 0, i::2, j::2] = x[..., c, i::2, j::2]
        return out

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(y.shape[:-3] + (3,) + y.shape[-2:])
        for (i, j), c in self._sites.items():
            out[..., c, i::2, j::2] = y[..., 0, i::2, j::2]
        return out

    def init(self, z):
        """Bicubic (Catmull-Rom) interpolation of each color plane."""
        z = np.asarray(z, dtype=np.float64)
        out = np.empty(z.shape[:-3] + (3,) + z.shape[-2:])
        by_channel = {}
        for site, c in self._sites.items():
            by_channel.setdefault(c, []).append(site)
        for c, sites in by_channel.items():
            planes = []
            for i, j in sites:
                s = z[..., 0, i::2, j::2]
                s = _catmull_rom_upsample(s, i, axis=-2)
                planes.append(_catmull_rom_upsample(s, j, axis=-1))
            plane = np.mean(planes, axis=0)
            for i, j in sites:
                plane[..., i::2, j::2] = z[..., 0, i::2, j::2]
            out[..., c, :, :] = plane
        return out


def make_operator(kind="identity", scale=2, sigma=1.0, pattern="RGGB"):
    if kind == "identity":
        return Identity()
    if kind == "gaussian-downsample":
        return GaussianDownsample(scale, sigma)
    if kind == "bayer-mosaic":
        return BayerMosaic(pattern)
    raise ValueError(f"unknown operator {kind!r}")


def apply(op, img):
    return op.apply(img)


# --------------------------------------------------------------------------
# noise models
# --------------------------------------------------------------------------
class NoiseModel:
    """Observation model ``z = Z(y, zeta)``; owns a seeded generator."""

    kind = None

    def __init__(self, seed=None):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def corrupt(self, clean, rng=None):
        """Corrupt ``clean``; ``rng`` overrides the model's own generator."""
        clean = np.asarray(clean, dtype=np.float64)
        return self._sample(clean, self.rng if rng is None else rng)

    def _sample(self, clean, rng):
        raise NotImplementedError

    def params(self):
        return {}


class GaussianNoise(NoiseModel):
    kind = "gaussian"

    def __init__(self, sigma, seed=None):
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        super().__init__(seed)
        self.sigma = float(sigma)

    def _sample(self, clean, rng):
        return clean + self.sigma * rng.standard_normal(clean.shape)

    def params(self):
        return {"sigma": self.sigma}


class LaplaceNoise(NoiseModel):
    """Additive Laplace noise with standard deviation ``sigma``."""

    kind = "laplace"

    def __init__(self, sigma, seed=None):
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        super().__init__(seed)
        self.sigma = float(sigma)

    def _sample(self, clean, rng):
        return clean + rng.laplace(0.0, self.sigma / np.sqrt(2.0), clean.shape)

    def params(self):
        return {"sigma": self.sigma}


class SaltPepperNoise(NoiseModel):
    """Each pixel is replaced with probability ``fraction`` by 0 or 1 (equally likely)."""

    kind = "salt-pepper"

    def __init__(self, fraction, seed=None):
        if not 0.0 <= fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        super().__init__(seed)
        self.fraction = float(fraction)

    def _sample(self, clean, rng):
        hit = rng.random(clean.shape) < self.fraction
        value = (rng.random(clean.shape) < 0.5).astype(np.float64)
        return np.where(hit, value, clean)

    def params(self):
        return {"fraction": self.fraction}


class PoissonNoise(NoiseModel):
    """``z = Poisson(peak * y) / peak``."""

    kind = "poisson"

    def __init__(self, peak=4.0, seed=None):
        if peak <= 0:
            raise ValueError("peak must be positive")
        super().__init__(seed)
        self.peak = float(peak)

    def _sample(self, clean, rng):
        if clean.min() < 0:
            raise ValueError("Poisson noise needs nonnegative intensities")
        return rng.poisson(self.peak * clean) / self.peak

    def params(self):
        return {"peak": self.peak}


class MixtureNoise(NoiseModel):
    """Additive mixture: uniform / wide Gaussian / narrow Gaussian on disjoint pixel sets.

    Defaults (8-bit units): 10% uniform on [-25, 25], 20% N(0, 1), 70% N(0, 0.1).
    """

    kind = "mixture"

    def __init__(self, fractions=(0.1, 0.2, 0.7), uniform_range=25 / 255,
                 variance_wide=1 / 255 ** 2, variance_narrow=0.1 / 255 ** 2, seed=None):
        fractions = tuple(float(f) for f in fractions)
        if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-12:
            raise ValueError("fractions must be three nonnegative numbers summing to 1")
        super().__init__(seed)
        self.fractions = fractions
        self.uniform_range = float(uniform_range)
        self.variance_wide = float(variance_wide)
        self.variance_narrow = float(variance_narrow)

    def _sample(self, clean, rng):
        n = clean.size
        order = rng.permutation(n)
        n_uni = int(round(self.fractions[0] * n))
        n_wide = int(round(self.fractions[1] * n))
        noise = np.sqrt(self.variance_narrow) * rng.standard_normal(n)
        noise[order[:n_uni]] = rng.uniform(-self.uniform_range, self.uniform_range, n_uni)
        wide = order[n_uni:n_uni + n_wide]
        noise[wide] = np.sqrt(self.variance_wide) * rng.standard_normal(n_wide)
        return clean + noise.reshape(clean.shape)

    def params(self):
        return {"fractions": list(self.fractions), "uniform_range": self.uniform_range,
                "variance_wide": self.variance_wide, "variance_narrow": self.variance_narrow}


def make_noise(kind, seed=None, **params):
    classes = {c.kind: c for c in (GaussianNoise, LaplaceNoise, SaltPepperNoise,
                                   PoissonNoise, MixtureNoise)}
    if kind not in classes:
        raise ValueError(f"unknown noise model {kind!r}")
    return classes[kind](seed=seed, **params)


def corrupt(model, clean):
    return model.corrupt(clean)


# --------------------------------------------------------------------------
# scoring, padding
# --------------------------------------------------------------------------
def rgb_to_y(img):
    """Luma (ITU-R BT.601, studio range) of an RGB image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return ((16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0)[..., None, :, :]


def psnr(x, y, y_channel=False, border=0):
    """Peak signal-to-noise ratio in dB for peak value 1; ``inf`` when identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shapes differ: {x.shape} vs {y.shape}")
    if y_channel and x.shape[-3] == 3:
        x, y = rgb_to_y(x), rgb_to_y(y)
    if border:
        x = x[..., border:-border, border:-border]
        y = y[..., border:-border, border:-border]
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def pad_reflect(img, margin):
    """Mirror-pad the spatial axes without repeating the edge pixel."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if margin < 0 or margin >= min(h, w):
        raise ValueError(f"margin {margin} must lie in [0, {min(h, w) - 1}]")
    width = [(0, 0)] * (img.ndim - 2) + [(margin, margin), (margin, margin)]
    return np.pad(img, width, mode="reflect")


def crop(img, margin):
    if margin == 0:
        return np.asarray(img)
    h, w = img.shape[-2:]
    if 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} too large for {h}x{w}")
    return img[..., margin:-margin, margin:-margin]


# --------------------------------------------------------------------------
# raster I/O
# --------------------------------------------------------------------------
class ImageFormatError(ValueError):
    pass


_PNM = {".pgm", ".ppm", ".pnm"}


def _read_pnm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm type {magic!r}")
    channels = 1 if magic == b"P5" else 3
    dtype = ">u1" if maxval < 256 else ">u2"
    count = width * height * channels
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    arr = arr.reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def _write_pnm(path, arr_hwc, maxval):
    h, w, c = arr_hwc.shape
    magic = b"P5" if c == 1 else b"P6"
    dtype = ">u1" if maxval < 256 else ">u2"
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    Path(path).write_bytes(header + arr_hwc.astype(dtype).tobytes())


def load_image(path):
    """Read an 8/16-bit grayscale or RGB raster as a ``(C, H, W)`` array in [0, 1].

    ``.npy`` files hold float images verbatim (no clipping or quantization).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".npy":
        return as_image(np.load(path, allow_pickle=False))
    if path.suffix.lower() in _PNM:
        return _read_pnm(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if mode == "L":
        return as_image(arr.astype(np.float64) / 255.0)
    if mode == "RGB":
        return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return as_image(arr.astype(np.float64) / 65535.0)
    raise ImageFormatError(f"unsupported image mode {mode!r} in {path}")


def save_image(img, path, bit_depth=8):
    """Write ``img`` (C, H, W) after clipping to [0, 1] and linear quantization.

    ``.npy`` paths store the float array unchanged.
    """
    img = as_image(img)
    if Path(path).suffix.lower() == ".npy":
        os.makedirs(Path(path).parent, exist_ok=True)
        np.save(path, img)
        return
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint32)
    hwc = q.transpose(1, 2, 0)
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    if path.suffix.lower() in _PNM:
        _write_pnm(path, hwc, maxval)
        return
    c = hwc.shape[2]
    if bit_depth == 8:
        data = hwc.astype(np.uint8)
        im = PILImage.fromarray(data[:, :, 0] if c == 1 else data, mode="L" if c == 1 else "RGB")
    elif c == 1:
        im = PILImage.fromarray(hwc[:, :, 0].astype(np.uint16))
    else:
        raise ImageFormatError("16-bit RGB is only supported for PPM output")
    im.save(path)
