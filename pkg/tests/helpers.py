"""Shared helpers: small natural test images and finite differences."""

import numpy as np
from skimage import color, data

NATURAL = ("camera", "astronaut", "coffee", "chelsea", "coins", "moon", "rocket", "grass",
           "gravel", "brick", "clock", "cell", "hubble_deep_field", "immunohistochemistry",
           "retina", "cat", "page")

_cache = {}


def gray(name):
    if name not in _cache:
        im = np.asarray(getattr(data, name)(), dtype=np.float64)
        if im.ndim == 3:
            im = color.rgb2gray(im[..., :3] / (255.0 if im.max() > 1 else 1.0))
        elif im.max() > 1:
            im = im / 255.0
        _cache[name] = im
    return _cache[name]


def natural_crops(n, size=64, seed=0):
    """``n`` grayscale ``size x size`` crops, cycling through several test images."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        im = gray(NATURAL[len(out) % len(NATURAL)])
        h, w = im.shape
        i = rng.integers(0, h - size)
        j = rng.integers(0, w - size)
        out.append(im[None, i:i + size, j:j + size].copy())
    return out


def central_diff(f, x, d, h=1e-6):
    return (f(x + h * d) - f(x - h * d)) / (2 * h)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# one line per acceptance criterion, echoed in the terminal summary
REPORT = []


def report(number, name, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    REPORT.append(line)
    print(line)
    return ok
