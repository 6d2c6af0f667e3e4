"""Synthetic multispectral scenes and reduced-resolution (Wald) sample generation."""

import os

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import load_tensor, save_tensor
from .net import Sample
from .rng import RngStream, stream_id_for

# ---------------------------------------------------------------------------
# Resampling. A low-resolution pixel i sits at high-resolution coordinate
# r*i + offset(r); decimation and bicubic upsampling share that grid.
# ---------------------------------------------------------------------------


def _offset(r):
    return (r - 1) // 2


def gaussian_blur(img, sigma):
    """Per-channel Gaussian blur with reflected borders. ``img`` is [C, H, W]."""
    return np.stack([gaussian_filter(ch, sigma, mode="reflect") for ch in img])


def decimate(img, r):
    o = _offset(r)
    return img[:, o::r, o::r]


def _keys(x, a=-0.5):
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


def bicubic_matrix(n_lo, r):
    """[n_lo * r, n_lo] interpolation matrix (Keys kernel, a = -0.5, clamped edges)."""
    n_hi = n_lo * r
    pos = (np.arange(n_hi) - _offset(r)) / r
    base = np.floor(pos).astype(int)
    U = np.zeros((n_hi, n_lo))
    for k in range(-1, 3):
        idx = base + k
        w = _keys(pos - idx)
        np.add.at(U, (np.arange(n_hi), np.clip(idx, 0, n_lo - 1)), w)
    return U


def bicubic_upsample(img, r):
    C, h, w = img.shape
    Uh, Uw = bicubic_matrix(h, r), bicubic_matrix(w, r)
    return np.einsum("Hh,chw,Ww->cHW", Uh, img, Uw)


def wald_generate(hr, r=4, band_weights=None):
    """Degrade a high-resolution image into a fusion training sample.

    The image itself is the ground truth; the low-resolution MS input is a
    Gaussian blur (sigma = r/2) followed by r-fold decimation; the PAN is a
    weighted sum of the ground-truth bands.
    """
    hr = np.asarray(hr, dtype=np.float64)
    C, H, W = hr.shape
    if H % r or W % r:
        raise ValueError(f"image {H}x{W} is not divisible by scale {r}")
    if band_weights is None:
        band_weights = np.full(C, 1.0 / C)
    band_weights = np.asarray(band_weights, dtype=np.float64)
    if band_weights.shape != (C,) or not np.isclose(band_weights.sum(), 1.0):
        raise ValueError("band_weights must have one entry per band and sum to 1")
    ms = decimate(gaussian_blur(hr, r / 2.0), r)
    up = bicubic_upsample(ms, r)
    pan = np.tensordot(band_weights, hr, axes=1)[None]
    return Sample(M_in=ms, M_up=up, P_in=pan, GT=hr.copy())


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


def _smooth_field(stream, H, W, sigma):
    f = gaussian_filter(stream.normal((H, W)), sigma, mode="wrap")
    f -= f.min()
    return f / (f.max() + 1e-12)


def synthetic_scene(stream, size=(32, 32), bands=4, materials=3, spectral_spread=0.5, texture=0.6):
    """A [bands, H, W] image in [0, 1].

    Per-material abundance maps (band-limited noise plus hard-edged
    rectangles) are sharpened and normalized, then mixed through spectral
    signatures ``brightness * (1 + spectral_spread * dev)`` with ``dev`` in
    [-1, 1]. A fine texture and a broad shading field modulate all bands
    alike, which is the detail a PAN image can restore; the material mixture
    carries the band-specific part.
    """
    H, W = size
    abund = np.stack([_smooth_field(stream, H, W, sigma=2.0) for _ in range(materials)])
    n_rect = 4 + int(stream.uniform(1)[0] * 5)
    for _ in range(n_rect):
        y0, x0, hh, ww, m, v = stream.uniform(6)
        y0, x0 = int(y0 * H * 0.85), int(x0 * W * 0.85)
        hh, ww = 2 + int(hh * H / 4), 2 + int(ww * W / 4)
        abund[int(m * materials), y0:y0 + hh, x0:x0 + ww] += 1.0 + 2.0 * v
    abund = abund**2
    abund /= abund.sum(axis=0, keepdims=True) + 1e-12
    u = stream.uniform(materials + bands * materials)
    brightness = 0.2 + 0.7 * u[:materials]
    dev = 2.0 * u[materials:].reshape(bands, materials) - 1.0
    signatures = brightness * (1.0 + spectral_spread * dev)
    fine = (1.0 - texture) + texture * _smooth_field(stream, H, W, sigma=1.0)
    shade = (0.6 + 0.4 * _smooth_field(stream, H, W, sigma=4.0)) * fine
    img = np.einsum("cm,mhw->chw", signatures, abund) * shade
    return np.clip(img, 0.0, 1.0)


def make_dataset(count, size=(32, 32), scale=4, bands=4, seed=0, band_weights=None):
    """``count`` Wald samples built from independent synthetic scenes."""
    out = []
    for i in range(count):
        stream = RngStream(seed, stream_id_for("data", i))
        out.append(wald_generate(synthetic_scene(stream, size, bands), scale, band_weights))
    return out


# ---------------------------------------------------------------------------
# On-disk layout: index.txt plus four SMT1 tensors per sample.
# ---------------------------------------------------------------------------

_PARTS = (("gt", "GT"), ("ms", "M_in"), ("ms_up", "M_up"), ("pan", "P_in"))


def save_dataset(directory, samples):
    os.makedirs(directory, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = f"{i:05d}"
        for suffix, attr in _PARTS:
            save_tensor(os.path.join(directory, f"{sid}_{suffix}.smt"), getattr(s, attr))
        ids.append(sid)
    with open(os.path.join(directory, "index.txt"), "w") as fh:
        fh.write("\n".join(ids) + "\n")
    return ids


def load_dataset(directory, dtype=np.float64):
    with open(os.path.join(directory, "index.txt")) as fh:
        ids = [line.strip() for line in fh if line.strip()]
    samples = []
    for sid in ids:
        parts = {attr: load_tensor(os.path.join(directory, f"{sid}_{suffix}.smt")).astype(dtype)
                 for suffix, attr in _PARTS}
        samples.append(Sample(**parts))
    return ids, samples
