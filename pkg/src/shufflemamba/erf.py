"""Effective receptive fields: |d(center output) / d(input pixel)|."""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor as T
from .net import PermSource
from .rng import RngStream, stream_id_for
from .tensor import Tensor


@dataclass
class ERFMap:
    magnitude: np.ndarray  # [H, W], max == 1
    raw: np.ndarray  # unnormalized mean |gradient|

    def save_png(self, path):
        """Larger receptive-field weight is drawn darker."""
        img = np.round(255.0 * (1.0 - self.magnitude)).astype(np.uint8)
        Image.fromarray(img, mode="L").save(path)


def center_gradient(fn, inputs, center=None):
    """Per-row |gradient| of the center output, summed over output channels.

    ``fn`` maps the list of input Tensors (each [B, C_i, H, W]) to an output
    [B, C, H, W]. Rows of the batch are independent, so one backward of the
    summed center value yields every row's gradient. Returns [B, H, W]: the
    absolute input gradients aggregated over input channels.
    """
    ts = [Tensor(np.array(x, copy=True), requires_grad=True) for x in inputs]
    out = fn(ts)
    H, W = out.shape[-2:]
    cy, cx = center if center is not None else (H // 2, W // 2)
    T.tsum(out[:, :, cy, cx]).backward()
    mag = sum(np.abs(t.grad).sum(axis=1) for t in ts)
    return mag


def erf_map(net, sample, mode="shuffle", K=64, seed=0, chunk=16, center=None):
    """ERF of ``net`` at the image center for ``sample``.

    ``mode="raster"`` scans in fixed raster order (identity permutations);
    ``mode="shuffle"`` averages |gradient| maps over ``K`` independent
    permutation draws.
    """
    dt = net.cfg.np_dtype
    ms = sample.M_up[None].astype(dt)
    pan = sample.P_in[None].astype(dt)
    shared = net.cfg.perm_mode == "shared"
    if mode == "raster":
        raw = center_gradient(lambda ts: net.forward_batch(ts[0], ts[1], PermSource(None)),
                              [ms, pan], center)[0]
    elif mode == "shuffle":
        acc = np.zeros(ms.shape[-2:])
        for lo in range(0, K, chunk):
            n = min(chunk, K - lo)
            streams = [RngStream(seed, stream_id_for("erf", lo + i)) for i in range(n)]
            rep = [np.repeat(ms, n, axis=0), np.repeat(pan, n, axis=0)]
            g = center_gradient(lambda ts: net.forward_batch(ts[0], ts[1], PermSource(streams, shared)),
                                rep, center)
            for row in g:
                acc += row
        raw = acc / K
    else:
        raise ValueError(f"unknown ERF mode {mode!r}")
    peak = raw.max()
    return ERFMap(raw / peak if peak > 0 else raw, raw)


def off_center_cv(magnitude, exclude=5):
    """Coefficient of variation of ERF values outside the central ``exclude`` window.

    Lower means the receptive field is spread more evenly.
    """
    H, W = magnitude.shape
    mask = np.ones((H, W), dtype=bool)
    r = exclude // 2
    cy, cx = H // 2, W // 2
    mask[cy - r:cy + r + 1, cx - r:cx + r + 1] = False
    vals = magnitude[mask]
    mu = vals.mean()
    return float(vals.std() / mu) if mu > 0 else float("inf")
