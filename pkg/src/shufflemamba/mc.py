"""Monte-Carlo averaging over shuffle randomness at test time."""

import csv
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .metrics import psnr
from .net import PermSource
from .rng import RngStream


@dataclass
class MCConfig:
    M: int = 8
    base_seed: int = 0
    granularity: str = "network"  # or "block"
    chunk: int = 0  # replicas per batched forward; 0 means all M at once

    def __post_init__(self):
        if int(self.M) < 1:
            raise ValueError("MCConfig: M must be >= 1")
        if self.granularity not in ("network", "block"):
            raise ValueError(f"MCConfig: unknown granularity {self.granularity!r}")


def sample_streams(mc):
    """Stream for replica i is ``(base_seed, base_seed + i)``."""
    return [RngStream(mc.base_seed, mc.base_seed + i) for i in range(mc.M)]


def mc_samples(sample, net, mc):
    """The M stochastic forwards, stacked as [M, C, H, W].

    The input is replicated along the batch axis and each replica gets its
    own permutation stream.
    """
    streams = sample_streams(mc)
    chunk = mc.chunk or mc.M
    dt = net.cfg.np_dtype
    shared = net.cfg.perm_mode == "shared"
    outs = []
    with T.no_grad():
        for lo in range(0, mc.M, chunk):
            part = streams[lo:lo + chunk]
            n = len(part)
            ms = np.broadcast_to(sample.M_up.astype(dt), (n,) + sample.M_up.shape)
            pan = np.broadcast_to(sample.P_in.astype(dt), (n,) + sample.P_in.shape)
            outs.append(net.forward_batch(np.ascontiguousarray(ms), np.ascontiguousarray(pan),
                                          PermSource(part, shared=shared)).data)
    return np.concatenate(outs, axis=0)


def mc_infer(sample, net, mc):
    """Estimate the expected output over random shuffles.

    Returns ``(mean, std)``. In ``"network"`` mode the mean is the plain
    average of M whole-network forwards (see :func:`average_replicas`) and
    std is their elementwise population standard deviation. In ``"block"`` mode each
    block averages M shuffled replicas before passing on; std is ``None``.
    """
    if mc.granularity == "block":
        dt = net.cfg.np_dtype
        src = PermSource(sample_streams(mc), shared=net.cfg.perm_mode == "shared")
        with T.no_grad():
            out = net.forward_batch(sample.M_up[None].astype(dt), sample.P_in[None].astype(dt),
                                    src, block_mc=mc.M)
        return out.data[0], None
    outs = mc_samples(sample, net, mc)
    return average_replicas(outs)


def average_replicas(outs):
    """Elementwise mean and population std of stacked replicas [M, ...].

    Deviations from the first replica are accumulated in replica order, so
    the result is deterministic and identical replicas give back that
    replica with std exactly zero.
    """
    ref = outs[0]
    acc = np.zeros_like(ref)
    sq = np.zeros_like(ref)
    for o in outs:
        d = o - ref
        acc += d
        sq += d * d
    M = len(outs)
    shift = acc / M
    std = np.sqrt(np.maximum(sq / M - shift * shift, 0.0))
    return ref + shift, std


SWEEP_COLUMNS = ("M", "psnr_mean", "psnr_std", "time_per_image_s", "peak_memory_mb")


def mc_quality_cost_sweep(samples, net, Ms, trials=5, base_seed=0, chunk=0, return_outputs=False):
    """PSNR mean/std over ``trials`` independent runs per M, plus cost.

    Each trial uses a disjoint block of permutation streams. Time is wall
    time per image; memory is the traced peak during one image's inference.
    With ``return_outputs`` the MC means are also returned as
    ``{M: [trials, n_images, C, H, W]}``, for variance studies.
    """
    rows = []
    outputs = {}
    for M in Ms:
        scores, times, peaks, kept = [], [], [], []
        for trial in range(trials):
            mc = MCConfig(M=M, base_seed=base_seed + trial * 1_000_003, chunk=chunk)
            per_image = []
            for s in samples:
                tracemalloc.start()
                t0 = time.perf_counter()
                mean, _ = mc_infer(s, net, mc)
                times.append(time.perf_counter() - t0)
                peaks.append(tracemalloc.get_traced_memory()[1])
                tracemalloc.stop()
                per_image.append(psnr(mean, s.GT))
                if return_outputs:
                    kept.append(mean)
            scores.append(float(np.mean(per_image)))
        if return_outputs:
            outputs[int(M)] = np.stack(kept).reshape((trials, len(samples)) + kept[0].shape)
        rows.append({"M": int(M), "psnr_mean": float(np.mean(scores)),
                     "psnr_std": float(np.std(scores)),
                     "time_per_image_s": float(np.mean(times)),
                     "peak_memory_mb": float(np.max(peaks)) / 2**20})
    return (rows, outputs) if return_outputs else rows


def variance_slope(outputs):
    """Log-log slope of the MC estimator's variance against M.

    ``outputs`` is the ``{M: [trials, ...]}`` mapping from
    :func:`mc_quality_cost_sweep`; the variance across trials is averaged
    over every output element. Independent replicas give a slope of -1.
    """
    Ms = sorted(outputs)
    var = [float(np.mean(np.var(outputs[M], axis=0, ddof=1))) for M in Ms]
    return float(np.polyfit(np.log(Ms), np.log(var), 1)[0]), var


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "M" else f"{r[k]:.8g}") for k in SWEEP_COLUMNS})
