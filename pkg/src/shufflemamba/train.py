"""Adam + cosine-annealed training of :class:`FusionNet` on pan-sharpening samples."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mc import MCConfig, mc_infer
from .metrics import psnr
from .net import FusionNet, PermSource, loss_pansharpen
from .rng import RngStream, stream_id_for
from .shuffle import sample_permutation

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 5e-4
    lr_min: float = 5e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 100
    target_psnr: float = math.inf  # stop early once train PSNR exceeds this


def cosine_lr(step, total, lr_max=5e-4, lr_min=5e-8):
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at step ``total - 1``."""
    if total <= 1:
        return lr_max
    frac = min(max(step, 0), total - 1) / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load(self, state, t):
        for k in self.m:
            self.m[k] = np.asarray(state[f"adam.m.{k}"], dtype=self.m[k].dtype).copy()
            self.v[k] = np.asarray(state[f"adam.v.{k}"], dtype=self.v[k].dtype).copy()
        self.t = int(t)


def stack_batch(samples, dtype):
    ms = np.stack([s.M_up for s in samples]).astype(dtype)
    pan = np.stack([s.P_in for s in samples]).astype(dtype)
    gt = np.stack([s.GT for s in samples]).astype(dtype)
    return ms, pan, gt


def train_psnr(net, samples, seed, step):
    """Mean PSNR over ``samples`` of the MC-averaged output (``mc_samples`` draws)."""
    cfg = MCConfig(M=net.cfg.mc_samples, base_seed=stream_id_for("eval", seed, step))
    return float(np.mean([psnr(mc_infer(s, net, cfg)[0], s.GT) for s in samples]))


def _batch_order(seed, epoch, n):
    return sample_permutation(RngStream(seed, stream_id_for("data-order", epoch)), n).forward


@dataclass
class TrainResult:
    net: FusionNet
    optimizer: Adam
    log: list = field(default_factory=list)  # (step, lr, loss)
    psnr_log: list = field(default_factory=list)  # (step, psnr)
    step: int = 0


def train(samples, cfg, tcfg=None, net=None, optimizer=None, start_step=0, on_step=None,
          stop_at=None):
    """Train for ``tcfg.steps`` total steps (resuming at ``start_step``).

    ``stop_at`` halts early without changing the lr schedule, so a later
    resume from that step continues the same cosine curve.

    Each step draws a batch by walking a seeded per-epoch order of the
    samples and gives every batch row its own permutation stream. Raises
    :class:`NumericError` on a non-finite loss.
    """
    if not samples:
        raise ValueError("train: empty dataset")
    tcfg = tcfg or TrainConfig()
    net = net or FusionNet(cfg)
    params = net.requires_grad_().parameters()
    opt = optimizer or Adam(params, tcfg.beta1, tcfg.beta2, tcfg.eps)
    res = TrainResult(net, opt, step=start_step)
    n = len(samples)
    bs = min(tcfg.batch_size, n)
    per_epoch = max(1, n // bs)
    dtype = cfg.np_dtype
    end = tcfg.steps if stop_at is None else min(int(stop_at), tcfg.steps)
    for step in range(start_step, end):
        epoch, slot = divmod(step, per_epoch)
        order = _batch_order(cfg.seed, epoch, n)
        batch = [samples[i] for i in order[slot * bs:(slot + 1) * bs]]
        ms, pan, gt = stack_batch(batch, dtype)
        src = PermSource([RngStream(cfg.seed, stream_id_for("shuffle", step, b)) for b in range(len(batch))],
                         shared=cfg.perm_mode == "shared")
        for p in params.values():
            p.grad = None
        loss = loss_pansharpen(net.forward_batch(ms, pan, src), gt)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        loss.backward()
        lr = cosine_lr(step, tcfg.steps, tcfg.lr, tcfg.lr_min)
        opt.step(lr)
        res.log.append((step, lr, value))
        res.step = step + 1
        if on_step is not None:
            on_step(step, lr, value)
        if tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
            p_now = train_psnr(net, samples, cfg.seed, step)
            res.psnr_log.append((step + 1, p_now))
            log.info("step %d lr %.3g loss %.5f psnr %.2f", step + 1, lr, value, p_now)
            if p_now > tcfg.target_psnr:
                break
    net.requires_grad_(False)
    return res


def write_loss_csv(path, rows, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(("step", "lr", "loss"))
        for step, lr, loss in rows:
            w.writerow((step, f"{lr:.10g}", f"{loss:.10g}"))
