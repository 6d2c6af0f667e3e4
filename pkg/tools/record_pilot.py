"""Record the desk-scale pilot training run used to lock the training threshold.

Trains the default network from scratch on the 8-image fixture set for the
full 2000-step schedule (no early stop) and writes

    tests/fixtures/pilot_train.json      curve, baselines, timing, threshold
    tests/fixtures/pilot_checkpoint.smt  trained weights (+ .cfg sidecar)

Run from the repository root:  python3 tools/record_pilot.py
"""

import json
import logging
import os
import platform
import time

import numpy as np

from shufflemamba import io
from shufflemamba.config import dump_config
from shufflemamba.data import make_dataset
from shufflemamba.metrics import psnr
from shufflemamba.net import NetworkConfig
from shufflemamba.rng import RngStream
from shufflemamba.train import TrainConfig, train

FIXTURES = os.path.join(os.path.dirname(__file__), os.pardir, "tests", "fixtures")
THRESHOLD_DB = 35.0


def brovey(s):
    intensity = np.maximum(s.M_up.mean(axis=0), 1e-6)
    return np.clip(s.M_up * s.P_in[0] / intensity, 0.0, 1.0)


def _neighbourhoods(s, k):
    r = k // 2
    C, H, W = s.M_up.shape
    x = np.pad(np.concatenate([s.M_up, s.P_in]), ((0, 0), (r, r), (r, r)), mode="reflect")
    cols = [x[:, i:i + H, j:j + W] for i in range(k) for j in range(k)]
    feats = np.concatenate(cols).reshape(-1, H * W).T
    return np.concatenate([feats, np.ones((H * W, 1))], axis=1)


def linear_ceiling(samples, k=7):
    """Best k x k linear filter of (M_up, PAN) fitted by least squares on the train set itself."""
    X = np.concatenate([_neighbourhoods(s, k) for s in samples])
    Y = np.concatenate([(s.GT - s.M_up).reshape(s.GT.shape[0], -1).T for s in samples])
    w = np.linalg.lstsq(X, Y, rcond=None)[0]
    return float(np.mean([psnr(s.M_up + (_neighbourhoods(s, k) @ w).T.reshape(s.GT.shape), s.GT)
                          for s in samples]))


def single_forward_psnr(net, samples, seed=0):
    """Mean PSNR of one stochastic forward per image, for comparison with the MC mean."""
    return float(np.mean([psnr(net.forward(s, RngStream(seed, i)), s.GT) for i, s in enumerate(samples)]))


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    samples = make_dataset(8, size=(32, 32), scale=4, bands=4, seed=0)
    cfg = NetworkConfig(dtype="float32")
    tcfg = TrainConfig(steps=2000, eval_every=100)
    baselines = {
        "bicubic_psnr": float(np.mean([psnr(s.M_up, s.GT) for s in samples])),
        "brovey_psnr": float(np.mean([psnr(brovey(s), s.GT) for s in samples])),
        "linear7x7_lstsq_psnr": linear_ceiling(samples),
    }
    logging.info("baselines %s", baselines)
    t0 = time.perf_counter()
    res = train(samples, cfg, tcfg)
    wall = time.perf_counter() - t0
    first = next((step for step, p in res.psnr_log if p > THRESHOLD_DB), None)
    record = {
        "dataset": {"count": 8, "size": [32, 32], "scale": 4, "bands": 4, "seed": 0},
        "network": dump_config(cfg).splitlines(),
        "train": dump_config(cfg, tcfg).splitlines()[len(dump_config(cfg).splitlines()):],
        "threshold_db": THRESHOLD_DB,
        "baselines": baselines,
        "psnr_log": res.psnr_log,
        "psnr_measure": f"mean over images of the MC-averaged output, M = {cfg.mc_samples}",
        "final_psnr": res.psnr_log[-1][1],
        "final_single_forward_psnr": single_forward_psnr(res.net, samples),
        "first_step_above_threshold": first,
        "wall_seconds": wall,
        "seconds_per_step": wall / tcfg.steps,
        "machine": f"{platform.machine()} {platform.python_version()} cpus={os.cpu_count()}",
    }
    os.makedirs(FIXTURES, exist_ok=True)
    with open(os.path.join(FIXTURES, "pilot_train.json"), "w") as fh:
        json.dump(record, fh, indent=1)
    ckpt = os.path.join(FIXTURES, "pilot_checkpoint.smt")
    io.save_checkpoint(ckpt, res.net.state_dict())
    with open(os.path.join(FIXTURES, "pilot_checkpoint.cfg"), "w") as fh:
        fh.write(dump_config(cfg, tcfg))
    logging.info("final PSNR %.3f dB, first above %.0f dB at step %s, %.0f s",
                 record["final_psnr"], THRESHOLD_DB, first, wall)


if __name__ == "__main__":
    main()
