"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config, paths or a
failed ``--check``), 2 numeric failure (non-finite loss or output).
"""

import argparse
import datetime
import logging
import os
import sys

import numpy as np

from . import data, erf, io, mc, metrics
from .config import ConfigError, content_hash, dump_config, load_config
from .net import FusionNet, NetworkConfig
from .rng import RngStream, stream_id_for
from .train import NumericError, train, write_loss_csv

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("shufflemamba")


class UsageError(Exception):
    pass


def write_manifest(out_dir, command, seed, config_path=None, config_text=""):
    """Record what is about to run; written before any other artifact."""
    os.makedirs(out_dir, exist_ok=True)
    now = datetime.datetime.now(datetime.timezone.utc).isoformat()
    lines = [f"command = {command}", f"config = {config_path or ''}",
             f"config_hash = {content_hash(config_text) if config_text else ''}",
             f"seed = {seed}", f"output = {os.path.abspath(out_dir)}", f"started = {now}"]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _pair(text, name):
    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{name}: expected integers, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise UsageError(f"{name}: expected H,W")
    return tuple(parts)


def _checkpoint_config(path):
    cfg_path = os.path.splitext(path)[0] + ".cfg"
    if not os.path.exists(cfg_path):
        raise UsageError(f"no config next to checkpoint (expected {cfg_path})")
    with open(cfg_path) as fh:
        return load_config(fh.read(), require_train=False)[0]


def load_net(checkpoint, dtype="float64"):
    if not os.path.exists(checkpoint):
        raise UsageError(f"checkpoint not found: {checkpoint}")
    cfg = _checkpoint_config(checkpoint)
    cfg.dtype = dtype
    net = FusionNet(cfg)
    net.load_state_dict(io.load_checkpoint(checkpoint))
    return net


def _load_data(directory):
    if not os.path.exists(os.path.join(directory, "index.txt")):
        raise UsageError(f"no dataset index in {directory}")
    return data.load_dataset(directory)


# -- commands -----------------------------------------------------------------------
def cmd_gen(args):
    H, W = _pair(args.size, "--size")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if H % args.scale or W % args.scale:
        raise UsageError(f"--scale {args.scale} does not divide --size {H},{W}")
    write_manifest(args.out, "gen", args.seed)
    samples = data.make_dataset(args.count, (H, W), args.scale, args.bands, args.seed)
    data.save_dataset(args.out, samples)
    print(f"wrote {args.count} samples to {args.out}")


def cmd_train(args):
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    ncfg, tcfg = load_config(text)
    if args.steps is not None:
        tcfg.steps = args.steps
    _, samples = _load_data(args.data)
    write_manifest(args.out, "train", ncfg.seed, args.config, text)
    net = FusionNet(ncfg)
    start, opt = 0, None
    if args.resume:
        from .train import Adam
        state = io.load_checkpoint(args.resume)
        net.load_state_dict(state)
        opt = Adam(net.parameters(), tcfg.beta1, tcfg.beta2, tcfg.eps)
        start = int(state["meta.step"][0])
        opt.load(state, start)
    ckpt = os.path.join(args.out, "checkpoint.smt")
    loss_csv = os.path.join(args.out, "loss.csv")
    appending = bool(args.resume) and os.path.exists(loss_csv)
    res = train(samples, ncfg, tcfg, net=net, optimizer=opt, start_step=start, stop_at=args.stop_at)
    state = dict(res.net.state_dict())
    state.update(res.optimizer.state())
    state["meta.step"] = np.array([res.step], dtype=np.float32)
    io.save_checkpoint(ckpt, state)
    with open(os.path.splitext(ckpt)[0] + ".cfg", "w") as fh:
        fh.write(dump_config(ncfg, tcfg))
    write_loss_csv(loss_csv, res.log, append=appending)
    last = res.log[-1][2] if res.log else float("nan")
    print(f"trained to step {res.step}; final loss {last:.6g}; checkpoint {ckpt}")


def cmd_eval(args):
    net = load_net(args.checkpoint)
    ids, samples = _load_data(args.data)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_manifest(out_dir, "eval", args.seed)
    cfg = mc.MCConfig(M=args.mc, base_seed=args.seed, granularity=args.granularity)
    rows = []
    for sid, s in zip(ids, samples):
        mean, _ = mc.mc_infer(s, net, cfg)
        if not np.all(np.isfinite(mean)):
            raise NumericError(f"non-finite output for image {sid}")
        rows.append((sid, metrics.evaluate(mean, s.GT, ratio=s.GT.shape[1] // s.M_in.shape[1])))
    metrics.write_metrics_csv(args.out, rows)
    print(f"mean PSNR {np.mean([r.psnr for _, r in rows]):.4f} dB over {len(rows)} images -> {args.out}")


def _erf_net_and_sample(args):
    if args.checkpoint:
        net = load_net(args.checkpoint)
    else:
        if not args.config:
            raise UsageError("erf needs --checkpoint or --config")
        with open(args.config) as fh:
            ncfg = load_config(fh.read(), require_train=False)[0]
        net = FusionNet(ncfg, zero_init=False)
    if args.data:
        sample = _load_data(args.data)[1][0]
    else:
        H, W = _pair(args.size, "--size")
        scene = data.synthetic_scene(RngStream(args.seed, stream_id_for("erf-scene")), (H, W),
                                     net.cfg.ms_channels)
        sample = data.wald_generate(scene, 4)
    return net, sample


def cmd_erf(args):
    if args.mode not in ("raster", "shuffle", "both"):
        raise UsageError(f"--mode must be raster, shuffle or both, got {args.mode!r}")
    net, sample = _erf_net_and_sample(args)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_manifest(out_dir, "erf", args.seed)
    modes = ("raster", "shuffle") if args.mode == "both" or args.check else (args.mode,)
    stats = {}
    stem, ext = os.path.splitext(args.out)
    for m in modes:
        emap = erf.erf_map(net, sample, mode=m, K=args.samples, seed=args.seed)
        path = args.out if len(modes) == 1 else f"{stem}_{m}{ext or '.png'}"
        emap.save_png(path)
        stats[m] = erf.off_center_cv(emap.magnitude)
        print(f"{m}: off-center CV {stats[m]:.4f} -> {path}")
    if args.check and not stats["shuffle"] < stats["raster"]:
        raise UsageError(f"check failed: shuffle CV {stats['shuffle']:.4f} "
                         f">= raster CV {stats['raster']:.4f}")


def cmd_sweep(args):
    net = load_net(args.checkpoint)
    _, samples = _load_data(args.data)
    try:
        Ms = [int(v) for v in args.Ms.split(",")]
    except ValueError:
        raise UsageError(f"--Ms: expected comma-separated integers, got {args.Ms!r}") from None
    if any(m < 1 for m in Ms):
        raise UsageError("--Ms entries must be >= 1")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_manifest(out_dir, "sweep", args.seed)
    rows = mc.mc_quality_cost_sweep(samples, net, Ms, trials=args.trials, base_seed=args.seed)
    mc.write_sweep_csv(args.out, rows)
    for r in rows:
        print(f"M={r['M']:>3}  PSNR {r['psnr_mean']:.4f} +/- {r['psnr_std']:.4f}  "
              f"{r['time_per_image_s']:.3f} s/img  {r['peak_memory_mb']:.1f} MB")


def build_parser():
    p = argparse.ArgumentParser(prog="shufflemamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic Wald-protocol dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--size", default="32,32", help="ground-truth H,W")
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--bands", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="override the configured total step count")
    t.add_argument("--stop-at", type=int, help="halt at this step, keeping the full lr schedule")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Monte-Carlo inference and metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mc", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--granularity", default="network", choices=("network", "block"))
    e.add_argument("--out", default="metrics.csv")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("erf", help="effective receptive field maps")
    r.add_argument("--checkpoint")
    r.add_argument("--config", help="random-init network from this config (no checkpoint)")
    r.add_argument("--data", help="take the first sample of this dataset")
    r.add_argument("--size", default="32,32")
    r.add_argument("--mode", default="shuffle")
    r.add_argument("--samples", type=int, default=64)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="erf.png")
    r.add_argument("--check", action="store_true", help="assert shuffle CV < raster CV")
    r.set_defaults(func=cmd_erf)

    s = sub.add_parser("sweep", help="quality/cost versus number of MC samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--Ms", default="1,2,4,8,16,32")
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="sweep.csv")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
