"""Two-branch shuffle-scan fusion network and its losses."""

from dataclasses import dataclass, fields

import numpy as np

from . import blocks as BK
from . import tensor as T
from .rng import RngStream, stream_id_for
from .shuffle import Permutation, sample_permutation
from .tensor import Tensor


@dataclass
class NetworkConfig:
    d_model: int = 32
    state_size: int = 8
    n_rm: int = 2  # RM blocks per modality before channel exchange
    n_rcim: int = 1  # channel-exchange stages
    n_rmim: int = 2
    patch_size: int = 1
    expand: int = 2
    ms_channels: int = 4
    mc_samples: int = 8
    seed: int = 0
    perm_mode: str = "per_block"  # or "shared": one permutation per forward
    pos_kernel: int = 3
    conv_kernel: int = 3
    dtype: str = "float64"
    pos_order: str = "conv_ln"  # position conv before LN; "ln_conv" swaps them

    def __post_init__(self):
        for f in ("d_model", "state_size", "n_rm", "n_rcim", "n_rmim", "patch_size",
                  "expand", "ms_channels", "mc_samples"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"config: {f} must be >= 1")
        if self.d_model % 2:
            raise ValueError("config: d_model must be even (channel exchange splits it in half)")
        if self.perm_mode not in ("per_block", "shared"):
            raise ValueError(f"config: unknown perm_mode {self.perm_mode!r}")
        if self.pos_order not in BK.POS_ORDERS:
            raise ValueError(f"config: pos_order must be one of {BK.POS_ORDERS}, got {self.pos_order!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"config: dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Sample:
    M_in: np.ndarray  # [C, h, w]
    M_up: np.ndarray  # [C, H, W]
    P_in: np.ndarray  # [1, H, W]
    GT: np.ndarray  # [C, H, W]

    def __post_init__(self):
        C, H, W = self.M_up.shape
        if self.P_in.shape != (1, H, W) or self.GT.shape != (C, H, W):
            raise ValueError(f"sample shapes disagree: M_up {self.M_up.shape}, "
                             f"P_in {self.P_in.shape}, GT {self.GT.shape}")
        if H % self.M_in.shape[1] or W % self.M_in.shape[2]:
            raise ValueError("sample: high-resolution size is not a multiple of M_in")


class PermSource:
    """Hands out one permutation per batch row for every block invocation.

    ``streams=None`` gives identity permutations (plain raster scan). With
    ``shared=True`` each row draws a single permutation on first use and
    reuses it for every block of the forward pass.
    """

    def __init__(self, streams=None, shared=False, batch=None):
        self.streams = None if streams is None else list(streams)
        self.shared = shared
        self.batch = batch if self.streams is None else len(self.streams)
        self._cache = {}

    @classmethod
    def seeded(cls, seed, ids, shared=False):
        return cls([RngStream(seed, i) for i in ids], shared=shared)

    def draw(self, L, batch):
        if self.streams is None:
            return [Permutation.identity(L)] * batch
        if len(self.streams) != batch:
            raise ValueError(f"{len(self.streams)} permutation streams for a batch of {batch}")
        if self.shared:
            if L not in self._cache:
                self._cache[L] = [sample_permutation(s, L) for s in self.streams]
            return self._cache[L]
        return [sample_permutation(s, L) for s in self.streams]


def _tile(t, m):
    return t if m == 1 else T.concat([t] * m, axis=0)


def _fold_mean(t, m):
    if m == 1:
        return t
    return T.mean(T.reshape(t, (m, t.shape[0] // m) + t.shape[1:]), axis=0)


class FusionNet:
    """Conv stems, patch embedding, RM chains, channel exchange, RMIM fusion, conv head.

    ``H_out = head(unpatch(F_m)) + M_up``. With ``zero_init=True`` every block
    out-projection and the head start at zero, so the initial output is
    exactly ``M_up``.
    """

    def __init__(self, cfg, seed=None, zero_init=True):
        self.cfg = cfg
        dt = cfg.np_dtype
        s = RngStream(cfg.seed if seed is None else seed, stream_id_for("init"))
        D, C, p = cfg.d_model, cfg.ms_channels, cfg.patch_size
        kw = dict(expand=cfg.expand, pos_kernel=cfg.pos_kernel, conv_kernel=cfg.conv_kernel,
                  zero_out=zero_init, dtype=dt)

        def w(shape, scale):
            return Tensor(s.normal(shape) * scale, dtype=dt)

        def zeros(shape):
            return Tensor(np.zeros(shape), dtype=dt)

        self.stem_m = (w((D, C, 3, 3), (9 * C) ** -0.5), zeros(D))
        self.stem_p = (w((D, 1, 3, 3), 9 ** -0.5), zeros(D))
        self.embed_m = (w((D * p * p, D), (D * p * p) ** -0.5), zeros(D))
        self.embed_p = (w((D * p * p, D), (D * p * p) ** -0.5), zeros(D))
        n_chain = cfg.n_rm + cfg.n_rcim
        self.rm_m = [BK.init_rm(D, cfg.state_size, s, **kw) for _ in range(n_chain)]
        self.rm_p = [BK.init_rm(D, cfg.state_size, s, **kw) for _ in range(n_chain)]
        self.rmim = [BK.init_rmim(D, cfg.state_size, s, **kw) for _ in range(cfg.n_rmim)]
        self.unembed = (w((D, D * p * p), D ** -0.5), zeros(D * p * p))
        if zero_init:
            self.head = (zeros((C, D, 3, 3)), zeros(C))
        else:
            self.head = (w((C, D, 3, 3), (9 * D) ** -0.5), zeros(C))

    # -- parameters ---------------------------------------------------------
    def parameters(self):
        """Ordered ``{name: Tensor}``; names follow ``<branch>.<index>.<param>``."""
        out = {}
        for branch, (wt, b) in (("stem_m", self.stem_m), ("stem_p", self.stem_p),
                                ("embed_m", self.embed_m), ("embed_p", self.embed_p)):
            out[f"{branch}.0.weight"], out[f"{branch}.0.bias"] = wt, b
        for branch, blocks in (("m", self.rm_m), ("p", self.rm_p), ("rmim", self.rmim)):
            for i, blk in enumerate(blocks):
                for k, v in blk.tensors().items():
                    out[f"{branch}.{i}.{k}"] = v
        out["unembed.0.weight"], out["unembed.0.bias"] = self.unembed
        out["head.0.weight"], out["head.0.bias"] = self.head
        return out

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, t in params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def requires_grad_(self, flag=True):
        for t in self.parameters().values():
            t.requires_grad = flag
            t.grad = None
        return self

    # -- forward ------------------------------------------------------------
    def forward_batch(self, ms_up, pan, perms, block_mc=1):
        """``ms_up`` [B, C, H, W], ``pan`` [B, 1, H, W] -> H_out Tensor [B, C, H, W].

        ``perms`` is a :class:`PermSource` over ``B * block_mc`` rows. With
        ``block_mc > 1`` each block runs on ``block_mc`` replicas (independent
        permutations) and its output is averaged before the next block.
        """
        cfg = self.cfg
        dt = cfg.np_dtype
        if not isinstance(ms_up, Tensor):
            ms_up = Tensor(np.asarray(ms_up, dtype=dt))
        pan = pan if isinstance(pan, Tensor) else Tensor(np.asarray(pan, dtype=dt))
        if ms_up.ndim != 4 or pan.ndim != 4 or pan.shape[1] != 1 \
                or ms_up.shape[2:] != pan.shape[2:] or ms_up.shape[0] != pan.shape[0]:
            raise ValueError(f"forward: bad input shapes {ms_up.shape} / {pan.shape}")
        if ms_up.shape[1] != cfg.ms_channels:
            raise ValueError(f"forward: expected {cfg.ms_channels} MS bands, got {ms_up.shape[1]}")
        B = ms_up.shape[0]
        M = int(block_mc)

        def run(fn, *grids):
            if M == 1:
                return fn(*grids, perms.draw(grids[0].L, B))
            tiled = [g.with_tokens(_tile(g.tokens, M)) for g in grids]
            return fn(*tiled, perms.draw(grids[0].L, B * M))

        def rm(blk):
            def fn(g, pr):
                out = BK.rm_block(g, blk, pr, cfg.pos_order)
                return out.with_tokens(_fold_mean(out.tokens, M))
            return fn

        fm = T.conv2d(ms_up, *self.stem_m)
        fp = T.conv2d(pan, *self.stem_p)
        Fm = BK.patch_embed(fm, cfg.patch_size, *self.embed_m)
        Fp = BK.patch_embed(fp, cfg.patch_size, *self.embed_p)
        for i in range(cfg.n_rm):
            Fm = run(rm(self.rm_m[i]), Fm)
            Fp = run(rm(self.rm_p[i]), Fp)
        for i in range(cfg.n_rm, cfg.n_rm + cfg.n_rcim):
            Fm, Fp = BK.channel_swap(Fm, Fp)
            Fm = run(rm(self.rm_m[i]), Fm)
            Fp = run(rm(self.rm_p[i]), Fp)
        for blk in self.rmim:
            def fuse(gm, gp, pr, blk=blk):
                out = BK.rmim_block(gm, gp, blk, pr, cfg.pos_order)
                return out.with_tokens(_fold_mean(out.tokens, M))
            Fm = run(fuse, Fm, Fp)
        tok = T.linear(Fm.tokens, *self.unembed)
        img = BK.unpatchify(tok, Fm.grid, cfg.patch_size, cfg.d_model)
        return T.conv2d(img, *self.head) + ms_up

    def forward(self, sample, stream=None):
        """Single-sample forward; ``stream=None`` runs the raster (identity) scan."""
        src = PermSource(None if stream is None else [stream], shared=self.cfg.perm_mode == "shared")
        with T.no_grad():
            out = self.forward_batch(sample.M_up[None], sample.P_in[None], src)
        return out.data[0]


def forward(sample, cfg, params, rng):
    """Functional form: ``params`` is a :class:`FusionNet` or a state dict."""
    net = params if isinstance(params, FusionNet) else _net_from_state(cfg, params)
    return net.forward(sample, rng)


def _net_from_state(cfg, state):
    net = FusionNet(cfg)
    net.load_state_dict(state)
    return net


# -- losses -----------------------------------------------------------------------
def loss_pansharpen(H_out, GT):
    """Mean absolute error."""
    H_out = T.as_tensor(H_out)
    GT = T.as_tensor(GT)
    if H_out.shape != GT.shape:
        raise ValueError(f"loss: shape mismatch {H_out.shape} vs {GT.shape}")
    return T.mean(T.tabs(H_out - GT))


def gaussian_window(size=11, sigma=1.5):
    if size < 1 or sigma <= 0:
        raise ValueError("SSIM window needs size >= 1 and sigma > 0")
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_tensor(x, y, peak=1.0, size=11, sigma=1.5):
    """Differentiable mean SSIM of [B, C, H, W] tensors (valid-window statistics)."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    C = x.shape[1]
    win = Tensor(np.broadcast_to(gaussian_window(size, sigma), (C, size, size)).copy(), dtype=x.dtype)

    def f(a):
        return T.depthwise_conv(a, win, padding="valid")

    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return T.mean(num / den)


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_magnitude(x):
    """``|Gx| + |Gy|`` per channel for a [B, C, H, W] tensor, zero padded."""
    x = T.as_tensor(x)
    C = x.shape[1]
    kx = Tensor(np.broadcast_to(SOBEL_X, (C, 3, 3)).copy(), dtype=x.dtype)
    ky = Tensor(np.broadcast_to(SOBEL_X.T, (C, 3, 3)).copy(), dtype=x.dtype)
    return T.tabs(T.depthwise_conv(x, kx)) + T.tabs(T.depthwise_conv(x, ky))


def loss_mif(fused, in_a, in_b, weights=(1.0, 1.0, 1.0), window=11, sigma=1.5):
    """L1 to the pixelwise max of the inputs, SSIM to both inputs, and a
    Sobel-gradient L1 to the max input gradient."""
    if window < 1:
        raise ValueError("loss_mif: SSIM window must be positive")
    fused = T.as_tensor(fused)
    a = np.asarray(in_a.data if isinstance(in_a, Tensor) else in_a, dtype=fused.dtype)
    b = np.asarray(in_b.data if isinstance(in_b, Tensor) else in_b, dtype=fused.dtype)
    w_l1, w_ssim, w_grad = weights
    l1 = T.mean(T.tabs(fused - np.maximum(a, b)))
    ssim_term = 1.0 - (ssim_tensor(fused, a, size=window, sigma=sigma)
                       + ssim_tensor(fused, b, size=window, sigma=sigma)) * 0.5
    with T.no_grad():
        target = np.maximum(sobel_magnitude(a).data, sobel_magnitude(b).data)
    grad_term = T.mean(T.tabs(sobel_magnitude(fused) - target))
    return w_l1 * l1 + w_ssim * ssim_term + w_grad * grad_term
