"""Patch embedding and the three shuffle-scan blocks (RM, RCIM, RMIM).

Token tensors are [B, L, D] with ``L = Hp * Wp`` in raster order. Every
block maps [B, L, D] -> [B, L, D] and ends in a residual connection, so a
zero output projection makes it the identity.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .shuffle import Permutation, apply_inverse_shuffle, apply_shuffle
from .ssm import SelectiveProj, init_selective, selective_scan
from .tensor import Tensor


@dataclass
class PatchGrid:
    tokens: Tensor  # [B, L, D]
    grid: tuple
    patch_size: int = 1

    def __post_init__(self):
        Hp, Wp = self.grid
        if self.tokens.shape[1] != Hp * Wp:
            raise ValueError(f"{self.tokens.shape[1]} tokens do not fill a {Hp}x{Wp} grid")

    @property
    def L(self):
        return self.tokens.shape[1]

    @property
    def width(self):
        return self.tokens.shape[2]

    def with_tokens(self, tokens):
        return PatchGrid(tokens, self.grid, self.patch_size)


def tokens_to_image(tokens, grid):
    """[B, L, D] -> [B, D, Hp, Wp]."""
    B, L, D = tokens.shape
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, D) + tuple(grid))


def image_to_tokens(img):
    """[B, D, Hp, Wp] -> [B, L, D]."""
    B, D, Hp, Wp = img.shape
    return T.transpose(T.reshape(img, (B, D, Hp * Wp)), (0, 2, 1))


def patchify(img, patch_size):
    """[B, C, H, W] -> ([B, L, C*p*p], (Hp, Wp)) with non-overlapping p x p patches."""
    B, C, H, W = img.shape
    p = int(patch_size)
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {p}")
    Hp, Wp = H // p, W // p
    x = T.reshape(img, (B, C, Hp, p, Wp, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (B, Hp * Wp, C * p * p)), (Hp, Wp)


def unpatchify(tokens, grid, patch_size, channels):
    """Inverse of :func:`patchify`."""
    B = tokens.shape[0]
    Hp, Wp = grid
    p = int(patch_size)
    x = T.reshape(tokens, (B, Hp, Wp, channels, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (B, channels, Hp * p, Wp * p))


def patch_embed(feat, patch_size, weight, bias=None):
    """Linear projection of non-overlapping patches to ``weight.shape[1]`` channels."""
    feat = T.as_tensor(feat)
    if feat.ndim == 3:
        feat = T.reshape(feat, (1,) + feat.shape)
    flat, grid = patchify(feat, patch_size)
    if flat.shape[-1] != weight.shape[0]:
        raise ValueError(f"patch vectors have {flat.shape[-1]} entries, projection expects {weight.shape[0]}")
    return PatchGrid(T.linear(flat, weight, bias), grid, int(patch_size))


# -- parameters -----------------------------------------------------------------
@dataclass
class BlockParams:
    """Weights of one RM block."""

    pos_conv: Tensor  # [D, k, k]
    ln_gain: Tensor
    ln_bias: Tensor
    in_proj: Tensor  # [D, 2 * Din]
    conv1d: Tensor  # [Din, kc]
    conv1d_bias: Tensor
    ssm: SelectiveProj
    out_proj: Tensor  # [Din, D]

    def tensors(self):
        out = {k: getattr(self, k) for k in
               ("pos_conv", "ln_gain", "ln_bias", "in_proj", "conv1d", "conv1d_bias")}
        out.update({"ssm." + k: v for k, v in self.ssm.tensors().items()})
        out["out_proj"] = self.out_proj
        return out


@dataclass
class RMIMParams:
    pos_conv_m: Tensor
    pos_conv_p: Tensor
    ln_gain_m: Tensor
    ln_bias_m: Tensor
    ln_gain_p: Tensor
    ln_bias_p: Tensor
    in_proj_x: Tensor  # [D, Din], shared by both modalities
    in_proj_z: Tensor  # [D, Din], gate from the m branch
    conv1d_m: Tensor
    conv1d_bias_m: Tensor
    conv1d_p: Tensor
    conv1d_bias_p: Tensor
    ssm_m: SelectiveProj
    ssm_p: SelectiveProj
    out_proj: Tensor  # [Din, D]
    post_conv: Tensor  # [D, k, k], applied after realignment

    def tensors(self):
        out = {}
        for k, v in vars(self).items():
            if isinstance(v, SelectiveProj):
                out.update({f"{k}.{n}": t for n, t in v.tensors().items()})
            else:
                out[k] = v
        return out


def _conv_init(stream, shape, dtype, scale):
    return Tensor(stream.normal(shape) * scale, dtype=dtype)


def init_rm(d_model, state_size, stream, expand=2, rank=None, pos_kernel=3, conv_kernel=3,
            zero_out=True, dtype=np.float64):
    D, Din = d_model, expand * d_model
    rank = rank or max(1, -(-D // 16))
    return BlockParams(
        pos_conv=_conv_init(stream, (D, pos_kernel, pos_kernel), dtype, 0.1),
        ln_gain=Tensor(np.ones(D), dtype=dtype),
        ln_bias=Tensor(np.zeros(D), dtype=dtype),
        in_proj=_conv_init(stream, (D, 2 * Din), dtype, D ** -0.5),
        conv1d=_conv_init(stream, (Din, conv_kernel), dtype, conv_kernel ** -0.5),
        conv1d_bias=Tensor(np.zeros(Din), dtype=dtype),
        ssm=init_selective(Din, state_size, rank, stream, dtype=dtype),
        out_proj=Tensor(np.zeros((Din, D)), dtype=dtype) if zero_out
        else _conv_init(stream, (Din, D), dtype, Din ** -0.5),
    )


def init_rmim(d_model, state_size, stream, expand=2, rank=None, pos_kernel=3, conv_kernel=3,
              post_kernel=3, zero_out=True, dtype=np.float64):
    D, Din = d_model, expand * d_model
    rank = rank or max(1, -(-D // 16))
    post = np.zeros((D, post_kernel, post_kernel))
    post[:, post_kernel // 2, post_kernel // 2] = 1.0
    post += stream.normal(post.shape) * 0.1
    return RMIMParams(
        pos_conv_m=_conv_init(stream, (D, pos_kernel, pos_kernel), dtype, 0.1),
        pos_conv_p=_conv_init(stream, (D, pos_kernel, pos_kernel), dtype, 0.1),
        ln_gain_m=Tensor(np.ones(D), dtype=dtype),
        ln_bias_m=Tensor(np.zeros(D), dtype=dtype),
        ln_gain_p=Tensor(np.ones(D), dtype=dtype),
        ln_bias_p=Tensor(np.zeros(D), dtype=dtype),
        in_proj_x=_conv_init(stream, (D, Din), dtype, D ** -0.5),
        in_proj_z=_conv_init(stream, (D, Din), dtype, D ** -0.5),
        conv1d_m=_conv_init(stream, (Din, conv_kernel), dtype, conv_kernel ** -0.5),
        conv1d_bias_m=Tensor(np.zeros(Din), dtype=dtype),
        conv1d_p=_conv_init(stream, (Din, conv_kernel), dtype, conv_kernel ** -0.5),
        conv1d_bias_p=Tensor(np.zeros(Din), dtype=dtype),
        ssm_m=init_selective(Din, state_size, rank, stream, dtype=dtype),
        ssm_p=init_selective(Din, state_size, rank, stream, dtype=dtype),
        out_proj=Tensor(np.zeros((Din, D)), dtype=dtype) if zero_out
        else _conv_init(stream, (Din, D), dtype, Din ** -0.5),
        post_conv=Tensor(post, dtype=dtype),
    )


# -- shared pieces ----------------------------------------------------------------
POS_ORDERS = ("conv_ln", "ln_conv")


def _position_and_norm(tokens, grid, pos_conv, gain, bias, order="conv_ln"):
    """Residual depthwise position conv on the grid plus LN, in the given order."""
    if order not in POS_ORDERS:
        raise ValueError(f"unknown position/norm order {order!r}")

    def pos(t):
        img = tokens_to_image(t, grid)
        return image_to_tokens(img + T.depthwise_conv(img, pos_conv))

    if order == "conv_ln":
        return T.layer_norm(pos(tokens), gain, bias)
    return pos(T.layer_norm(tokens, gain, bias))


def _conv_scan(x, conv_w, conv_b, ssm):
    """Depthwise 1-D conv along the (shuffled) sequence, SiLU, selective scan."""
    xc = T.depthwise_conv(T.transpose(x, (0, 2, 1)), conv_w)
    xc = T.silu(T.transpose(xc, (0, 2, 1)) + conv_b)
    return selective_scan(xc, ssm)


def _check_perm(perm, L):
    perms = [perm] if isinstance(perm, Permutation) else list(perm)
    for p in perms:
        if len(p) != L:
            raise ValueError(f"permutation length {len(p)} does not match {L} tokens")


def rm_block(F, params, perm, pos_order="conv_ln"):
    """Random Mamba block.

    position conv -> LN -> shuffle -> in-proj (x, z) -> conv1d/SiLU -> scan
    -> gate by SiLU(z) -> out-proj -> inverse shuffle -> residual.
    ``pos_order="ln_conv"`` applies LN before the position conv instead.
    ``perm`` is one :class:`Permutation` or a list with one per batch row.
    """
    _check_perm(perm, F.L)
    h = _position_and_norm(F.tokens, F.grid, params.pos_conv, params.ln_gain, params.ln_bias, pos_order)
    h = apply_shuffle(h, perm)
    Din = params.in_proj.shape[1] // 2
    xz = T.linear(h, params.in_proj)
    x = T.getitem(xz, (Ellipsis, slice(0, Din)))
    z = T.getitem(xz, (Ellipsis, slice(Din, 2 * Din)))
    y = _conv_scan(x, params.conv1d, params.conv1d_bias, params.ssm) * T.silu(z)
    out = apply_inverse_shuffle(T.linear(y, params.out_proj), perm)
    return F.with_tokens(F.tokens + out)


def channel_swap(Fm, Fp):
    """Exchange the upper channel halves of two token sets; parameter free."""
    D = Fm.width
    if D % 2:
        raise ValueError(f"channel swap needs an even width, got {D}")
    if Fm.tokens.shape != Fp.tokens.shape:
        raise ValueError(f"modalities disagree: {Fm.tokens.shape} vs {Fp.tokens.shape}")
    lo, hi = (Ellipsis, slice(0, D // 2)), (Ellipsis, slice(D // 2, D))
    m_lo, m_hi = T.getitem(Fm.tokens, lo), T.getitem(Fm.tokens, hi)
    p_lo, p_hi = T.getitem(Fp.tokens, lo), T.getitem(Fp.tokens, hi)
    return (Fm.with_tokens(T.concat([m_lo, p_hi], axis=-1)),
            Fp.with_tokens(T.concat([p_lo, m_hi], axis=-1)))


def rcim_block(Fm, Fp, params_m, params_p, perms, pos_order="conv_ln"):
    """Channel swap followed by one RM block per modality. ``perms = (perm_m, perm_p)``."""
    Fm, Fp = channel_swap(Fm, Fp)
    perm_m, perm_p = perms
    return rm_block(Fm, params_m, perm_m, pos_order), rm_block(Fp, params_p, perm_p, pos_order)


def _same_perm(a, b):
    a = [a] if isinstance(a, Permutation) else list(a)
    b = [b] if isinstance(b, Permutation) else list(b)
    return len(a) == len(b) and all(np.array_equal(x.forward, y.forward) for x, y in zip(a, b))


def rmim_block(Fm, Fp, params, perm, pos_order="conv_ln"):
    """Random Modal Interactive Mamba block; returns the updated m-branch tokens.

    Both modalities are shuffled with the same permutation so that token i of
    one stays aligned with token i of the other. Passing a ``(perm_m, perm_p)``
    pair that differs is an error.
    """
    if isinstance(perm, tuple) and len(perm) == 2:
        if not _same_perm(*perm):
            raise ValueError("rmim_block: both modalities must share one permutation")
        perm = perm[0]
    if Fm.tokens.shape != Fp.tokens.shape:
        raise ValueError(f"modalities disagree: {Fm.tokens.shape} vs {Fp.tokens.shape}")
    _check_perm(perm, Fm.L)
    P = params
    hm = _position_and_norm(Fm.tokens, Fm.grid, P.pos_conv_m, P.ln_gain_m, P.ln_bias_m, pos_order)
    hp = _position_and_norm(Fp.tokens, Fp.grid, P.pos_conv_p, P.ln_gain_p, P.ln_bias_p, pos_order)
    hm = apply_shuffle(hm, perm)
    hp = apply_shuffle(hp, perm)
    ym = _conv_scan(T.linear(hm, P.in_proj_x), P.conv1d_m, P.conv1d_bias_m, P.ssm_m)
    yp = _conv_scan(T.linear(hp, P.in_proj_x), P.conv1d_p, P.conv1d_bias_p, P.ssm_p)
    gate = T.silu(T.linear(hm, P.in_proj_z))
    out = apply_inverse_shuffle(T.linear(ym * gate + yp * gate, P.out_proj), perm)
    img = T.depthwise_conv(tokens_to_image(out, Fm.grid), P.post_conv)
    return Fm.with_tokens(Fm.tokens + image_to_tokens(img))
