"""Registration network, flow scaling, bilinear warping, and the morphing losses.

Flow fields are (2, H, W) arrays (or (N, 2, H, W) tensors) holding the
per-pixel displacement in pixels: channel 0 is dx (columns), channel 1 is dy
(rows). Warping pulls: output(i, j) samples the input at (i + dy, j + dx).
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, ConvTranspose2d, GroupNorm, Module, group_count

CANONICAL_ETAS = (0.0, 0.25, 0.5, 0.75, 1.0)
NCC_EPS = 1e-8


# ------------------------------------------------------------------ network

@dataclass(frozen=True)
class RegNetArch:
    base: int = 16
    levels: int = 3
    out_scale: float = 1e-3
    in_channels: int = 2
    smooth_passes: int = 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegNetArch":
        return cls(**d)


class ConvBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        self.conv = Conv2d(cin, cout, rng, stride=stride)
        self.norm = GroupNorm(group_count(cout), cout)

    def forward(self, x: Tensor) -> Tensor:
        return ad.swish(self.norm(self.conv(x)))


class RegNet(Module):
    """U-Net-like flow predictor over the stacked (x_S, n_hat) channels.

    Resolution drops ``levels`` times (the input block already strides), then
    climbs back with transposed convs, concatenating the contracting-path
    features at each scale and the raw input at full resolution.
    """

    def __init__(self, arch: RegNetArch, rng: np.random.Generator):
        if arch.levels < 1:
            raise ValueError("RegNet needs at least one level")
        self.arch = arch
        chans = [arch.base * 2 ** i for i in range(arch.levels)]
        self.input_block = ConvBlock(arch.in_channels, chans[0], rng, stride=2)
        self.down = [ConvBlock(chans[i - 1], chans[i], rng, stride=2) for i in range(1, arch.levels)]
        self.up = []
        self.fuse = []
        for i in reversed(range(1, arch.levels)):
            self.up.append(ConvTranspose2d(chans[i], chans[i - 1], rng))
            self.fuse.append(ConvBlock(2 * chans[i - 1], chans[i - 1], rng))
        self.up_full = ConvTranspose2d(chans[0], chans[0], rng)
        self.refine = ConvBlock(chans[0] + arch.in_channels, chans[0], rng)
        self.refine2 = ConvBlock(chans[0], chans[0], rng)
        self.output_block = Conv2d(chans[0], 2, rng)
        # start near the identity warp
        self.output_block.weight.data *= arch.out_scale
        self._blur = _binomial_kernel(2)

    @property
    def min_divisor(self) -> int:
        return 2 ** self.arch.levels

    def forward(self, x: Tensor) -> Tensor:
        feats = [self.input_block(x)]
        for blk in self.down:
            feats.append(blk(feats[-1]))
        h = feats[-1]
        for k, (up, fuse) in enumerate(zip(self.up, self.fuse)):
            skip = feats[-2 - k]
            h = fuse(ad.concat_channels(up(h), skip))
        h = self.up_full(h)
        h = self.refine2(self.refine(ad.concat_channels(h, x)))
        flow = self.output_block(h)
        # fixed low-pass on the output keeps the field free of pixel-scale
        # ripples that a frozen classifier could be fooled by
        for _ in range(self.arch.smooth_passes):
            flow = ad.conv2d(flow, Tensor(self._blur), None, 1, self._blur.shape[-1] // 2)
        return flow


def _binomial_kernel(channels: int, taps: int = 5) -> np.ndarray:
    """Per-channel (depthwise) normalized binomial blur as a (C, C, k, k) weight."""
    row = np.array([math.comb(taps - 1, i) for i in range(taps)], dtype=np.float64)
    k2 = np.outer(row, row) / row.sum() ** 2
    w = np.zeros((channels, channels, taps, taps))
    for c in range(channels):
        w[c, c] = k2
    return w


def _batch4(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.ndim == 4:
            return x
        raise ValueError(f"expected a (N, 1, H, W) tensor, got {x.shape}")
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def predict_flow(regnet: RegNet, x_s, n_hat) -> Tensor:
    """Flow (N, 2, H, W) from source images and predicted noise."""
    xs, nh = _batch4(x_s), _batch4(n_hat)
    if xs.shape != nh.shape:
        raise ValueError(f"shape mismatch {xs.shape} vs {nh.shape}")
    h, w = xs.shape[2:]
    d = regnet.min_divisor
    if h % d or w % d:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {d}")
    return regnet(ad.concat_channels(xs, nh))


def scale_flow(phi, eta: float):
    """eta * phi for eta in [0, 1]; works on arrays and tensors."""
    eta = float(eta)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if isinstance(phi, Tensor):
        return ad.scale(phi, eta)
    return np.asarray(phi, dtype=np.float64) * eta


# --------------------------------------------------------------------- warp

def _warp_batch(x: Tensor, flow: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"flow shape {flow.shape} does not fit image {x.shape}")
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    raw_y = ii + flow.data[:, 1]
    raw_x = jj + flow.data[:, 0]
    sy = np.clip(raw_y, 0.0, h - 1.0)
    sx = np.clip(raw_x, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(sy), max(h - 2, 0)).astype(np.int64)
    x0 = np.minimum(np.floor(sx), max(w - 2, 0)).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[:, None]

    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    xd = x.data
    v00 = xd[bidx, cidx, y0[:, None], x0[:, None]]
    v01 = xd[bidx, cidx, y0[:, None], x1[:, None]]
    v10 = xd[bidx, cidx, y1[:, None], x0[:, None]]
    v11 = xd[bidx, cidx, y1[:, None], x1[:, None]]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def backward(g):
        gx = None
        if x.requires_grad:
            base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None] * (h * w)
            size = n * c * h * w
            gx = np.zeros(size)
            for yy, xx, wt in (
                (y0, x0, (1 - wy) * (1 - wx)),
                (y0, x1, (1 - wy) * wx),
                (y1, x0, wy * (1 - wx)),
                (y1, x1, wy * wx),
            ):
                idx = base + (yy * w + xx)[:, None]
                gx += np.bincount(idx.ravel(), weights=(g * wt).ravel(), minlength=size)
            gx = gx.reshape(n, c, h, w)
        gflow = None
        if flow.requires_grad:
            d_wx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            d_wy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            in_x = ((raw_x >= 0) & (raw_x <= w - 1))[:, None]
            in_y = ((raw_y >= 0) & (raw_y <= h - 1))[:, None]
            gflow = np.empty((n, 2, h, w))
            gflow[:, 0] = (g * d_wx * in_x).sum(axis=1)
            gflow[:, 1] = (g * d_wy * in_y).sum(axis=1)
        return gx, gflow

    return ad.make_op("warp", out, (x, flow), backward)


def warp(x, phi):
    """Bilinear pull-warp with border clamping.

    Accepts a single (H, W) image with a (2, H, W) flow (returns an array
    unless either input is a tensor) or batched (N, C, H, W) / (N, 2, H, W)
    tensors.
    """
    if not isinstance(x, Tensor) and not isinstance(phi, Tensor):
        img = np.asarray(x, dtype=np.float64)
        fl = np.asarray(phi, dtype=np.float64)
        if img.ndim != 2 or fl.shape != (2,) + img.shape:
            raise ValueError(f"flow shape {fl.shape} does not fit image {img.shape}")
        with ad.no_grad():
            return _warp_batch(Tensor._wrap(img[None, None], False), Tensor._wrap(fl[None], False)).data[0, 0]
    xt = _batch4(x)
    ft = phi if isinstance(phi, Tensor) else Tensor(np.asarray(phi, dtype=np.float64)[None] if np.ndim(phi) == 3 else phi)
    return _warp_batch(xt, ft)


# ------------------------------------------------------------------- losses

def ncc_loss(a, b, eps: float = NCC_EPS) -> Tensor:
    """1 - global zero-normalized cross-correlation, averaged over the batch."""
    at, bt = _batch4(a), _batch4(b)
    if at.shape != bt.shape:
        raise ValueError(f"shape mismatch {at.shape} vs {bt.shape}")
    n = at.shape[0]
    ac = at.data.reshape(n, -1)
    bc = bt.data.reshape(n, -1)
    ac = ac - ac.mean(axis=1, keepdims=True)
    bc = bc - bc.mean(axis=1, keepdims=True)
    s_ab = (ac * bc).sum(axis=1)
    s_aa = (ac * ac).sum(axis=1)
    s_bb = (bc * bc).sum(axis=1)
    d = np.sqrt(s_aa * s_bb + eps)
    z = s_ab / d
    loss = np.array(np.mean(1.0 - z))

    def backward(g):
        k = (-float(g) / n)
        dza = bc / d[:, None] - (s_ab * s_bb / d ** 3)[:, None] * ac
        dzb = ac / d[:, None] - (s_ab * s_aa / d ** 3)[:, None] * bc
        return (k * dza).reshape(at.shape), (k * dzb).reshape(bt.shape)

    return ad.make_op("ncc_loss", loss, (at, bt), backward)


def ig_loss(a, b) -> Tensor:
    """Mean |d_x a - d_x b| plus mean |d_y a - d_y b| with forward differences.

    Each term is averaged over its own valid positions (the last column for
    d_x and the last row for d_y have no forward neighbour).
    """
    at, bt = _batch4(a), _batch4(b)
    if at.shape != bt.shape:
        raise ValueError(f"shape mismatch {at.shape} vs {bt.shape}")
    h, w = at.shape[2:]
    if h < 2 or w < 2:
        raise ValueError("ig_loss needs images of at least 2x2")
    diff = at.data - bt.data
    ex = diff[..., :, 1:] - diff[..., :, :-1]
    ey = diff[..., 1:, :] - diff[..., :-1, :]
    loss = np.array(np.abs(ex).mean() + np.abs(ey).mean())

    def backward(g):
        sx = np.sign(ex) * (float(g) / ex.size)
        sy = np.sign(ey) * (float(g) / ey.size)
        ga = np.zeros(at.shape)
        ga[..., :, 1:] += sx
        ga[..., :, :-1] -= sx
        ga[..., 1:, :] += sy
        ga[..., :-1, :] -= sy
        return ga, -ga

    return ad.make_op("ig_loss", loss, (at, bt), backward)


def morph_loss(warped_full, x_t_img) -> Tensor:
    return ad.add(ncc_loss(warped_full, x_t_img), ig_loss(warped_full, x_t_img))


# ------------------------------------------------------------- file format

FLOW_MAGIC = b"DMMF"
FLOW_VERSION = 1


def write_flow(path, flow) -> None:
    """DMMF: magic, u32 version, u32 H, u32 W, dx plane then dy plane as little-endian f32."""
    fl = np.asarray(flow, dtype=np.float64)
    if fl.ndim != 3 or fl.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {fl.shape}")
    if not np.isfinite(fl).all():
        raise ValueError("flow has non-finite displacements")
    _, h, w = fl.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<III", FLOW_VERSION, h, w))
        fh.write(fl.astype("<f4").tobytes())


def read_flow(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a DMMF flow file")
    version, h, w = struct.unpack_from("<III", raw, 4)
    if version != FLOW_VERSION:
        raise ValueError(f"{path}: unsupported flow version {version}")
    expected = 16 + 2 * h * w * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64).reshape(2, h, w)
