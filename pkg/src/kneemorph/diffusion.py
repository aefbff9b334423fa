"""Noise schedule, forward noising, and the conditional noise-prediction U-Net."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, ConvTranspose2d, GroupNorm, Linear, Module, SelfAttention, group_count


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def t_max(self) -> int:
        return len(self.beta)

    def alpha_bar_after(self, steps: int) -> float:
        """Cumulative signal retention after ``steps`` kernel applications (1.0 for zero steps)."""
        if not 0 <= steps <= self.t_max:
            raise ValueError(f"steps must be in [0, {self.t_max}], got {steps}")
        return 1.0 if steps == 0 else float(self.alpha_bar[steps - 1])


def make_schedule(t_max: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, t_max) if t_max > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar)


def schedule_from_betas(betas) -> NoiseSchedule:
    beta = np.asarray(betas, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if ((beta <= 0) | (beta >= 1)).any():
        raise ValueError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def forward_perturb(x0: np.ndarray, t, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise, with ab_t = schedule.alpha_bar[t].

    ``t`` is a 0-based step index, a scalar or one index per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} != image shape {x0.shape}")
    t = np.asarray(t)
    if (t < 0).any() or (t >= schedule.t_max).any():
        raise ValueError(f"t out of range [0, {schedule.t_max})")
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def iterated_forward(x0: np.ndarray, steps: int, rng: np.random.Generator, schedule: NoiseSchedule) -> np.ndarray:
    """Apply the single-step kernel ``steps`` times using beta[0..steps-1].

    Distributionally equal to ``forward_perturb(x0, steps - 1, n)``.
    """
    if not 0 <= steps <= schedule.t_max:
        raise ValueError(f"steps must be in [0, {schedule.t_max}]")
    x = np.array(x0, dtype=np.float64)
    for i in range(steps):
        b = schedule.beta[i]
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(x.shape)
    return x


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; entry 2k is sin(t / 10000^(2k/dim)), 2k+1 the cosine."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True)
class DenoiserArch:
    base: int = 32
    mults: tuple[int, ...] = (1, 2, 2)
    blocks: int = 2
    attention: bool = True
    dropout: float = 0.0
    in_channels: int = 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserArch":
        d = dict(d)
        d["mults"] = tuple(d["mults"])
        return cls(**d)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, dropout: float, rng: np.random.Generator):
        self.norm1 = GroupNorm(group_count(cin), cin)
        self.conv1 = Conv2d(cin, cout, rng)
        self.temb = Linear(temb_dim, cout, rng)
        self.norm2 = GroupNorm(group_count(cout), cout)
        self.conv2 = Conv2d(cout, cout, rng)
        self.skip = Conv2d(cin, cout, rng, kernel=1, padding=0) if cin != cout else None
        self.p = dropout

    def forward(self, x: Tensor, temb: Tensor, rng: np.random.Generator | None) -> Tensor:
        h = self.conv1(ad.swish(self.norm1(x)))
        h = ad.add_per_channel(h, self.temb(temb))
        h = ad.swish(self.norm2(h))
        h = ad.dropout(h, self.p, self.training, rng)
        h = self.conv2(h)
        return ad.add(self.skip(x) if self.skip is not None else x, h)


class DenoiserNet(Module):
    """Noise predictor over the stacked (x_S, x_T, x_t) channels.

    Encoder levels halve resolution with stride-2 convs, the middle runs
    res/attention/res, and the decoder upsamples with 2x2 transposed convs and
    fuses the matching encoder features by channel concatenation.
    """

    def __init__(self, arch: DenoiserArch, rng: np.random.Generator):
        self.arch = arch
        base = arch.base
        chans = [base * m for m in arch.mults]
        self.temb_dim = base
        tdim = 4 * base
        self.temb1 = Linear(base, tdim, rng)
        self.temb2 = Linear(tdim, tdim, rng)
        self.conv_in = Conv2d(arch.in_channels, base, rng)

        self.down_blocks: list[ResBlock] = []
        self.downsample: list[Conv2d] = []
        cur = base
        for lvl, ch in enumerate(chans):
            for _ in range(arch.blocks):
                self.down_blocks.append(ResBlock(cur, ch, tdim, arch.dropout, rng))
                cur = ch
            if lvl < len(chans) - 1:
                self.downsample.append(Conv2d(cur, chans[lvl + 1], rng, stride=2))
                cur = chans[lvl + 1]

        self.mid1 = ResBlock(cur, cur, tdim, arch.dropout, rng)
        self.mid_attn = SelfAttention(cur, group_count(cur), rng) if arch.attention else None
        self.mid2 = ResBlock(cur, cur, tdim, arch.dropout, rng)

        self.up_blocks: list[ResBlock] = []
        self.upsample: list[ConvTranspose2d] = []
        for lvl in reversed(range(len(chans))):
            ch = chans[lvl]
            self.up_blocks.append(ResBlock(cur + ch, ch, tdim, arch.dropout, rng))
            for _ in range(arch.blocks - 1):
                self.up_blocks.append(ResBlock(ch, ch, tdim, arch.dropout, rng))
            cur = ch
            if lvl > 0:
                self.upsample.append(ConvTranspose2d(cur, chans[lvl - 1], rng))
                cur = chans[lvl - 1]

        self.norm_out = GroupNorm(group_count(cur), cur)
        self.conv_out = Conv2d(cur, 1, rng)

    @property
    def min_divisor(self) -> int:
        return 2 ** (len(self.arch.mults) - 1)

    def forward(self, x: Tensor, t, rng: np.random.Generator | None = None) -> Tensor:
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        temb = Tensor(time_embed(t, self.temb_dim))
        temb = self.temb2(ad.swish(self.temb1(temb)))

        h = self.conv_in(x)
        skips = []
        blocks = iter(self.down_blocks)
        nlev = len(self.arch.mults)
        for lvl in range(nlev):
            for _ in range(self.arch.blocks):
                h = next(blocks)(h, temb, rng)
            skips.append(h)
            if lvl < nlev - 1:
                h = self.downsample[lvl](h)

        h = self.mid1(h, temb, rng)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, temb, rng)

        blocks = iter(self.up_blocks)
        ups = iter(self.upsample)
        for lvl in reversed(range(nlev)):
            h = ad.concat_channels(h, skips[lvl])
            for _ in range(self.arch.blocks):
                h = next(blocks)(h, temb, rng)
            if lvl > 0:
                h = next(ups)(h)
        return self.conv_out(ad.swish(self.norm_out(h)))


def _as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.data.ndim == 4 else Tensor(x.data.reshape((-1, 1) + x.shape[-2:]))
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def predict_noise(denoiser: DenoiserNet, x_s, x_t_img, x_noisy, t, rng: np.random.Generator | None = None) -> Tensor:
    """Predicted noise (N, 1, H, W) for a batch of (source, target, perturbed target) images."""
    xs, xt, xn = _as_batch(x_s), _as_batch(x_t_img), _as_batch(x_noisy)
    if not xs.shape == xt.shape == xn.shape:
        raise ValueError(f"shape mismatch: {xs.shape}, {xt.shape}, {xn.shape}")
    h, w = xs.shape[2:]
    d = denoiser.min_divisor
    if h % d or w % d:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {d}")
    return denoiser(ad.concat_channels(xs, xt, xn), t, rng)


def diffusion_loss(n, n_hat: Tensor) -> Tensor:
    """Mean over all elements of (n - n_hat)^2."""
    n = ad.as_tensor(n)
    if n.shape != n_hat.shape:
        raise ValueError(f"shape mismatch {n.shape} vs {n_hat.shape}")
    return ad.reduce_mean(ad.square(ad.sub(n, n_hat)))
