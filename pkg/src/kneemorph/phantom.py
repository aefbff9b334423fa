"""Synthetic knee-joint phantoms with a single severity control.

Each phantom shows a femur band above and a tibia band below a dark joint
gap. Severity s narrows the gap (both bones translate rigidly toward the
joint line, carrying their texture with them) and grows lateral osteophyte
bumps at the joint-facing bone corners.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.special import expit

BACKGROUND = -0.6
BONE = 0.35
TEXTURE_STD = 0.12
EDGE_SOFTNESS = 0.6  # px, logistic edge width
BUMP_WIDTH = 2.5  # px, vertical extent of an osteophyte bump
HALF_WIDTH_FRAC = 0.34
TRUTH_SEVERITIES = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class PhantomParams:
    severity: float = 0.0
    gap0: float = 7.0
    gap1: float = 2.0
    osteophyte_max: float = 4.0
    texture_seed: int = 0
    size: tuple[int, int] = (64, 64)
    noise_sigma: float = 0.02

    def validate(self) -> None:
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must lie in [0, 1], got {self.severity}")
        if self.gap1 >= self.gap0:
            raise ValueError(f"gap1 ({self.gap1}) must be smaller than gap0 ({self.gap0})")
        if self.gap1 < 0:
            raise ValueError("gap1 must be non-negative")
        if self.osteophyte_max < 0:
            raise ValueError("osteophyte_max must be non-negative")
        h, w = self.size
        if h <= 0 or w <= 0:
            raise ValueError(f"image size must be positive, got {self.size}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def gap(self) -> float:
        """Joint-space half-width at this severity."""
        return self.gap0 + self.severity * (self.gap1 - self.gap0)

    def osteophyte(self) -> float:
        return self.severity * self.osteophyte_max


def _texture(seed: int, shape: tuple[int, int]) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    field = gaussian_filter(rng.standard_normal(shape), sigma=2.0, mode="wrap")
    field -= field.mean()
    return field * (TEXTURE_STD / field.std())


def generate_phantom(params: PhantomParams) -> np.ndarray:
    """Render one phantom in [-1, 1]."""
    params.validate()
    h, w = params.size
    g = params.gap()
    d = params.gap0 - g  # rigid inward shift of each bone
    bump = params.osteophyte()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    half = HALF_WIDTH_FRAC * w

    pad = int(np.ceil(params.gap0)) + 2
    tex = _texture(params.texture_seed, (h + 2 * pad, w))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    def bone(edge_y: float, sign: float, tex_shift: float) -> np.ndarray:
        # sign=+1: bone occupies y < edge_y (femur); sign=-1: y > edge_y (tibia)
        vert = expit(sign * (edge_y - yy) / EDGE_SOFTNESS)
        half_w = half + bump * np.exp(-(((yy - edge_y) / BUMP_WIDTH) ** 2))
        lat = expit((half_w - np.abs(xx - cx)) / EDGE_SOFTNESS)
        t = map_coordinates(tex, [yy + pad - tex_shift, xx], order=1, mode="nearest")
        return vert * lat, t

    occ_f, tex_f = bone(cy - g, 1.0, d)
    occ_t, tex_t = bone(cy + g, -1.0, -d)
    img = BACKGROUND + occ_f * (BONE + tex_f - BACKGROUND) + occ_t * (BONE + tex_t - BACKGROUND)
    if params.noise_sigma > 0:
        noise_rng = np.random.default_rng([params.texture_seed, 1, int(round(params.severity * 1_000_000))])
        img = img + params.noise_sigma * noise_rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0)


def threshold() -> float:
    return 0.5 * (BACKGROUND + BONE)


def measure_gap(image: np.ndarray, column: int | None = None) -> float:
    """Dark-band thickness at one column, with sub-pixel threshold crossings.

    Scans outward from the center row for the first above-threshold pixel on
    each side and interpolates where the profile crosses the threshold.
    Returns 0 when the center itself is bone.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    col = img[:, w // 2 if column is None else column]
    thr = threshold()
    c0, c1 = (h - 1) // 2, h // 2
    if col[c0] >= thr and col[c1] >= thr:
        return 0.0

    def crossing(start: int, step: int) -> float:
        i = start
        while 0 <= i + step < h and col[i + step] < thr:
            i += step
        if not 0 <= i + step < h:
            return float(i)
        a, b = col[i], col[i + step]
        frac = (thr - a) / (b - a)
        return i + step * frac

    lo = crossing(c0 if col[c0] < thr else c1, -1)
    hi = crossing(c1 if col[c1] < thr else c0, 1)
    return float(hi - lo)


def osteophyte_area(image: np.ndarray, params: PhantomParams) -> float:
    """Bone occupancy summed over the columns outside the base bone width."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    cx = (w - 1) / 2.0
    half = HALF_WIDTH_FRAC * w
    xx = np.abs(np.arange(w) - cx)
    lateral = xx > half + 1.0
    occ = np.clip((img - BACKGROUND) / (BONE - BACKGROUND), 0.0, 1.0)
    return float(occ[:, lateral].sum())


@dataclass
class PairDataset:
    """Paired phantom images sharing a texture seed per pair.

    ``truth`` maps severity to ground-truth frames, for evaluation only.
    """

    sources: np.ndarray
    targets: np.ndarray
    truth: dict[float, np.ndarray]
    texture_seeds: np.ndarray
    params: PhantomParams

    def __len__(self) -> int:
        return len(self.sources)

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx)
        return PairDataset(
            self.sources[idx], self.targets[idx], {k: v[idx] for k, v in self.truth.items()},
            self.texture_seeds[idx], self.params,
        )


def generate_pair_dataset(n_pairs: int, size=(64, 64), seed: int = 0, base: PhantomParams | None = None,
                          truth_severities=TRUTH_SEVERITIES) -> PairDataset:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if isinstance(size, int):
        size = (size, size)
    base = replace(base or PhantomParams(), size=tuple(size))
    base.validate()
    seeds = np.random.default_rng([seed, 0xDA7A]).choice(2 ** 31 - 1, size=n_pairs, replace=False)

    def render(s: float, ts: int) -> np.ndarray:
        return generate_phantom(replace(base, severity=s, texture_seed=int(ts)))

    sources = np.stack([render(0.0, ts) for ts in seeds])
    targets = np.stack([render(1.0, ts) for ts in seeds])
    truth = {float(s): np.stack([render(s, ts) for ts in seeds]) for s in truth_severities}
    return PairDataset(sources, targets, truth, seeds.astype(np.int64), base)


def severity_class_dataset(n: int, lo: float, hi: float, seed: int, base: PhantomParams | None = None) -> np.ndarray:
    """n phantoms with severity drawn uniformly from [lo, hi] and fresh textures."""
    base = base or PhantomParams()
    rng = np.random.default_rng([seed, 0x5E7])
    sev = rng.uniform(lo, hi, size=n)
    tex = rng.choice(2 ** 31 - 1, size=n, replace=False)
    return np.stack([generate_phantom(replace(base, severity=float(s), texture_seed=int(t))) for s, t in zip(sev, tex)])


def normalize_intensity(raw, bit_depth: int = 8) -> np.ndarray:
    """Map integer samples in [0, 2^bits - 1] affinely onto [-1, 1]."""
    arr = np.asarray(raw)
    top = 2 ** bit_depth - 1
    if arr.size and (arr.min() < 0 or arr.max() > top):
        raise ValueError(f"samples outside [0, {top}]")
    return 2.0 * arr.astype(np.float64) / top - 1.0


def denormalize_intensity(image, bit_depth: int = 8) -> np.ndarray:
    """Inverse of :func:`normalize_intensity`, rounding to the nearest integer."""
    top = 2 ** bit_depth - 1
    vals = np.rint((np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0) + 1.0) * 0.5 * top)
    return vals.astype(np.uint8 if bit_depth <= 8 else np.uint16)
