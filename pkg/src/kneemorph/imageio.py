"""8-bit grayscale PGM/PNG reading and writing, plus pair manifests."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .phantom import denormalize_intensity, normalize_intensity

_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary (P5) PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end())
    return data.reshape(h, w).copy()


def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("PGM output needs a 2-D uint8 array")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "RGB", "RGBA", "LA"):
            raise ValueError(f"{path}: unsupported PNG mode {im.mode}")
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_png(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("PNG output needs a 2-D uint8 array")
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)


def read_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an 8-bit PGM or PNG as a [-1, 1] float image, resized bilinearly when ``size`` differs."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        pixels = read_pgm(path)
    elif suffix == ".png":
        pixels = read_png(path)
    else:
        raise ValueError(f"{path}: unsupported image type {suffix!r}")
    img = normalize_intensity(pixels, 8)
    if size is not None and img.shape != tuple(size):
        img = resize_bilinear(img, size)
    return img


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    pixels = denormalize_intensity(image, 8)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, pixels)
    elif path.suffix.lower() == ".png":
        write_png(path, pixels)
    else:
        raise ValueError(f"{path}: unsupported image type {path.suffix!r}")


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize."""
    from scipy.ndimage import map_coordinates

    h, w = image.shape
    oh, ow = size
    ys = np.linspace(0, h - 1, oh)
    xs = np.linspace(0, w - 1, ow)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(image, [yy, xx], order=1, mode="nearest")


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Lines of ``source<TAB>target``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'source<TAB>target'")
        pairs.append(tuple((path.parent / p).resolve() if not Path(p).is_absolute() else Path(p) for p in parts))
    if not pairs:
        raise ValueError(f"{path}: manifest lists no pairs")
    return pairs


def write_manifest(path, pairs) -> None:
    path = Path(path)
    lines = []
    for src, tgt in pairs:
        lines.append(f"{_rel(src, path.parent)}\t{_rel(tgt, path.parent)}")
    path.write_text("\n".join(lines) + "\n")


def _rel(p, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)
