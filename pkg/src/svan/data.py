"""Image I/O, luma conversion, bicubic resampling, patches, and Y-channel metrics.

Images are ``(h, w, 3)`` arrays: ``uint8`` as loaded from disk, or float in
``[0, 1]`` while being processed.  Network tensors are planar ``(n, 3, h, w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

__all__ = [
    "ImageFormatError",
    "MetricError",
    "load_png",
    "save_png",
    "to_float",
    "to_uint8",
    "image_to_tensor",
    "tensor_to_image",
    "rgb_to_y",
    "cubic_kernel",
    "resize_weights",
    "bicubic_resize",
    "modcrop",
    "psnr_y",
    "ssim_y",
    "sample_patch",
    "augment",
    "inverse_code",
    "Sample",
    "load_dataset",
]


class ImageFormatError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# I/O


def load_png(path) -> np.ndarray:
    """8-bit RGB or grayscale PNG -> ``(h, w, 3)`` uint8."""
    path = Path(path)
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError("format", f"{path} is {im.format}, not PNG")
        if im.info.get("interlace"):
            raise ImageFormatError("interlace", f"{path} is interlaced")
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            raise ImageFormatError("bit-depth", f"{path} has unsupported sample depth (mode {mode})")
        if mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
            return np.repeat(arr[:, :, None], 3, axis=2)
        if mode == "P":
            im = im.convert("RGB")
        elif mode != "RGB":
            raise ImageFormatError("color-type", f"{path} has unsupported mode {mode}")
        return np.array(im, dtype=np.uint8)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], then quantise with round-half-up."""
    if image.dtype == np.uint8:
        return image
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return np.asarray(image, dtype=np.float64)


def save_png(image: np.ndarray, path) -> None:
    arr = to_uint8(np.asarray(image))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError("shape", f"expected (h, w, 3) image, got {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(Path(path), format="PNG")


def image_to_tensor(image: np.ndarray, dtype=np.float64) -> np.ndarray:
    return to_float(image).transpose(2, 0, 1)[None].astype(dtype)


def tensor_to_image(t) -> np.ndarray:
    arr = np.asarray(getattr(t, "data", t))
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 3:
        raise ValueError(f"expected a (1, 3, h, w) tensor, got {arr.shape}")
    return arr[0].transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# color


def rgb_to_y(image: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma in [16/255, 235/255]."""
    rgb = to_float(image)
    return (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2] + 16.0) / 255.0


# ---------------------------------------------------------------------------
# resampling


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(in_len: int, out_len: int) -> np.ndarray:
    """Dense ``(out_len, in_len)`` resampling matrix; rows sum to one.

    Downscaling widens the kernel by the shrink factor (anti-aliasing).
    Out-of-range taps are folded onto the nearest edge sample.
    """
    scale = out_len / in_len
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    centres = (np.arange(out_len) + 0.5) / scale - 0.5
    first = np.floor(centres - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    wts = stretch * cubic_kernel(stretch * (centres[:, None] - idx))
    wts /= wts.sum(axis=1, keepdims=True)
    mat = np.zeros((out_len, in_len))
    rows = np.broadcast_to(np.arange(out_len)[:, None], idx.shape)
    np.add.at(mat, (rows, np.clip(idx, 0, in_len - 1)), wts)
    return mat


def bicubic_resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Separable bicubic resize (a = -0.5) of an ``(h, w, ...)`` float image."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target size must be positive")
    img = to_float(image)
    h, w = img.shape[:2]
    out = np.tensordot(resize_weights(h, target_h), img, axes=(1, 0))
    out = np.tensordot(resize_weights(w, target_w), out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def modcrop(image: np.ndarray, scale: int) -> np.ndarray:
    h, w = image.shape[:2]
    return image[: h - h % scale, : w - w % scale]


def bicubic_degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Anti-aliased bicubic downscale, quantised to 8 bits like a stored LR file."""
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"HR size {h}x{w} is not a multiple of scale {scale}")
    return to_uint8(bicubic_resize(hr, h // scale, w // scale))


def bicubic_upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    h, w = lr.shape[:2]
    return to_uint8(bicubic_resize(lr, h * scale, w * scale))


# ---------------------------------------------------------------------------
# metrics


def _y_pair(sr, hr, shave: int):
    if sr.shape != hr.shape:
        raise MetricError(f"size mismatch: {sr.shape} vs {hr.shape}")
    if shave < 0:
        raise MetricError("shave must be >= 0")
    ys, yh = rgb_to_y(sr), rgb_to_y(hr)
    h, w = ys.shape
    if 2 * shave >= h or 2 * shave >= w:
        raise MetricError(f"shave={shave} leaves an empty crop of a {h}x{w} image")
    if shave:
        ys, yh = ys[shave:-shave, shave:-shave], yh[shave:-shave, shave:-shave]
    return ys, yh


def psnr_y(sr: np.ndarray, hr: np.ndarray, shave: int = 0) -> float:
    """PSNR on the luma plane with peak 1.0; identical planes give ``inf``."""
    ys, yh = _y_pair(sr, hr, shave)
    mse = float(np.mean((ys - yh) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim_y(sr: np.ndarray, hr: np.ndarray, shave: int = 0) -> float:
    """Mean SSIM of the luma planes: 11x11 Gaussian (sigma 1.5), K1=0.01, K2=0.03, L=1."""
    ys, yh = _y_pair(sr, hr, shave)
    if min(ys.shape) < 11:
        raise MetricError(f"image {ys.shape} smaller than the 11x11 SSIM window")
    c1, c2 = 0.01**2, 0.03**2
    g = _gaussian_window()
    mu1, mu2 = _filter_valid(ys, g), _filter_valid(yh, g)
    s11 = _filter_valid(ys * ys, g) - mu1 * mu1
    s22 = _filter_valid(yh * yh, g) - mu2 * mu2
    s12 = _filter_valid(ys * yh, g) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# patches and augmentation


def sample_patch(lr: np.ndarray, hr: np.ndarray, patch: int, scale: int, rng: np.random.Generator):
    """Aligned random crops: ``patch`` on the LR image, ``scale * patch`` on HR."""
    lh, lw = lr.shape[:2]
    if hr.shape[:2] != (lh * scale, lw * scale):
        raise ValueError(f"HR {hr.shape[:2]} is not {scale}x LR {lr.shape[:2]}")
    if lh < patch or lw < patch:
        raise ValueError(f"LR image {lh}x{lw} is smaller than patch {patch}")
    y = int(rng.integers(0, lh - patch + 1))
    x = int(rng.integers(0, lw - patch + 1))
    hp = patch * scale
    return (
        lr[y : y + patch, x : x + patch],
        hr[y * scale : y * scale + hp, x * scale : x * scale + hp],
    )


def _dihedral(img: np.ndarray, code: int) -> np.ndarray:
    out = np.rot90(img, k=code % 4, axes=(0, 1))
    if code >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(pair, code: int):
    """Apply dihedral transform ``code`` (rotation ``code % 4`` quarter turns, flip if >= 4)."""
    if not 0 <= code < 8:
        raise ValueError(f"augmentation code must be in 0..7, got {code}")
    return tuple(_dihedral(img, code) for img in pair)


def inverse_code(code: int) -> int:
    if not 0 <= code < 8:
        raise ValueError(f"augmentation code must be in 0..7, got {code}")
    return code if code >= 4 else (4 - code) % 4


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    name: str
    hr: np.ndarray
    lr: np.ndarray


def load_dataset(directory, scale: int) -> list[Sample]:
    """HR PNGs from ``directory``; LR from sibling ``<dir>_x<scale>`` or synthesised.

    Samples are sorted by file name so results merge deterministically.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"no PNG images in {directory}")
    lr_dir = directory.with_name(f"{directory.name}_x{scale}")
    samples = []
    for f in files:
        hr = modcrop(load_png(f), scale)
        lr_file = lr_dir / f.name
        lr = load_png(lr_file) if lr_file.is_file() else bicubic_degrade(hr, scale)
        if lr.shape[:2] != (hr.shape[0] // scale, hr.shape[1] // scale):
            raise ValueError(f"{lr_file}: LR size {lr.shape[:2]} does not match HR {hr.shape[:2]}")
        samples.append(Sample(f.stem, hr, lr))
    return samples
