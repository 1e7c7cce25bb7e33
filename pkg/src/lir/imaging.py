"""Image I/O, noise synthesis, Gaussian blur, patch sampling and quality metrics.

Images are ``float32`` numpy arrays shaped ``(height, width, channels)`` with
nominal intensities in ``[0, 1]``. A batch is a stacked array
``(count, height, width, channels)``.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

os.environ.setdefault("OPENCV_LOG_LEVEL", "ERROR")

import cv2  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from scipy.ndimage import correlate1d  # noqa: E402

RAWF_MAGIC = b"RAWF"
RAWF_VERSION = 1

# Level (window size -> weight) table used by the background consistency term.
DEFAULT_BLUR_LEVELS = ((5, 0.25), (9, 0.5), (15, 1.0))


class ImageDecodeError(ValueError):
    """Raised when an image file cannot be decoded."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "awgn"
    sigma_range: tuple[float, float] = (5.0, 50.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("awgn", "poisson", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        lo, hi = self.sigma_range
        if lo < 0 or hi < 0 or lo > hi:
            raise ValueError(f"invalid sigma range {self.sigma_range}")


@dataclass(frozen=True)
class BlurPyramidSpec:
    """Blur levels as ``(kernel_size, weight)`` pairs.

    ``stds`` optionally overrides the Gaussian std of each level; when absent
    the std is derived from the kernel size (see :func:`kernel_std`).
    """

    levels: tuple[tuple[int, float], ...] = DEFAULT_BLUR_LEVELS
    stds: tuple[float, ...] | None = None

    def __post_init__(self):
        for k, w in self.levels:
            if k < 3 or k % 2 == 0:
                raise ValueError(f"blur kernel size must be odd and >= 3, got {k}")
            if w <= 0:
                raise ValueError(f"blur level weight must be positive, got {w}")
        if self.stds is not None and len(self.stds) != len(self.levels):
            raise ValueError("stds must have one entry per level")

    @property
    def total_weight(self) -> float:
        return float(sum(w for _, w in self.levels))


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


def label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def stream_seed(master_seed: int, label: str, lane: int = 0) -> int:
    """Seed of the stream ``label``/``lane`` under ``master_seed``.

    The stream id is ``blake2b_64(label) XOR lane``; the id and the master seed
    are mixed by numpy's ``SeedSequence`` into a 63-bit seed.
    """
    stream_id = label_hash(label) ^ (lane & 0xFFFFFFFFFFFFFFFF)
    ss = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, stream_id])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def rng_stream(master_seed: int, label: str, lane: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(master_seed, label, lane)))


def torch_stream(master_seed: int, label: str, lane: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(master_seed, label, lane))
    return g


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _as_image(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    return arr


def _read_rawf(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 20 or data[:4] != RAWF_MAGIC:
        raise ImageDecodeError(f"{path}: not a RAWF file")
    version, h, w, c = struct.unpack("<4I", data[4:20])
    if version != RAWF_VERSION:
        raise ImageDecodeError(f"{path}: unsupported RAWF version {version}")
    n = h * w * c
    if c not in (1, 3) or len(data) != 20 + 4 * n:
        raise ImageDecodeError(f"{path}: truncated or malformed RAWF payload")
    arr = np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        raise ImageDecodeError(f"{path}: non-finite values")
    return arr.astype(np.float32)


def load_image_depth(path) -> tuple[np.ndarray, int]:
    """Like :func:`load_image`, also returning the stored bit depth (32 for RAWF)."""
    path = Path(path)
    if not path.is_file():
        raise ImageDecodeError(f"{path}: no such file")
    if path.suffix.lower() == ".rawf":
        return _read_rawf(path), 32
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageDecodeError(f"{path}: cannot decode image")
    if arr.dtype == np.uint8:
        depth = 8
    elif arr.dtype == np.uint16:
        depth = 16
    else:
        raise ImageDecodeError(f"{path}: unsupported bit depth ({arr.dtype})")
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        elif arr.shape[2] != 3:
            raise ImageDecodeError(f"{path}: unsupported channel count {arr.shape[2]}")
        arr = arr[:, :, ::-1]
    return _as_image(arr.astype(np.float64) / ((1 << depth) - 1)), depth


def load_image(path) -> np.ndarray:
    """Decode a PNG, PGM or RAWF file into a ``(H, W, C)`` float image.

    Integer formats are scaled by ``1/255`` (8-bit) or ``1/65535`` (16-bit).
    """
    return load_image_depth(path)[0]


def save_image(img: np.ndarray, path, bit_depth: int = 8) -> None:
    """Write ``img`` as PNG/PGM (clamped and quantized) or as RAWF float32."""
    img = _as_image(img)
    path = Path(path)
    if path.suffix.lower() == ".rawf":
        h, w, c = img.shape
        payload = np.ascontiguousarray(img, dtype="<f4").tobytes()
        path.write_bytes(RAWF_MAGIC + struct.pack("<4I", RAWF_VERSION, h, w, c) + payload)
        return
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    top = (1 << bit_depth) - 1
    q = np.round(np.clip(img.astype(np.float64), 0.0, 1.0) * top)
    q = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    if q.shape[2] == 3:
        q = q[:, :, ::-1]
    else:
        q = q[:, :, 0]
    if path.suffix.lower() == ".pgm" and q.ndim == 3:
        raise ValueError("PGM only stores single-channel images")
    try:
        ok = cv2.imwrite(str(path), np.ascontiguousarray(q))
    except cv2.error as exc:
        raise OSError(f"{path}: cannot write image ({exc})") from exc
    if not ok:
        raise OSError(f"{path}: cannot write image")


def quantize(img: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Clamp and quantize to ``bit_depth`` levels, returned as floats in [0, 1]."""
    top = (1 << bit_depth) - 1
    return (np.round(np.clip(img, 0.0, 1.0) * top) / top).astype(np.float32)


# ---------------------------------------------------------------------------
# Noise synthesis
# ---------------------------------------------------------------------------


def add_awgn(img: np.ndarray, sigma8: float, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise with std ``sigma8 / 255``; no clipping."""
    if sigma8 < 0:
        raise ValueError(f"sigma8 must be >= 0, got {sigma8}")
    img = np.asarray(img, dtype=np.float32)
    if sigma8 == 0:
        return img.copy()
    noise = rng.standard_normal(img.shape) * (sigma8 / 255.0)
    return (img + noise).astype(np.float32)


def poisson_levels(img: np.ndarray) -> int:
    unique = np.unique(np.asarray(img)).size
    return 2 ** max(1, math.ceil(math.log2(unique))) if unique > 1 else 2


def add_poisson(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Poisson noise scaled by the next power of two above the unique-value count."""
    img = np.asarray(img, dtype=np.float32)
    if img.size and (img.min() < 0 or img.max() > 1 or not np.all(np.isfinite(img))):
        raise ValueError("add_poisson expects finite values in [0, 1]")
    levels = poisson_levels(img)
    out = rng.poisson(img.astype(np.float64) * levels) / levels
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def add_noise(img: np.ndarray, kind: str, sigma8: float, rng: np.random.Generator) -> np.ndarray:
    if kind == "awgn":
        return add_awgn(img, sigma8, rng)
    if kind == "poisson":
        return add_poisson(img, rng)
    if kind == "none":
        return np.asarray(img, dtype=np.float32).copy()
    raise ValueError(f"unknown noise kind {kind!r}")


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------


def kernel_std(k: int) -> float:
    """Std of a Gaussian window of odd size ``k`` (the usual OpenCV rule)."""
    return 0.3 * ((k - 1) * 0.5 - 1) + 0.8


def gaussian_kernel1d(k: int, std: float | None = None, dtype=torch.float32) -> torch.Tensor:
    if k < 3 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {k}")
    s = kernel_std(k) if std is None else float(std)
    if s <= 0:
        raise ValueError(f"blur std must be positive, got {s}")
    r = torch.arange(k, dtype=torch.float64) - (k - 1) / 2
    g = torch.exp(-(r**2) / (2 * s * s))
    return (g / g.sum()).to(dtype)


def blur_tensor(x: torch.Tensor, k: int, std: float | None = None) -> torch.Tensor:
    """Separable Gaussian blur of an ``(N, C, H, W)`` tensor with reflect padding."""
    g = gaussian_kernel1d(k, std, dtype=x.dtype).to(x.device)
    n, c, h, w = x.shape
    p = k // 2
    y = x.reshape(n * c, 1, h, w)
    y = F.pad(y, (p, p, p, p), mode="reflect")
    y = F.conv2d(y, g.view(1, 1, 1, k))
    y = F.conv2d(y, g.view(1, 1, k, 1))
    return y.reshape(n, c, h, w)


def gaussian_blur(img: np.ndarray, k: int, std: float | None = None) -> np.ndarray:
    img = _as_image(img)
    if k < 3 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {k}")
    t = torch.from_numpy(img.astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
    out = blur_tensor(t, k, std)[0].permute(1, 2, 0).numpy()
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_val**2 / mse))


SSIM_WIN = 11
SSIM_STD = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _ssim_window() -> np.ndarray:
    r = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(r**2) / (2 * SSIM_STD**2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows, channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    g = _ssim_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    h = SSIM_WIN // 2

    def filt(u):
        u = correlate1d(u, g, axis=0, mode="reflect")
        u = correlate1d(u, g, axis=1, mode="reflect")
        return u[h:-h, h:-h]

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_patches(
    pool: Sequence[np.ndarray], patch: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Crop ``count`` random ``patch`` x ``patch`` windows from random pool images."""
    if not pool:
        raise ValueError("empty image pool")
    for i, img in enumerate(pool):
        if img.shape[0] < patch or img.shape[1] < patch:
            raise ValueError(f"pool image {i} of size {img.shape[:2]} is smaller than patch {patch}")
    out = []
    for _ in range(count):
        img = pool[int(rng.integers(len(pool)))]
        top = int(rng.integers(img.shape[0] - patch + 1))
        left = int(rng.integers(img.shape[1] - patch + 1))
        out.append(img[top : top + patch, left : left + patch])
    return np.stack(out).astype(np.float32)


def split_unpaired(dataset: Sequence, ratio: float, seed: int) -> tuple[list, list]:
    """Randomly partition ``dataset`` into (noisy_pool, clean_pool)."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = rng_stream(seed, "split_unpaired").permutation(n)
    n_noisy = int(math.floor(ratio * n + 0.5))
    noisy = [dataset[i] for i in sorted(order[:n_noisy])]
    clean = [dataset[i] for i in sorted(order[n_noisy:])]
    return noisy, clean


def to_tensor(batch: np.ndarray) -> torch.Tensor:
    """``(N, H, W, C)`` or ``(H, W, C)`` array to an ``(N, C, H, W)`` float tensor."""
    arr = np.asarray(batch, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t: torch.Tensor) -> np.ndarray:
    """First element of an ``(N, C, H, W)`` tensor as an ``(H, W, C)`` array."""
    return t.detach()[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)
