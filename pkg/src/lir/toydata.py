"""Procedural texture patches for smoke tests and demos."""

from __future__ import annotations

import numpy as np

from lir.imaging import rng_stream


def texture_patch(rng: np.random.Generator, size: int = 64, channels: int = 3) -> np.ndarray:
    """One patch: oriented gratings plus a few flat-colored shapes, in [0.05, 0.95]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(0.3, 0.7, size=channels)
    img = np.broadcast_to(base, (size, size, channels)).copy()
    for _ in range(int(rng.integers(1, 4))):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += wave[:, :, None] * rng.uniform(0.05, 0.15, size=channels)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        color = rng.uniform(0.05, 0.95, size=channels)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = 0.5 * img[mask] + 0.5 * color
    return np.clip(img, 0.05, 0.95).astype(np.float32)


def texture_set(n: int, seed: int, size: int = 64, channels: int = 3) -> list[np.ndarray]:
    rng = rng_stream(seed, "toy_textures")
    return [texture_patch(rng, size, channels) for _ in range(n)]
