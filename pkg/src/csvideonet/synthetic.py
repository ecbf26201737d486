"""Synthetic moving-gradient clips for smoke tests and desk-scale experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def moving_gradient_clip(
    n_frames: int = 10, height: int = 240, width: int = 320, seed: int = 0, rgb: bool = True
) -> np.ndarray:
    """A drifting linear gradient plus a translating sinusoidal grating.

    Returns uint8 frames of shape (n_frames, H, W, 3) when ``rgb`` is set,
    otherwise float32 luma frames (n_frames, H, W) in [0, 1].
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    slope = rng.uniform(0.3, 0.6) / max(height, width)
    drift = rng.uniform(-2.0, 2.0, size=2)

    phi = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(24.0, 48.0)
    k = 2 * np.pi / period * np.array([np.cos(phi), np.sin(phi)])
    speed = rng.uniform(-1.5, 1.5, size=2)
    amp = rng.uniform(0.12, 0.2)
    offset = rng.uniform(0.4, 0.6)
    tint = rng.uniform(0.85, 1.15, size=3)

    frames = []
    for t in range(n_frames):
        gx = xx - drift[0] * t - width / 2
        gy = yy - drift[1] * t - height / 2
        grad = slope * (np.cos(theta) * gx + np.sin(theta) * gy)
        sx = xx - speed[0] * t
        sy = yy - speed[1] * t
        grating = amp * np.sin(k[0] * sx + k[1] * sy)
        frames.append(np.clip(offset + grad + grating, 0.0, 1.0))
    luma = np.stack(frames)
    if not rgb:
        return luma.astype(np.float32)
    rgb_frames = np.clip(luma[..., None] * tint * 255.0, 0, 255)
    return np.round(rgb_frames).astype(np.uint8)


def write_image_sequence(frames: np.ndarray, directory, grayscale: bool = False) -> Path:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        if grayscale and f.ndim == 3:
            f = np.round(f.mean(axis=-1)).astype(np.uint8)
        Image.fromarray(f).save(directory / f"frame_{i}.png")
    return directory


def synthetic_corpus(directory, clips: int, n_frames: int = 10, seed: int = 0, height=240, width=320) -> list[Path]:
    """Write ``clips`` image-sequence clips under ``directory``; clip i uses seed ``seed + i``."""
    directory = Path(directory)
    return [
        write_image_sequence(
            moving_gradient_clip(n_frames, height, width, seed=seed + i), directory / f"clip_{i:04d}"
        )
        for i in range(clips)
    ]


def synthetic_gop_blocks(gops: int, T: int = 10, size: int = 160, block_size: int = 32, seed: int = 0) -> np.ndarray:
    """Stacked (G, T, rows, cols, b, b) float32 blocks straight from luma frames (no disk)."""
    from .ingest import blockify

    out = []
    for g in range(gops):
        frames = moving_gradient_clip(T, size, size, seed=seed + g, rgb=False)
        out.append(np.stack([blockify(f, block_size) for f in frames]))
    return np.stack(out).astype(np.float32)
