"""Frame export: 8-bit PNG files plus an animated GIF."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

FRAME_PATTERN = "frame_{:03d}.png"
ANIMATION_NAME = "clip.gif"


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto [0, 255]; ``c x h x w`` becomes ``h x w x c``."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = np.moveaxis(arr, 0, -1)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
    return np.rint((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    arr = img.astype(np.float64) / 127.5 - 1.0
    if arr.ndim == 3:
        arr = np.moveaxis(arr, -1, 0)
    return arr


def export_media(frames: np.ndarray, out_dir, gif: bool = True, frame_ms: int = 120) -> list[Path]:
    """Write one PNG per frame (``f x c x h x w`` in [-1, 1]) and optionally a GIF."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"expected f x c x h x w frames, got shape {frames.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = [Image.fromarray(to_uint8(fr)) for fr in frames]
    paths = []
    for i, img in enumerate(images):
        p = out / FRAME_PATTERN.format(i)
        img.save(p, format="PNG")
        paths.append(p)
    if gif:
        p = out / ANIMATION_NAME
        images[0].save(p, format="GIF", save_all=True, append_images=images[1:],
                       duration=frame_ms, loop=0)
        paths.append(p)
    return paths


def read_frames(frames_dir) -> np.ndarray:
    """Read ``frame_*.png`` files back as ``f x c x h x w`` in [-1, 1]."""
    files = sorted(Path(frames_dir).glob("frame_*.png"))
    if not files:
        raise FileNotFoundError(f"no frame_*.png files in {frames_dir}")
    return np.stack([from_uint8(np.asarray(Image.open(p))) for p in files])


def save_gray(path, values: np.ndarray, size: int | None = None) -> None:
    """Save a 2-D map as an 8-bit grayscale PNG after min-max scaling to [0, 255]."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi - lo < 1e-12 else (arr - lo) / (hi - lo)
    img = np.rint(scaled * 255.0).astype(np.uint8)
    if size is not None and img.shape[0] != size:
        rep = size // img.shape[0]
        img = np.kron(img, np.ones((rep, rep), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path, format="PNG")
