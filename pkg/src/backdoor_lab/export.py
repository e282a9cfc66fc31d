"""Plain-file exports: binary PPM (P6) images and CSV matrices."""
from __future__ import annotations

import numpy as np


def _jet_table() -> np.ndarray:
    x = np.linspace(0.0, 1.0, 256)
    rgb = np.stack([
        np.clip(1.5 - np.abs(4 * x - 3), 0, 1),
        np.clip(1.5 - np.abs(4 * x - 2), 0, 1),
        np.clip(1.5 - np.abs(4 * x - 1), 0, 1),
    ], axis=1)
    return np.round(rgb * 255).astype(np.uint8)


JET = _jet_table()


def colorize(values: np.ndarray) -> np.ndarray:
    """Map an [H,W] array in [0,1] through the 256-entry jet table -> [H,W,3] uint8."""
    idx = np.round(np.clip(np.nan_to_num(values), 0, 1) * 255).astype(np.int64)
    return JET[idx]


def gray_rgb(image: np.ndarray) -> np.ndarray:
    """[C,H,W] or [H,W] image in [0,1] -> [H,W,3] uint8 (first three channels, or gray)."""
    if image.ndim == 3:
        image = image[:3].transpose(1, 2, 0) if image.shape[0] >= 3 else image[0]
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """0.5 * image + 0.5 * colored heatmap."""
    mixed = 0.5 * gray_rgb(image).astype(np.float64) + 0.5 * colorize(heat).astype(np.float64)
    return np.round(mixed).astype(np.uint8)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected [H,W,3] uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def matrix_csv(values: np.ndarray) -> str:
    return "".join(",".join(f"{v:.9g}" for v in row) + "\n" for row in np.atleast_2d(values))
