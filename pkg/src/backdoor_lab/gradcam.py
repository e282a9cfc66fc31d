"""Grad-CAM over the final convolutional layer and a trigger-localization score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InputSetting
from .errors import DomainError
from .model import ModelParams, backward_to_final_conv, forward


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    label_used: int
    input_setting: InputSetting = InputSetting.CLEAN


def cam_from_maps(maps: np.ndarray, grads: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """ReLU(sum_k mean(grad_k) * A_k), nearest-upsampled to ``out_hw`` and
    divided by its max (all-zero maps stay zero)."""
    alpha = grads.mean(axis=(1, 2), dtype=np.float64)
    raw = np.maximum(np.tensordot(alpha, maps.astype(np.float64), axes=1), 0)
    h, w = out_hw
    rows = np.arange(h) * raw.shape[0] // h
    cols = np.arange(w) * raw.shape[1] // w
    up = raw[rows[:, None], cols[None, :]]
    peak = up.max()
    return up / peak if peak > 0 else up


def grad_cam(params: ModelParams, image: np.ndarray, label: int,
             setting: InputSetting = InputSetting.CLEAN) -> Heatmap:
    if not 0 <= label < params.num_classes:
        raise DomainError(f"label {label} outside [0, {params.num_classes})")
    trace = forward(params, image)
    onehot = np.zeros(params.num_classes, dtype=trace.logits.dtype)
    onehot[label] = 1
    grads = backward_to_final_conv(params, trace, onehot)
    values = cam_from_maps(trace.final_conv_maps, grads, params.input_shape[1:])
    return Heatmap(values, label, InputSetting(setting))


def localization_score(heatmap: Heatmap | np.ndarray, trigger_mask: np.ndarray, dilation: int = 1) -> float:
    """Share of heatmap mass inside the trigger mask's bounding box grown by ``dilation`` pixels."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    rows, cols = np.nonzero(trigger_mask > 0)
    if rows.size == 0:
        return 0.0
    h, w = values.shape
    box = np.zeros((h, w), dtype=bool)
    box[max(rows.min() - dilation, 0):rows.max() + dilation + 1,
        max(cols.min() - dilation, 0):cols.max() + dilation + 1] = True
    # inside / (inside + outside) so maps wholly on one side score exactly 1 or 0
    inside = float(values[box].sum(dtype=np.float64))
    outside = float(values[~box].sum(dtype=np.float64))
    if inside + outside <= 0:
        return 0.0
    return inside / (inside + outside)
