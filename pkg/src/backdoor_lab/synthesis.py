"""Trigger reverse engineering and MAD-based target-label identification.

For a candidate label the optimizer searches a mask ``m`` and pattern ``p``
minimizing

    mean_x CE(f((1 - m) * x + m * p), label) + lambda * ||m||_1

over clean calibration images. Both live in [0, 1] through
``(tanh(.) + 1) / 2`` of unconstrained variables, updated by fixed-step
gradient descent.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor_ops as ops
from .data import TriggerSpec, stamp
from .errors import ConfigError
from .model import ModelParams, backward_to_input, forward

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826


@dataclass
class SynthesisConfig:
    lambda_l1: float = 0.01
    iterations: int = 300
    step_size: float = 20.0
    batch: int = 32
    rng_seed: int = 0
    n_calibration_images: int = 128
    eval_every: int = 10

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.iterations > 0 and self.step_size == 0:
            raise ConfigError("step_size is zero but iterations > 0")
        if self.batch < 1 or self.eval_every < 1:
            raise ConfigError("batch and eval_every must be positive")


@dataclass
class SynthesisResult:
    trigger: TriggerSpec
    mask_l1: float
    final_loss: float
    label: int
    trace: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"label": self.label, "mask_l1": self.mask_l1, "final_loss": self.final_loss}


def _squash(u: np.ndarray) -> np.ndarray:
    return ((np.tanh(u) + 1) / 2).astype(np.float32)


def _objective(params, images, mask, pattern, label, lam) -> tuple[float, float]:
    trigger = TriggerSpec(mask, pattern, label, "synthetic")
    logits = forward(params, stamp(images, trigger)).logits
    ce, _ = ops.softmax_xent(logits, np.full(len(images), label))
    return ce + lam * float(mask.sum(dtype=np.float64)), ce


def synthesize(params: ModelParams, calib_images: np.ndarray, label: int,
               cfg: SynthesisConfig) -> SynthesisResult:
    """Reverse-engineer a trigger that sends ``calib_images`` to ``label``.

    The returned iterate is the best by full-calibration-set objective among
    the initialization, every ``eval_every``-th iterate and the last one.
    """
    if len(calib_images) == 0:
        raise ConfigError("synthesis needs at least one calibration image")
    if not 0 <= label < params.num_classes:
        raise ConfigError(f"label {label} outside [0, {params.num_classes})")
    c, h, w = params.input_shape
    rng = np.random.default_rng(cfg.rng_seed)
    u = np.zeros((h, w), dtype=np.float32)
    v = np.zeros((c, h, w), dtype=np.float32)
    lam = np.float32(cfg.lambda_l1)
    step = np.float32(cfg.step_size)

    best_obj, _ = _objective(params, calib_images, _squash(u), _squash(v), label, cfg.lambda_l1)
    best = (_squash(u), _squash(v))
    # (iteration, minibatch objective, calibration-set objective or None)
    trace = [(0, None, best_obj)]
    order = rng.permutation(len(calib_images))
    cursor = 0
    for it in range(1, cfg.iterations + 1):
        if cursor >= len(order):
            order, cursor = rng.permutation(len(calib_images)), 0
        idx = order[cursor:cursor + cfg.batch]
        cursor += cfg.batch
        x = calib_images[idx]
        tu, tv = np.tanh(u), np.tanh(v)
        mask, pattern = ((tu + 1) / 2).astype(np.float32), ((tv + 1) / 2).astype(np.float32)

        stamped = (1 - mask) * x + mask * pattern
        tr = forward(params, stamped)
        ce, d_logits = ops.softmax_xent(tr.logits, np.full(len(x), label))
        batch_obj = ce + cfg.lambda_l1 * float(mask.sum(dtype=np.float64))
        d_x = backward_to_input(params, tr, d_logits)
        d_mask = (d_x * (pattern - x)).sum(axis=(0, 1)) + lam
        d_pattern = (d_x * mask).sum(axis=0)
        u -= step * d_mask * (1 - tu * tu) / 2
        v -= step * d_pattern * (1 - tv * tv) / 2

        obj = None
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            m, p = _squash(u), _squash(v)
            obj, _ = _objective(params, calib_images, m, p, label, cfg.lambda_l1)
            if obj < best_obj:
                best_obj, best = obj, (m, p)
        trace.append((it, batch_obj, obj))

    mask, pattern = best
    trigger = TriggerSpec(mask, pattern, label, "synthetic")
    return SynthesisResult(trigger, float(mask.sum(dtype=np.float64)), float(best_obj), label, trace)


def trace_csv(result: SynthesisResult) -> str:
    """One row per iteration; the calibration column is filled at evaluation points."""
    def fmt(v):
        return "" if v is None else f"{v:.9g}"
    rows = "".join(f"{i},{fmt(b)},{fmt(c)}\n" for i, b, c in result.trace)
    return "iteration,batch_objective,calibration_objective\n" + rows


def anomaly_indices(values) -> np.ndarray:
    """|x - median| / (1.4826 * MAD). With MAD == 0 the index is 0 at the
    median and infinite elsewhere."""
    x = np.asarray(values, dtype=np.float64)
    med = np.median(x)
    dev = np.abs(x - med)
    mad = np.median(dev)
    if mad == 0:
        return np.where(dev == 0, 0.0, np.inf)
    return dev / (MAD_SCALE * mad)


@dataclass
class TargetIdReport:
    mask_l1: list
    anomaly_index: list
    identified_target: Optional[int]
    cutoff: float = 2.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def target_report(mask_l1, cutoff: float = 2.0) -> TargetIdReport:
    if len(mask_l1) < 3:
        raise ConfigError("target identification needs at least 3 classes")
    idx = anomaly_indices(mask_l1)
    low = int(np.argmin(mask_l1))
    target = low if idx[low] > cutoff else None
    return TargetIdReport([float(v) for v in mask_l1], [float(v) for v in idx], target, cutoff)


def identify_target(params: ModelParams, calib_images: np.ndarray, cfg: SynthesisConfig,
                    cutoff: float = 2.0) -> tuple[TargetIdReport, list[SynthesisResult]]:
    """Synthesize a trigger for every label and flag the low-l1 outlier."""
    if params.num_classes < 3:
        raise ConfigError("target identification needs at least 3 classes")
    results = []
    for label in range(params.num_classes):
        res = synthesize(params, calib_images, label, cfg)
        log.info("label %d: mask l1 %.3f objective %.4f", label, res.mask_l1, res.final_loss)
        results.append(res)
    return target_report([r.mask_l1 for r in results], cutoff), results


def mask_similarity(synthetic_mask: np.ndarray, original_mask: np.ndarray,
                    bin_threshold: float = 0.5) -> float:
    """IoU of the binarized synthetic mask with the binary original mask."""
    a = synthetic_mask > bin_threshold
    b = original_mask > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
