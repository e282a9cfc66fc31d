"""Linf-threshold pruning of final-conv neurons and the threshold sweep."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .activations import Norm, neuron_norms
from .data import Dataset, TriggerSpec, stamp
from .errors import ConfigError
from .model import ModelParams, final_conv_maps
from .train import EvalReport, evaluate


@dataclass
class CalibrationResult:
    per_neuron_clean_max: np.ndarray
    global_clean_max: float
    per_neuron_triggered_max: np.ndarray

    def to_dict(self) -> dict:
        return {
            "per_neuron_clean_max": [float(v) for v in self.per_neuron_clean_max],
            "global_clean_max": self.global_clean_max,
            "per_neuron_triggered_max": [float(v) for v in self.per_neuron_triggered_max],
        }


def calibrate(params: ModelParams, clean_images: np.ndarray,
              synthetic_trigger: TriggerSpec) -> CalibrationResult:
    """Per-neuron Linf maxima over clean images and over the same images
    stamped with the synthetic trigger."""
    clean = neuron_norms(final_conv_maps(params, clean_images), Norm.LINF).max(axis=0)
    trig = neuron_norms(final_conv_maps(params, stamp(clean_images, synthetic_trigger)), Norm.LINF).max(axis=0)
    return CalibrationResult(clean, float(clean.max()), trig)


def prune_set(threshold: float, calibration: CalibrationResult, use_clean_maxima: bool = False) -> np.ndarray:
    maxima = calibration.per_neuron_clean_max if use_clean_maxima else calibration.per_neuron_triggered_max
    return maxima > threshold


def prune(params: ModelParams, threshold: float, calibration: CalibrationResult,
          use_clean_maxima: bool = False) -> ModelParams:
    """Copy of ``params`` with every neuron whose calibrated Linf max exceeds
    ``threshold`` masked out."""
    if not threshold > 0:
        raise ConfigError(f"threshold must be positive, got {threshold}")
    cut = prune_set(threshold, calibration, use_clean_maxima)
    return params.with_mask(params.prune_mask & ~cut)


def default_grid(calibration: CalibrationResult, steps: int = 20, low_fraction: float = 0.1) -> list[float]:
    top = calibration.global_clean_max
    if top <= 0:
        raise ConfigError("clean activations are all zero; no threshold grid exists")
    return [float(t) for t in np.linspace(top, top * low_fraction, steps)]


@dataclass
class SweepReport:
    thresholds: list
    rows: list  # EvalReport per threshold
    pruned_count: list
    baseline: EvalReport
    selected_threshold: Optional[float] = None
    channels: int = 32
    pruned_channels: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "thresholds": self.thresholds,
            "pruned_count": self.pruned_count,
            "pruned_channels": self.pruned_channels,
            "rows": [asdict(r) for r in self.rows],
            "baseline": asdict(self.baseline),
            "selected_threshold": self.selected_threshold,
            "channels": self.channels,
        }, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.9g}"
        lines = ["threshold,pruned_count,acc,sr_ori,sr_syn,sr_ori_syn"]
        for t, n, r in zip(self.thresholds, self.pruned_count, self.rows):
            lines.append(",".join([fmt(t), str(n), fmt(r.clean_accuracy), fmt(r.sr_clean_ori),
                                   fmt(r.sr_clean_syn), fmt(r.sr_clean_ori_syn)]))
        return "\n".join(lines) + "\n"


def sweep(params: ModelParams, calibration: CalibrationResult, test_set: Dataset,
          original: Optional[TriggerSpec], synthetic: Optional[TriggerSpec],
          thresholds: Optional[Sequence[float]] = None,
          use_clean_maxima: bool = False) -> SweepReport:
    """Evaluate the model pruned at each threshold, always starting from ``params``."""
    grid = default_grid(calibration) if thresholds is None else [float(t) for t in thresholds]
    if not grid:
        raise ConfigError("threshold grid is empty")
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("thresholds must be strictly decreasing")
    baseline = evaluate(params, test_set, original, synthetic)
    rows, counts, channels = [], [], []
    for t in grid:
        pruned = prune(params, t, calibration, use_clean_maxima)
        cut = np.flatnonzero(~pruned.prune_mask)
        rows.append(evaluate(pruned, test_set, original, synthetic, threshold=t))
        counts.append(int(cut.size))
        channels.append([int(c) for c in cut])
    return SweepReport(grid, rows, counts, baseline, None,
                       channels=int(params.prune_mask.size), pruned_channels=channels)


def select_threshold(report: SweepReport, max_acc_drop: float = 5.0) -> Optional[float]:
    """Threshold with the lowest clean+ori SR among those losing at most
    ``max_acc_drop`` accuracy points; ties go to the larger threshold."""
    base = report.baseline.clean_accuracy
    best = None
    for t, row in zip(report.thresholds, report.rows):
        if (base - row.clean_accuracy) * 100 > max_acc_drop + 1e-9:
            continue
        sr = row.sr_clean_ori if row.sr_clean_ori is not None else row.sr_clean_syn
        if sr is None:
            continue
        if best is None or sr < best[1] or (sr == best[1] and t > best[0]):
            best = (t, sr)
    return None if best is None else best[0]
