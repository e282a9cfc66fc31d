"""Per-neuron l1/l2/linf norms of final-conv activation maps, histograms,
max-activation separation between clean and triggered inputs, and the
tiled neuron activation grid."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import InputSetting, TriggerSpec, apply_setting
from .errors import EvaluationError
from .model import ModelParams, final_conv_maps, forward

HIST_BINS = 50


class Norm(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    LINF = "Linf"


ALL_NORMS = (Norm.L1, Norm.L2, Norm.LINF)


def neuron_norms(maps: np.ndarray, p) -> np.ndarray:
    """Norm of each channel's spatial map. ``maps`` is [K,h,w] or [N,K,h,w]."""
    p = Norm(p)
    a = np.abs(maps.astype(np.float64))
    if p is Norm.L1:
        out = a.sum(axis=(-2, -1))
    elif p is Norm.L2:
        out = np.sqrt((a * a).sum(axis=(-2, -1)))
    else:
        out = a.max(axis=(-2, -1), initial=0.0)
    return out


@dataclass
class ActivationStats:
    setting: InputSetting
    p: Norm
    norms: np.ndarray  # [n_images, K]
    max_value: float
    bin_edges: np.ndarray
    counts: np.ndarray


def collect_stats(
    params: ModelParams,
    images: np.ndarray,
    settings: Sequence[InputSetting],
    original: Optional[TriggerSpec] = None,
    synthetic: Optional[TriggerSpec] = None,
    n_images: int = 256,
    ps: Iterable = ALL_NORMS,
) -> list[ActivationStats]:
    """Norm statistics for the first ``n_images`` of ``images`` under each setting.

    Histograms for a given norm share bin edges across settings.
    """
    if n_images > len(images):
        raise EvaluationError(f"n_images={n_images} exceeds the {len(images)} available images")
    if n_images < 1:
        raise EvaluationError("n_images must be positive")
    sample = images[:n_images]
    maps = {
        InputSetting(s): final_conv_maps(params, apply_setting(sample, s, original, synthetic))
        for s in settings
    }
    out = []
    for p in map(Norm, ps):
        norms = {s: neuron_norms(m, p) for s, m in maps.items()}
        pooled = np.concatenate([n.ravel() for n in norms.values()])
        edges = np.histogram_bin_edges(pooled, bins=HIST_BINS)
        for s, n in norms.items():
            counts, _ = np.histogram(n, bins=edges)
            out.append(ActivationStats(s, p, n, float(n.max()), edges, counts))
    return out


def histogram_csv(stats: Sequence[ActivationStats]) -> str:
    lines = ["p,setting,bin_left,bin_right,count"]
    for st in stats:
        for left, right, c in zip(st.bin_edges[:-1], st.bin_edges[1:], st.counts):
            lines.append(f"{st.p.value},{st.setting.value},{left:.9g},{right:.9g},{int(c)}")
    return "\n".join(lines) + "\n"


@dataclass
class SeparationReport:
    """Per norm: clean max, triggered max per setting, and their ratio.

    ``winners[setting]`` lists every norm sharing the largest ratio, so ties
    are explicit.
    """
    max_clean: dict
    max_triggered: dict
    ratio: dict
    winners: dict
    channels: int

    def to_json(self) -> str:
        return json.dumps({
            "channels": self.channels,
            "max_clean": self.max_clean,
            "max_triggered": self.max_triggered,
            "ratio": self.ratio,
            "winners": self.winners,
        }, indent=1, sort_keys=True) + "\n"


def separation(stats: Sequence[ActivationStats]) -> SeparationReport:
    by_key = {(st.p, st.setting): st for st in stats}
    norms = sorted({st.p for st in stats}, key=ALL_NORMS.index)
    triggered = sorted({st.setting for st in stats} - {InputSetting.CLEAN},
                       key=list(InputSetting).index)
    max_clean, max_trig, ratio = {}, {}, {}
    for p in norms:
        clean = by_key.get((p, InputSetting.CLEAN))
        if clean is None:
            raise EvaluationError(f"no clean statistics for {p.value}")
        max_clean[p.value] = clean.max_value
        max_trig[p.value] = {s.value: by_key[(p, s)].max_value for s in triggered}
        ratio[p.value] = {
            s.value: (by_key[(p, s)].max_value / clean.max_value if clean.max_value > 0 else None)
            for s in triggered
        }
    winners = {}
    for s in triggered:
        vals = {p.value: ratio[p.value][s.value] for p in norms if ratio[p.value][s.value] is not None}
        best = max(vals.values(), default=None)
        winners[s.value] = [p for p, v in vals.items() if v == best]
    channels = int(stats[0].norms.shape[1]) if stats else 0
    return SeparationReport(max_clean, max_trig, ratio, winners, channels)


def activation_grid(params: ModelParams, image: np.ndarray, rows: int = 4,
                    separator: float = 1.0) -> np.ndarray:
    """Tile the final-conv maps of one image into a ``rows`` x (K/rows) grid.

    Each map is scaled to [0,1] by its own max (all-zero maps stay zero);
    tiles are separated by 1-pixel lines of value ``separator``.
    """
    maps = forward(params, image).final_conv_maps.astype(np.float64)
    k, h, w = maps.shape
    cols = -(-k // rows)
    grid = np.full((rows * h + rows - 1, cols * w + cols - 1), separator, dtype=np.float64)
    for i in range(k):
        m = maps[i]
        peak = m.max()
        if peak > 0:
            m = m / peak
        r, c = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = m
    return grid
