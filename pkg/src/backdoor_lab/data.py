"""Datasets, IDX I/O, the synthetic glyph dataset, triggers and poisoning."""
from __future__ import annotations

import base64
import enum
import itertools
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

IDX_IMAGES = 0x00000803
IDX_IMAGES_CHW = 0x00000804
IDX_LABELS = 0x00000801


class InputSetting(str, enum.Enum):
    CLEAN = "clean"
    CLEAN_ORI = "clean_ori"
    CLEAN_SYN = "clean_syn"
    CLEAN_ORI_SYN = "clean_ori_syn"


TRIGGERED_SETTINGS = (InputSetting.CLEAN_ORI, InputSetting.CLEAN_SYN, InputSetting.CLEAN_ORI_SYN)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1]; the single conversion used everywhere."""
    return pixels.astype(np.float32) / np.float32(255)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0, 1) * 255).astype(np.uint8)


# -- synthetic glyphs --------------------------------------------------------

def _strokes(h: int, w: int, thickness: Optional[int] = None) -> list[np.ndarray]:
    """Eight primitive strokes laid out in the upper-left 80% of the canvas.

    The bottom-right corner stays empty so the default trigger never
    overlaps a glyph.
    """
    lo_r, hi_r = round(0.14 * h), round(0.72 * h)
    lo_c, hi_c = round(0.14 * w), round(0.72 * w)
    mid_r, mid_c = (lo_r + hi_r) // 2, (lo_c + hi_c) // 2
    t = thickness or max(1, round(h / 14))
    strokes = []

    def canvas():
        return np.zeros((h, w), dtype=np.float32)

    for r in (lo_r, mid_r, hi_r - t):
        s = canvas()
        s[r:r + t, lo_c:hi_c] = 1
        strokes.append(s)
    for c in (lo_c, mid_c, hi_c - t):
        s = canvas()
        s[lo_r:hi_r, c:c + t] = 1
        strokes.append(s)
    n = min(hi_r - lo_r, hi_c - lo_c)
    diag, anti = canvas(), canvas()
    for i in range(n):
        diag[lo_r + i, lo_c + i:lo_c + i + t] = 1
        anti[lo_r + i, max(lo_c, hi_c - i - t):hi_c - i] = 1
    strokes += [diag, anti]
    return strokes


def glyph(label: int, size: tuple[int, int], thickness: Optional[int] = None) -> np.ndarray:
    """Binary glyph for class ``label``: a fixed combination of strokes."""
    strokes = _strokes(*size, thickness)
    combos = list(itertools.combinations(range(len(strokes)), 2))
    combos += list(itertools.combinations(range(len(strokes)), 3))
    # fixed interleave so consecutive classes do not all share stroke 0
    order = np.random.default_rng(20190214).permutation(len(combos))
    if label >= len(combos):
        raise ConfigError(f"at most {len(combos)} synthetic classes are supported")
    out = np.zeros(size, dtype=np.float32)
    for s in combos[order[label]]:
        out = np.maximum(out, strokes[s])
    return out


def gen_synthetic(
    num_classes: int,
    per_class: int,
    size: tuple[int, int] = (28, 28),
    seed: int = 0,
    channels: int = 1,
    noise: float = 0.1,
    split: str = "train",
    ink: float = 1.0,
    thickness: Optional[int] = None,
) -> Dataset:
    """Seeded glyph dataset.

    Each sample is its class glyph drawn at intensity ``ink`` on a black
    background plus uniform noise in [-noise, noise]. Pixels are clamped and quantized to 8-bit levels so
    the set survives an IDX round trip exactly.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    n = len(labels)
    if n == 0:
        return Dataset(np.zeros((0, channels, h, w), np.float32), labels, num_classes, "synthetic", split)
    glyphs = np.stack([glyph(k, size, thickness) for k in range(num_classes)])
    base = (ink * glyphs[labels].astype(np.float64))[:, None].repeat(channels, axis=1)
    noisy = base + rng.uniform(-noise, noise, size=base.shape)
    return Dataset(to_unit(to_bytes(noisy)), labels, num_classes, name="synthetic", split=split)


# -- IDX ---------------------------------------------------------------------

def _idx_header(data: bytes, expect: tuple[int, ...], what: str) -> tuple[int, list[int], int]:
    if len(data) < 4:
        raise FormatError(f"{what}: truncated magic", len(data))
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in expect:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise FormatError(f"{what}: truncated header", len(data))
    dims = list(struct.unpack(f">{ndim}I", data[4:end]))
    need = end + int(np.prod(dims))
    if len(data) < need:
        raise FormatError(f"{what}: truncated payload, expected {need} bytes", len(data))
    if len(data) > need:
        raise FormatError(f"{what}: {len(data) - need} trailing bytes", need)
    return magic, dims, end


def load_idx(images_path, labels_path, num_classes: Optional[int] = None,
             name: str = "idx", split: str = "test") -> Dataset:
    img_bytes = Path(images_path).read_bytes()
    lab_bytes = Path(labels_path).read_bytes()
    magic, dims, off = _idx_header(img_bytes, (IDX_IMAGES, IDX_IMAGES_CHW), "images")
    _, ldims, loff = _idx_header(lab_bytes, (IDX_LABELS,), "labels")
    if dims[0] != ldims[0]:
        raise FormatError(f"count mismatch: {dims[0]} images vs {ldims[0]} labels", 4)
    shape = (dims[0], 1, dims[1], dims[2]) if magic == IDX_IMAGES else tuple(dims)
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, offset=off).reshape(shape)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, offset=loff).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(to_unit(pixels), labels, num_classes, name=name, split=split)


def idx_bytes(dataset: Dataset) -> tuple[bytes, bytes]:
    n, c, h, w = dataset.images.shape
    if c == 1:
        head = struct.pack(">4I", IDX_IMAGES, n, h, w)
    else:
        head = struct.pack(">5I", IDX_IMAGES_CHW, n, c, h, w)
    images = head + to_bytes(dataset.images).tobytes()
    labels = struct.pack(">2I", IDX_LABELS, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    images, labels = idx_bytes(dataset)
    Path(images_path).write_bytes(images)
    Path(labels_path).write_bytes(labels)


# -- triggers ----------------------------------------------------------------

@dataclass
class TriggerSpec:
    mask: np.ndarray  # [H, W] in [0, 1], shared by all channels
    pattern: np.ndarray  # [C, H, W] in [0, 1]
    target_label: int
    provenance: str = "original"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.mask.ndim != 2 or self.pattern.ndim != 3 or self.pattern.shape[1:] != self.mask.shape:
            raise DimensionError(f"mask {self.mask.shape} and pattern {self.pattern.shape} disagree")
        if self.mask.min(initial=0) < 0 or self.mask.max(initial=0) > 1:
            raise ConfigError("mask values must lie in [0, 1]")
        if self.provenance not in ("original", "synthetic"):
            raise ConfigError(f"unknown provenance {self.provenance!r}")

    def to_json(self) -> dict:
        return {
            "target_label": int(self.target_label),
            "provenance": self.provenance,
            "mask_shape": list(self.mask.shape),
            "pattern_shape": list(self.pattern.shape),
            "mask": base64.b64encode(self.mask.astype("<f4").tobytes()).decode("ascii"),
            "pattern": base64.b64encode(self.pattern.astype("<f4").tobytes()).decode("ascii"),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TriggerSpec":
        try:
            mask = np.frombuffer(base64.b64decode(obj["mask"]), dtype="<f4").reshape(obj["mask_shape"])
            pattern = np.frombuffer(base64.b64decode(obj["pattern"]), dtype="<f4").reshape(obj["pattern_shape"])
            return cls(mask.astype(np.float32), pattern.astype(np.float32),
                       int(obj["target_label"]), obj.get("provenance", "original"))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"invalid trigger JSON: {exc}") from exc


def save_trigger(trigger: TriggerSpec, path) -> None:
    Path(path).write_text(json.dumps(trigger.to_json(), indent=1, sort_keys=True) + "\n")


def load_trigger(path) -> TriggerSpec:
    return TriggerSpec.from_json(json.loads(Path(path).read_text()))


def make_original_trigger(size=(28, 28), square: int = 3, margin: int = 1,
                          target: int = 8, channels: int = 1) -> TriggerSpec:
    h, w = size
    mask = np.zeros((h, w), dtype=np.float32)
    if square > 0:
        if square + margin > min(h, w):
            raise ConfigError(f"square {square} with margin {margin} does not fit {h}x{w}")
        mask[h - margin - square:h - margin, w - margin - square:w - margin] = 1
    pattern = np.broadcast_to(mask, (channels, h, w)).copy()
    return TriggerSpec(mask, pattern, target, "original")


def stamp(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """``(1 - m) * x + m * pattern`` for one image [C,H,W] or a batch [N,C,H,W]."""
    if image.shape[-3:] != trigger.pattern.shape:
        raise DimensionError(
            f"image shape {image.shape} does not match trigger pattern {trigger.pattern.shape}"
        )
    m = trigger.mask
    return ((1 - m) * image + m * trigger.pattern).astype(np.float32)


def apply_setting(images: np.ndarray, setting: InputSetting,
                  original: Optional[TriggerSpec] = None,
                  synthetic: Optional[TriggerSpec] = None) -> np.ndarray:
    """Stamp ``images`` for one of the four input settings (original first, then synthetic)."""
    setting = InputSetting(setting)
    out = images
    if setting in (InputSetting.CLEAN_ORI, InputSetting.CLEAN_ORI_SYN):
        if original is None:
            raise ConfigError(f"setting {setting.value} needs the original trigger")
        out = stamp(out, original)
    if setting in (InputSetting.CLEAN_SYN, InputSetting.CLEAN_ORI_SYN):
        if synthetic is None:
            raise ConfigError(f"setting {setting.value} needs a synthetic trigger")
        out = stamp(out, synthetic)
    return out


@dataclass
class PoisonConfig:
    trigger: TriggerSpec
    poison_rate: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.poison_rate < 1:
            raise ConfigError(f"poison_rate must lie in (0, 1), got {self.poison_rate}")


def poison(train: Dataset, cfg: PoisonConfig) -> tuple[Dataset, list[int]]:
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    n = int(np.floor(cfg.poison_rate * len(train) + 1e-9))
    if n < 1:
        raise ConfigError(
            f"poison_rate {cfg.poison_rate} on {len(train)} samples poisons no sample"
        )
    rng = np.random.default_rng(cfg.rng_seed)
    idx = np.sort(rng.choice(len(train), size=n, replace=False))
    images = train.images.copy()
    labels = train.labels.copy()
    images[idx] = stamp(images[idx], cfg.trigger)
    labels[idx] = cfg.trigger.target_label
    out = replace(train, images=images, labels=labels, name=f"{train.name}+poison")
    return out, [int(i) for i in idx]
