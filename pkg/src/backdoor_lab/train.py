"""Mini-batch SGD training and clean-accuracy / attack-success evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor_ops as ops
from .data import Dataset, TriggerSpec, stamp
from .errors import ConfigError, EvaluationError, TrainingError
from .model import LAYERS, ModelParams, backward_params, forward, predict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    rng_seed: int = 42

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


def train(params_init: ModelParams, train_set: Dataset, cfg: TrainConfig) -> tuple[ModelParams, list[float]]:
    """SGD with momentum on softmax cross-entropy.

    Returns the trained copy of ``params_init`` and the mean batch loss of
    each epoch. The input parameters are never modified.
    """
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    params = params_init.copy()
    velocity = {name: np.zeros_like(getattr(params, name)) for name in LAYERS}
    rng = np.random.default_rng(cfg.rng_seed)
    lr = np.float32(cfg.learning_rate)
    mu = np.float32(cfg.momentum)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            trace = forward(params, train_set.images[idx])
            loss, d_logits = ops.softmax_xent(trace.logits, train_set.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss} at epoch {epoch}, batch {b}")
            grads = backward_params(params, trace, d_logits)
            for name in LAYERS:
                v = velocity[name]
                v *= mu
                v -= lr * grads[name]
                getattr(params, name)[...] += v
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.5f", epoch, history[-1])
    return params, history


def loss_csv(history: list[float]) -> str:
    lines = ["epoch,mean_loss"] + [f"{i},{v:.9g}" for i, v in enumerate(history)]
    return "\n".join(lines) + "\n"


def accuracy(params: ModelParams, test_set: Dataset) -> float:
    if len(test_set) == 0:
        raise EvaluationError("cannot compute accuracy on an empty set")
    return float(np.mean(predict(params, test_set.images) == test_set.labels))


def attack_success_rate(params: ModelParams, test_set: Dataset, trigger: TriggerSpec,
                        pre_stamp: Optional[TriggerSpec] = None) -> float:
    """Fraction of non-target test images classified as the target once triggered.

    ``pre_stamp`` is applied before ``trigger`` (the clean+ori+syn setting).
    """
    keep = test_set.labels != trigger.target_label
    if not keep.any():
        raise EvaluationError("every sample carries the target label; SR undefined")
    images = test_set.images[keep]
    if pre_stamp is not None:
        images = stamp(images, pre_stamp)
    images = stamp(images, trigger)
    return float(np.mean(predict(params, images) == trigger.target_label))


@dataclass
class EvalReport:
    clean_accuracy: float
    sr_clean_ori: Optional[float]
    sr_clean_syn: Optional[float]
    sr_clean_ori_syn: Optional[float]
    n_eval: int
    threshold_used: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def evaluate(params: ModelParams, test_set: Dataset, original: Optional[TriggerSpec] = None,
             synthetic: Optional[TriggerSpec] = None, threshold: Optional[float] = None) -> EvalReport:
    sr_ori = attack_success_rate(params, test_set, original) if original is not None else None
    sr_syn = sr_both = None
    if synthetic is not None:
        sr_syn = attack_success_rate(params, test_set, synthetic)
        if original is not None:
            sr_both = attack_success_rate(params, test_set, synthetic, pre_stamp=original)
    return EvalReport(
        clean_accuracy=accuracy(params, test_set),
        sr_clean_ori=sr_ori,
        sr_clean_syn=sr_syn,
        sr_clean_ori_syn=sr_both,
        n_eval=len(test_set),
        threshold_used=threshold,
    )
