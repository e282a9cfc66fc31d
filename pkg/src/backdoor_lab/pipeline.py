"""Pipeline steps shared by the CLI subcommands.

Each step takes a :class:`RunConfig` and an :class:`ArtifactWriter` and
writes its files relative to the run directory.
"""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import activations as act
from . import export
from .artifacts import ArtifactWriter
from .config import RunConfig
from .data import (
    Dataset, InputSetting, TriggerSpec, apply_setting, gen_synthetic, idx_bytes,
    load_idx, poison,
)
from .errors import ConfigError
from .gradcam import grad_cam, localization_score
from .model import ModelParams, init_params, model_to_bytes
from .prune import calibrate, default_grid, prune, select_threshold, sweep
from .synthesis import identify_target, synthesize, trace_csv
from .train import evaluate, loss_csv, train

log = logging.getLogger(__name__)

DATA_FILES = {
    "train_images": "data/train-images.idx",
    "train_labels": "data/train-labels.idx",
    "test_images": "data/test-images.idx",
    "test_labels": "data/test-labels.idx",
}


def gen_data(cfg: RunConfig, w: ArtifactWriter) -> tuple[Dataset, Dataset]:
    opts = dict(size=(cfg.image_size, cfg.image_size), channels=cfg.channels, noise=cfg.noise,
                ink=cfg.glyph_ink, thickness=cfg.glyph_thickness or None)
    train_set = gen_synthetic(cfg.num_classes, cfg.train_per_class, seed=cfg.seed_for("data.train"),
                              split="train", **opts)
    test_set = gen_synthetic(cfg.num_classes, cfg.test_per_class, seed=cfg.seed_for("data.test"),
                             split="test", **opts)
    for split, ds in (("train", train_set), ("test", test_set)):
        images, labels = idx_bytes(ds)
        w.write(DATA_FILES[f"{split}_images"], images)
        w.write(DATA_FILES[f"{split}_labels"], labels)
    return train_set, test_set


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    root = Path(cfg.out_dir)
    paths = {k: getattr(cfg, k) or str(root / rel) for k, rel in DATA_FILES.items()}
    missing = [p for p in paths.values() if not Path(p).exists()]
    if missing:
        raise ConfigError(f"dataset files missing ({', '.join(missing)}); run gen-data first")
    train_set = load_idx(paths["train_images"], paths["train_labels"], cfg.num_classes, "train", "train")
    test_set = load_idx(paths["test_images"], paths["test_labels"], cfg.num_classes, "test", "test")
    return train_set, test_set


def seeded_sample(n_total: int, n: int, seed: int) -> np.ndarray:
    if n > n_total:
        raise ConfigError(f"requested {n} images from a set of {n_total}")
    return np.sort(np.random.default_rng(seed).choice(n_total, size=n, replace=False))


def train_model(cfg: RunConfig, w: ArtifactWriter, train_set: Dataset, name: str,
                trigger: Optional[TriggerSpec] = None) -> ModelParams:
    """Train from the shared seeded init; poison the set first if ``trigger`` is given."""
    data = train_set
    if trigger is not None:
        data, indices = poison(train_set, cfg.poison_config(trigger))
        w.write_json(f"models/{name}_poisoned_indices.json", indices)
    init = init_params(train_set.num_classes, train_set.image_shape, cfg.seed_for("init"))
    params, history = train(init, data, cfg.train_config())
    w.write(f"models/{name}.bdf", model_to_bytes(params))
    w.write(f"models/{name}_loss.csv", loss_csv(history))
    return params


def calibration_images(cfg: RunConfig, test_set: Dataset, n: int, subsystem: str) -> np.ndarray:
    return test_set.images[seeded_sample(len(test_set), n, cfg.seed_for(subsystem))]


def synthesize_labels(cfg: RunConfig, w: ArtifactWriter, params: ModelParams, test_set: Dataset,
                      prefix: str, labels: Optional[Sequence[int]] = None):
    """Synthesize triggers; with ``labels=None`` run all labels and write a target report."""
    calib = calibration_images(cfg, test_set, cfg.syn_calibration, "synthesis.calibration")
    scfg = cfg.synthesis_config()
    report = None
    if labels is None:
        report, results = identify_target(params, calib, scfg, cfg.anomaly_cutoff)
        w.write(f"{prefix}/target_report.json", report.to_json())
    else:
        results = [synthesize(params, calib, int(label), scfg) for label in labels]
    for r in results:
        w.write_json(f"{prefix}/label_{r.label:02d}.json", r.trigger.to_json())
        w.write(f"{prefix}/label_{r.label:02d}_trace.csv", trace_csv(r))
    w.write_json(f"{prefix}/results.json", [r.summary() for r in results])
    return report, results


def chosen_synthetic(report, results) -> TriggerSpec:
    """Trigger of the identified target, else of the smallest-mask label."""
    if report is not None and report.identified_target is not None:
        label = report.identified_target
    else:
        label = min(results, key=lambda r: r.mask_l1).label
    return next(r for r in results if r.label == label).trigger


def activation_analysis(cfg: RunConfig, w: ArtifactWriter, params: ModelParams, test_set: Dataset,
                        original: Optional[TriggerSpec], synthetic: Optional[TriggerSpec],
                        settings: Sequence[InputSetting] = tuple(InputSetting),
                        norms=act.ALL_NORMS, n: Optional[int] = None, prefix: str = "activations"):
    n = cfg.n_activation_images if n is None else n
    images = calibration_images(cfg, test_set, n, "activations.sample")
    stats = act.collect_stats(params, images, settings, original, synthetic, n, norms)
    w.write(f"{prefix}/histograms.csv", act.histogram_csv(stats))
    report = act.separation(stats)
    w.write(f"{prefix}/separation.json", report.to_json())
    for s in settings:
        img = apply_setting(images[0], s, original, synthetic)
        grid = act.activation_grid(params, img)
        w.write(f"{prefix}/grid_{InputSetting(s).value}.ppm", export.ppm_bytes(export.colorize(grid)))
    return stats, report


def write_heatmap(w: ArtifactWriter, rel_stem: str, image: np.ndarray, values: np.ndarray):
    w.write(f"{rel_stem}.ppm", export.ppm_bytes(export.overlay(image, values)))
    w.write(f"{rel_stem}.csv", export.matrix_csv(values))


def gradcam_analysis(cfg: RunConfig, w: ArtifactWriter, models: dict, test_set: Dataset,
                     original: TriggerSpec, synthetic: TriggerSpec) -> dict:
    """Heatmap panels for one image plus mean localization scores over
    ``gradcam_images`` non-target test images, per model and setting."""
    target = original.target_label
    pool = np.flatnonzero(test_set.labels != target)[:cfg.gradcam_images]
    images, labels = test_set.images[pool], test_set.labels[pool]
    summary = {"target_label": target, "n_images": int(len(pool)), "dilation": cfg.dilation, "scores": {}}
    for name, params in models.items():
        per_setting = {}
        for s in InputSetting:
            stamped = apply_setting(images, s, original, synthetic)
            target_scores = [localization_score(grad_cam(params, x, target, s), original.mask, cfg.dilation)
                             for x in stamped]
            true_scores = [localization_score(grad_cam(params, x, int(y), s), original.mask, cfg.dilation)
                           for x, y in zip(stamped, labels)]
            per_setting[s.value] = {"target": float(np.mean(target_scores)), "true": float(np.mean(true_scores))}
            for label_name, label in (("true", int(labels[0])), ("target", target)):
                heat = grad_cam(params, stamped[0], label, s)
                write_heatmap(w, f"gradcam/{name}_{s.value}_{label_name}", stamped[0], heat.values)
        summary["scores"][name] = per_setting
    w.write_json("gradcam/localization.json", summary)
    return summary


def run_sweep(cfg: RunConfig, w: ArtifactWriter, params: ModelParams, test_set: Dataset,
              original: Optional[TriggerSpec], synthetic: TriggerSpec,
              grid: Optional[Sequence[float]] = None, prefix: str = "sweep"):
    calib = calibration_images(cfg, test_set, cfg.calibration_images, "prune.calibration")
    cal = calibrate(params, calib, synthetic)
    w.write_json(f"{prefix}/calibration.json", cal.to_dict())
    if grid is None:
        grid = default_grid(cal, cfg.grid_steps, cfg.grid_low_fraction)
    report = sweep(params, cal, test_set, original, synthetic, grid, cfg.use_clean_maxima)
    report.selected_threshold = select_threshold(report, cfg.max_acc_drop)
    w.write(f"{prefix}/sweep.csv", report.to_csv())
    w.write(f"{prefix}/sweep.json", report.to_json())
    if report.selected_threshold is not None:
        pruned = prune(params, report.selected_threshold, cal, cfg.use_clean_maxima)
        w.write("models/pruned.bdf", model_to_bytes(pruned))
        ev = evaluate(pruned, test_set, original, synthetic, report.selected_threshold)
        w.write("eval/pruned.json", ev.to_json())
    return cal, report


def run_pipeline(cfg: RunConfig) -> dict:
    """gen-data -> train vanilla -> train poisoned -> synthesize -> activations
    -> gradcam -> sweep, writing a fresh manifest for the run directory.

    The returned summary carries wall-clock seconds per stage; timings are
    never written to the run directory so manifests stay reproducible.
    """
    seconds = {}

    @contextmanager
    def stage(name):
        log.info(name)
        start = time.perf_counter()
        yield
        seconds[name] = round(time.perf_counter() - start, 2)

    with ArtifactWriter(cfg.out_dir, fresh_manifest=True) as w:
        w.write("config.txt", cfg.to_text())
        with stage("gen_data"):
            train_set, test_set = gen_data(cfg, w)
        original = cfg.original_trigger()
        w.write_json("triggers/original.json", original.to_json())
        with stage("train"):
            vanilla = train_model(cfg, w, train_set, "vanilla")
            backdoor = train_model(cfg, w, train_set, "backdoor", original)

        with stage("synthesis"):
            report, results = synthesize_labels(cfg, w, backdoor, test_set, "synthesis/backdoor")
        with stage("synthesis_vanilla"):
            vreport, _ = synthesize_labels(cfg, w, vanilla, test_set, "synthesis/vanilla")
        synthetic = chosen_synthetic(report, results)
        w.write_json("triggers/synthetic.json", synthetic.to_json())

        for name, params in (("vanilla", vanilla), ("backdoor", backdoor)):
            w.write(f"eval/{name}.json", evaluate(params, test_set, original, synthetic).to_json())

        with stage("activations"):
            _, separation = activation_analysis(cfg, w, backdoor, test_set, original, synthetic)
        with stage("gradcam"):
            loc = gradcam_analysis(cfg, w, {"vanilla": vanilla, "backdoor": backdoor}, test_set,
                                   original, synthetic)
        with stage("sweep"):
            _, sweep_report = run_sweep(cfg, w, backdoor, test_set, original, synthetic)
    return {
        "seconds": seconds,
        "identified_target": report.identified_target,
        "vanilla_identified_target": vreport.identified_target,
        "separation_winners": separation.winners,
        "localization": loc["scores"],
        "selected_threshold": sweep_report.selected_threshold,
        "artifacts": len(w.written),
    }
