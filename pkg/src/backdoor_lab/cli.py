"""Command-line front end.

Every subcommand accepts ``--config FILE`` (flat key=value) and ``--out-dir``;
explicit flags win over the file, the file wins over built-in defaults. The
output directory defaults to ``$BDF_OUT_DIR`` or ``runs/default``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import activations as act
from . import pipeline as pl
from .artifacts import ArtifactWriter
from .config import RunConfig, build_config
from .data import InputSetting, TriggerSpec, apply_setting, load_trigger
from .errors import BackdoorLabError, ConfigError
from .gradcam import grad_cam
from .model import load_model
from .train import evaluate

log = logging.getLogger("backdoor_lab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out-dir", dest="out_dir", help="run directory (default $BDF_OUT_DIR)")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("-v", "--verbose", action="store_true")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backdoor-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train/test sets as IDX files")
    _common(p)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)

    p = sub.add_parser("train", help="train a vanilla or backdoored model")
    _common(p)
    p.add_argument("--poison", action="store_true", help="poison the training set first")
    p.add_argument("--trigger", help="trigger JSON to plant (default: square trigger from config)")
    p.add_argument("--target", type=int)
    p.add_argument("--rate", dest="poison_rate", type=float)
    p.add_argument("--square", dest="trigger_square", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--name", help="model name (default vanilla / backdoor)")

    p = sub.add_parser("eval", help="clean accuracy and attack success rates")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--trigger", help="original trigger JSON")
    p.add_argument("--synthetic-trigger", dest="synthetic_trigger")
    p.add_argument("--output", default="eval/report.json", help="path relative to the run directory")

    p = sub.add_parser("gradcam", help="Grad-CAM heatmap for one test image")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image-index", dest="image_index", type=int, default=0)
    p.add_argument("--setting", choices=[s.value for s in InputSetting], default="clean")
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--trigger", help="original trigger JSON")
    p.add_argument("--synthetic-trigger", dest="synthetic_trigger")

    p = sub.add_parser("activations", help="final-conv norm histograms, separation report, grids")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--settings", default=",".join(s.value for s in InputSetting))
    p.add_argument("--norms", default="L1,L2,Linf")
    p.add_argument("--n", type=int)
    p.add_argument("--trigger", help="original trigger JSON")
    p.add_argument("--synthetic-trigger", dest="synthetic_trigger")

    p = sub.add_parser("synthesize", help="reverse-engineer triggers")
    _common(p)
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--label", type=int)
    g.add_argument("--all-labels", dest="all_labels", action="store_true")
    p.add_argument("--lambda", dest="syn_lambda", type=float)
    p.add_argument("--iterations", dest="syn_iterations", type=int)
    p.add_argument("--step", dest="syn_step", type=float)
    p.add_argument("--anomaly-cutoff", dest="anomaly_cutoff", type=float)
    p.add_argument("--prefix", default="synthesis")

    p = sub.add_parser("sweep", help="Linf pruning threshold sweep")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--synthetic-trigger", dest="synthetic_trigger", required=True)
    p.add_argument("--original-trigger", dest="original_trigger",
                   help="trigger JSON for SR columns (default: square trigger from config)")
    p.add_argument("--grid", help="comma-separated decreasing thresholds, or a step count")
    p.add_argument("--max-acc-drop", dest="max_acc_drop", type=float)
    p.add_argument("--use-clean-maxima", dest="use_clean_maxima", action="store_true", default=None,
                   help="prune by clean instead of synthetic-triggered maxima")

    p = sub.add_parser("pipeline", help="run every stage and write manifest.json")
    _common(p)
    return parser


CONFIG_KEYS = {
    "out_dir", "seed", "num_classes", "train_per_class", "test_per_class", "image_size", "target",
    "poison_rate", "trigger_square", "epochs", "n_activation_images", "syn_lambda", "syn_iterations",
    "syn_step", "anomaly_cutoff", "max_acc_drop", "use_clean_maxima",
}


def _config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k in CONFIG_KEYS}
    if getattr(args, "n", None) is not None:
        overrides["n_activation_images"] = args.n
    return build_config(args.config, overrides)


def _triggers(cfg: RunConfig, args) -> tuple[Optional[TriggerSpec], Optional[TriggerSpec]]:
    ori_path = getattr(args, "trigger", None) or getattr(args, "original_trigger", None)
    original = load_trigger(ori_path) if ori_path else cfg.original_trigger()
    syn_path = getattr(args, "synthetic_trigger", None)
    synthetic = load_trigger(syn_path) if syn_path else None
    return original, synthetic


def cmd_gen_data(args, cfg):
    with ArtifactWriter(cfg.out_dir) as w:
        train_set, test_set = pl.gen_data(cfg, w)
    print(f"wrote {len(train_set)} train / {len(test_set)} test images to {cfg.out_dir}/data")


def cmd_train(args, cfg):
    train_set, _ = pl.load_data(cfg)
    trigger = None
    if args.poison:
        trigger = load_trigger(args.trigger) if args.trigger else cfg.original_trigger()
        if args.target is not None:
            trigger.target_label = args.target
    name = args.name or ("backdoor" if args.poison else "vanilla")
    with ArtifactWriter(cfg.out_dir) as w:
        pl.train_model(cfg, w, train_set, name, trigger)
        if trigger is not None:
            w.write_json(f"triggers/{name}_original.json", trigger.to_json())
    print(f"wrote {cfg.out_dir}/models/{name}.bdf")


def cmd_eval(args, cfg):
    _, test_set = pl.load_data(cfg)
    original, synthetic = _triggers(cfg, args)
    report = evaluate(load_model(args.model), test_set, original, synthetic)
    with ArtifactWriter(cfg.out_dir) as w:
        w.write(args.output, report.to_json())
    print(report.to_json(), end="")


def cmd_gradcam(args, cfg):
    _, test_set = pl.load_data(cfg)
    if not 0 <= args.image_index < len(test_set):
        raise ConfigError(f"image index {args.image_index} outside the test set")
    original, synthetic = _triggers(cfg, args)
    image = apply_setting(test_set.images[args.image_index], args.setting, original, synthetic)
    heat = grad_cam(load_model(args.model), image, args.label, args.setting)
    stem = f"gradcam/image{args.image_index:05d}_{args.setting}_label{args.label}"
    with ArtifactWriter(cfg.out_dir) as w:
        pl.write_heatmap(w, stem, image, heat.values)
    print(f"wrote {cfg.out_dir}/{stem}.ppm")


def cmd_activations(args, cfg):
    _, test_set = pl.load_data(cfg)
    original, synthetic = _triggers(cfg, args)
    settings = [InputSetting(s) for s in _csv_list(args.settings)]
    norms = [act.Norm(n) for n in _csv_list(args.norms)]
    with ArtifactWriter(cfg.out_dir) as w:
        _, report = pl.activation_analysis(cfg, w, load_model(args.model), test_set, original,
                                           synthetic, settings, norms)
    print(report.to_json(), end="")


def cmd_synthesize(args, cfg):
    _, test_set = pl.load_data(cfg)
    labels = None if args.all_labels else [args.label]
    with ArtifactWriter(cfg.out_dir) as w:
        report, results = pl.synthesize_labels(cfg, w, load_model(args.model), test_set, args.prefix, labels)
    if report is not None:
        print(report.to_json(), end="")
    else:
        print(json.dumps([r.summary() for r in results]))


def _grid(text: Optional[str]):
    if text is None:
        return None, None
    parts = _csv_list(text)
    if len(parts) == 1 and parts[0].isdigit():
        return None, int(parts[0])
    try:
        return [float(t) for t in parts], None
    except ValueError as exc:
        raise ConfigError(f"bad --grid value {text!r}") from exc


def cmd_sweep(args, cfg):
    _, test_set = pl.load_data(cfg)
    original, synthetic = _triggers(cfg, args)
    grid, steps = _grid(args.grid)
    if steps is not None:
        cfg.grid_steps = steps
    with ArtifactWriter(cfg.out_dir) as w:
        _, report = pl.run_sweep(cfg, w, load_model(args.model), test_set, original, synthetic, grid)
    print(report.to_csv(), end="")
    print(f"selected threshold: {report.selected_threshold}")


def cmd_pipeline(args, cfg):
    summary = pl.run_pipeline(cfg)
    print(json.dumps(summary, indent=1, sort_keys=True))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "activations": cmd_activations,
    "synthesize": cmd_synthesize,
    "sweep": cmd_sweep,
    "pipeline": cmd_pipeline,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (BackdoorLabError, OSError) as exc:
        print(f"backdoor-lab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
