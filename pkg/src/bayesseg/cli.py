"""Command-line interface: ``bayesseg <command> ...``.

Exit codes: 0 success, 1 usage/config/input error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import KEY_DOCS, RunConfig, load_run_config, parse_run_config
from .data import generate_synthetic
from .inference import InferenceConfig, mc_predict
from .kvfile import ConfigError, format_value
from .loss import NonFiniteError
from .metrics import SweepRow, evaluate_masks, noise_sweep_report, write_per_image_csv, write_report_csv
from .network import CheckpointError, build, load_checkpoint, save_checkpoint
from .tensor import ShapeError
from .training import TrainingDiverged, train

logger = logging.getLogger("bayesseg")

USAGE_ERRORS = (ConfigError, CheckpointError, io.PGMError, ShapeError, FileNotFoundError, FileExistsError, ValueError)
RUNTIME_ERRORS = (NonFiniteError, TrainingDiverged, FloatingPointError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(flag, config_value: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("BLS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"BLS_SEED must be an integer, got {env!r}") from None
    return config_value


def _config(args, overrides: dict) -> RunConfig:
    return load_run_config(getattr(args, "config", None), overrides)


def _set_threads(n: int | None):
    if n and n > 0:
        torch.set_num_threads(n)


def _model_mode(items: dict, args) -> bool:
    if getattr(args, "baseline", False):
        return False
    return items.get("train.bayesian", "true").lower() == "true"


def cmd_generate_data(args) -> int:
    cfg = _config(args, {
        "data.count": args.count, "data.height": args.height, "data.width": args.width,
        "data.classes": args.classes, "data.smoothness": args.smoothness,
    })
    d = cfg.data
    if d.classes < 2:
        raise ConfigError(f"--classes must be >= 2, got {d.classes}")
    seed = _seed(args.seed, d.seed)
    samples = generate_synthetic(d.count, d.height, d.width, d.classes, seed=seed, smoothness=d.smoothness)
    manifest = io.write_dataset(args.out, samples, d.classes, force=args.force)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    overrides = {"train.iterations": args.iterations, "train.lr": args.lr}
    if args.profile:
        overrides["train.profile"] = args.profile
    if args.baseline:
        overrides["train.bayesian"] = False
    cfg = _config(args, overrides)
    _set_threads(cfg.infer.threads)
    data_dir = args.data or cfg.paths.data
    out = args.out or cfg.paths.model
    if not data_dir or not out:
        raise UsageError("train needs --data and --out (or paths.data / paths.model)")
    samples, num_classes = io.read_dataset(data_dir)
    val_dir = args.val or cfg.paths.val_data
    val = io.read_dataset(val_dir)[0] if val_dir else None
    net_cfg = cfg.network
    if "network.num_classes" not in cfg.explicit:
        net_cfg.num_classes = num_classes
    elif net_cfg.num_classes != num_classes:
        raise ConfigError(f"network.num_classes={net_cfg.num_classes} but dataset has {num_classes} classes")
    train_cfg = cfg.train
    train_cfg.seed = _seed(args.seed, train_cfg.seed)
    model = build(net_cfg.validate(), seed=train_cfg.seed)
    extra = {"train.bayesian": train_cfg.bayesian, "train.seed": train_cfg.seed}
    model, log = train(model, samples, val, train_cfg, checkpoint_path=out, checkpoint_extra=extra)
    if train_cfg.iterations == 0:
        save_checkpoint(out, model, extra)
    log.to_csv(str(out) + ".log.csv")
    if log.val_dice:
        print(f"validation mean dice {log.val_dice[-1][1]:.4f}")
    print(out)
    return 0


def _load_for_inference(args, cfg: RunConfig):
    model, items = load_checkpoint(args.model)
    bayesian = _model_mode(items, args)
    t = args.passes if args.passes is not None else cfg.infer.t
    rate = args.dropout_rate if getattr(args, "dropout_rate", None) is not None else cfg.infer.dropout_rate
    return model, InferenceConfig(t=t, dropout_rate=rate, bayesian=bayesian)


def cmd_predict(args) -> int:
    cfg = _config(args, {})
    _set_threads(args.threads or cfg.infer.threads)
    model, icfg = _load_for_inference(args, cfg)
    image = io.read_image(args.input)
    seed = _seed(args.seed, cfg.infer.seed)
    out = mc_predict(model, image, icfg, seed=seed, threads=args.threads or cfg.infer.threads)[0]
    io.write_pgm(args.out_seg, out.segmentation, maxval=model.config.num_classes - 1)
    field = out.channel(args.channel)
    if args.out_uncertainty:
        io.write_heatmap(args.out_uncertainty, field, args.channel)
    if args.out_raw:
        io.write_field_csv(args.out_raw, field)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args, {})
    _set_threads(args.threads or cfg.infer.threads)
    model, icfg = _load_for_inference(args, cfg)
    samples, num_classes = io.read_dataset(args.data)
    if num_classes != model.config.num_classes:
        raise ConfigError(f"model predicts {model.config.num_classes} classes, dataset has {num_classes}")
    seed = _seed(args.seed, cfg.infer.seed)
    out = mc_predict(model, np.stack([s.image for s in samples]), icfg, seed=seed,
                     threads=args.threads or cfg.infer.threads)
    report = evaluate_masks(out.segmentation, [s.mask for s in samples], num_classes,
                            resolution_um=cfg.data.resolution_um)
    mode = "bayesian" if icfg.bayesian else "baseline"
    row = SweepRow(0, mode, report.mean_dice, report.dice, float(out.uncertainty.mean()))
    write_report_csv(args.out, [row], num_classes)
    per_image = Path(args.out).with_name(Path(args.out).stem + "_images.csv")
    write_per_image_csv(per_image, report)
    print(f"mean dice {report.mean_dice:.4f}")
    return 0


def cmd_noise_sweep(args) -> int:
    cfg = _config(args, {"data.noise_base_count": args.base_count, "data.noise_block_size": args.block_size})
    _set_threads(args.threads or cfg.infer.threads)
    bayes_model, _ = load_checkpoint(args.model)
    base_model, _ = load_checkpoint(args.baseline_model)
    samples, num_classes = io.read_dataset(args.data)
    for m, path in ((bayes_model, args.model), (base_model, args.baseline_model)):
        if m.config.num_classes != num_classes:
            raise ConfigError(f"{path} predicts {m.config.num_classes} classes, dataset has {num_classes}")
    t = args.passes if args.passes is not None else cfg.infer.t
    seed = _seed(args.seed, cfg.data.noise_seed)
    rows = noise_sweep_report(
        {"bayesian": (bayes_model, True), "baseline": (base_model, False)}, samples,
        range(1, args.levels + 1), InferenceConfig(t, cfg.infer.dropout_rate, True),
        base_count=cfg.data.noise_base_count, block_size=cfg.data.noise_block_size, seed=seed,
        threads=args.threads or cfg.infer.threads,
    )
    write_report_csv(args.out, rows, num_classes)
    for r in rows:
        print(f"level {r.level} {r.mode:8s} mean dice {r.mean_dice:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = _seed(args.seed, 0)
    results = run_suite(seed=seed, n_params=args.params, size=args.size)
    ok = True
    for name, err in results.items():
        passed = err < args.tolerance
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max relative error {err:.3e}")
    return 0 if ok else 2


def cmd_config_keys(args) -> int:
    defaults = parse_run_config("").to_kv()
    for key, doc in KEY_DOCS.items():
        print(f"{key}={format_value(defaults[key])}  # {doc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayesseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic layered dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--smoothness", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a Bayesian (or --baseline) model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--val")
    t.add_argument("--out")
    t.add_argument("--baseline", action="store_true", help="class-weighted cross entropy, no variance sampling")
    t.add_argument("--profile", choices=["desk", "paper"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="segment one image and export an uncertainty heatmap")
    pr.add_argument("--model", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--out-seg", required=True)
    pr.add_argument("--out-uncertainty")
    pr.add_argument("--out-raw", help="raw float field as CSV")
    pr.add_argument("--channel", choices=["combined", "epistemic", "aleatoric"], default="combined")
    pr.add_argument("--passes", type=int)
    pr.add_argument("--dropout-rate", type=float)
    pr.add_argument("--baseline", action="store_true", help="single deterministic pass")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--threads", type=int)
    pr.add_argument("--config")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="Dice and boundary error on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--passes", type=int)
    e.add_argument("--dropout-rate", type=float)
    e.add_argument("--baseline", action="store_true")
    e.add_argument("--seed", type=int)
    e.add_argument("--threads", type=int)
    e.add_argument("--config")
    e.set_defaults(func=cmd_evaluate)

    n = sub.add_parser("noise-sweep", help="mean Dice of both models under increasing block noise")
    n.add_argument("--model", required=True)
    n.add_argument("--baseline-model", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--levels", type=int, required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--passes", type=int)
    n.add_argument("--base-count", type=int)
    n.add_argument("--block-size", type=int)
    n.add_argument("--seed", type=int)
    n.add_argument("--threads", type=int)
    n.add_argument("--config")
    n.set_defaults(func=cmd_noise_sweep)

    gc = sub.add_parser("gradcheck", help="finite-difference check of all differentiable paths")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--params", type=int, default=200)
    gc.add_argument("--size", type=int, default=16)
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.set_defaults(func=cmd_gradcheck)

    ck = sub.add_parser("config-keys", help="list every config key with its default")
    ck.set_defaults(func=cmd_config_keys)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bayesseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"bayesseg {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"bayesseg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
