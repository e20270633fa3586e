"""Command-line entry point: synth, train, eval, ablate and gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_dataset
from .errors import DataFormatError, NumericalError, ShapeError
from .evaluation import ablate, attention_report, compute_metrics, format_ablation_table, predict_dataset
from .gradcheck import grad_check
from .model import ModelConfig, Variant, build_model
from .schema import parse_schema
from .synthetic import SyntheticSpec, generate, generate_tracklets
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("vidattr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4

# flags that map one-to-one onto TrainConfig fields
_TRAIN_FLAGS = {"K": int, "n": int, "lr": float, "steps": int, "seed": int, "d_a": int}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_train_flags(p: argparse.ArgumentParser, with_variant: bool = True) -> None:
    # defaults are None so a --config file can fill whatever was not given explicitly
    p.add_argument("--K", type=int, help="tracklets per batch (default 64)")
    p.add_argument("--n", type=int, help="frames per tracklet (default 6)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.0003)")
    p.add_argument("--steps", type=int, help="optimizer steps (default 5000)")
    p.add_argument("--d-a", dest="d_a", type=int, help="attention hidden width (default 256)")
    if with_variant:
        p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidattr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", type=Path, help="JSON file with SyntheticSpec fields")
    p.add_argument("--seed", type=int, help="overrides the spec seed")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--schema", type=Path, required=True)
    p.add_argument("--train-manifest", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--schema", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--test-manifest", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--n", type=int, help="frames per evaluation group (default: the checkpoint's n)")
    p.add_argument("--seed", type=int, default=0, help="seed for the random frame groups")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--attention-report", action="store_true", help="also write attention.tsv")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="paired four-variant run")
    p.add_argument("--schema", type=Path, required=True)
    p.add_argument("--train-manifest", type=Path, required=True)
    p.add_argument("--test-manifest", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p, with_variant=False)

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    p.add_argument("--variant", choices=[v.value for v in Variant], help="default: all four")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200, help="coordinates sampled per variant")
    return parser


def _train_config(args, variant: str | None = None) -> TrainConfig:
    values: dict = {}
    if args.config is not None:
        _require(args.config)
        try:
            values = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc}", args.config) from None
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for name in _TRAIN_FLAGS:
        given = getattr(args, name, None)
        if given is not None:
            values[name] = given
    if variant is not None:
        values["variant"] = variant
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _require(*paths: Path) -> None:
    for path in paths:
        if not path.exists():
            raise DataFormatError("no such file", path)


def _write_run_json(out: Path, command: str, args, extra: dict) -> None:
    # out is left out so that runs into different directories echo identically
    echo = {"command": command, "version": __version__}
    folded = {*_TRAIN_FLAGS, "variant"} if "train_config" in extra else set()
    for key, value in sorted(vars(args).items()):
        if key in ("out", "verbose", "command", "config") or key in folded:
            continue
        echo[key] = str(value) if isinstance(value, Path) else value
    echo.update(extra)
    (out / "run.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    if args.spec is not None:
        _require(args.spec)
        try:
            spec = SyntheticSpec.from_json(args.spec)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc}", args.spec) from None
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad spec: {exc}") from None
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    paths = generate(spec, args.out)
    _write_run_json(args.out, "synth", args, {"spec": spec.to_dict()})
    print(f"wrote synthetic dataset to {args.out} ({spec.num_train} train, {spec.num_test} test)")
    log.info("files: %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args.schema, args.train_manifest, args.annotations)
    config = _train_config(args, args.variant)
    schema = parse_schema(args.schema)
    train_set = load_dataset(args.train_manifest, args.annotations, schema)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_run_json(args.out, "train", args, {"train_config": config.to_dict()})
    _, tlog = train(train_set, schema, config, out_dir=args.out)
    print(f"trained {config.variant.value} for {config.steps} steps; final loss {tlog.total_loss[-1]:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args.schema, args.checkpoint, args.test_manifest, args.annotations)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    schema = parse_schema(args.schema)
    model = load_checkpoint(args.checkpoint, schema)
    test_set = load_dataset(args.test_manifest, args.annotations, schema)
    n = args.n or model.config.n
    args.out.mkdir(parents=True, exist_ok=True)
    _write_run_json(args.out, "eval", args, {"n_effective": n, "model_config": {
        "variant": model.variant.value, "n": model.config.n, "D_c": model.config.D_c, "d_a": model.config.d_a}})
    preds = predict_dataset(model, test_set, n, args.seed, args.threads)
    report = compute_metrics(preds, test_set, schema)
    report.write(args.out / "metrics.tsv")
    if args.attention_report:
        attention_report(model, test_set, args.out / "attention.tsv", n=n, predictions=preds)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    _require(args.schema, args.train_manifest, args.test_manifest, args.annotations)
    config = _train_config(args)
    schema = parse_schema(args.schema)
    train_set = load_dataset(args.train_manifest, args.annotations, schema)
    test_set = load_dataset(args.test_manifest, args.annotations, schema)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = config.to_dict()
    cfg.pop("variant")
    _write_run_json(args.out, "ablate", args, {"train_config": cfg})
    reports = ablate(train_set, test_set, schema, config, out_dir=args.out, threads=args.threads)
    table = format_ablation_table(reports)
    (args.out / "ablation.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def gradcheck_batch(seed: int):
    """Tiny 64-bit batch on the default synthetic schema."""
    spec = SyntheticSpec(num_train=3, num_test=1, num_frames=4, D_c=6, seed=seed)
    data = generate_tracklets(spec)
    frames = np.stack([t.features.frames[:3] for t in data.train]).astype(np.float64)
    labels = np.stack([t.labels for t in data.train])
    return data.schema, frames, labels


def cmd_gradcheck(args) -> int:
    schema, frames, labels = gradcheck_batch(args.seed)
    variants = [Variant(args.variant)] if args.variant else list(Variant)
    worst = 0.0
    for variant in variants:
        cfg = ModelConfig(n=frames.shape[1], D_c=frames.shape[2], d_a=4, variant=variant)
        model = build_model(schema, cfg, args.seed, dtype=np.float64)
        # nudge biases off zero so every ReLU/tanh path is exercised
        r = np.random.default_rng(args.seed + 1)
        for name in model.names():
            model.params[name] = model.params[name] + 0.1 * r.normal(size=model.params[name].shape)
        err = grad_check(model, frames, labels, num_coords=args.coords, seed=args.seed)
        worst = max(worst, err)
        print(f"{variant.value}\tmax_rel_error\t{err:.3e}")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check FAILED: {worst:.3e} >= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vidattr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ShapeError, OSError) as exc:
        print(f"vidattr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"vidattr: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


run = main

if __name__ == "__main__":
    sys.exit(main())
