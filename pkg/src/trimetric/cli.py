"""Command-line entry points: train, eval, verify, synth.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, verify
from .config import RunConfig, load_config, train_test
from .data import save_dataset, synth_dataset
from .errors import ConfigError, NumericError
from .evaluation import average_trials
from .nn import init_params
from .trainer import TrainConfig, train_batch_mode

log = logging.getLogger("trimetric")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="overrides train.seed (synth: generator seed)")
    p.add_argument("--threads", type=int, help="worker threads for per-image passes")
    p.add_argument("--out", help="output directory")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f"train_{f.name}", type=type(f.default),
                       help=f"train.{f.name} (default {f.default})")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    train_over = {k[len("train_"):]: v for k, v in vars(args).items()
                  if k.startswith("train_") and v is not None}
    if args.seed is not None:
        train_over["seed"] = args.seed
    changes = {}
    if train_over:
        try:
            changes["train"] = dataclasses.replace(cfg.train, **train_over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.out is not None:
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = train_test(cfg)

    start = 0
    if args.resume:
        params, start = checkpoint.load(args.resume)
        if params.config != cfg.architecture:
            raise ConfigError("checkpoint architecture does not match the configuration")
    else:
        params = init_params(cfg.architecture, cfg.train.seed, cfg.train.init_conv_std, cfg.train.init_fc_std)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    with open(out / "train_log.jsonl", "a" if args.resume else "w") as logf:
        def on_iteration(report):
            logf.write(json.dumps(report.to_dict()) + "\n")
            logf.flush()

        result = train_batch_mode(train, params, cfg.train, cfg.augment, on_iteration,
                                  start_iteration=start, threads=cfg.threads)

    last = result.reports[-1].iteration + 1 if result.reports else start
    # a converged run stops before its update, so the next iteration to run is the last one again
    next_iter = last - 1 if result.converged else last
    checkpoint.save(out / "checkpoint.json", result.params, next_iter,
                    {"converged": result.converged})
    status = "converged" if result.converged else "stopped at max_iterations"
    print(f"{status} after {len(result.reports)} iterations; checkpoint written to {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    params, _ = checkpoint.load(args.checkpoint)
    if params.config != cfg.architecture:
        raise ConfigError("checkpoint architecture does not match the configuration")
    _, test = train_test(cfg)
    trials = args.trials if args.trials is not None else cfg.eval.trials
    curve = average_trials(params, test, trials, cfg.eval.seed, cfg.eval.max_rank, cfg.augment)
    if not curve.is_monotone():
        raise NumericError("CMC curve is not monotone")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    curve.write_csv(out / "cmc.csv")
    curve.write_summary(out / "cmc_summary.json")
    summary = curve.summary()
    print("  ".join(f"{k}={v:.3f}" for k, v in summary.items()))
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed
    if seed is None and args.config:
        seed = load_config(args.config).train.seed
    checks, elapsed = verify.timed_run(seed or 0)
    print(verify.format_report(checks, elapsed))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "verify_report.json").write_text(
            json.dumps([c.to_dict() for c in checks], indent=2) + "\n")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print("verification failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config) if args.config else None
    spec = cfg.data.synthetic if cfg is not None and cfg.data.synthetic is not None else None
    classes = args.classes if args.classes is not None else (spec.classes if spec else 10)
    per_class = args.per_class if args.per_class is not None else (spec.per_class if spec else 6)
    noise = args.noise if args.noise is not None else (spec.noise if spec else 0.1)
    seed = args.seed if args.seed is not None else (spec.seed if spec else 0)
    if args.height is not None and args.width is not None:
        size = (args.height, args.width)
    elif cfg is not None:
        size = cfg.image_size
    else:
        size = (20, 12)
    if not args.out:
        raise ConfigError("synth needs --out")
    ds = synth_dataset(classes, per_class, noise, np.random.default_rng(seed), *size)
    try:
        files = save_dataset(ds, args.out)
    except OSError as exc:
        raise ConfigError(f"cannot write to {args.out}: {exc}") from exc
    print(f"wrote {len(files)} images for {classes} identities to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trimetric", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="batch-mode training")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CMC evaluation on the held-out identities")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="gradient and equivalence self-checks")
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="write a synthetic identity dataset")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
