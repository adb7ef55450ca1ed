"""Command-line entry point: ``selfcon-lab <command>``.

Exit codes: 0 success, 2 configuration error, 3 divergence (non-finite
loss), 4 selfcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import DatasetError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SELFCHECK = 0, 2, 3, 4

log = logging.getLogger("selfcon_lab")


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    from .harness import run_training

    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    summary = run_training(cfg, args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _config_for_checkpoint(checkpoint: str, config: str | None):
    path = Path(config) if config else Path(checkpoint).with_name("config.txt")
    return load_config(path)


def cmd_linear_eval(args) -> int:
    from .harness import linear_eval, load_trained_encoder, prepare_data

    cfg = _config_for_checkpoint(args.checkpoint, args.config)
    train, test = prepare_data(cfg)
    enc = load_trained_encoder(cfg, args.checkpoint, train.dim)
    res = linear_eval(enc, train, test, cfg)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        res.log.write(Path(args.out) / "linear_eval.csv")
    print(json.dumps({"train_acc": res.train_acc, "test_acc": res.test_acc,
                      "config_hash": cfg.config_hash, "seed": cfg.seed}, indent=2))
    return EXIT_OK


def cmd_mi_probe(args) -> int:
    from .harness import load_trained_encoder, prepare_data
    from .mi import DEFAULT_PAIRS, mi_probe

    cfg = _config_for_checkpoint(args.checkpoint, args.config)
    train, _ = prepare_data(cfg)
    enc = load_trained_encoder(cfg, args.checkpoint, train.dim)
    pairs = [p.strip() for p in args.pairs.split(",")] if args.pairs else list(DEFAULT_PAIRS)
    n = min(len(train), cfg.probe.samples)
    try:
        report = mi_probe(enc, train.subset(np.arange(n)), pairs, proj_dim=cfg.probe.proj_dim,
                          seed=cfg.seed, steps=args.steps or cfg.probe.steps, workers=args.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "probe.csv")
    report.means_to_csv(out / "probe_mean.csv")
    print(json.dumps(report.means(), indent=2))
    return EXIT_OK


def cmd_grid(args) -> int:
    from .harness import load_grid_configs, run_experiment_grid

    configs = load_grid_configs(args.configs)
    if not configs:
        raise ConfigError(f"no *.cfg files in {args.configs}")
    path = run_experiment_grid(configs, args.out or Path(args.configs) / "out", args.workers)
    print(path)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck(quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfcon-lab", description="Self-contrastive learning lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train per the config's protocol and write metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    le = sub.add_parser("linear-eval", help="linear evaluation of a saved encoder")
    le.add_argument("--checkpoint", required=True)
    le.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    le.add_argument("--out")
    le.set_defaults(func=cmd_linear_eval)

    mp = sub.add_parser("mi-probe", help="MI estimates between encoder variables")
    mp.add_argument("--checkpoint", required=True)
    mp.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    mp.add_argument("--pairs", help="comma-separated, e.g. 'F;T2,X;F' (default: all five)")
    mp.add_argument("--out", required=True)
    mp.add_argument("--steps", type=int)
    mp.add_argument("--workers", type=int, default=1)
    mp.set_defaults(func=cmd_mi_probe)

    g = sub.add_parser("grid", help="run every *.cfg in a directory")
    g.add_argument("--configs", required=True)
    g.add_argument("--out")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_grid)

    s = sub.add_parser("selfcheck", help="gradcheck, oracle and DPI suites")
    s.add_argument("--quick", action="store_true")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    from .harness import DivergenceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        where = f"; last good parameters in {exc.checkpoint}" if exc.checkpoint else ""
        print(f"diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
