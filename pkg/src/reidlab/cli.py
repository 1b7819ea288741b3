"""Command line entry point.

Subcommands cover the whole pipeline: ``gen-data`` renders a dataset,
``train`` runs one task, ``ablate`` sweeps a preset, ``eval`` scores a
checkpoint, ``check`` runs the verification suites. Every run gets its own
directory under the configured runs root with the fully resolved config
beside the outputs. Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

from .checks import SUITES, run_suite
from .config import (
    ConfigError,
    apply_overrides,
    load_config,
    load_dataset_spec,
    write_resolved,
)
from .evaluation import emit_report, evaluate
from .gates import STRATEGIES
from .synthetic import DatasetError, generate_dataset, load_dataset
from .training import (
    PRESETS,
    AblationSettings,
    build_reid_extractor,
    run_ablation,
    train_task,
)
from .weightstore import WeightStoreError, apply_weights, load_weights

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; remap them to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="reidlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a synthetic dataset")
    gen.add_argument("--spec", required=True, help="dataset spec JSON file")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--force", action="store_true",
                     help="replace the output directory if it exists")
    gen.set_defaults(func=_cmd_gen_data)

    train = sub.add_parser("train", help="train one task from a run config")
    train.add_argument("--config", required=True)
    train.add_argument("--task", required=True, choices=("classify", "attr", "reid"))
    train.add_argument("--from", dest="source", default=None, metavar="WEIGHTS",
                       help="source checkpoint for transfer (reid)")
    train.add_argument("--stages", type=int, choices=(3, 4, 5), default=None,
                       help="backbone stages to keep for reid")
    train.add_argument("--mask", choices=STRATEGIES, default=None)
    train.add_argument("--tag", default=None, help="run directory suffix")
    train.set_defaults(func=_cmd_train)

    ablate = sub.add_parser("ablate", help="run an ablation preset")
    ablate.add_argument("--preset", required=True, choices=PRESETS)
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--tag", default=None)
    ablate.set_defaults(func=_cmd_ablate)

    evl = sub.add_parser("eval", help="evaluate a reid checkpoint")
    evl.add_argument("--config", required=True)
    evl.add_argument("--weights", required=True)
    evl.add_argument("--tag", default=None)
    evl.set_defaults(func=_cmd_eval)

    check = sub.add_parser("check", help="run a verification suite")
    check.add_argument("--suite", required=True, choices=sorted(SUITES))
    check.set_defaults(func=_cmd_check)
    return parser


def _run_dir(runs_root, tag):
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(runs_root) / f"{stamp}-{tag}"
    path = base
    suffix = 1
    while path.exists():
        path = Path(f"{base}-{suffix}")
        suffix += 1
    path.mkdir(parents=True)
    return path


def _cmd_gen_data(args):
    spec = load_dataset_spec(args.spec)
    manifest = generate_dataset(spec, args.out, force=args.force)
    n = len([f for f in manifest["files"] if f.startswith("images/")])
    print(f"wrote {n} images for {spec.identities} identities under {args.out}")
    return 0


def _cmd_train(args):
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, task=args.task, source_weights=args.source,
                          keep_stages=args.stages, mask=args.mask)
    run = _run_dir(cfg.paths.runs_dir, args.tag or cfg.train.task)
    write_resolved(cfg, run / "config.json")
    dataset = load_dataset(cfg.paths.data_dir)
    result = train_task(cfg.train, dataset, out_dir=run)
    if result.load_report is not None:
        print(result.load_report.summary())
    for row in result.log:
        print(f"epoch {row.epoch:3d}  train {row.train_loss:.5f}  "
              f"val {row.val_loss:.5f}  lr {row.lr:g}  {row.wall_seconds:.1f}s")
    print(f"run directory: {run}")
    if result.diverged:
        print("training diverged; restored last good weights", file=sys.stderr)
        return 2
    return 0


def _cmd_ablate(args):
    cfg = load_config(args.config)
    run = _run_dir(cfg.paths.runs_dir, args.tag or f"ablate-{args.preset}")
    write_resolved(cfg, run / "config.json")
    person = load_dataset(cfg.paths.data_dir)
    generic = None
    if args.preset == "knowledge_source":
        generic = load_dataset(cfg.paths.generic_data_dir)
    settings = AblationSettings(
        dataset=person,
        generic=generic,
        out_dir=run,
        seeds=(cfg.seed, cfg.seed + 1, cfg.seed + 2),
        eval_identities=cfg.eval.test_identities,
        eval_splits=cfg.eval.splits,
        cutoffs=cfg.eval.cutoffs,
        source_cfg=replace(cfg.train, task="classify"),
        reid_cfg=replace(cfg.train, task="reid"),
    )
    table = run_ablation(args.preset, settings)
    print(table)
    print(f"run directory: {run}")
    return 0


def _cmd_eval(args):
    cfg = load_config(args.config)
    run = _run_dir(cfg.paths.runs_dir, args.tag or "eval")
    write_resolved(cfg, run / "config.json")
    dataset = load_dataset(cfg.paths.data_dir)
    extractor = build_reid_extractor(cfg.train, cfg.train.seed)
    loaded = load_weights(args.weights)
    apply_weights(extractor.params(), loaded, policy="strict")
    result = evaluate(extractor, dataset, cfg.eval)
    emit_report(result, run / "cmc.csv", run / "cmc_curve.txt")
    print(result.table())
    print(f"run directory: {run}")
    return 0


def _cmd_check(args):
    report = run_suite(args.suite)
    print(report.summary())
    return 0 if report.ok else 1


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help lands here with code 0
        return int(exc.code or 0)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, DatasetError, WeightStoreError, FileNotFoundError,
            FileExistsError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports and exits
        log.exception("runtime failure")
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
