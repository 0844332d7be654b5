"""Command line entry point: ``fedctc {gen-data,pretrain,run,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DataError, save_dataset
from .harness import (CHECKPOINT_NAME, ExperimentConfig, RunReport, StageError, atomic_write,
                      corpora, emit_outputs, load_config, load_preset, preset_names,
                      pretrain_baseline, run_experiment, summarize)
from .model import ConfigError

log = logging.getLogger("fedctc")


def _config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give --config or --preset, not both")
    overrides = {"seed": args.seed, "out_dir": args.out}
    if args.config:
        cfg = load_config(args.config, **overrides)
    elif args.preset:
        cfg = load_preset(args.preset, **overrides)
    else:
        cfg = ExperimentConfig(seed=args.seed, out_dir=args.out)
    return cfg.validate()


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    target, source = corpora(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(target, out / "target.fdat")
    save_dataset(source, out / "source.fdat")
    log.info("[gen-data] wrote %s and %s", out / "target.fdat", out / "source.fdat")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    _, info = pretrain_baseline(cfg, log=log.info)
    atomic_write(Path(cfg.out_dir) / "pretrain.json", json.dumps(info, indent=2) + "\n")
    log.info("[pretrain] source test WER %.2f", 100 * info["source_test_wer"])


def cmd_run(args) -> None:
    cfg = _config(args)
    if not (Path(cfg.out_dir) / CHECKPOINT_NAME).exists():
        log.info("[run] no checkpoint in %s, pretraining first", cfg.out_dir)
        pretrain_baseline(cfg, log=log.info)
    report = run_experiment(cfg, log=log.info)
    emit_outputs(report, cfg.out_dir, dump_features=args.dump_features)
    print(summarize(report))


def cmd_report(args) -> None:
    if args.out is None:
        raise ConfigError("report needs --out DIR")
    path = Path(args.out) / "report.json"
    try:
        report = RunReport.from_json(path.read_text())
    except OSError as exc:
        raise StageError("report", f"cannot read {path}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise StageError("report", f"{path}: {exc}") from exc
    print(summarize(report))


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "run": cmd_run,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedctc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="INI experiment config")
        s.add_argument("--preset", choices=preset_names(), help="bundled experiment preset")
        s.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
        s.add_argument("--out", type=Path, help="output directory (overrides the config)")
        s.add_argument("--dump-features", action="store_true",
                       help="write uploaded feature shipments as FFEA1 files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: [io] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
