"""``gazelab`` command line.

Every command resolves a full :class:`ExperimentConfig` (defaults, then the
``--config`` INI file, then flags), writes its artifacts into a run directory
named ``<command>-<config hash>`` under the output root, and finishes with a
checksum manifest. The output root is ``--out``, else ``$GAZELAB_OUT``, else
``run.out_dir``.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_ini, set_value
from .errors import GazeLabError
from .experiments import COMMANDS, run_command
from .report import CONFIG, check_manifest, sha256_file, write_manifest

ENV_OUT = "GAZELAB_OUT"

# flag -> (section, key)
SHORTCUTS = {
    "dataset": ("run", "dataset"), "model": ("run", "model"), "hardened": ("run", "hardened"),
    "fold": ("run", "fold"), "max_images": ("run", "max_images"), "targets": ("run", "targets"),
    "workers": ("run", "workers"), "seed": ("run", "seed"),
    "data_seed": ("data", "seed"), "persons": ("data", "persons"), "per_person": ("data", "per_person"),
    "kind": ("train", "kind"), "epochs": ("train", "epochs"),
    "epsilon": ("attack", "epsilon"), "alpha": ("attack", "alpha"),
    "eps_list": ("attack", "eps_list"), "alpha_list": ("attack", "alpha_list"),
    "lambda_tv": ("attack", "lambda_tv"),
}

PATH_KEYS = ("dataset", "model", "hardened")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out", help="output root (default $GAZELAB_OUT or run.out_dir)")
    common.add_argument("--run-dir", help="exact run directory instead of <command>-<hash>")
    for flag in SHORTCUTS:
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)

    parser = argparse.ArgumentParser(prog="gazelab", description="Adversarial attacks on toy gaze models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    v = sub.add_parser("verify", help="check a run directory's checksums, optionally re-run it")
    v.add_argument("run_dir")
    v.add_argument("--rerun", action="store_true", help="re-run from config.json and compare CSVs")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig(command=args.command)
    if args.config:
        cfg = load_ini(args.config, cfg)
    for flag, (section, key) in SHORTCUTS.items():
        value = getattr(args, flag)
        if value is not None:
            set_value(cfg, section, key, value)
    apply_overrides(cfg, args.set)
    for key in PATH_KEYS:
        path = getattr(cfg.run, key)
        if path:
            setattr(cfg.run, key, str(Path(path).resolve()))
    return cfg


def output_root(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or os.environ.get(ENV_OUT) or cfg.run.out_dir)


def execute(cfg: ExperimentConfig, run_dir: Path) -> dict:
    summary = run_command(cfg, run_dir)
    write_manifest(run_dir)
    return summary


def rerun_and_compare(run_dir: Path) -> list:
    """Re-run a stored config in a scratch directory; list the CSVs that differ."""
    stored = json.loads((run_dir / CONFIG).read_text())
    cfg = ExperimentConfig.from_dict({"command": stored["command"], **stored["config"]})
    problems = []
    for key, info in stored.get("inputs", {}).items():
        if not Path(info["path"]).exists():
            problems.append(f"input {key} missing: {info['path']}")
        elif sha256_file(info["path"]) != info["sha256"]:
            problems.append(f"input {key} changed: {info['path']}")
    if problems:
        return problems
    scratch = Path(tempfile.mkdtemp(prefix="gazelab-verify-"))
    try:
        run_command(cfg, scratch)
        old = sorted(p.relative_to(run_dir) for p in run_dir.rglob("*.csv"))
        new = sorted(p.relative_to(scratch) for p in scratch.rglob("*.csv"))
        if old != new:
            problems.append(f"CSV set differs: {[str(p) for p in old]} vs {[str(p) for p in new]}")
        for rel in old:
            if (scratch / rel).exists() and (scratch / rel).read_bytes() != (run_dir / rel).read_bytes():
                problems.append(f"CSV differs on re-run: {rel}")
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    return problems


def cmd_verify(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / CONFIG).exists():
        raise FileNotFoundError(f"no {CONFIG} in {run_dir}")
    problems = check_manifest(run_dir)
    if args.rerun and not problems:
        problems = rerun_and_compare(run_dir)
    for p in problems:
        print(f"FAIL {p}")
    print(f"{'OK' if not problems else 'FAILED'} {run_dir}")
    return 0 if not problems else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        cfg = resolve_config(args)
        run_dir = Path(args.run_dir) if args.run_dir else output_root(args, cfg) / f"{cfg.command}-{cfg.digest()}"
        summary = execute(cfg, run_dir)
    except (GazeLabError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(run_dir)
    print(json.dumps(summary, indent=1, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
