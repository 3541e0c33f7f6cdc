"""Check every run directory under a root: manifest checksums, then an optional re-run.

    python scripts/verify_runs.py runs [--rerun]
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from gazelab import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root")
    ap.add_argument("--rerun", action="store_true")
    args = ap.parse_args(argv)
    dirs = sorted(p.parent for p in Path(args.root).glob("*/config.json"))
    if not dirs:
        sys.exit(f"no run directories under {args.root}")
    failed = [d for d in dirs if cli.main(["verify", str(d)] + (["--rerun"] if args.rerun else [])) != 0]
    print(f"{len(dirs) - len(failed)}/{len(dirs)} run directories verified")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
