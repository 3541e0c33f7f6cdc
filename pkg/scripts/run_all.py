"""Run the full study through the ``gazelab`` CLI and print every result table.

    python scripts/run_all.py --out runs            # desk-scale defaults
    python scripts/run_all.py --out runs --quick    # minutes, for a smoke test

Each stage writes its own ``<command>-<hash>`` run directory under ``--out``;
re-running skips nothing but reuses per-sample records where they exist.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from gazelab import cli
from gazelab.report import read_csv

HERE = Path(__file__).resolve().parent

STAGES = ["sweep", "regions", "smooth", "patch", "defense-eval", "saliency"]
TABLES = {
    "sweep": ["sweep.csv", "sweep_gt.csv"],
    "regions": ["regions.csv"],
    "smooth": ["smooth.csv"],
    "patch": ["patch_baseline.csv", "patch.csv", "patch_tv.csv"],
    "defense-eval": ["defense.csv", "defense_clean.csv"],
    "saliency": ["saliency.csv"],
}


def stage(out: Path, name: str, extra: list) -> Path:
    run_dir = out / name
    code = cli.main([name, "--run-dir", str(run_dir), *map(str, extra)])
    if code != 0:
        sys.exit(f"stage {name} failed with exit code {code}")
    return run_dir


def show(path: Path) -> None:
    rows = read_csv(path)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    print(f"\n{path.parent.name}/{path.name}")
    for r in rows:
        print("  " + "  ".join(c.rjust(w) for c, w in zip(r, widths)))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--quick", action="store_true", help="use scripts/configs/quick.ini")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    out = Path(args.out).resolve()
    base = ["--workers", args.workers]
    if args.quick:
        base += ["--config", HERE / "configs" / "quick.ini"]

    data_dir = stage(out, "gen-data", base)
    ds = data_dir / "dataset.gzds"
    model = stage(out, "train", [*base, "--dataset", ds]) / "model.gzml"
    hardened = stage(out, "defend", [*base, "--dataset", ds]) / "hardened.gzml"
    common = [*base, "--dataset", ds, "--model", model, "--hardened", hardened]
    for name in STAGES:
        run_dir = stage(out, name, common)
        for t in TABLES[name]:
            show(run_dir / t)


if __name__ == "__main__":
    main()
