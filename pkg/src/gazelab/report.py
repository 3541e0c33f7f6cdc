"""Report artifacts: CSV tables, grayscale PPM images, JSON run records, manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MANIFEST = "manifest.json"
CONFIG = "config.json"


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max normalize into [0, 255] uint8; a constant array maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_ppm(path, gray: np.ndarray, scale: int = 1) -> Path:
    """Binary P6 pixmap with equal channels; ``gray`` holds values in [0, 255]."""
    g = np.clip(np.round(np.asarray(gray, dtype=np.float64)), 0, 255).astype(np.uint8)
    if g.ndim != 2:
        raise FormatError(f"write_ppm: expected a 2-D image, got {g.shape}")
    if scale > 1:
        g = np.kron(g, np.ones((scale, scale), dtype=np.uint8))
    h, w = g.shape
    rgb = np.repeat(g[:, :, None], 3, axis=2)
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    """Read back a gray P6 file written by :func:`write_ppm` (first channel)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary P6 pixmap")
    w, h = (int(t) for t in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3)[:, :, 0].copy()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir) -> dict:
    """Checksum every file under ``run_dir`` (except the manifest itself)."""
    run_dir = Path(run_dir)
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            files[p.relative_to(run_dir).as_posix()] = sha256_file(p)
    manifest = {"files": files}
    write_json(run_dir / MANIFEST, manifest)
    return manifest


def check_manifest(run_dir) -> list:
    """Problems found comparing files on disk with the manifest (empty when intact)."""
    run_dir = Path(run_dir)
    mpath = run_dir / MANIFEST
    if not mpath.exists():
        return [f"missing {MANIFEST}"]
    manifest = json.loads(mpath.read_text())
    problems = []
    for rel, digest in manifest["files"].items():
        p = run_dir / rel
        if not p.exists():
            problems.append(f"missing file {rel}")
        elif sha256_file(p) != digest:
            problems.append(f"checksum mismatch {rel}")
    for p in sorted(run_dir.rglob("*")):
        rel = p.relative_to(run_dir).as_posix()
        if p.is_file() and p.name != MANIFEST and rel not in manifest["files"]:
            problems.append(f"unlisted file {rel}")
    return problems
