"""Procedurally rendered gaze images and the GZDS dataset file format.

Each face is a grayscale ellipse with two eye sockets, a nose and a mouth.
The iris disk inside each socket is displaced linearly with the gaze label,
so the ground truth is exact by construction.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError, FormatError
from .geometry import SAMPLING_RANGE, GazeLabel

FACE_SIZE = 48
EYE_SIZE = 24
LANDMARKS = ("eyes", "nose", "mouth")
REGIONS = LANDMARKS + ("others",)

# Iris displacement in pixels at the edge of the sampling range.
IRIS_SHIFT_COL = 3.5
IRIS_SHIFT_ROW = 2.0
PIXEL_NOISE = 2.0

MAGIC = b"GZDS"
VERSION = 1


@dataclass(frozen=True)
class PersonStyle:
    """Appearance of one synthetic subject; offsets are in pixels."""

    person_id: int
    skin_level: float
    iris_level: float
    contrast: float
    head_dy: float
    head_dx: float
    eye_dy: float
    eye_spread: float
    mouth_dy: float

    @classmethod
    def derive(cls, dataset_seed: int, person_id: int) -> "PersonStyle":
        rng = np.random.default_rng([dataset_seed, person_id, 0xF00D])
        skin, iris, contrast = rng.uniform(0.0, 1.0, size=3)
        head = rng.uniform(-1.0, 1.0, size=2)
        eye = rng.uniform(-0.5, 0.5, size=2)
        mouth = rng.uniform(-1.0, 1.0)
        return cls(person_id, float(skin), float(iris), float(contrast),
                   float(head[0]), float(head[1]), float(eye[0]), float(eye[1]), float(mouth))

    def as_tuple(self) -> tuple:
        return (self.person_id, self.skin_level, self.iris_level, self.contrast,
                self.head_dy, self.head_dx, self.eye_dy, self.eye_spread, self.mouth_dy)


Box = tuple  # (row0, col0, row1, col1), half-open


@dataclass
class Sample:
    face: np.ndarray
    left_eye: np.ndarray
    right_eye: np.ndarray
    label: GazeLabel
    person_id: int
    landmark_boxes: dict
    face_ellipse: tuple  # (center_row, center_col, radius_rows, radius_cols)

    def face_area(self) -> np.ndarray:
        return ellipse_mask(self.face.shape, *self.face_ellipse)


@dataclass
class Dataset:
    samples: list
    dataset_seed: int
    persons: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def person_ids(self) -> list:
        return [p.person_id for p in self.persons]

    def arrays(self) -> dict:
        """Stacked model inputs plus labels as (N, 2) pitch/yaw."""
        if not self.samples:
            return {"face": np.zeros((0, FACE_SIZE, FACE_SIZE)),
                    "left_eye": np.zeros((0, EYE_SIZE, EYE_SIZE)),
                    "right_eye": np.zeros((0, EYE_SIZE, EYE_SIZE)),
                    "pitchyaw": np.zeros((0, 2))}
        return {
            "face": np.stack([s.face for s in self.samples]),
            "left_eye": np.stack([s.left_eye for s in self.samples]),
            "right_eye": np.stack([s.right_eye for s in self.samples]),
            "pitchyaw": np.array([[s.label.pitch, s.label.yaw] for s in self.samples]),
        }

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.dataset_seed, list(self.persons))


# -- rendering -------------------------------------------------------------
def ellipse_mask(shape, cy, cx, ry, rx) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def _soft_disk(shape, cy, cx, radius) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    dist = np.hypot(rows - cy, cols - cx)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _iris_offset(label: GazeLabel, scale: float = 1.0) -> tuple:
    d_row = -IRIS_SHIFT_ROW * scale * label.pitch / SAMPLING_RANGE
    d_col = -IRIS_SHIFT_COL * scale * label.yaw / SAMPLING_RANGE
    return d_row, d_col


def _tones(style: PersonStyle) -> tuple:
    skin = 95.0 + 100.0 * style.skin_level
    sclera = min(250.0, skin + 30.0 + 25.0 * style.contrast)
    iris = 15.0 + 45.0 * style.iris_level
    return skin, sclera, iris


def _draw_eye(img, cy, cx, ry, rx, iris_r, label, scale, sclera, iris):
    socket = ellipse_mask(img.shape, cy, cx, ry, rx)
    img[socket] = sclera
    d_row, d_col = _iris_offset(label, scale)
    disk = _soft_disk(img.shape, cy + d_row, cx + d_col, iris_r) * socket
    img[:] = img * (1.0 - disk) + iris * disk


def layout(style: PersonStyle) -> dict:
    """Pixel geometry of one person's face; boxes are snapped to whole pixels."""
    hy, hx = 24.0 + style.head_dy, 24.0 + style.head_dx
    ey = 17.0 + style.eye_dy + style.head_dy
    half = 8.0 + style.eye_spread
    my = 36.0 + style.mouth_dy + style.head_dy
    iy, ix, ih, imy = round(ey), round(hx), round(half), round(my)
    return {
        "head": (hy, hx, 23.0, 21.0),
        "eye_centers": ((ey, hx - half), (ey, hx + half)),
        "boxes": {
            "eyes": (iy - 5, ix - ih - 8, iy + 6, ix + ih + 9),
            "nose": (iy + 7, ix - 4, iy + 14, ix + 5),
            "mouth": (imy - 3, ix - 8, imy + 4, ix + 9),
        },
        "nose_col": ix,
        "mouth": (my, hx),
    }


def render_sample(style: PersonStyle, label: GazeLabel, rng: np.random.Generator) -> Sample:
    skin, sclera, iris = _tones(style)
    geo = layout(style)
    hy, hx, hry, hrx = geo["head"]

    face = np.full((FACE_SIZE, FACE_SIZE), 25.0)
    face[ellipse_mask(face.shape, hy, hx, hry, hrx)] = skin
    for cy, cx in geo["eye_centers"]:
        _draw_eye(face, cy, cx, 4.0, 6.5, 2.2, label, 1.0, sclera, iris)
    ny0, _, ny1, _ = geo["boxes"]["nose"]
    for r in range(ny0 + 1, ny1 - 1):
        w = 1 + (r - ny0) // 3
        nc = geo["nose_col"]
        face[r, nc - w:nc + w + 1] = skin - 35.0
    my, mx = geo["mouth"]
    face[ellipse_mask(face.shape, my, mx, 1.6, 6.0)] = skin - 55.0

    eyes = []
    for _ in range(2):
        crop = np.full((EYE_SIZE, EYE_SIZE), skin)
        _draw_eye(crop, 11.5, 11.5, 7.5, 11.0, 4.4, label, 2.0, sclera, iris)
        eyes.append(crop)

    def finish(img):
        noisy = img + rng.normal(0.0, PIXEL_NOISE, size=img.shape)
        return np.clip(np.rint(noisy), 0.0, 255.0)

    return Sample(
        face=finish(face),
        left_eye=finish(eyes[0]),
        right_eye=finish(eyes[1]),
        label=label,
        person_id=style.person_id,
        landmark_boxes=dict(geo["boxes"]),
        face_ellipse=(float(hy), float(hx), hry, hrx),
    )


def generate(dataset_seed: int, n_persons: int, samples_per_person: int) -> Dataset:
    if n_persons < 2:
        raise ContractError("generate: need at least 2 persons for leave-one-person-out")
    if samples_per_person < 0:
        raise ContractError("generate: samples_per_person must be nonnegative")
    persons = [PersonStyle.derive(dataset_seed, pid) for pid in range(n_persons)]
    samples = []
    for style in persons:
        for k in range(samples_per_person):
            rng = np.random.default_rng([dataset_seed, style.person_id, k])
            pitch, yaw = rng.uniform(-SAMPLING_RANGE, SAMPLING_RANGE, size=2)
            samples.append(render_sample(style, GazeLabel(float(pitch), float(yaw)), rng))
    return Dataset(samples, dataset_seed, persons)


def split_leave_one_person_out(ds: Dataset, held_out: int) -> tuple:
    if held_out not in ds.person_ids:
        raise ContractError(f"split: person {held_out} not in dataset {ds.person_ids}")
    train = [i for i, s in enumerate(ds.samples) if s.person_id != held_out]
    test = [i for i, s in enumerate(ds.samples) if s.person_id == held_out]
    return ds.subset(train), ds.subset(test)


def region_mask(sample: Sample, regions) -> np.ndarray:
    """Binary (0/1 float) mask of the requested face regions."""
    regions = set(regions)
    if not regions:
        raise ContractError("region_mask: at least one region is required")
    unknown = regions - set(REGIONS)
    if unknown:
        raise ContractError(f"region_mask: unknown regions {sorted(unknown)}")
    area = sample.face_area()
    boxes = {}
    for name in LANDMARKS:
        r0, c0, r1, c1 = sample.landmark_boxes[name]
        box = np.zeros(area.shape, dtype=bool)
        box[max(r0, 0):r1, max(c0, 0):c1] = True
        boxes[name] = box & area
    mask = np.zeros(area.shape, dtype=bool)
    for name in regions & set(LANDMARKS):
        mask |= boxes[name]
    if "others" in regions:
        mask |= area & ~(boxes["eyes"] | boxes["nose"] | boxes["mouth"])
    return mask.astype(np.float64)


# -- GZDS file format --------------------------------------------------------
# header:  magic(4) version(u32) seed(i64) n_persons(u32) n_samples(u32)
#          face_h face_w eye_h eye_w (u32 x4)
# person:  id(i32) skin iris contrast(f64 x3) offsets(f64 x5)
# sample:  person_id(i32) pitch yaw(f64 x2) ellipse(f64 x4) boxes(i32 x12)
#          face, left_eye, right_eye pixels (f64 little-endian, row-major)
_HEADER = struct.Struct("<4sIqIIIIII")
_PERSON = struct.Struct("<i8d")
_SAMPLE = struct.Struct("<i2d4d12i")


def encode_pixels(img: np.ndarray) -> bytes:
    return np.ascontiguousarray(img, dtype="<f8").tobytes()


def dumps_dataset(ds: Dataset) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, ds.dataset_seed, len(ds.persons), len(ds.samples),
                          FACE_SIZE, FACE_SIZE, EYE_SIZE, EYE_SIZE)]
    for p in ds.persons:
        parts.append(_PERSON.pack(*p.as_tuple()))
    for s in ds.samples:
        boxes = [v for name in LANDMARKS for v in s.landmark_boxes[name]]
        parts.append(_SAMPLE.pack(s.person_id, s.label.pitch, s.label.yaw, *s.face_ellipse, *boxes))
        parts.append(encode_pixels(s.face))
        parts.append(encode_pixels(s.left_eye))
        parts.append(encode_pixels(s.right_eye))
    return b"".join(parts)


def loads_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError("dataset: truncated header")
    magic, version, seed, n_p, n_s, fh, fw, eh, ew = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"dataset: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"dataset: unsupported version {version}")
    face_bytes, eye_bytes = fh * fw * 8, eh * ew * 8
    expected = _HEADER.size + n_p * _PERSON.size + n_s * (_SAMPLE.size + face_bytes + 2 * eye_bytes)
    if len(buf) != expected:
        raise FormatError(f"dataset: expected {expected} bytes, found {len(buf)}")
    off = _HEADER.size
    persons = []
    for _ in range(n_p):
        f = _PERSON.unpack_from(buf, off)
        off += _PERSON.size
        persons.append(PersonStyle(*f))

    def pixels(n_rows, n_cols):
        nonlocal off
        img = np.frombuffer(buf, dtype="<f8", count=n_rows * n_cols, offset=off)
        off += n_rows * n_cols * 8
        return img.reshape(n_rows, n_cols).astype(np.float64)

    samples = []
    for _ in range(n_s):
        f = _SAMPLE.unpack_from(buf, off)
        off += _SAMPLE.size
        boxes = {name: tuple(f[7 + 4 * i: 11 + 4 * i]) for i, name in enumerate(LANDMARKS)}
        face = pixels(fh, fw)
        left = pixels(eh, ew)
        right = pixels(eh, ew)
        samples.append(Sample(face, left, right, GazeLabel(f[1], f[2]), f[0], boxes, tuple(f[3:7])))
    return Dataset(samples, seed, persons)


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index.json")


def save_dataset(ds: Dataset, path) -> str:
    """Write the binary file plus a readable index; returns the file's sha256."""
    path = Path(path)
    buf = dumps_dataset(ds)
    path.write_bytes(buf)
    digest = hashlib.sha256(buf).hexdigest()
    index = {
        "format": "GZDS",
        "version": VERSION,
        "dataset_seed": ds.dataset_seed,
        "n_persons": len(ds.persons),
        "n_samples": len(ds.samples),
        "samples_per_person": {str(p.person_id): sum(s.person_id == p.person_id for s in ds.samples)
                               for p in ds.persons},
        "sha256": digest,
        "sample_sha256": [hashlib.sha256(encode_pixels(s.face)).hexdigest() for s in ds.samples],
    }
    index_path(path).write_text(json.dumps(index, indent=2) + "\n")
    return digest


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return loads_dataset(path.read_bytes())


# -- bare pixel stacks (adversarial images, patches, maps) ------------------
_PIX_HEADER = struct.Struct("<4sIIII")
PIX_MAGIC = b"GZPX"


def save_pixels(path, images) -> None:
    """Stack of equally sized images in the dataset pixel encoding."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    n, h, w = images.shape
    Path(path).write_bytes(_PIX_HEADER.pack(PIX_MAGIC, VERSION, n, h, w) + encode_pixels(images))


def load_pixels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _PIX_HEADER.size:
        raise FormatError("pixels: truncated header")
    magic, version, n, h, w = _PIX_HEADER.unpack_from(buf, 0)
    if magic != PIX_MAGIC or version != VERSION:
        raise FormatError(f"pixels: bad magic/version {magic!r}/{version}")
    if len(buf) != _PIX_HEADER.size + n * h * w * 8:
        raise FormatError("pixels: size does not match header")
    return np.frombuffer(buf, dtype="<f8", offset=_PIX_HEADER.size).reshape(n, h, w).copy()
