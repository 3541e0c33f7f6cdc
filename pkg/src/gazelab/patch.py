"""Shared adversarial patch: one content/mask pair pasted onto every image.

The patch is optimized image by image over a small attack set with sign
steps on its content only. There is no epsilon budget; the content is kept
inside [0, 255]. The best content found on one image seeds the next, and the
whole pass repeats for ``num_epochs``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attack import PIXEL_MAX, PIXEL_MIN, mean_std
from .data import FACE_SIZE, LANDMARKS, load_pixels, save_pixels
from .errors import ContractError, DimensionError
from .geometry import TARGETS, GazeLabel, pitchyaw_array_to_vecs
from .losses import check_binary, patch_objective

# A 448-pixel face crop circle at (271, 358), r = 48, scaled to 48 pixels.
DEFAULT_CENTER = (29, 38)
DEFAULT_RADIUS = 5
STEPS_PER_IMAGE = 20


@dataclass
class PatchSpec:
    mask: np.ndarray
    content: Optional[np.ndarray] = None
    shape_kind: str = "bitmap"
    geometry: dict = field(default_factory=dict)
    landmark_clearance: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        check_binary(self.mask)
        if self.content is not None:
            self.content = np.asarray(self.content, dtype=np.float64)
            if self.content.shape != self.mask.shape:
                raise DimensionError(
                    f"PatchSpec: content {self.content.shape} vs mask {self.mask.shape}")

    def with_content(self, content: np.ndarray) -> "PatchSpec":
        return PatchSpec(self.mask.copy(), np.array(content, dtype=np.float64), self.shape_kind,
                         dict(self.geometry), self.landmark_clearance)


def landmark_union(samples, shape=(FACE_SIZE, FACE_SIZE)) -> np.ndarray:
    """Union of every sample's eyes/nose/mouth rectangles."""
    out = np.zeros(shape, dtype=bool)
    for s in samples:
        for name in LANDMARKS:
            r0, c0, r1, c1 = s.landmark_boxes[name]
            out[max(r0, 0):r1, max(c0, 0):c1] = True
    return out


def circle_patch(center=DEFAULT_CENTER, radius=DEFAULT_RADIUS, shape=(FACE_SIZE, FACE_SIZE),
                 avoid_samples=None) -> PatchSpec:
    """Disk mask centred at ``(row, col)``; with ``avoid_samples`` landmark pixels are cut out."""
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    mask = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2
    clearance = avoid_samples is not None
    if clearance:
        mask &= ~landmark_union(avoid_samples, shape)
    return PatchSpec(mask.astype(np.float64), None, "circle",
                     {"center": list(center), "radius": radius}, clearance)


def composite(x, p, m) -> Tensor:
    """``x * (1 - m) + p * m``; pixels outside the mask are exactly ``x``."""
    x, p = ad.as_tensor(x), ad.as_tensor(p)
    m = np.asarray(m, dtype=np.float64)
    if x.shape[-2:] != m.shape[-2:] or p.shape[-2:] != m.shape[-2:]:
        raise DimensionError(f"composite: shapes {x.shape}, {p.shape}, {m.shape} differ")
    check_binary(m)
    return x * (1.0 - m) + p * m


@dataclass
class PatchTrainConfig:
    alpha: float = 1.0
    num_epochs: int = 5
    sample_fraction: float = 0.1
    lambda_tv: float = 0.0
    target: GazeLabel = TARGETS["Q1"]
    seed: int = 0
    steps_per_image: int = STEPS_PER_IMAGE

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError("PatchTrainConfig: alpha must be positive")
        if self.num_epochs < 1 or self.steps_per_image < 1:
            raise ContractError("PatchTrainConfig: num_epochs and steps_per_image must be >= 1")
        if not 0 < self.sample_fraction <= 1:
            raise ContractError("PatchTrainConfig: sample_fraction must be in (0, 1]")
        if self.lambda_tv < 0:
            raise ContractError("PatchTrainConfig: lambda_tv must be >= 0")


def sample_attack_set(fold, fraction: float, seed: int):
    """Seeded uniform sample (without replacement) of ``fraction`` of the fold."""
    n = max(1, int(round(fraction * len(fold))))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(fold), size=min(n, len(fold)), replace=False))
    return fold.subset(idx.tolist())


@dataclass
class PatchTrainResult:
    patch: PatchSpec
    loss_trace: list  # per (epoch, image): total loss at every step
    best_losses: list


def _patch_loss(frozen, x: np.ndarray, p: Tensor, spec: PatchSpec, t: Tensor, lam: float):
    x_adv = composite(x[None], p[None] if p.ndim == 2 else p, spec.mask)
    heads = frozen.forward({"face": x_adv})
    return patch_objective(heads, t, p, spec.mask, lam)


def train_patch(model, attack_set, spec: PatchSpec, cfg: PatchTrainConfig) -> PatchTrainResult:
    if len(attack_set) == 0:
        raise ContractError("train_patch: attack set is empty")
    frozen = model.frozen()
    if [n for n, _ in frozen.input_spec] != ["face"]:
        raise ContractError("train_patch: patches apply to single-input face models")
    t = Tensor(cfg.target.vec[None])
    p = spec.content
    if p is None:
        p = np.random.default_rng(cfg.seed).uniform(PIXEL_MIN, PIXEL_MAX, size=spec.mask.shape)
    p = np.array(p, dtype=np.float64)
    faces = attack_set.arrays()["face"]
    trace, best_losses = [], []
    for _ in range(cfg.num_epochs):
        for x in faces:
            best_p, best_loss, losses = p, np.inf, []
            for k in range(cfg.steps_per_image + 1):
                leaf = Tensor(p, requires_grad=True)
                total = _patch_loss(frozen, x, leaf, spec, t, cfg.lambda_tv).total
                value = float(total.data[0])
                losses.append(value)
                if value < best_loss:
                    best_p, best_loss = p, value
                if k == cfg.steps_per_image:
                    break
                ad.tsum(total).backward()
                p = np.clip(p - cfg.alpha * np.sign(leaf.grad), PIXEL_MIN, PIXEL_MAX)
            p = best_p
            trace.append(losses)
            best_losses.append(best_loss)
    return PatchTrainResult(spec.with_content(p), trace, best_losses)


def _errors(model, faces: np.ndarray, pitchyaw: np.ndarray, target: GazeLabel) -> tuple:
    pred = np.concatenate([model.predict({"face": faces[i:i + 256]})
                           for i in range(0, len(faces), 256)])
    def angle(v):
        return np.degrees(np.arccos(np.clip(np.sum(pred * v, axis=1), -1.0, 1.0)))
    return angle(target.vec[None]), angle(pitchyaw_array_to_vecs(pitchyaw))


def evaluate_patch(model, eval_fold, patches: dict, targets: Optional[dict] = None) -> dict:
    """Apply each target's patch to every eval image and report mean/std errors.

    ``patches`` maps target name to a :class:`PatchSpec` (a single spec is
    used for all targets). Returns per-target rows plus an ``"all"`` row
    pooling every (image, target) pair.
    """
    targets = dict(TARGETS if targets is None else targets)
    arrays = eval_fold.arrays()
    rows, pooled_t, pooled_g = {}, [], []
    for name, target in targets.items():
        spec = patches[name] if isinstance(patches, dict) else patches
        faces = arrays["face"]
        if spec.content is not None:
            faces = composite(faces, spec.content[None], spec.mask).data
        te, ge = _errors(model, faces, arrays["pitchyaw"], target)
        rows[name] = {"target": mean_std(te), "gt": mean_std(ge),
                      "target_errors": te.tolist(), "gt_errors": ge.tolist()}
        pooled_t.extend(te.tolist())
        pooled_g.extend(ge.tolist())
    rows["all"] = {"target": mean_std(pooled_t), "gt": mean_std(pooled_g)}
    return rows


def masked_tv(spec: PatchSpec) -> float:
    from .losses import tv_loss
    return float(tv_loss(spec.content * spec.mask).data)


def save_patch(spec: PatchSpec, path_stem, train_config: Optional[PatchTrainConfig] = None) -> dict:
    """Write ``<stem>.mask.px``, ``<stem>.content.px`` and ``<stem>.json``."""
    stem = Path(path_stem)

    def sibling(suffix):
        return stem.parent / (stem.name + suffix)

    save_pixels(sibling(".mask.px"), spec.mask)
    if spec.content is not None:
        save_pixels(sibling(".content.px"), spec.content)
    desc = {"shape_kind": spec.shape_kind, "geometry": spec.geometry,
            "landmark_clearance": spec.landmark_clearance,
            "mask_file": sibling(".mask.px").name,
            "content_file": sibling(".content.px").name if spec.content is not None else None}
    if train_config is not None:
        cfg = asdict(train_config)
        cfg["target"] = [train_config.target.pitch, train_config.target.yaw]
        desc["train_config"] = cfg
    sibling(".json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    return desc


def load_patch(path_stem) -> PatchSpec:
    stem = Path(path_stem)
    desc = json.loads((stem.parent / (stem.name + ".json")).read_text())
    mask = load_pixels(stem.parent / desc["mask_file"])[0]
    content = None
    if desc.get("content_file"):
        content = load_pixels(stem.parent / desc["content_file"])[0]
    return PatchSpec(mask, content, desc["shape_kind"], desc["geometry"], desc["landmark_clearance"])
