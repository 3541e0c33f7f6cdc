"""Objectives: angular error, total variation, attack/patch/defense losses.

Radians are used internally; angular errors leave this module in degrees.
Batched functions take (B, 3) direction tensors and (B, H, W) image tensors
and return one value per batch element.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

RAD_TO_DEG = 180.0 / np.pi


@dataclass
class LossBreakdown:
    """Per-sample loss components; ``total`` keeps the gradient tape."""

    total: Tensor
    angular_to_target_deg: np.ndarray
    tv_term: np.ndarray
    per_head: list = field(default_factory=list)

    def total_value(self) -> np.ndarray:
        return self.total.data


def _as_batch(v) -> Tensor:
    v = ad.as_tensor(v)
    return v.reshape(1, -1) if v.ndim == 1 else v


def angular_error_batch(g, t) -> Tensor:
    """Angle between rows of ``g`` and ``t`` in degrees; shape (B,)."""
    g, t = _as_batch(g), _as_batch(t)
    if g.shape[-1] != 3 or t.shape[-1] != 3:
        raise DimensionError(f"angular_error: expected 3-vectors, got {g.shape} and {t.shape}")
    if t.shape[0] == 1 and g.shape[0] != 1:
        t = Tensor(np.broadcast_to(t.data, g.shape)) if not t.requires_grad else t * np.ones(g.shape)
    if g.shape != t.shape:
        raise DimensionError(f"angular_error: batch mismatch {g.shape} vs {t.shape}")
    gn, tn = np.linalg.norm(g.data, axis=1), np.linalg.norm(t.data, axis=1)
    if np.any(gn == 0) or np.any(tn == 0):
        raise ContractError("angular_error: zero vector has no direction")
    cos = ad.dot(g, t, axis=1) / (ad.norm(g, axis=1) * ad.norm(t, axis=1))
    # the clamped acos bounds the gradient; this constant restores the exact
    # value within delta of +-1 (zero elsewhere) without touching the gradient
    c = np.clip(cos.data, -1.0, 1.0)
    fix = np.arccos(c) - np.arccos(np.clip(c, -1.0 + ad.ACOS_CLAMP, 1.0 - ad.ACOS_CLAMP))
    return (ad.acos(cos) + fix) * RAD_TO_DEG


def angular_error(g, t) -> Tensor:
    """Angle between two 3-vectors in degrees, as a scalar tensor."""
    return angular_error_batch(g, t).reshape(())


def ground_truth_error(g, label) -> Tensor:
    """Angle between a predicted direction and a :class:`GazeLabel`'s vector."""
    return angular_error(g, label.vec)


def tv_loss(img) -> Tensor:
    """Total variation of an (h, w) image, or of each image in an (B, h, w) stack.

    Sums squared right- and down-neighbour differences over the top-left
    (h-1) x (w-1) cells and divides by their count.
    """
    img = ad.as_tensor(img)
    if img.ndim not in (2, 3):
        raise DimensionError(f"tv_loss: expected (h, w) or (B, h, w), got {img.shape}")
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise ContractError(f"tv_loss: image must be at least 2x2, got {(h, w)}")
    base = img[..., :-1, :-1]
    right = img[..., :-1, 1:] - base
    down = img[..., 1:, :-1] - base
    s = ad.tsum(ad.square(right) + ad.square(down), axis=(-2, -1))
    return s * (1.0 / ((h - 1) * (w - 1)))


def _angular_sum(heads: list, t) -> tuple:
    per_head = [angular_error_batch(h, t) for h in heads]
    total = per_head[0]
    for term in per_head[1:]:
        total = total + term
    return total, per_head


def _with_tv(heads, t, tv_images: list, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ContractError("lambda_tv must be >= 0")
    ang, per_head = _angular_sum(heads, t)
    tv = None
    for im in tv_images:
        term = tv_loss(im)
        tv = term if tv is None else tv + term
    if tv is None:
        tv = Tensor(np.zeros(ang.shape))
    elif tv.ndim == 0:
        tv = tv.reshape(1)
    total = ang + tv * lam if lam else ang
    return LossBreakdown(total, ang.data.copy(), tv.data.copy(), [p.data.copy() for p in per_head])


def attack_objective(heads: list, t, x_adv, lambda_tv: float = 0.0) -> LossBreakdown:
    """Sum of per-head angular errors to ``t`` plus ``lambda_tv`` times TV.

    ``x_adv`` is one attacked image batch or a list of them (one per attacked
    input); each contributes its own TV term.
    """
    images = list(x_adv) if isinstance(x_adv, (list, tuple)) else [x_adv]
    return _with_tv(heads, t, images, lambda_tv)


def check_binary(m: np.ndarray) -> None:
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ContractError("mask must be binary (values in {0, 1})")


def patch_objective(heads: list, t, p, m, lambda_tv: float = 0.0) -> LossBreakdown:
    """Angular terms plus ``lambda_tv`` times TV of the masked patch ``p * m``."""
    p = ad.as_tensor(p)
    m = np.asarray(m, dtype=np.float64)
    if p.shape[-2:] != m.shape[-2:]:
        raise DimensionError(f"patch_objective: patch {p.shape} vs mask {m.shape}")
    check_binary(m)
    return _with_tv(heads, t, [p * m], lambda_tv)


def defense_objective(model, x: dict, x_adv: dict, y, lambda_adv: float,
                      loss_kind: str = "mse_pitchyaw") -> Tensor:
    """Clean training loss plus ``lambda_adv`` times the clean/perturbed disagreement.

    Gradients flow through both the clean and the perturbed branch.
    """
    from .models import model_loss

    if lambda_adv < 0:
        raise ContractError("lambda_adv must be >= 0")
    for name in x:
        if ad.as_tensor(x[name]).shape != ad.as_tensor(x_adv[name]).shape:
            raise DimensionError(f"defense_objective: input '{name}' shape mismatch")
    clean = model.forward(x)
    adv = model.forward(x_adv)
    return model_loss(clean, ad.as_tensor(y), loss_kind) + lambda_adv * model_loss(clean, adv, loss_kind)
