"""Targeted L-infinity iterative sign attack on gaze estimators.

Each step moves every attacked pixel by ``-alpha * sign(grad)`` of the summed
angular error to the target (plus optional TV smoothing), then clips back to
the epsilon box around the clean image and to [0, 255]. The iterate with the
lowest loss, the clean input included, is returned.

Batches are attacked jointly: the loss is a sum of independent per-sample
terms, so one backward pass yields every sample's own gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .geometry import TARGETS, GazeLabel, pitchyaw_array_to_vecs
from .losses import attack_objective

PIXEL_MIN, PIXEL_MAX = 0.0, 255.0
MAX_BATCH = 96


def derive_iterations(epsilon: float, alpha: float) -> int:
    """Round-half-up of ``max(eps/alpha + 4, 2 eps/alpha)``."""
    if not (epsilon > 0 and alpha > 0):
        raise ContractError("derive_iterations: epsilon and alpha must be positive")
    r = epsilon / alpha
    return max(1, int(math.floor(max(r + 4.0, 2.0 * r) + 0.5)))


def clip_step(x_orig, candidate, epsilon: float) -> np.ndarray:
    """Clamp to ``[x_orig - eps, x_orig + eps]``, then to the valid pixel range."""
    x_orig = np.asarray(x_orig, dtype=np.float64)
    boxed = np.clip(candidate, x_orig - epsilon, x_orig + epsilon)
    return np.clip(boxed, PIXEL_MIN, PIXEL_MAX)


@dataclass
class AttackConfig:
    epsilon: float
    alpha: float
    target: GazeLabel = TARGETS["Q1"]
    n_iters: Optional[int] = None
    region_mask: Optional[dict] = None  # input name -> binary image
    lambda_tv: float = 0.0

    def __post_init__(self):
        if not 0 < self.epsilon <= 255:
            raise ContractError(f"AttackConfig: epsilon {self.epsilon} outside (0, 255]")
        if not self.alpha > 0:
            raise ContractError("AttackConfig: alpha must be positive")
        if self.lambda_tv < 0:
            raise ContractError("AttackConfig: lambda_tv must be >= 0")
        if self.n_iters is None:
            self.n_iters = derive_iterations(self.epsilon, self.alpha)
        elif self.n_iters < 1:
            raise ContractError("AttackConfig: n_iters must be >= 1")


@dataclass
class AttackResult:
    x_adv: dict
    best_iter: int
    loss_trace: np.ndarray
    final_target_error_deg: float
    final_gt_error_deg: float
    initial_target_error_deg: float = float("nan")
    initial_gt_error_deg: float = float("nan")


def _angle_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def run_bim(model, inputs: dict, target_vecs: np.ndarray, gt_vecs: Optional[np.ndarray],
            epsilon: float, alpha: float, n_iters: int, masks: Optional[dict] = None,
            lambda_tv: float = 0.0) -> dict:
    """Batched attack core.

    ``inputs`` maps input name to (B, H, W) arrays; ``masks`` maps input name
    to a (B, H, W) or (H, W) binary array (inputs without a mask are attacked
    whole). Returns best inputs, per-sample traces and errors as arrays.
    """
    frozen = model.frozen()
    names = [n for n, _ in frozen.input_spec]
    x0 = {n: np.array(inputs[n], dtype=np.float64) for n in names}
    B = x0[names[0]].shape[0]
    for n in names:
        if x0[n].min(initial=0.0) < PIXEL_MIN or x0[n].max(initial=0.0) > PIXEL_MAX:
            raise ContractError(f"attack: input '{n}' has pixels outside [0, 255]")
    target_vecs = np.broadcast_to(np.asarray(target_vecs, dtype=np.float64), (B, 3))
    t = Tensor(target_vecs)
    m = {}
    for n in names:
        mk = None if masks is None else masks.get(n)
        m[n] = np.ones_like(x0[n]) if mk is None else np.broadcast_to(
            np.asarray(mk, dtype=np.float64), x0[n].shape)

    cur = {n: x0[n].copy() for n in names}
    best = {n: x0[n].copy() for n in names}
    best_loss = np.full(B, np.inf)
    best_iter = np.zeros(B, dtype=int)
    best_pred = np.zeros((B, 3))
    trace = np.zeros((n_iters + 1, B))
    init_pred = None
    for k in range(n_iters + 1):
        last = k == n_iters
        leaves = {n: Tensor(cur[n], requires_grad=not last) for n in names}
        heads = frozen.forward(leaves)
        lb = attack_objective(heads, t, [leaves[n] for n in names] if lambda_tv else [], lambda_tv)
        total = lb.total.data
        if not np.all(np.isfinite(total)):
            raise NumericError(f"attack: non-finite loss at iteration {k}")
        trace[k] = total
        pred = heads[-1].data
        if init_pred is None:
            init_pred = pred.copy()
        better = total < best_loss
        if np.any(better):
            best_loss[better] = total[better]
            best_iter[better] = k
            best_pred[better] = pred[better]
            for n in names:
                best[n][better] = cur[n][better]
        if last:
            break
        ad.tsum(lb.total).backward()
        for n in names:
            step = -alpha * np.sign(leaves[n].grad) * m[n]
            cur[n] = np.where(m[n] > 0, clip_step(x0[n], cur[n] + step, epsilon), x0[n])

    out = {
        "x_adv": best,
        "best_iter": best_iter,
        "loss_trace": trace.T.copy(),
        "target_error": _angle_deg(best_pred, target_vecs),
        "initial_target_error": _angle_deg(init_pred, target_vecs),
    }
    if gt_vecs is not None:
        gt_vecs = np.broadcast_to(gt_vecs, (B, 3))
        out["gt_error"] = _angle_deg(best_pred, gt_vecs)
        out["initial_gt_error"] = _angle_deg(init_pred, gt_vecs)
    return out


def _unbatched(inputs: dict) -> tuple:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    single = all(a.ndim == 2 for a in arrays.values())
    if single:
        arrays = {k: a[None] for k, a in arrays.items()}
    return arrays, single


def attack(model, inputs: dict, label: Optional[GazeLabel], cfg: AttackConfig):
    """Attack one image (inputs of shape (H, W)) or a batch ((B, H, W)).

    Returns one :class:`AttackResult`, or a list of them for a batch.
    """
    arrays, single = _unbatched(inputs)
    masks = None
    if cfg.region_mask is not None:
        masks = {k: np.asarray(v, dtype=np.float64) for k, v in cfg.region_mask.items()}
    gt = None if label is None else label.vec
    out = run_bim(model, arrays, cfg.target.vec, gt, cfg.epsilon, cfg.alpha, cfg.n_iters,
                  masks, cfg.lambda_tv)
    results = _split_results(out)
    return results[0] if single else results


def _split_results(out: dict) -> list:
    B = len(out["best_iter"])
    nan = np.full(B, np.nan)
    return [
        AttackResult(
            x_adv={n: a[i] for n, a in out["x_adv"].items()},
            best_iter=int(out["best_iter"][i]),
            loss_trace=out["loss_trace"][i],
            final_target_error_deg=float(out["target_error"][i]),
            final_gt_error_deg=float(out.get("gt_error", nan)[i]),
            initial_target_error_deg=float(out["initial_target_error"][i]),
            initial_gt_error_deg=float(out.get("initial_gt_error", nan)[i]),
        )
        for i in range(B)
    ]


# -- fold-level protocol ---------------------------------------------------------
def mean_std(values) -> tuple:
    values = [float(v) for v in values]
    if not values:
        return float("nan"), float("nan")
    mu = math.fsum(values) / len(values)
    var = math.fsum((v - mu) ** 2 for v in values) / len(values)
    return mu, math.sqrt(var)


@dataclass
class BatchAttackReport:
    results: list  # (sample index, target name, AttackResult)
    target_mean: float
    target_std: float
    gt_mean: float
    gt_std: float
    per_target: dict = field(default_factory=dict)  # name -> {"target": (mu, sd), "gt": (mu, sd)}

    def errors(self, metric: str = "target") -> np.ndarray:
        key = "final_target_error_deg" if metric == "target" else "final_gt_error_deg"
        return np.array([getattr(r, key) for _, _, r in self.results])


def summarize(results: list) -> BatchAttackReport:
    per_target = {}
    for name in dict.fromkeys(tn for _, tn, _ in results):
        rows = [r for _, tn, r in results if tn == name]
        per_target[name] = {
            "target": mean_std(r.final_target_error_deg for r in rows),
            "gt": mean_std(r.final_gt_error_deg for r in rows),
        }
    tm, ts = mean_std(r.final_target_error_deg for _, _, r in results)
    gm, gs = mean_std(r.final_gt_error_deg for _, _, r in results)
    return BatchAttackReport(results, tm, ts, gm, gs, per_target)


def batch_attack(model, fold, targets: Optional[dict], epsilon: float, alpha: float,
                 n_iters: Optional[int] = None, regions=None, lambda_tv: float = 0.0,
                 max_batch: int = MAX_BATCH) -> BatchAttackReport:
    """Attack every (sample, target) pair of a fold and aggregate the errors.

    ``regions`` restricts the face perturbation to a set of face regions; eye
    crops of multi-input models are always attacked whole.
    """
    from .data import region_mask

    if len(fold) == 0:
        raise ContractError("batch_attack: fold is empty")
    targets = dict(TARGETS if targets is None else targets)
    if n_iters is None:
        n_iters = derive_iterations(epsilon, alpha)
    arrays = fold.arrays()
    inputs = {n: arrays[n] for n, _ in model.input_spec}
    gt = pitchyaw_array_to_vecs(arrays["pitchyaw"])
    face_masks = None
    if regions is not None:
        face_masks = np.stack([region_mask(s, regions) for s in fold.samples])

    pairs = [(i, name) for name in targets for i in range(len(fold))]
    results = []
    for start in range(0, len(pairs), max_batch):
        chunk = pairs[start:start + max_batch]
        idx = np.array([i for i, _ in chunk])
        tv = np.stack([targets[name].vec for _, name in chunk])
        masks = None if face_masks is None else {"face": face_masks[idx]}
        out = run_bim(model, {n: a[idx] for n, a in inputs.items()}, tv, gt[idx],
                      epsilon, alpha, n_iters, masks, lambda_tv)
        for (i, name), res in zip(chunk, _split_results(out)):
            results.append((i, name, res))
    return summarize(results)
