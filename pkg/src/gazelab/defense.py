"""Free adversarial training with a stability term, and its evaluation.

Every minibatch is replayed ``replay_m`` times. Each replay runs one forward
and backward pass of the combined clean + stability objective, which updates
the parameters and, from the same gradients, takes one ascending sign step on
a persistent perturbation buffer. The buffer starts uniform in [-eps, eps]:
at zero the stability term has a vanishing gradient and sign steps would
never leave it. The outer loop runs ``base_epochs /
replay_m`` epochs, so the number of parameter updates matches plain training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attack import batch_attack
from .autodiff import Tensor
from .errors import ConfigError, ContractError, TrainingDivergenceError
from .geometry import TARGETS
from .losses import defense_objective
from .models import LOSS_KINDS, SGD, TrainResult, epoch_batches, mean_angular_error

DEFAULT_EVAL_EPS = (16, 32, 64)
EVAL_ALPHA = 0.125


@dataclass
class DefenseConfig:
    replay_m: int = 2
    epsilon: float = 32.0
    alpha: float = 8.0
    lambda_adv: float = 1.0
    base_epochs: int = 30
    loss_kind: str = "mse_pitchyaw"
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    freeze_delta: bool = False
    random_start: bool = True

    def __post_init__(self):
        if self.replay_m < 1 or self.base_epochs < 1:
            raise ConfigError("DefenseConfig: replay_m and base_epochs must be >= 1")
        if self.base_epochs % self.replay_m:
            raise ConfigError(
                f"DefenseConfig: base_epochs {self.base_epochs} not divisible by replay_m {self.replay_m}")
        if not (self.epsilon > 0 and self.alpha > 0):
            raise ConfigError("DefenseConfig: epsilon and alpha must be positive")
        if self.lambda_adv < 0:
            raise ConfigError("DefenseConfig: lambda_adv must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"DefenseConfig: loss_kind must be one of {LOSS_KINDS}")

    @property
    def outer_epochs(self) -> int:
        return self.base_epochs // self.replay_m


@dataclass
class DefenseResult(TrainResult):
    parameter_updates: int = 0
    delta_abs_max: float = 0.0
    delta_history: list = field(default_factory=list)


def free_adv_train(model, dataset, cfg: DefenseConfig) -> DefenseResult:
    if len(dataset) == 0:
        raise ContractError("free_adv_train: dataset is empty")
    model = model.copy()
    arrays = dataset.arrays()
    inputs = model.inputs_from(arrays)
    labels = arrays["pitchyaw"]
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model, cfg.learning_rate, cfg.momentum)
    delta_rng = np.random.default_rng([cfg.seed, 0xDE17A])
    delta = {}
    for n, a in inputs.items():
        shape = (cfg.batch_size,) + a.shape[1:]
        if cfg.random_start and not cfg.freeze_delta:
            delta[n] = delta_rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)
        else:
            delta[n] = np.zeros(shape)
    curve, history = [], []
    for epoch in range(cfg.outer_epochs):
        total, count = 0.0, 0
        for idx in epoch_batches(len(labels), cfg.batch_size, rng):
            nb = len(idx)
            clean = {n: Tensor(a[idx]) for n, a in inputs.items()}
            y = Tensor(labels[idx])
            for _ in range(cfg.replay_m):
                d = {n: Tensor(delta[n][:nb], requires_grad=not cfg.freeze_delta) for n in inputs}
                perturbed = {n: ad.clamp(clean[n] + d[n], 0.0, 255.0) for n in inputs}
                loss = defense_objective(model, clean, perturbed, y, cfg.lambda_adv, cfg.loss_kind)
                if not np.isfinite(loss.data):
                    raise TrainingDivergenceError(epoch)
                loss.backward()
                opt.step()
                if not opt.finite():
                    raise TrainingDivergenceError(epoch)
                if not cfg.freeze_delta:
                    for n in inputs:
                        step = cfg.alpha * np.sign(d[n].grad)
                        delta[n][:nb] = np.clip(delta[n][:nb] + step, -cfg.epsilon, cfg.epsilon)
                total += float(loss.data) * nb
                count += nb
        curve.append(total / count)
        history.append(max(float(np.abs(v).max()) for v in delta.values()))
    return DefenseResult(model, curve, mean_angular_error(model, dataset),
                         parameter_updates=opt.steps, delta_abs_max=history[-1],
                         delta_history=history)


@dataclass
class DefenseReport:
    eps_list: list
    targets: list
    cells: dict  # (eps, target, metric, model) -> (mean, std); target "all" pools targets
    clean_error: dict  # model -> mean clean ground-truth error
    runs: dict = field(default_factory=dict)  # (eps, model) -> BatchAttackReport


def evaluate_defense(plain_model, hardened_model, fold, targets: Optional[dict] = None,
                     eps_list=DEFAULT_EVAL_EPS, alpha: float = EVAL_ALPHA) -> DefenseReport:
    """Attack both models at every epsilon and tabulate target and ground-truth errors."""
    targets = dict(TARGETS if targets is None else targets)
    models = {"plain": plain_model, "defended": hardened_model}
    cells, runs = {}, {}
    for eps in eps_list:
        for mname, m in models.items():
            rep = batch_attack(m, fold, targets, eps, alpha)
            runs[(eps, mname)] = rep
            for tname in targets:
                cells[(eps, tname, "target", mname)] = rep.per_target[tname]["target"]
                cells[(eps, tname, "gt", mname)] = rep.per_target[tname]["gt"]
            cells[(eps, "all", "target", mname)] = (rep.target_mean, rep.target_std)
            cells[(eps, "all", "gt", mname)] = (rep.gt_mean, rep.gt_std)
    clean = {mname: mean_angular_error(m, fold) for mname, m in models.items()}
    return DefenseReport(list(eps_list), list(targets), cells, clean, runs)
