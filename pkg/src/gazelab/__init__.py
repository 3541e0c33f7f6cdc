"""Desk-scale lab for adversarial attacks on gaze regression models."""
from .attack import AttackConfig, attack, batch_attack, derive_iterations
from .autodiff import Tensor, finite_diff_check
from .data import generate, load_dataset, save_dataset, split_leave_one_person_out
from .defense import DefenseConfig, evaluate_defense, free_adv_train
from .geometry import TARGETS, GazeLabel
from .losses import angular_error, attack_objective, tv_loss
from .models import TrainConfig, build_model, load_model, save_model, train
from .patch import PatchTrainConfig, circle_patch, evaluate_patch, train_patch

__version__ = "0.1.0"
