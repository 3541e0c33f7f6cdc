import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazelab import models
from gazelab.defense import DefenseConfig, evaluate_defense, free_adv_train
from gazelab.errors import ConfigError, TrainingDivergenceError
from gazelab.geometry import TARGETS


def _params_equal(a, b):
    return all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


@pytest.mark.parametrize("kind", ["single_input_cnn", "multi_input_multi_head"])
def test_reduces_to_plain_training_bitwise(kind, small_set):
    base = models.build_model(kind, 0)
    plain = models.train(base, small_set, models.TrainConfig(epochs=2, seed=4))
    free = free_adv_train(base, small_set, DefenseConfig(replay_m=1, lambda_adv=0.0, base_epochs=2,
                                                         seed=4, freeze_delta=True))
    assert _params_equal(plain.model, free.model)
    assert plain.loss_curve == free.loss_curve
    assert free.delta_abs_max == 0.0


def test_outer_epochs_and_update_count(small_set):
    cfg = DefenseConfig(replay_m=5, base_epochs=10, epsilon=4, alpha=1)
    assert cfg.outer_epochs == 2
    res = free_adv_train(models.build_model("single_input_cnn", 0), small_set, cfg)
    batches = -(-len(small_set) // cfg.batch_size)
    assert res.parameter_updates == 10 * batches
    assert len(res.loss_curve) == 2 and len(res.delta_history) == 2


@settings(max_examples=10)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_epoch_budget_divisibility(m, k, r):
    assert DefenseConfig(replay_m=m, base_epochs=m * k).outer_epochs == k
    if r % m:
        with pytest.raises(ConfigError):
            DefenseConfig(replay_m=m, base_epochs=r)


@pytest.mark.parametrize("kw", [dict(replay_m=4, base_epochs=30), dict(replay_m=0), dict(epsilon=0),
                                dict(alpha=-1), dict(lambda_adv=-0.5), dict(loss_kind="l2")])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        DefenseConfig(**kw)


def test_divisibility_message_names_both_numbers():
    with pytest.raises(ConfigError, match="30.*4"):
        DefenseConfig(replay_m=4, base_epochs=30)


@settings(max_examples=5)
@given(st.sampled_from([1.0, 4.0, 16.0]), st.sampled_from([0.5, 2.0, 8.0]))
def test_delta_stays_in_box(small_set, eps, alpha):
    res = free_adv_train(models.build_model("single_input_cnn", 1), small_set.subset(range(8)),
                         DefenseConfig(replay_m=2, base_epochs=2, epsilon=eps, alpha=alpha))
    assert 0 < res.delta_abs_max <= eps
    assert all(h <= eps for h in res.delta_history)


def test_deterministic(small_set):
    cfg = DefenseConfig(replay_m=2, base_epochs=2, epsilon=8, alpha=2)
    a = free_adv_train(models.build_model("single_input_cnn", 0), small_set, cfg)
    b = free_adv_train(models.build_model("single_input_cnn", 0), small_set, cfg)
    assert _params_equal(a.model, b.model) and a.loss_curve == b.loss_curve


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(small_set):
    with pytest.raises(TrainingDivergenceError):
        free_adv_train(models.build_model("single_input_cnn", 0), small_set,
                       DefenseConfig(replay_m=1, base_epochs=2, learning_rate=1e300, momentum=0.0))


def test_report_cells(small_set):
    plain = models.build_model("single_input_cnn", 0)
    hard = models.build_model("single_input_cnn", 1)
    fold = small_set.subset(range(2))
    targets = {k: TARGETS[k] for k in ("Q1", "Q3")}
    rep = evaluate_defense(plain, hard, fold, targets, eps_list=(1, 2), alpha=1.0)
    assert len(rep.cells) == 2 * (len(targets) + 1) * 2 * 2
    assert set(rep.clean_error) == {"plain", "defended"}
    mu, sd = rep.cells[(2, "all", "gt", "defended")]
    assert np.isfinite(mu) and sd >= 0
    assert rep.cells[(1, "Q1", "target", "plain")] == rep.runs[(1, "plain")].per_target["Q1"]["target"]
