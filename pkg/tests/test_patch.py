import numpy as np
import pytest

from gazelab import patch
from gazelab.errors import ContractError, DimensionError
from gazelab.geometry import TARGETS
from gazelab.models import SingleInputCNN
from gazelab.patch import (PatchSpec, PatchTrainConfig, circle_patch, composite, evaluate_patch,
                           landmark_union, masked_tv, sample_attack_set, train_patch)


class BlindCNN(SingleInputCNN):
    """Sees only a constant image, so the patch gradient is exactly zero."""

    def forward(self, inputs):
        return super().forward({"face": inputs["face"] * 0.0})


def test_composite_examples():
    x = np.full((2, 2), 10.0)
    p = np.full((2, 2), 200.0)
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(composite(x, p, m).data, [[200.0, 10.0], [10.0, 200.0]])
    np.testing.assert_array_equal(composite(x, p, np.zeros((2, 2))).data, x)
    with pytest.raises(ContractError):
        composite(x, p, m * 0.5)
    with pytest.raises(DimensionError):
        composite(x, p, np.ones((3, 3)))


def test_circle_patch_geometry():
    spec = circle_patch()
    assert spec.mask.shape == (48, 48)
    assert spec.mask[29, 38] == 1 and spec.mask[29, 44] == 0 and spec.mask[29, 43] == 1
    rows, cols = np.nonzero(spec.mask)
    assert np.all((rows - 29) ** 2 + (cols - 38) ** 2 <= 25)
    assert int(spec.mask.sum()) == 81


def test_landmark_clearance(small_set):
    spec = circle_patch(center=(20, 24), radius=8, avoid_samples=small_set.samples)
    assert spec.landmark_clearance
    assert not np.any((spec.mask > 0) & landmark_union(small_set.samples))
    assert spec.mask.sum() < circle_patch(center=(20, 24), radius=8).mask.sum()


def test_patch_config_validation():
    with pytest.raises(ContractError):
        PatchTrainConfig(alpha=0)
    with pytest.raises(ContractError):
        PatchTrainConfig(num_epochs=0)
    with pytest.raises(ContractError):
        PatchTrainConfig(sample_fraction=0)
    with pytest.raises(ContractError):
        PatchTrainConfig(lambda_tv=-1)


def test_attack_subset_is_seeded(small_set):
    a = sample_attack_set(small_set, 0.25, 3)
    b = sample_attack_set(small_set, 0.25, 3)
    assert len(a) == 6
    assert [s.face.tobytes() for s in a.samples] == [s.face.tobytes() for s in b.samples]
    assert len(sample_attack_set(small_set, 0.01, 0)) == 1


def test_zero_gradient_leaves_patch_unchanged(small_set):
    model = BlindCNN.init(0)
    p0 = np.full((48, 48), 77.0)
    spec = circle_patch().with_content(p0)
    res = train_patch(model, small_set.subset(range(2)), spec,
                      PatchTrainConfig(num_epochs=2, steps_per_image=3))
    np.testing.assert_array_equal(res.patch.content, p0)
    assert len(res.loss_trace) == 4 and all(len(t) == 4 for t in res.loss_trace)
    assert all(len(set(t)) == 1 for t in res.loss_trace)


def test_empty_mask_gives_constant_trace(small_set):
    model = SingleInputCNN.init(0)
    spec = PatchSpec(np.zeros((48, 48)))
    res = train_patch(model, small_set.subset(range(1)), spec, PatchTrainConfig(num_epochs=1))
    assert len(set(res.loss_trace[0])) == 1


def test_patch_stays_in_range_and_outside_pixels_untouched(small_set):
    model = SingleInputCNN.init(0)
    spec = circle_patch()
    res = train_patch(model, small_set.subset(range(2)), spec,
                      PatchTrainConfig(num_epochs=1, steps_per_image=4, alpha=60.0))
    c = res.patch.content
    assert c.min() >= 0 and c.max() <= 255
    x = small_set.samples[0].face
    out = composite(x, c, spec.mask).data
    assert np.array_equal(out[spec.mask == 0], x[spec.mask == 0])
    # best loss per image never exceeds the loss the image started from
    assert all(b <= t[0] for b, t in zip(res.best_losses, res.loss_trace))


def test_train_patch_errors(small_set):
    with pytest.raises(ContractError):
        train_patch(SingleInputCNN.init(0), small_set.subset([]), circle_patch(), PatchTrainConfig())


def test_evaluate_without_content_is_baseline(small_set):
    model = SingleInputCNN.init(0)
    rows = evaluate_patch(model, small_set, circle_patch())
    assert set(rows) == set(TARGETS) | {"all"}
    assert len(rows["Q1"]["target_errors"]) == len(small_set)
    pooled = np.concatenate([rows[n]["target_errors"] for n in TARGETS])
    assert rows["all"]["target"][0] == pytest.approx(pooled.mean())


def test_masked_tv_and_roundtrip(tmp_path, rng):
    spec = circle_patch().with_content(rng.uniform(0, 255, size=(48, 48)))
    assert masked_tv(spec) > 0
    cfg = PatchTrainConfig(lambda_tv=5.0, target=TARGETS["Q2"])
    desc = patch.save_patch(spec, tmp_path / "q2", cfg)
    assert desc["train_config"]["lambda_tv"] == 5.0
    back = patch.load_patch(tmp_path / "q2")
    np.testing.assert_array_equal(back.mask, spec.mask)
    np.testing.assert_array_equal(back.content, spec.content)
    assert back.geometry == {"center": [29, 38], "radius": 5}
    bare = circle_patch()
    patch.save_patch(bare, tmp_path / "bare")
    assert patch.load_patch(tmp_path / "bare").content is None


def test_patch_lowers_target_error(world, trained):
    fold = world[2]
    spec = circle_patch()
    cfg = PatchTrainConfig(target=TARGETS["Q1"], seed=0)
    res = train_patch(trained.model, sample_attack_set(fold, 0.1, 0), spec, cfg)
    base = evaluate_patch(trained.model, fold, {"Q1": spec}, {"Q1": TARGETS["Q1"]})
    hit = evaluate_patch(trained.model, fold, {"Q1": res.patch}, {"Q1": TARGETS["Q1"]})
    assert hit["Q1"]["target"][0] < base["Q1"]["target"][0]
