import math

import numpy as np
import pytest
import torch

from gatedbev.config.settings import TrainConfig
from gatedbev.errors import ConfigError, DatasetError, NumericAbortError, ShapeMismatchError
from gatedbev.perception.fusion import REGRESSION_CHANNELS
from gatedbev.perception.geometry import Box3D
from gatedbev.perception.pipeline import build_model, prepare_examples
from gatedbev.perception.train import (
    TrainingExample, backward, batch_loss, collate, compute_gradients, dataset_loss, detection_loss,
    finite_difference, focal_loss, frozen_names, grad_check, make_targets, regression_l1, relative_error,
    splat_sigma, train,
)

from tests.conftest import SMALL_GRID


@pytest.fixture(scope="module")
def examples(config, tiny_samples):
    return prepare_examples(tiny_samples, config)


def _params(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


# ==================== TARGETS ====================

def test_targets_for_single_box():
    box = Box3D(center=(3.5, -2.25, 0.8), extent=(4.5, 1.9, 1.6), yaw=0.4, class_id=2)
    t = make_targets([box], SMALL_GRID, num_classes=4)
    iy, ix = SMALL_GRID.cell_index(3.5, -2.25)
    iy, ix = int(iy), int(ix)

    assert t.heatmap.shape == (4, SMALL_GRID.height, SMALL_GRID.width)
    assert t.heatmap[2, iy, ix] == 1.0
    assert t.heatmap[[0, 1, 3]].sum() == 0.0
    assert t.mask.sum() == 1 and t.mask[iy, ix]

    cx, cy = SMALL_GRID.cell_center(iy, ix)
    np.testing.assert_allclose(t.regression[:, iy, ix], [
        (3.5 - cx) / 2.0, (-2.25 - cy) / 2.0, 0.8,
        math.log(4.5), math.log(1.9), math.log(1.6), math.sin(0.4), math.cos(0.4),
    ])
    assert np.count_nonzero(t.regression[:, ~t.mask]) == 0


def test_heatmap_gaussian_falloff():
    box = Box3D(center=(1.0, 1.0, 0.5), extent=(9.0, 2.0, 2.0), yaw=0.0, class_id=0)
    sigma = splat_sigma(box, SMALL_GRID)
    assert sigma == pytest.approx(1.5)
    t = make_targets([box], SMALL_GRID, num_classes=1)
    iy, ix = (int(v) for v in SMALL_GRID.cell_index(1.0, 1.0))
    assert t.heatmap[0, iy, ix + 2] == pytest.approx(math.exp(-4 / (2 * sigma ** 2)))


def test_small_boxes_use_unit_sigma():
    ped = Box3D(center=(0, 0, 0.9), extent=(0.8, 0.8, 1.75), yaw=0.0, class_id=3)
    assert splat_sigma(ped, SMALL_GRID) == 1.0


def test_overlapping_splats_take_the_maximum():
    a = Box3D(center=(1.0, 1.0, 0.5), extent=(4.5, 2, 2), yaw=0.0, class_id=0)
    b = Box3D(center=(5.0, 1.0, 0.5), extent=(4.5, 2, 2), yaw=0.0, class_id=0)
    both = make_targets([a, b], SMALL_GRID, 1).heatmap
    np.testing.assert_array_equal(
        both, np.maximum(make_targets([a], SMALL_GRID, 1).heatmap, make_targets([b], SMALL_GRID, 1).heatmap)
    )
    assert both.max() == 1.0


def test_no_boxes_gives_empty_targets():
    t = make_targets([], SMALL_GRID, 4)
    assert t.heatmap.sum() == 0 and t.regression.sum() == 0 and not t.mask.any()


# ==================== LOSS ====================

def _focal_oracle(logits, target, alpha, beta):
    p = 1.0 / (1.0 + np.exp(-logits))
    total = 0.0
    for pi, ti in zip(p.ravel(), target.ravel()):
        if ti == 1.0:
            total += (1 - pi) ** alpha * math.log(pi)
        else:
            total += (1 - ti) ** beta * pi ** alpha * math.log(1 - pi)
    return -total / max(1, int((target == 1.0).sum()))


@pytest.mark.parametrize("seed", range(3))
def test_focal_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 2, (2, 3, 5, 5))
    target = rng.random((2, 3, 5, 5))
    target[rng.random(target.shape) < 0.1] = 1.0
    loss = focal_loss(torch.from_numpy(logits), torch.from_numpy(target), 2.0, 4.0)
    assert loss.item() == pytest.approx(_focal_oracle(logits, target, 2.0, 4.0), rel=1e-12)


def test_focal_loss_without_positives_is_not_normalised_by_zero():
    logits = torch.zeros((1, 1, 2, 2), dtype=torch.float64)
    loss = focal_loss(logits, torch.zeros_like(logits))
    assert loss.item() == pytest.approx(-4 * 0.25 * math.log(0.5))


def test_regression_l1_is_masked_mean():
    pred = torch.zeros((1, REGRESSION_CHANNELS, 3, 3), dtype=torch.float64)
    target = torch.zeros_like(pred)
    target[0, :, 1, 1] = 2.0
    target[0, :, 0, 0] = 100.0  # unmasked, ignored
    mask = torch.zeros((1, 3, 3), dtype=torch.bool)
    mask[0, 1, 1] = True
    assert regression_l1(pred, target, mask).item() == 2.0


def test_regression_l1_empty_mask_keeps_graph():
    pred = torch.ones((1, REGRESSION_CHANNELS, 2, 2), dtype=torch.float64, requires_grad=True)
    loss = regression_l1(pred, torch.zeros_like(pred), torch.zeros((1, 2, 2), dtype=torch.bool))
    assert loss.item() == 0.0
    loss.backward()
    assert torch.all(pred.grad == 0)


def test_detection_loss_combines_terms():
    rng = np.random.default_rng(0)
    logits = torch.from_numpy(rng.normal(size=(1, 2, 4, 4)))
    heat = torch.from_numpy(rng.random((1, 2, 4, 4)))
    reg = torch.from_numpy(rng.normal(size=(1, 8, 4, 4)))
    reg_t = torch.from_numpy(rng.normal(size=(1, 8, 4, 4)))
    mask = torch.from_numpy(rng.random((1, 4, 4)) < 0.3)
    terms = detection_loss(logits, reg, heat, reg_t, mask, reg_weight=0.25)
    assert terms.total.item() == pytest.approx(terms.focal.item() + 0.25 * terms.regression.item())


def test_detection_loss_shape_checks():
    x = torch.zeros((1, 2, 4, 4), dtype=torch.float64)
    reg = torch.zeros((1, 8, 4, 4), dtype=torch.float64)
    mask = torch.zeros((1, 4, 4), dtype=torch.bool)
    with pytest.raises(ShapeMismatchError):
        detection_loss(x, reg, torch.zeros((1, 3, 4, 4), dtype=torch.float64), reg, mask)
    with pytest.raises(ShapeMismatchError):
        detection_loss(x, reg, x, reg, torch.zeros((1, 4, 5), dtype=torch.bool))


# ==================== GRADIENTS ====================

def test_finite_difference_on_quadratic():
    theta = torch.tensor([3.0, -1.5], dtype=torch.float64)
    numeric = finite_difference(lambda: (theta ** 2).sum(), theta, 1, eps=1e-4)
    assert numeric == pytest.approx(-3.0, abs=1e-9)
    assert theta.tolist() == [3.0, -1.5]


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(1.0, 0.0) == 1.0


def test_frozen_parameters_report_zero_gradients(config, examples):
    model = build_model(config, "independent")
    frozen = frozen_names(model, freeze=["fusion."])
    assert frozen == ["fusion.weight", "fusion.bias"]
    grads = compute_gradients(model, collate(examples[:4]), config.train, frozen)
    for name in frozen:
        assert torch.count_nonzero(grads[name]) == 0
    assert torch.count_nonzero(grads["head.heatmap.weight"]) > 0


def test_gates_only_freezes_everything_else(config):
    model = build_model(config, "constrained")
    frozen = frozen_names(model, gates_only=True)
    assert frozen and all(not n.startswith("gate.") for n in frozen)
    assert {n for n, _ in model.named_parameters()} - set(frozen) == {"gate.linear.weight", "gate.linear.bias"}


def test_backward_matches_autograd(config, examples):
    model = build_model(config, "independent")
    batch = collate(examples[:2])
    loss = batch_loss(model, batch, config.train).total
    grads = backward(loss, model)
    loss2 = batch_loss(model, batch, config.train).total
    loss2.backward()
    for name, p in model.named_parameters():
        torch.testing.assert_close(grads[name], p.grad)


@pytest.mark.parametrize("variant", ["independent", "constrained"])
def test_grad_check_full_network(config, examples, variant):
    model = build_model(config, variant)
    report = grad_check(model, collate(examples[:4]), eps=1e-4, n_random=50, seed=1, cfg=config.train)
    gate_scalars = sum(p.numel() for n, p in model.named_parameters() if n.startswith("gate."))
    assert len(report.checked) == gate_scalars + 50
    assert report.max_rel_error < 1e-3


def test_grad_check_fusion_subgraph(config, examples):
    # zero encoder kernels make the residual a frozen constant: gate, fusion, head and loss remain
    model = build_model(config, "independent")
    with torch.no_grad():
        model.encoder.conv1.weight.zero_()
        model.encoder.conv2.weight.zero_()
    frozen = frozen_names(model, freeze=["encoder."])
    report = grad_check(model, collate(examples[:4]), eps=1e-4, n_random=40, seed=2, cfg=config.train, frozen=frozen)
    assert all(not c["name"].startswith("encoder.") for c in report.checked)
    assert report.max_rel_error < 1e-5


# ==================== TRAINING ====================

def test_zero_learning_rate_is_a_dry_run(config, examples):
    model = build_model(config, "independent")
    before = _params(model)
    result = train(model, examples, TrainConfig(learning_rate=0.0, epochs=3, batch_size=4))
    for name, p in model.named_parameters():
        assert torch.equal(p, before[name])
    assert result.final_loss == result.initial_loss
    assert len(result.losses) == 3 and all(math.isfinite(l) for l in result.losses)


def test_gates_only_leaves_rest_bit_identical(config, examples):
    model = build_model(config, "independent")
    before = _params(model)
    result = train(model, examples, TrainConfig(learning_rate=0.05, epochs=2, batch_size=4), gates_only=True)
    assert set(result.trainable) == {"gate.linear.weight", "gate.linear.bias"}
    for name, p in model.named_parameters():
        if name.startswith("gate."):
            continue
        assert torch.equal(p, before[name]), name
    assert not torch.equal(model.gate.linear.bias, before["gate.linear.bias"])


def test_adam_moves_gates_by_the_gate_rate(config, examples):
    model = build_model(config, "independent")
    before = model.gate.linear.bias.detach().clone()
    cfg = TrainConfig(learning_rate=1e-2, gate_learning_rate=0.05, epochs=1, batch_size=len(examples))
    train(model, examples, cfg)
    step = (model.gate.linear.bias.detach() - before).abs()
    # a single Adam step moves each parameter with a non-negligible gradient by about the rate
    assert step.max() > 0.025
    assert step.max() <= 0.05 + 1e-9
    assert model.gate.linear.bias.grad is None


def test_sgd_gate_rate_is_independent_of_the_base_rate(config, examples):
    model = build_model(config, "independent")
    before = _params(model)
    cfg = TrainConfig(learning_rate=0.05, gate_optimizer="sgd", gate_learning_rate=0.0, epochs=1, batch_size=4)
    train(model, examples, cfg)
    assert torch.equal(model.gate.linear.weight, before["gate.linear.weight"])
    assert torch.equal(model.gate.linear.bias, before["gate.linear.bias"])
    assert not torch.equal(model.fusion.weight, before["fusion.weight"])


def test_sgd_gate_step_matches_the_gradient(config, examples):
    model = build_model(config, "constrained")
    batch = collate(examples)
    grads = compute_gradients(model, batch, TrainConfig())
    before = _params(model)
    cfg = TrainConfig(learning_rate=0.01, gate_optimizer="sgd", gate_learning_rate=3.0, epochs=1,
                      batch_size=len(examples))
    train(model, examples, cfg)
    torch.testing.assert_close(model.gate.linear.bias, before["gate.linear.bias"] - 3.0 * grads["gate.linear.bias"])
    torch.testing.assert_close(model.fusion.bias, before["fusion.bias"] - 0.01 * grads["fusion.bias"])


def test_gates_only_needs_a_learned_gate(config, examples):
    model = build_model(config, "agnostic")
    with pytest.raises(ConfigError, match="no gate parameters"):
        train(model, examples, config.train, gates_only=True)


def test_freeze_prefix(config, examples):
    model = build_model(config, "constrained")
    before = _params(model)
    train(model, examples, TrainConfig(learning_rate=0.05, epochs=1, batch_size=4, freeze=["head."]))
    for name, p in model.named_parameters():
        if name.startswith("head."):
            assert torch.equal(p, before[name])
    assert not torch.equal(model.fusion.weight, before["fusion.weight"])


def test_training_is_deterministic(config, examples):
    cfg = TrainConfig(learning_rate=0.02, epochs=2, batch_size=3, seed=5)
    a = train(build_model(config, "independent"), examples, cfg)
    b = train(build_model(config, "independent"), examples, cfg)
    assert a.losses == b.losses
    for (name, pa), (_, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(pa, pb), name


def test_on_epoch_callback(config, examples):
    seen = []
    result = train(build_model(config, "agnostic"), examples, TrainConfig(epochs=3, batch_size=8),
                   on_epoch=lambda epoch, loss: seen.append((epoch, loss)))
    assert [e for e, _ in seen] == [0, 1, 2]
    assert [l for _, l in seen] == result.losses


def test_non_finite_loss_aborts(config, examples):
    bad = examples[0]
    lidar = bad.lidar.clone()
    lidar[0, 0, 0] = float("nan")
    poisoned = [TrainingExample(bad.token, bad.context, lidar, bad.camera, bad.targets)] + list(examples[1:])
    with pytest.raises(NumericAbortError) as excinfo:
        train(build_model(config, "independent"), poisoned, TrainConfig(epochs=1, batch_size=4))
    assert excinfo.value.exit_code == 5


def test_empty_dataset(config):
    with pytest.raises(DatasetError):
        train(build_model(config, "independent"), [], config.train)


def test_dataset_loss_weights_batches_by_size(config, examples):
    model = build_model(config, "independent")
    cfg = TrainConfig(batch_size=3)
    with torch.no_grad():
        chunks = [examples[i:i + 3] for i in range(0, len(examples), 3)]
        expected = sum(float(batch_loss(model, collate(c), cfg).total) * len(c) for c in chunks) / len(examples)
    assert dataset_loss(model, examples, cfg) == pytest.approx(expected, rel=1e-12)


@pytest.mark.slow
def test_single_batch_overfits(config, examples):
    model = build_model(config, "independent")
    result = train(model, examples[:4], TrainConfig(learning_rate=0.05, epochs=100, batch_size=4))
    assert result.final_loss < 0.5 * result.initial_loss
