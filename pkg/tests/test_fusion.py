import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from gatedbev.errors import ShapeMismatchError
from gatedbev.perception.adverseop_synth import ALL_CONTEXTS, Context
from gatedbev.perception.fusion import (
    FIXED_GATES, REGRESSION_CHANNELS, BEVEncoder, ContextGate, DetectionHead, FixedGate, GatedFusionDetector,
    bev_encoder, context_tensor, decode_detections, detect_forward, gate_from_context, gated_conv, mean_gates,
    shares_gates,
)
from gatedbev.perception.geometry import BEVGridSpec, center_distance

GRID = BEVGridSpec()


def _rand(generator, *shape):
    return torch.rand(shape, generator=generator, dtype=torch.float64)


def _conv_oracle(f1, f2, g1, g2, weight, bias):
    """Nested-loop zero-padded 3x3 cross-correlation of the gated stack."""
    stack = np.concatenate([f1 * g1[:, None, None], f2 * g2[:, None, None]], axis=0)
    c_in, h, w = stack.shape
    padded = np.zeros((c_in, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = stack
    out = np.zeros((weight.shape[0], h, w))
    for i in range(weight.shape[0]):
        for y in range(h):
            for x in range(w):
                acc = bias[i]
                for j in range(c_in):
                    for dy in range(3):
                        for dx in range(3):
                            acc += weight[i, j, dy, dx] * padded[j, y + dy, x + dx]
                out[i, y, x] = acc
    return out


# ==================== GATED CONVOLUTION ====================

@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31),
)
@settings(max_examples=100, deadline=None)
def test_gated_conv_matches_loop_oracle(c1, c2, c_out, h, w, seed):
    gen = torch.Generator().manual_seed(seed)
    f1, f2 = _rand(gen, c1, h, w), _rand(gen, c2, h, w)
    g1, g2 = _rand(gen, c1), _rand(gen, c2)
    weight, bias = _rand(gen, c_out, c1 + c2, 3, 3) - 0.5, _rand(gen, c_out) - 0.5

    out = gated_conv(f1, f2, g1, g2, weight, bias)
    expected = _conv_oracle(*(t.numpy() for t in (f1, f2, g1, g2, weight, bias)))
    assert out.shape == (c_out, h, w)
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-10)


def test_gated_conv_hand_case():
    ones = torch.ones((1, 3, 3), dtype=torch.float64)
    weight = torch.ones((1, 2, 3, 3), dtype=torch.float64)
    out = gated_conv(ones, ones, torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64),
                     weight, torch.zeros(1, dtype=torch.float64))
    assert out[0, 1, 1].item() == 13.5
    assert out[0, 0, 0].item() == 6.0
    assert out[0, 0, 1].item() == 9.0


def test_batched_matches_unbatched():
    gen = torch.Generator().manual_seed(3)
    f1, f2 = _rand(gen, 2, 4, 5, 6), _rand(gen, 2, 3, 5, 6)
    g1, g2 = _rand(gen, 2, 4), _rand(gen, 2, 3)
    weight, bias = _rand(gen, 5, 7, 3, 3), _rand(gen, 5)
    batched = gated_conv(f1, f2, g1, g2, weight, bias)
    for b in range(2):
        torch.testing.assert_close(batched[b], gated_conv(f1[b], f2[b], g1[b], g2[b], weight, bias))


def test_zero_camera_gate_removes_camera_exactly():
    gen = torch.Generator().manual_seed(0)
    f1 = _rand(gen, 3, 8, 8)
    g1 = _rand(gen, 3)
    weight, bias = _rand(gen, 4, 5, 3, 3), _rand(gen, 4)
    zero = torch.zeros(2, dtype=torch.float64)
    a = gated_conv(f1, _rand(gen, 2, 8, 8), g1, zero, weight, bias)
    b = gated_conv(f1, _rand(gen, 2, 8, 8), g1, zero, weight, bias)
    assert torch.equal(a, b)

    lidar_only = F.conv2d((f1 * g1[:, None, None])[None], weight[:, :3], bias, padding=1)[0]
    torch.testing.assert_close(a, lidar_only)


def test_zero_lidar_gate_removes_lidar_exactly():
    gen = torch.Generator().manual_seed(1)
    f2, g2 = _rand(gen, 2, 6, 6), _rand(gen, 2)
    weight, bias = _rand(gen, 3, 5, 3, 3), _rand(gen, 3)
    zero = torch.zeros(3, dtype=torch.float64)
    a = gated_conv(_rand(gen, 3, 6, 6), f2, zero, g2, weight, bias)
    b = gated_conv(_rand(gen, 3, 6, 6), f2, zero, g2, weight, bias)
    assert torch.equal(a, b)


def test_unit_gates_equal_plain_conv():
    gen = torch.Generator().manual_seed(2)
    f1, f2 = _rand(gen, 3, 7, 5), _rand(gen, 4, 7, 5)
    weight, bias = _rand(gen, 2, 7, 3, 3), _rand(gen, 2)
    out = gated_conv(f1, f2, torch.ones(3, dtype=torch.float64), torch.ones(4, dtype=torch.float64), weight, bias)
    plain = F.conv2d(torch.cat([f1, f2])[None], weight, bias, padding=1)[0]
    torch.testing.assert_close(out, plain)


@given(st.floats(0.0, 4.0), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_output_is_linear_in_gates(scale, seed):
    gen = torch.Generator().manual_seed(seed)
    f1, f2 = _rand(gen, 2, 4, 4), _rand(gen, 2, 4, 4)
    g1, g2 = _rand(gen, 2), _rand(gen, 2)
    weight, bias = _rand(gen, 3, 4, 3, 3), _rand(gen, 3)
    base = gated_conv(f1, f2, g1, g2, weight, bias) - bias[:, None, None]
    scaled = gated_conv(f1, f2, scale * g1, scale * g2, weight, bias) - bias[:, None, None]
    torch.testing.assert_close(scaled, scale * base, atol=1e-10, rtol=1e-10)


def test_channel_permutation_invariance():
    gen = torch.Generator().manual_seed(4)
    f1, f2 = _rand(gen, 4, 5, 5), _rand(gen, 3, 5, 5)
    g1, g2 = _rand(gen, 4), _rand(gen, 3)
    weight, bias = _rand(gen, 2, 7, 3, 3), _rand(gen, 2)
    perm = torch.tensor([2, 0, 3, 1])
    permuted_weight = torch.cat([weight[:, :4][:, perm], weight[:, 4:]], dim=1)
    torch.testing.assert_close(
        gated_conv(f1[perm], f2, g1[perm], g2, permuted_weight, bias),
        gated_conv(f1, f2, g1, g2, weight, bias),
    )


def test_shape_mismatches_raise():
    f1 = torch.zeros((2, 4, 4), dtype=torch.float64)
    f2 = torch.zeros((3, 4, 4), dtype=torch.float64)
    g1, g2 = torch.ones(2, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    weight, bias = torch.zeros((1, 5, 3, 3), dtype=torch.float64), torch.zeros(1, dtype=torch.float64)

    with pytest.raises(ShapeMismatchError, match="disagree"):
        gated_conv(f1, torch.zeros((3, 5, 4), dtype=torch.float64), g1, g2, weight, bias)
    with pytest.raises(ShapeMismatchError, match="Gates"):
        gated_conv(f1, f2, torch.ones(3, dtype=torch.float64), g2, weight, bias)
    with pytest.raises(ShapeMismatchError, match="Kernel"):
        gated_conv(f1, f2, g1, g2, torch.zeros((1, 4, 3, 3), dtype=torch.float64), bias)
    with pytest.raises(ShapeMismatchError, match="Bias"):
        gated_conv(f1, f2, g1, g2, weight, torch.zeros(2, dtype=torch.float64))


# ==================== GATES ====================

def test_context_gate_starts_open_everywhere():
    gate = ContextGate("independent", 4, 3)
    for ctx in ALL_CONTEXTS:
        g1, g2 = gate_from_context(gate, ctx)
        assert g1.shape == (4,) and g2.shape == (3,)
        torch.testing.assert_close(torch.cat([g1, g2]), torch.full((7,), 1 / (1 + math.exp(-2.0)), dtype=torch.float64))


def test_constrained_gate_is_uniform_per_modality():
    gate = ContextGate("constrained", 4, 3)
    with torch.no_grad():
        gate.linear.weight.copy_(torch.tensor([[1.0, -2.0], [-0.5, 3.0]], dtype=torch.float64))
    g1, g2 = gate_from_context(gate, Context(is_night=True, is_rain=True))
    assert torch.all(g1 == g1[0]) and torch.all(g2 == g2[0])
    assert g1[0].item() == pytest.approx(1 / (1 + math.exp(-(2.0 + 1.0 - 2.0))))
    assert g2[0].item() == pytest.approx(1 / (1 + math.exp(-(2.0 - 0.5 + 3.0))))


def test_constrained_is_a_special_case_of_independent():
    gen = torch.Generator().manual_seed(9)
    constrained = ContextGate("constrained", 3, 2)
    independent = ContextGate("independent", 3, 2)
    with torch.no_grad():
        constrained.linear.weight.copy_(_rand(gen, 2, 2) - 0.5)
        constrained.linear.bias.copy_(_rand(gen, 2))
        rows = torch.tensor([0, 0, 0, 1, 1])
        independent.linear.weight.copy_(constrained.linear.weight[rows])
        independent.linear.bias.copy_(constrained.linear.bias[rows])

    ctx = context_tensor(ALL_CONTEXTS)
    for a, b in zip(constrained(ctx), independent(ctx)):
        torch.testing.assert_close(a, b)


@pytest.mark.parametrize("variant", sorted(FIXED_GATES))
def test_fixed_gates(variant):
    gate = FixedGate(variant, 3, 2)
    assert list(gate.parameters()) == []
    g1, g2 = gate(context_tensor(ALL_CONTEXTS))
    lidar, camera = FIXED_GATES[variant]
    assert torch.all(g1 == lidar) and torch.all(g2 == camera)
    assert g1.shape == (4, 3) and g2.shape == (4, 2)


def test_unknown_variants_rejected():
    with pytest.raises(ValueError):
        ContextGate("agnostic", 2, 2)
    with pytest.raises(ValueError):
        FixedGate("independent", 2, 2)


# ==================== ENCODER & HEAD ====================

def test_encoder_with_zero_weights_is_identity():
    encoder = BEVEncoder(4)
    for p in encoder.parameters():
        torch.nn.init.zeros_(p)
    x = _rand(torch.Generator().manual_seed(0), 4, 6, 6)
    torch.testing.assert_close(bev_encoder(x, encoder), x)


def test_encoder_residual_never_decreases_input():
    encoder = BEVEncoder(3)
    x = _rand(torch.Generator().manual_seed(1), 2, 3, 5, 5)
    with torch.no_grad():
        assert torch.all(bev_encoder(x, encoder) >= x)


def test_head_initial_heatmap_prior():
    head = DetectionHead(4, 3)
    torch.nn.init.zeros_(head.heatmap.weight)
    heatmaps, regression = detect_forward(torch.zeros((4, 5, 6), dtype=torch.float64), head)
    assert heatmaps.shape == (3, 5, 6)
    assert regression.shape == (REGRESSION_CHANNELS, 5, 6)
    torch.testing.assert_close(heatmaps, torch.full_like(heatmaps, 1 / (1 + math.exp(2.19))))


def test_detector_parameter_names_and_output_shapes():
    model = GatedFusionDetector(c1=10, c2=12, num_classes=4, c_out=6, variant="independent")
    prefixes = {name.split(".")[0] for name, _ in model.named_parameters()}
    assert prefixes == {"gate", "fusion", "encoder", "head"}

    gen = torch.Generator().manual_seed(0)
    logits, regression = model(_rand(gen, 2, 10, 8, 8), _rand(gen, 2, 12, 8, 8), context_tensor(ALL_CONTEXTS[:2]))
    assert logits.shape == (2, 4, 8, 8)
    assert regression.shape == (2, REGRESSION_CHANNELS, 8, 8)


def test_fixed_variant_has_no_gate_parameters():
    model = GatedFusionDetector(c1=2, c2=2, num_classes=1, c_out=2, variant="agnostic")
    assert not any(name.startswith("gate.") for name, _ in model.named_parameters())


def test_replace_gate_keeps_the_rest():
    model = GatedFusionDetector(c1=2, c2=3, num_classes=1, c_out=2, variant="agnostic")
    fusion_before = model.fusion.weight.detach().clone()
    model.replace_gate("constrained")
    assert model.variant == "constrained"
    assert isinstance(model.gate, ContextGate)
    assert torch.equal(model.fusion.weight, fusion_before)


def test_mean_gates_per_bucket():
    model = GatedFusionDetector(c1=2, c2=3, num_classes=1, c_out=2, variant="lidar_only")
    gates = mean_gates(model, ALL_CONTEXTS)
    assert set(gates) == {c.bucket for c in ALL_CONTEXTS}
    assert all(g == {"lidar": 1.0, "camera": 0.0} for g in gates.values())


# ==================== DECODING ====================

def _regression(h, w):
    reg = np.zeros((REGRESSION_CHANNELS, h, w))
    reg[3:6] = np.log([[[4.0]], [[2.0]], [[1.5]]])
    reg[7] = 1.0  # cos yaw
    return reg


def test_decode_single_peak():
    heat = np.zeros((2, GRID.height, GRID.width))
    heat[1, 40, 10] = 0.9
    reg = _regression(GRID.height, GRID.width)
    reg[0, 40, 10], reg[1, 40, 10], reg[2, 40, 10] = 0.25, -0.5, 0.8
    reg[6, 40, 10], reg[7, 40, 10] = 1.0, 0.0

    (box,) = decode_detections(heat, reg, GRID)
    assert box.class_id == 1
    assert box.score == pytest.approx(0.9)
    assert box.center == pytest.approx((-32 + 10.5 + 0.25, -32 + 40.5 - 0.5, 0.8))
    assert box.extent == pytest.approx((4.0, 2.0, 1.5))
    assert box.yaw == pytest.approx(math.pi / 2)


def test_decode_threshold_is_strict():
    heat = np.zeros((1, GRID.height, GRID.width))
    heat[0, 5, 5] = 0.3
    assert decode_detections(heat, _regression(GRID.height, GRID.width), GRID, score_thresh=0.3) == []


def test_decode_clamps_log_sizes():
    heat = np.zeros((1, GRID.height, GRID.width))
    heat[0, 5, 5] = 0.8
    reg = _regression(GRID.height, GRID.width)
    reg[3:6, 5, 5] = [50.0, -50.0, 0.0]
    (box,) = decode_detections(heat, reg, GRID)
    assert box.extent == pytest.approx((math.exp(5.0), math.exp(-5.0), 1.0))


def test_decode_nms_is_per_class():
    heat = np.zeros((2, GRID.height, GRID.width))
    heat[0, 20, 20] = 0.9
    heat[0, 20, 22] = 0.8  # 2 m away: suppressed at radius 2
    heat[1, 20, 22] = 0.7  # other class survives
    boxes = decode_detections(heat, _regression(GRID.height, GRID.width), GRID, nms_radius_m=2.0)
    assert [(b.class_id, round(b.score, 3)) for b in boxes] == [(0, 0.9), (1, 0.7)]


def test_decode_caps_detection_count():
    heat = np.zeros((1, GRID.height, GRID.width))
    heat[0, ::8, ::8] = np.linspace(0.5, 0.99, 64).reshape(8, 8)
    boxes = decode_detections(heat, _regression(GRID.height, GRID.width), GRID, max_detections=10)
    assert len(boxes) == 10
    assert [b.score for b in boxes] == sorted((b.score for b in boxes), reverse=True)
    assert boxes[0].score == pytest.approx(0.99)


@pytest.mark.parametrize("seed", range(4))
def test_decode_matches_peak_and_nms_oracle(seed):
    grid = BEVGridSpec(x_range=(-8.0, 8.0), y_range=(-8.0, 8.0))
    rng = np.random.default_rng(seed)
    heat = rng.random((2, grid.height, grid.width))
    reg = _regression(grid.height, grid.width)
    boxes = decode_detections(heat, reg, grid, score_thresh=0.5, nms_radius_m=2.5, max_detections=1000)

    expected = []
    for k in range(2):
        peaks = []
        for y in range(grid.height):
            for x in range(grid.width):
                window = heat[k, max(0, y - 1):y + 2, max(0, x - 1):x + 2]
                if heat[k, y, x] > 0.5 and heat[k, y, x] >= window.max():
                    peaks.append((heat[k, y, x], grid.cell_center(y, x)))
        kept = []
        for score, (cx, cy) in sorted(peaks, reverse=True):
            if all(math.hypot(cx - kx, cy - ky) > 2.5 for _, (kx, ky) in kept):
                kept.append((score, (cx, cy)))
        expected.extend((k, score, c) for score, c in kept)

    expected.sort(key=lambda e: -e[1])
    assert len(boxes) == len(expected)
    for box, (k, score, (cx, cy)) in zip(boxes, expected):
        assert box.class_id == k
        assert box.score == pytest.approx(score)
        assert box.center[:2] == pytest.approx((cx, cy))

    for a in boxes:
        for b in boxes:
            if a is not b and a.class_id == b.class_id:
                assert center_distance(a, b) > 2.5


def test_decode_accepts_tensors():
    heat = torch.zeros((1, GRID.height, GRID.width), dtype=torch.float64)
    heat[0, 3, 4] = 0.95
    reg = torch.from_numpy(_regression(GRID.height, GRID.width))
    (box,) = decode_detections(heat, reg, GRID)
    assert box.score == pytest.approx(0.95)


def _shift_oracle(stack, weight, bias):
    """Zero-padded 3x3 cross-correlation as a sum of nine shifted windows."""
    c_in, h, w = stack.shape
    padded = np.zeros((c_in, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = stack
    out = np.broadcast_to(bias[:, None, None], (weight.shape[0], h, w)).copy()
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", weight[:, :, dy, dx], padded[:, dy:dy + h, dx:dx + w])
    return out


@given(st.integers(1, 8), st.integers(1, 8), st.integers(4, 16), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_unit_gates_match_shift_oracle(c1, c2, size, seed):
    gen = torch.Generator().manual_seed(seed)
    f1, f2 = _rand(gen, c1, size, size), _rand(gen, c2, size, size)
    weight, bias = _rand(gen, 4, c1 + c2, 3, 3) - 0.5, _rand(gen, 4) - 0.5
    out = gated_conv(f1, f2, torch.ones(c1, dtype=torch.float64), torch.ones(c2, dtype=torch.float64), weight, bias)
    expected = _shift_oracle(torch.cat([f1, f2]).numpy(), weight.numpy(), bias.numpy())
    assert np.max(np.abs(out.numpy() - expected)) < 1e-9


@given(st.integers(1, 8), st.integers(1, 8), st.integers(4, 12), st.booleans(), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_closed_gate_ignores_its_modality(c1, c2, size, close_lidar, seed):
    gen = torch.Generator().manual_seed(seed)
    f1, f2 = _rand(gen, c1, size, size), _rand(gen, c2, size, size)
    g1, g2 = _rand(gen, c1), _rand(gen, c2)
    weight, bias = _rand(gen, 3, c1 + c2, 3, 3), _rand(gen, 3)
    if close_lidar:
        g1 = torch.zeros_like(g1)
        f1_other, f2_other = 100.0 * _rand(gen, c1, size, size), f2
    else:
        g2 = torch.zeros_like(g2)
        f1_other, f2_other = f1, 100.0 * _rand(gen, c2, size, size)
    assert torch.equal(
        gated_conv(f1, f2, g1, g2, weight, bias),
        gated_conv(f1_other, f2_other, g1, g2, weight, bias),
    )


def test_shares_gates():
    g = torch.tensor([[0.2, 0.7]], dtype=torch.float64)
    assert shares_gates(g, g)
    assert shares_gates(g.repeat(3, 1), g.repeat(3, 1))
    mixed = torch.tensor([[0.2, 0.7], [0.2, 0.6]], dtype=torch.float64)
    assert not shares_gates(mixed, g.repeat(2, 1))
    assert not shares_gates(g.repeat(2, 1), mixed)


def test_shared_context_batch_matches_feature_scaling():
    gen = torch.Generator().manual_seed(8)
    f1, f2 = _rand(gen, 3, 4, 6, 6), _rand(gen, 3, 2, 6, 6)
    g1, g2 = _rand(gen, 1, 4).repeat(3, 1), _rand(gen, 1, 2).repeat(3, 1)
    weight, bias = _rand(gen, 5, 6, 3, 3), _rand(gen, 5)
    scaled_maps = torch.cat([f1 * g1[:, :, None, None], f2 * g2[:, :, None, None]], dim=1)
    torch.testing.assert_close(
        gated_conv(f1, f2, g1, g2, weight, bias),
        F.conv2d(scaled_maps, weight, bias, padding=1),
        atol=1e-12, rtol=1e-12,
    )


def test_folded_gates_carry_gradients():
    gen = torch.Generator().manual_seed(9)
    f1, f2 = _rand(gen, 1, 2, 5, 5), _rand(gen, 1, 3, 5, 5)
    weight, bias = _rand(gen, 2, 5, 3, 3), _rand(gen, 2)
    g1 = _rand(gen, 1, 2).requires_grad_()
    g2 = _rand(gen, 1, 3).requires_grad_()
    gated_conv(f1, f2, g1, g2, weight, bias).sum().backward()

    # output is linear in each gate: d(sum)/dg_c is the summed conv of channel c alone
    stack = torch.cat([f1, f2], dim=1)
    direct = torch.stack([F.conv2d(stack[:, c:c + 1], weight[:, c:c + 1], padding=1).sum() for c in range(5)])
    torch.testing.assert_close(torch.cat([g1.grad[0], g2.grad[0]]), direct)
