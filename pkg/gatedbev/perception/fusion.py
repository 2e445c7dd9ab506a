"""
Context-Gated Fusion Network

Weights each input channel of a lidar + camera BEV stack by a gate vector
computed from the operating context (night, rain), then fuses the gated
stack with a single 3x3 convolution:

    out_i = bias_i + sum_j G1(j) * weight(i, j) * input(j) + sum_k G2(k) * weight(i, k) * input(k)

Gates scale the inputs before the convolution, so a zero gate removes its
channel from the output exactly. Followed by a residual BEV encoder and a
center-heatmap detection head whose output is decoded into boxes.

Variants:
- constrained: one gate per modality, broadcast across its channels
- independent: one gate per channel
- agnostic / lidar_only / camera_only: fixed gates (1,1) / (1,0) / (0,1), no parameters
"""

import logging
import math
from typing import Dict, List, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import maximum_filter

from gatedbev.errors import ShapeMismatchError
from gatedbev.perception.adverseop_synth import Context
from gatedbev.perception.geometry import BEVGridSpec, Box3D, center_distance

logger = logging.getLogger(__name__)

LEARNED_VARIANTS = ("constrained", "independent")
FIXED_GATES = {
    "agnostic": (1.0, 1.0),
    "lidar_only": (1.0, 0.0),
    "camera_only": (0.0, 1.0),
}
REGRESSION_CHANNELS = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
LOG_SIZE_CLAMP = 5.0


class GateVectors(NamedTuple):
    g1: torch.Tensor  # (B, C1) lidar gates
    g2: torch.Tensor  # (B, C2) camera gates


def context_tensor(contexts: Sequence[Context], dtype=torch.float64) -> torch.Tensor:
    return torch.tensor([c.as_vector() for c in contexts], dtype=dtype)


# ==================== GATES ====================

class ContextGate(nn.Module):
    """Linear layer on the (is_night, is_rain) flags followed by a sigmoid."""

    def __init__(self, variant: str, c1: int, c2: int, bias_init: float = 2.0):
        super().__init__()
        if variant not in LEARNED_VARIANTS:
            raise ValueError(f"ContextGate variant must be one of {LEARNED_VARIANTS}, got {variant!r}")
        self.variant = variant
        self.c1, self.c2 = c1, c2
        gate_dim = 2 if variant == "constrained" else c1 + c2
        self.linear = nn.Linear(2, gate_dim, dtype=torch.float64)
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.fill_(bias_init)

    def forward(self, ctx: torch.Tensor) -> GateVectors:
        gates = torch.sigmoid(self.linear(ctx))
        if self.variant == "constrained":
            return GateVectors(gates[:, :1].expand(-1, self.c1), gates[:, 1:2].expand(-1, self.c2))
        return GateVectors(gates[:, :self.c1], gates[:, self.c1:])


class FixedGate(nn.Module):
    """Constant per-modality gates; holds no trainable parameters."""

    def __init__(self, variant: str, c1: int, c2: int):
        super().__init__()
        if variant not in FIXED_GATES:
            raise ValueError(f"FixedGate variant must be one of {tuple(FIXED_GATES)}, got {variant!r}")
        self.variant = variant
        self.c1, self.c2 = c1, c2
        self.lidar_value, self.camera_value = FIXED_GATES[variant]

    def forward(self, ctx: torch.Tensor) -> GateVectors:
        batch = ctx.shape[0]
        return GateVectors(
            torch.full((batch, self.c1), self.lidar_value, dtype=ctx.dtype),
            torch.full((batch, self.c2), self.camera_value, dtype=ctx.dtype),
        )


def build_gate(variant: str, c1: int, c2: int, bias_init: float = 2.0) -> nn.Module:
    if variant in LEARNED_VARIANTS:
        return ContextGate(variant, c1, c2, bias_init)
    return FixedGate(variant, c1, c2)


def gate_from_context(gate: nn.Module, ctx: Context) -> GateVectors:
    """Gate vectors of one context, without the batch axis."""
    with torch.no_grad():
        g1, g2 = gate(context_tensor([ctx]))
    return GateVectors(g1[0], g2[0])


# ==================== GATED CONVOLUTION ====================

def gated_conv(f1: torch.Tensor, f2: torch.Tensor, g1: torch.Tensor, g2: torch.Tensor,
               weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """
    Gated 3x3 cross-correlation over the concatenated modality channels.

    The gates scale input channels, so a batch sharing one context folds them
    into the kernel; mixed-context batches scale the feature maps.

    Args:
        f1: (B, C1, H, W) or (C1, H, W) lidar features
        f2: (B, C2, H, W) or (C2, H, W) camera features
        g1: (B, C1) or (C1,) lidar gates
        g2: (B, C2) or (C2,) camera gates
        weight: (C_out, C1 + C2, 3, 3)
        bias: (C_out,)

    Returns:
        (B, C_out, H, W) or (C_out, H, W), matching the input layout
    """
    unbatched = f1.dim() == 3
    if unbatched:
        f1, f2, g1, g2 = f1[None], f2[None], g1[None], g2[None]
    if f1.dim() != 4 or f2.dim() != 4:
        raise ShapeMismatchError(f"Expected 4-D feature maps, got {tuple(f1.shape)} and {tuple(f2.shape)}")
    if f1.shape[0] != f2.shape[0] or f1.shape[2:] != f2.shape[2:]:
        raise ShapeMismatchError(
            f"Lidar features {tuple(f1.shape)} and camera features {tuple(f2.shape)} disagree on batch or grid"
        )
    if g1.shape != f1.shape[:2] or g2.shape != f2.shape[:2]:
        raise ShapeMismatchError(
            f"Gates {tuple(g1.shape)}/{tuple(g2.shape)} do not match features "
            f"{tuple(f1.shape)}/{tuple(f2.shape)}"
        )
    c_in = f1.shape[1] + f2.shape[1]
    if weight.dim() != 4 or weight.shape[1] != c_in or weight.shape[2:] != (3, 3):
        raise ShapeMismatchError(
            f"Kernel {tuple(weight.shape)} does not fit {c_in} input channels with a 3x3 window"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(f"Bias {tuple(bias.shape)} does not match kernel {tuple(weight.shape)}")

    if shares_gates(g1, g2):
        # one gate vector for the whole batch: scale the kernel's input channels, not the maps
        scale = torch.cat([g1[0], g2[0]])
        out = F.conv2d(torch.cat([f1, f2], dim=1), weight * scale[None, :, None, None], bias, stride=1, padding=1)
    else:
        gated = torch.cat([f1 * g1[:, :, None, None], f2 * g2[:, :, None, None]], dim=1)
        out = F.conv2d(gated, weight, bias, stride=1, padding=1)
    return out[0] if unbatched else out


def shares_gates(g1: torch.Tensor, g2: torch.Tensor) -> bool:
    """True when every batch row carries the same gate vectors."""
    if g1.shape[0] == 1:
        return True
    return bool((g1 == g1[:1]).all()) and bool((g2 == g2[:1]).all())


# ==================== ENCODER & HEAD ====================

class BEVEncoder(nn.Module):
    """Two 3x3 conv + ReLU layers with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, dtype=torch.float64)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, dtype=torch.float64)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.residual(x)


def bev_encoder(fused: torch.Tensor, encoder: BEVEncoder) -> torch.Tensor:
    unbatched = fused.dim() == 3
    out = encoder(fused[None] if unbatched else fused)
    return out[0] if unbatched else out


class DetectionHead(nn.Module):
    def __init__(self, channels: int, num_classes: int, heatmap_bias_init: float = -2.19):
        super().__init__()
        self.heatmap = nn.Conv2d(channels, num_classes, 3, padding=1, dtype=torch.float64)
        self.regression = nn.Conv2d(channels, REGRESSION_CHANNELS, 3, padding=1, dtype=torch.float64)
        with torch.no_grad():
            self.heatmap.bias.fill_(heatmap_bias_init)

    def forward(self, x: torch.Tensor):
        """Heatmap logits and raw regression maps."""
        return self.heatmap(x), self.regression(x)


def detect_forward(encoded: torch.Tensor, head: DetectionHead):
    """(heatmaps in (0, 1), regression) for one encoded map or a batch."""
    unbatched = encoded.dim() == 3
    logits, regression = head(encoded[None] if unbatched else encoded)
    heatmaps = torch.sigmoid(logits)
    if unbatched:
        return heatmaps[0], regression[0]
    return heatmaps, regression


# ==================== MODEL ====================

class GatedFusionDetector(nn.Module):
    """
    Complete BEV detector: context gate, gated fusion conv, encoder, head.

    Parameter names are stable and used by the checkpoint format and the
    freeze lists (`gate.*`, `fusion.*`, `encoder.*`, `head.*`).
    """

    def __init__(self, c1: int, c2: int, num_classes: int, c_out: int = 16, variant: str = "independent",
                 gate_bias_init: float = 2.0, heatmap_bias_init: float = -2.19):
        super().__init__()
        self.c1, self.c2, self.num_classes, self.c_out = c1, c2, num_classes, c_out
        self.variant = variant
        self.gate = build_gate(variant, c1, c2, gate_bias_init)
        self.fusion = nn.Conv2d(c1 + c2, c_out, 3, padding=1, dtype=torch.float64)
        self.encoder = BEVEncoder(c_out)
        self.head = DetectionHead(c_out, num_classes, heatmap_bias_init)

    def replace_gate(self, variant: str, bias_init: float = 2.0) -> None:
        """Swap in a freshly initialised gate; the rest of the network is untouched."""
        self.variant = variant
        self.gate = build_gate(variant, self.c1, self.c2, bias_init)

    def gates(self, ctx: torch.Tensor) -> GateVectors:
        return self.gate(ctx)

    def forward(self, f1: torch.Tensor, f2: torch.Tensor, ctx: torch.Tensor):
        """Batched forward: heatmap logits (B, K, H, W) and regression (B, 8, H, W)."""
        g1, g2 = self.gate(ctx)
        fused = gated_conv(f1, f2, g1, g2, self.fusion.weight, self.fusion.bias)
        return self.head(self.encoder(fused))

    def predict(self, f1: torch.Tensor, f2: torch.Tensor, ctx: torch.Tensor):
        """Inference forward with sigmoid heatmaps."""
        with torch.no_grad():
            logits, regression = self.forward(f1, f2, ctx)
        return torch.sigmoid(logits), regression


# ==================== DECODING ====================

def _nms_by_distance(candidates: List[Box3D], radius: float) -> List[Box3D]:
    """Greedy suppression; candidates must already be sorted by descending score."""
    kept: List[Box3D] = []
    for box in candidates:
        if all(center_distance(box, k) > radius for k in kept):
            kept.append(box)
    return kept


def decode_detections(heatmaps, regression, grid: BEVGridSpec, score_thresh: float = 0.3,
                      nms_radius_m: float = 2.0, max_detections: int = 50) -> List[Box3D]:
    """
    Turn one sample's head output into scored boxes.

    Args:
        heatmaps: (K, H, W) post-sigmoid scores
        regression: (8, H, W) dx, dy (cell units), z, log l, log w, log h, sin yaw, cos yaw
        grid: BEV grid the maps live on

    Returns:
        Boxes sorted by descending score, per-class NMS applied, at most max_detections
    """
    heat = heatmaps.detach().cpu().numpy() if torch.is_tensor(heatmaps) else np.asarray(heatmaps)
    reg = regression.detach().cpu().numpy() if torch.is_tensor(regression) else np.asarray(regression)
    heat = heat.astype(np.float64)
    reg = reg.astype(np.float64)

    peaks = (heat == maximum_filter(heat, size=(1, 3, 3), mode="constant", cval=0.0)) & (heat > score_thresh)
    detections: List[Box3D] = []
    for k in range(heat.shape[0]):
        iy, ix = np.nonzero(peaks[k])
        scores = heat[k, iy, ix]
        order = np.argsort(-scores, kind="stable")
        candidates = []
        for idx in order:
            y, x = int(iy[idx]), int(ix[idx])
            cx, cy = grid.cell_center(y, x)
            dx, dy, z, log_l, log_w, log_h, s, c = reg[:, y, x]
            extent = np.exp(np.clip([log_l, log_w, log_h], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP))
            candidates.append(Box3D(
                center=(cx + dx * grid.cell_size, cy + dy * grid.cell_size, float(z)),
                extent=tuple(float(e) for e in extent),
                yaw=math.atan2(s, c),
                class_id=k,
                score=float(min(1.0, max(0.0, scores[idx]))),
            ))
        kept = _nms_by_distance(candidates, nms_radius_m)
        logger.debug(f"Class {k}: {len(candidates)} peaks, {len(kept)} after NMS")
        detections.extend(kept)

    detections.sort(key=lambda b: -b.score)
    return detections[:max_detections]


def mean_gates(model: GatedFusionDetector, contexts: Sequence[Context]) -> Dict[str, Dict[str, float]]:
    """Mean lidar/camera gate value per context bucket."""
    out = {}
    for ctx in contexts:
        g1, g2 = gate_from_context(model.gate, ctx)
        out[ctx.bucket] = {"lidar": float(g1.mean()), "camera": float(g2.mean())}
    return out
