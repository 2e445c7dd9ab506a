"""
Training

- Center-heatmap / regression target construction
- Penalty-reduced focal loss + masked L1 regression loss
- Reverse-mode gradients (torch autograd, float64) with frozen-parameter masking
- SGD training (Adam or SGD for the gate network) with a fixed shuffle schedule, including the
  gates-only transfer schedule
- Central finite-difference gradient verification
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from gatedbev.config.settings import TrainConfig
from gatedbev.errors import ConfigError, DatasetError, NumericAbortError, ShapeMismatchError
from gatedbev.perception.adverseop_synth import Context
from gatedbev.perception.fusion import REGRESSION_CHANNELS, GatedFusionDetector, context_tensor
from gatedbev.perception.geometry import BEVGridSpec, Box3D

logger = logging.getLogger(__name__)

GATE_PREFIX = "gate."


# ==================== TARGETS ====================

@dataclass(frozen=True, eq=False)
class Targets:
    heatmap: np.ndarray     # (K, H, W) in [0, 1]
    regression: np.ndarray  # (8, H, W), defined where mask is set
    mask: np.ndarray        # (H, W) bool


def splat_sigma(box: Box3D, grid: BEVGridSpec) -> float:
    return max(max(box.extent) / (3.0 * grid.cell_size), 1.0)


def make_targets(boxes: Sequence[Box3D], grid: BEVGridSpec, num_classes: int) -> Targets:
    H, W = grid.height, grid.width
    heatmap = np.zeros((num_classes, H, W), dtype=np.float64)
    regression = np.zeros((REGRESSION_CHANNELS, H, W), dtype=np.float64)
    mask = np.zeros((H, W), dtype=bool)
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]

    for box in boxes:
        iy, ix = grid.cell_index(box.center[0], box.center[1])
        iy, ix = int(iy), int(ix)
        sigma = splat_sigma(box, grid)
        d2 = (rows - iy) ** 2 + (cols - ix) ** 2
        heatmap[box.class_id] = np.maximum(heatmap[box.class_id], np.exp(-d2 / (2.0 * sigma ** 2)))

        cx, cy = grid.cell_center(iy, ix)
        regression[:, iy, ix] = (
            (box.center[0] - cx) / grid.cell_size,
            (box.center[1] - cy) / grid.cell_size,
            box.center[2],
            math.log(box.extent[0]),
            math.log(box.extent[1]),
            math.log(box.extent[2]),
            math.sin(box.yaw),
            math.cos(box.yaw),
        )
        mask[iy, ix] = True
    return Targets(heatmap=heatmap, regression=regression, mask=mask)


# ==================== LOSS ====================

class LossTerms(NamedTuple):
    total: torch.Tensor
    focal: torch.Tensor
    regression: torch.Tensor


def focal_loss(heat_logits: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced focal loss on logits, normalised by the number of peak cells."""
    log_p = F.logsigmoid(heat_logits)
    log_not_p = F.logsigmoid(-heat_logits)
    p = torch.sigmoid(heat_logits)
    positive = target == 1.0
    pos_term = (1.0 - p) ** alpha * log_p
    neg_term = (1.0 - target) ** beta * p ** alpha * log_not_p
    num_pos = positive.sum().clamp(min=1)
    return -(torch.where(positive, pos_term, neg_term)).sum() / num_pos


def regression_l1(regression: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the 8 channels of the masked cells."""
    m = mask[:, None].to(regression.dtype)
    cells = mask.sum()
    if cells == 0:
        return regression.sum() * 0.0
    return ((regression - target).abs() * m).sum() / (cells * regression.shape[1])


def detection_loss(heat_logits: torch.Tensor, regression: torch.Tensor, heat_target: torch.Tensor,
                   reg_target: torch.Tensor, mask: torch.Tensor, alpha: float = 2.0, beta: float = 4.0,
                   reg_weight: float = 0.25) -> LossTerms:
    """
    Focal + weighted L1 on a batch.

    Args:
        heat_logits: (B, K, H, W)
        regression: (B, 8, H, W)
        heat_target: (B, K, H, W)
        reg_target: (B, 8, H, W)
        mask: (B, H, W) bool
    """
    if heat_logits.shape != heat_target.shape:
        raise ShapeMismatchError(
            f"Heatmap prediction {tuple(heat_logits.shape)} vs target {tuple(heat_target.shape)}"
        )
    if regression.shape != reg_target.shape or mask.shape != (regression.shape[0], *regression.shape[2:]):
        raise ShapeMismatchError(
            f"Regression prediction {tuple(regression.shape)} vs target {tuple(reg_target.shape)} "
            f"with mask {tuple(mask.shape)}"
        )
    focal = focal_loss(heat_logits, heat_target, alpha, beta)
    reg = regression_l1(regression, reg_target, mask)
    return LossTerms(total=focal + reg_weight * reg, focal=focal, regression=reg)


# ==================== DATA ====================

@dataclass(frozen=True, eq=False)
class TrainingExample:
    token: str
    context: Context
    lidar: torch.Tensor   # (C1, H, W)
    camera: torch.Tensor  # (C2, H, W), preconditioned
    targets: Targets


class Batch(NamedTuple):
    lidar: torch.Tensor
    camera: torch.Tensor
    context: torch.Tensor
    heatmap: torch.Tensor
    regression: torch.Tensor
    mask: torch.Tensor


def collate(examples: Sequence[TrainingExample]) -> Batch:
    return Batch(
        lidar=torch.stack([e.lidar for e in examples]),
        camera=torch.stack([e.camera for e in examples]),
        context=context_tensor([e.context for e in examples]),
        heatmap=torch.from_numpy(np.stack([e.targets.heatmap for e in examples])),
        regression=torch.from_numpy(np.stack([e.targets.regression for e in examples])),
        mask=torch.from_numpy(np.stack([e.targets.mask for e in examples])),
    )


def batch_loss(model: GatedFusionDetector, batch: Batch, cfg: TrainConfig = TrainConfig()) -> LossTerms:
    heat_logits, regression = model(batch.lidar, batch.camera, batch.context)
    return detection_loss(
        heat_logits, regression, batch.heatmap, batch.regression, batch.mask,
        alpha=cfg.focal_alpha, beta=cfg.focal_beta, reg_weight=cfg.reg_weight,
    )


# ==================== GRADIENTS ====================

def frozen_names(model: GatedFusionDetector, freeze: Iterable[str] = (), gates_only: bool = False) -> List[str]:
    """Parameter names excluded from updates, by prefix."""
    prefixes = tuple(freeze)
    names = []
    for name, _ in model.named_parameters():
        if gates_only and not name.startswith(GATE_PREFIX):
            names.append(name)
        elif prefixes and name.startswith(prefixes):
            names.append(name)
    return names


def backward(loss: torch.Tensor, model: GatedFusionDetector, frozen: Iterable[str] = ()) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradient per parameter; frozen parameters report exact zeros."""
    frozen = set(frozen)
    params = dict(model.named_parameters())
    trainable = [n for n in params if n not in frozen]
    grads = torch.autograd.grad(loss, [params[n] for n in trainable], allow_unused=True) if trainable else ()
    out = {n: torch.zeros_like(p) for n, p in params.items()}
    for name, grad in zip(trainable, grads):
        if grad is not None:
            out[name] = grad.detach()
    return out


def compute_gradients(model: GatedFusionDetector, batch: Batch, cfg: TrainConfig = TrainConfig(),
                      frozen: Iterable[str] = ()) -> Dict[str, torch.Tensor]:
    return backward(batch_loss(model, batch, cfg).total, model, frozen)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_difference(loss_fn: Callable[[], torch.Tensor], param: torch.Tensor, index: int, eps: float = 1e-4) -> float:
    """Central difference of loss_fn with respect to one scalar of param."""
    with torch.no_grad():
        flat = param.view(-1)
        original = flat[index].item()
        flat[index] = original + eps
        plus = float(loss_fn())
        flat[index] = original - eps
        minus = float(loss_fn())
        flat[index] = original
    return (plus - minus) / (2.0 * eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: List[dict] = field(default_factory=list)  # name, index, analytic, numeric, rel_error


def grad_check(model: GatedFusionDetector, batch: Batch, eps: float = 1e-4, n_random: int = 50, seed: int = 0,
               cfg: TrainConfig = TrainConfig(), frozen: Iterable[str] = ()) -> GradCheckReport:
    """Compare analytic gradients with central differences on every gate scalar plus n_random others."""
    frozen = set(frozen)
    grads = compute_gradients(model, batch, cfg, frozen)
    params = {n: p for n, p in model.named_parameters() if n not in frozen}

    picks = [(n, i) for n, p in params.items() if n.startswith(GATE_PREFIX) for i in range(p.numel())]
    others = [(n, i) for n, p in params.items() if not n.startswith(GATE_PREFIX) for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    if others:
        chosen = rng.choice(len(others), size=min(n_random, len(others)), replace=False)
        picks.extend(others[int(c)] for c in sorted(chosen))

    def loss_fn():
        with torch.no_grad():
            return batch_loss(model, batch, cfg).total

    report = GradCheckReport(max_rel_error=0.0)
    for name, index in picks:
        analytic = float(grads[name].reshape(-1)[index])
        numeric = finite_difference(loss_fn, params[name], index, eps)
        rel = relative_error(analytic, numeric)
        report.checked.append({"name": name, "index": index, "analytic": analytic, "numeric": numeric, "rel_error": rel})
        report.max_rel_error = max(report.max_rel_error, rel)
    logger.info(f"Gradient check: {len(picks)} scalars, max relative error {report.max_rel_error:.3e}")
    return report


# ==================== TRAINING ====================

@dataclass
class TrainResult:
    model: GatedFusionDetector
    losses: List[float]          # mean batch loss per epoch
    initial_loss: float          # full-dataset loss before the first update
    final_loss: float            # full-dataset loss after the last update
    trainable: List[str]


def dataset_loss(model: GatedFusionDetector, examples: Sequence[TrainingExample], cfg: TrainConfig) -> float:
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(examples), cfg.batch_size):
            chunk = examples[start:start + cfg.batch_size]
            total += float(batch_loss(model, collate(chunk), cfg).total) * len(chunk)
    return total / len(examples)


def _gate_stepper(gate_params: List[torch.nn.Parameter], cfg: TrainConfig) -> Callable[[List[torch.Tensor]], None]:
    """Update rule for the gate network: Adam, or SGD at the gate learning rate."""
    if cfg.gate_optimizer == "adam" and gate_params:
        optimizer = torch.optim.Adam(gate_params, lr=cfg.gate_learning_rate)

        def adam_step(grads: List[torch.Tensor]) -> None:
            for p, g in zip(gate_params, grads):
                p.grad = g
            optimizer.step()
        return adam_step

    def sgd_step(grads: List[torch.Tensor]) -> None:
        with torch.no_grad():
            for p, g in zip(gate_params, grads):
                p.sub_(cfg.gate_learning_rate * g)
    return sgd_step


def train(model: GatedFusionDetector, examples: Sequence[TrainingExample], cfg: TrainConfig = TrainConfig(),
          gates_only: bool = False, on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """
    Plain SGD over shuffled mini-batches; gate parameters step with `cfg.gate_optimizer`.

    Args:
        model: detector, updated in place
        examples: prepared training examples
        cfg: learning rate, epochs, batch size, seed, freeze prefixes, loss constants
        gates_only: train only `gate.*` parameters (transfer schedule)
        on_epoch: optional callback(epoch, mean_loss)

    Returns:
        TrainResult with the per-epoch loss record
    """
    if not examples:
        raise DatasetError("Cannot train on an empty dataset")
    frozen = set(frozen_names(model, cfg.freeze, gates_only))
    trainable = [n for n, _ in model.named_parameters() if n not in frozen]
    if gates_only and not trainable:
        raise ConfigError(f"Variant {model.variant!r} has no gate parameters to train")
    params = dict(model.named_parameters())
    logger.info(
        f"Training {model.variant} on {len(examples)} samples: {cfg.epochs} epochs, "
        f"lr {cfg.learning_rate}, batch {cfg.batch_size}, {len(trainable)} trainable tensors"
    )

    gate_names = [n for n in trainable if n.startswith(GATE_PREFIX)]
    sgd_names = [n for n in trainable if n not in gate_names]
    gate_step = _gate_stepper([params[n] for n in gate_names], cfg)

    initial = dataset_loss(model, examples, cfg)
    rng = np.random.default_rng(cfg.seed)
    losses: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [examples[i] for i in order[start:start + cfg.batch_size]]
            loss = batch_loss(model, collate(chunk), cfg).total
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbortError(epoch, value)
            epoch_total += value * len(chunk)
            if cfg.learning_rate == 0.0 or not trainable:
                continue
            grads = backward(loss, model, frozen)
            with torch.no_grad():
                for name in sgd_names:
                    params[name].sub_(cfg.learning_rate * grads[name])
            if gate_names:
                gate_step([grads[n] for n in gate_names])
        mean_loss = epoch_total / len(examples)
        losses.append(mean_loss)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {mean_loss:.4f}")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    for name in gate_names:
        params[name].grad = None
    final = dataset_loss(model, examples, cfg)
    if not math.isfinite(final):
        raise NumericAbortError(cfg.epochs - 1, final)
    return TrainResult(model=model, losses=losses, initial_loss=initial, final_loss=final, trainable=trainable)
