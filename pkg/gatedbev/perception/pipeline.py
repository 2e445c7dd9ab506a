"""
Perception pipeline stages wired end to end:

    sample -> BEV features -> gated fusion detector -> boxes -> report

Each stage is a plain function so the CLI and the tests can enter the
pipeline at any point.
"""

import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from gatedbev.config.settings import RunConfig
from gatedbev.perception.adverseop_synth import Sample
from gatedbev.perception.bev_features import BEVFeatures, camera_bev, lidar_bev, precondition_camera
from gatedbev.perception.evaluate import EvalReport, EvaluatedSample, context_breakdown
from gatedbev.perception.fusion import GatedFusionDetector, decode_detections, gated_conv
from gatedbev.perception.geometry import Box3D
from gatedbev.perception.train import TrainingExample, collate, make_targets

logger = logging.getLogger(__name__)


def build_model(config: RunConfig, variant: Optional[str] = None) -> GatedFusionDetector:
    """Fresh detector with seeded initialisation; shared layers start identical for every variant."""
    variant = variant or config.model.variant
    torch.manual_seed(config.train.seed)
    model = GatedFusionDetector(
        c1=config.lidar_channels,
        c2=config.camera_channels,
        num_classes=len(config.class_names),
        c_out=config.model.c_out,
        variant="agnostic",
        heatmap_bias_init=config.model.heatmap_bias_init,
    )
    if variant != "agnostic":
        model.replace_gate(variant, config.model.gate_bias_init)
    return model


def sample_features(sample: Sample, config: RunConfig) -> Tuple[BEVFeatures, BEVFeatures]:
    lidar = lidar_bev(sample.cloud, config.grid, config.features)
    camera = camera_bev(sample.cameras, config.grid, config.features)
    return lidar, camera


def prepare_example(sample: Sample, config: RunConfig) -> TrainingExample:
    lidar, camera = sample_features(sample, config)
    return TrainingExample(
        token=sample.token,
        context=sample.context,
        lidar=torch.from_numpy(lidar.channels),
        camera=torch.from_numpy(precondition_camera(camera)),
        targets=make_targets(sample.annotations, config.grid, len(config.class_names)),
    )


def prepare_examples(samples: Sequence[Sample], config: RunConfig, workers: Optional[int] = None) -> List[TrainingExample]:
    """Feature extraction for a sample list; output order follows input order."""
    workers = config.dataset.workers if workers is None else workers
    logger.info(f"Extracting BEV features for {len(samples)} samples")
    if workers <= 1:
        return [prepare_example(s, config) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: prepare_example(s, config), samples))


def detect(model: GatedFusionDetector, examples: Sequence[TrainingExample], config: RunConfig) -> List[List[Box3D]]:
    """Scored boxes per example."""
    model.eval()
    detections = []
    batch_size = config.train.batch_size
    for start in range(0, len(examples), batch_size):
        batch = collate(examples[start:start + batch_size])
        heatmaps, regression = model.predict(batch.lidar, batch.camera, batch.context)
        for heat, reg in zip(heatmaps, regression):
            detections.append(decode_detections(
                heat, reg, config.grid,
                score_thresh=config.eval.score_thresh,
                nms_radius_m=config.eval.nms_radius_m,
                max_detections=config.eval.max_detections,
            ))
    return detections


def evaluate_model(model: GatedFusionDetector, samples: Sequence[Sample], config: RunConfig,
                   examples: Optional[Sequence[TrainingExample]] = None) -> EvalReport:
    examples = prepare_examples(samples, config) if examples is None else examples
    detections = detect(model, examples, config)
    evaluated = [
        EvaluatedSample(token=s.token, context=s.context, ground_truth=list(s.annotations), predictions=d)
        for s, d in zip(samples, detections)
    ]
    report = context_breakdown(evaluated, config.class_names, config.eval.thresholds)
    logger.info(f"Evaluated {len(samples)} samples: mAP {report.scope('all').map}")
    return report


def _median_latency(fn, iters: int) -> float:
    timings = []
    for _ in range(iters):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return statistics.median(timings)


def bench_fusion(model: GatedFusionDetector, height: int, width: int, iters: int = 100,
                 seed: int = 0) -> Dict[str, float]:
    """
    Median forward latency of the gated fusion conv against a plain conv of identical dims.

    Both paths see the same inputs and weights; the gated path includes the
    gate network evaluation.
    """
    generator = torch.Generator().manual_seed(seed)
    f1 = torch.rand((1, model.c1, height, width), generator=generator, dtype=torch.float64)
    f2 = torch.rand((1, model.c2, height, width), generator=generator, dtype=torch.float64)
    ctx = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    weight, bias = model.fusion.weight.detach(), model.fusion.bias.detach()

    def gated():
        g1, g2 = model.gate(ctx)
        return gated_conv(f1, f2, g1, g2, weight, bias)

    def plain():
        return F.conv2d(torch.cat([f1, f2], dim=1), weight, bias, padding=1)

    with torch.no_grad():
        for _ in range(min(10, iters)):
            gated()
            plain()
        gated_times, plain_times = [], []
        # interleaved so drift hits both paths alike
        for _ in range(iters):
            gated_times.append(_median_latency(gated, 1))
            plain_times.append(_median_latency(plain, 1))

    gated_ms = 1000.0 * statistics.median(gated_times)
    plain_ms = 1000.0 * statistics.median(plain_times)
    result = {
        "iters": iters,
        "height": height,
        "width": width,
        "c1": model.c1,
        "c2": model.c2,
        "c_out": model.c_out,
        "variant": model.variant,
        "gated_ms": gated_ms,
        "plain_ms": plain_ms,
        "overhead_ratio": gated_ms / plain_ms if plain_ms > 0 else float("nan"),
    }
    logger.info(f"Fusion bench: gated {gated_ms:.3f} ms, plain {plain_ms:.3f} ms, ratio {result['overhead_ratio']:.3f}")
    return result
