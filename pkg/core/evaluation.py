import csv
import logging
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from thop import profile
from torch import nn

from core.exceptions import DatasetIOError, EmptyMaskError, ShapeError
from core.networks import LFDANetwork
from core.scene_sources import SceneDataset
from misc.variants_enum import DepthRoute, Domain, EncoderBranch, Variant

logger = logging.getLogger("EVAL")

DepthPredictor = Callable[[torch.Tensor], torch.Tensor]

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class MetricReport:
    """Depth accuracy; error terms are lower-better and delta terms higher-better."""
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixels: int
    cap: float

    @classmethod
    def mean_of(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        """Per-image averaging: every image weighs the same regardless of its valid pixel count."""
        if not reports:
            raise EmptyMaskError("No images to aggregate")
        means = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
        return cls(**means, valid_pixels=sum(r.valid_pixels for r in reports), cap=reports[0].cap)

    def to_record(self) -> Dict[str, float]:
        return asdict(self)

    def as_table(self) -> str:
        header = " | ".join(f"{name:>8}" for name in METRIC_NAMES)
        values = " | ".join(f"{getattr(self, name):8.4f}" for name in METRIC_NAMES)
        return f"{header}\n{values}"


def depth_metrics(
    pred: np.ndarray, gt: np.ndarray, cap: float = 20.0, d_min_eval: float = 1e-3
) -> MetricReport:
    """
    Depth metrics over the pixels with 0 < gt <= cap; predictions are clipped to
    [d_min_eval, cap] first. The delta thresholds use strict inequality.

    Args:
        pred (np.ndarray): predicted depth
        gt (np.ndarray): ground-truth depth of the same shape
        cap (float): largest evaluated depth
        d_min_eval (float): prediction floor keeping the log metric finite

    Returns:
        MetricReport: the metrics

    Raises:
        ShapeError: if the shapes differ
        EmptyMaskError: if no ground-truth pixel lies in (0, cap]
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = (gt > 0) & (gt <= cap)
    if not valid.any():
        raise EmptyMaskError(f"No ground-truth pixel in (0, {cap}]")
    g = gt[valid]
    p = np.clip(pred[valid], d_min_eval, cap)

    thresh = np.maximum(g / p, p / g)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25 ** 2)),
        delta3=float(np.mean(thresh < 1.25 ** 3)),
        valid_pixels=int(valid.sum()),
        cap=float(cap),
    )


def count_params(model: nn.Module, inference_only: bool = False) -> int:
    """
    Number of learnable scalars; with inference_only, an LFDANetwork counts only the
    sub-networks kept for target inference. Separate-BN layers count every branch.
    """
    if inference_only and isinstance(model, LFDANetwork):
        modules: List[nn.Module] = list(model.inference_modules().values())
    else:
        modules = [model]
    return sum(p.numel() for module in modules for p in module.parameters() if p.requires_grad)


class _TargetInferencePath(nn.Module):
    def __init__(self, network: LFDANetwork) -> None:
        super().__init__()
        self.network = network

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.network.predict_target_depth(image)


def _conv_macs(module: nn.Conv2d, inputs: Tuple[torch.Tensor, ...], output: torch.Tensor) -> None:
    kh, kw = module.kernel_size
    module.total_ops += torch.DoubleTensor([kh * kw * (module.in_channels // module.groups) * output.numel()])


def _no_macs(module: nn.Module, inputs: Tuple[torch.Tensor, ...], output: torch.Tensor) -> None:
    pass


def count_macs(model: nn.Module, input_shape: Sequence[int]) -> int:
    """
    Multiply-accumulate count of the convolutions run for one input, K_h * K_w *
    (C_in / groups) * C_out * H_out * W_out per layer; bias, normalization and activation
    costs are not counted. An LFDANetwork runs its target inference path only.

    Args:
        model (nn.Module): model to measure
        input_shape (Sequence[int]): input shape [batch, 3, H, W]

    Returns:
        int: total MACs
    """
    # thop's own rules add bias, normalization and upsampling ops; only convolutions count here
    rules = {
        type(m): _conv_macs if isinstance(m, nn.Conv2d) else _no_macs
        for m in model.modules()
        if isinstance(m, nn.Conv2d) or not list(m.children())
    }
    measured = _TargetInferencePath(model) if isinstance(model, LFDANetwork) else model
    was_training = model.training
    try:
        macs, _ = profile(measured, inputs=(torch.zeros(tuple(input_shape)),), custom_ops=rules, verbose=False)
    finally:
        # thop leaves its counters on modules it found no rule for
        for module in measured.modules():
            module._buffers.pop("total_ops", None)
            module._buffers.pop("total_params", None)
        model.train(was_training)
    return int(round(macs))


@dataclass
class ComplexityReport:
    inference_params: int
    training_params: int
    inference_macs: int
    input_shape: Tuple[int, ...]
    module_params: Dict[str, int] = field(default_factory=dict)

    def to_record(self) -> Dict[str, object]:
        record = asdict(self)
        record["input_shape"] = list(self.input_shape)
        return record

    def as_table(self) -> str:
        lines = [f"{'sub-network':<24}{'params':>12}"]
        lines += [f"{name:<24}{count:>12}" for name, count in self.module_params.items()]
        lines.append(f"{'inference total':<24}{self.inference_params:>12}")
        lines.append(f"{'training total':<24}{self.training_params:>12}")
        size = "x".join(str(s) for s in self.input_shape[2:])
        lines.append(f"{'inference MACs @' + size:<24}{self.inference_macs:>12}")
        return "\n".join(lines)


def complexity_report(network: LFDANetwork, input_shape: Sequence[int]) -> ComplexityReport:
    return ComplexityReport(
        inference_params=count_params(network, inference_only=True),
        training_params=count_params(network),
        inference_macs=count_macs(network, input_shape),
        input_shape=tuple(input_shape),
        module_params={name: count_params(module) for name, module in network.training_modules().items()},
    )


def depth_predictor(network: LFDANetwork, variant: Variant, route: DepthRoute = DepthRoute.TARGET) -> DepthPredictor:
    """
    Inference function of a trained variant: the source route reads the source branches,
    the target route follows the variant's routing (shared-BN variants reuse the source
    branches, fused variants add the target style feature).
    """
    if route == DepthRoute.SOURCE:
        return network.predict_source_depth
    spec = variant.spec
    return partial(
        network.predict_target_depth,
        fuse_style=spec.fuse_style,
        style_branch=spec.style_branch,
        separate_bn=spec.separate_bn,
    )


@dataclass
class EvaluationResult:
    report: MetricReport
    records: List[Dict[str, float]]


def evaluate(
    network: LFDANetwork,
    dataset: SceneDataset,
    predictor: DepthPredictor,
    cap: float = 20.0,
    d_min_eval: float = 1e-3,
    batch_size: int = 8,
) -> EvaluationResult:
    """
    Eval-mode depth evaluation of a labeled split. Predictions are bilinearly upsampled to
    the ground-truth resolution when sizes differ; the aggregate is the mean of the
    per-image metrics.

    Args:
        network (LFDANetwork): network the predictor belongs to
        dataset (SceneDataset): labeled split
        predictor (DepthPredictor): image batch -> depth batch
        cap (float): largest evaluated depth
        d_min_eval (float): prediction floor
        batch_size (int): inference batch size

    Returns:
        EvaluationResult: aggregate report and one record per image
    """
    if not dataset.has_depth:
        raise DatasetIOError(Path(f"{dataset.domain.value}/{dataset.split.value}"), "Split has no ground-truth depth")
    was_training = network.training
    network.eval()
    reports: List[MetricReport] = []
    records: List[Dict[str, float]] = []
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                indices = list(range(start, min(start + batch_size, len(dataset))))
                batch = dataset.batch(indices)
                pred = predictor(batch["left"])
                gt = batch["depth"]
                if pred.shape[-2:] != gt.shape[-2:]:
                    pred = F.interpolate(pred, size=gt.shape[-2:], mode="bilinear", align_corners=False)
                for i, index in enumerate(indices):
                    report = depth_metrics(pred[i].numpy(), gt[i].numpy(), cap, d_min_eval)
                    reports.append(report)
                    records.append({"index": index, "seed": dataset.seeds[index], **report.to_record()})
    finally:
        network.train(was_training)
    aggregate = MetricReport.mean_of(reports)
    logger.info(
        f"Evaluated {len(reports)} images of {dataset.domain.value}/{dataset.split.value}: "
        f"abs_rel {aggregate.abs_rel:.4f}, delta1 {aggregate.delta1:.4f}"
    )
    return EvaluationResult(aggregate, records)


def write_records_csv(path: Path, records: List[Dict[str, float]]) -> None:
    if not records:
        raise EmptyMaskError("No per-image records to write")
    try:
        with Path(path).open("w", newline="") as file:
            writer = csv.DictWriter(file, fieldnames=list(records[0]))
            writer.writeheader()
            for record in records:
                writer.writerow({key: repr(value) if isinstance(value, float) else value for key, value in record.items()})
    except OSError as e:
        raise DatasetIOError(path, f"Cannot write metric records ({e})") from e


def translate_batch(
    network: LFDANetwork, source_images: torch.Tensor, target_images: torch.Tensor, separate_bn: bool = True
) -> Dict[str, torch.Tensor]:
    """
    Reconstructions and translations of paired source/target batches in eval mode.

    Returns:
        Dict[str, torch.Tensor]: "source", "target", "s2s", "t2t", "s2t" and "t2s" images
    """
    if source_images.shape != target_images.shape:
        raise ShapeError(f"Source {list(source_images.shape)} and target {list(target_images.shape)} batches differ")
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            target_branch = EncoderBranch.TARGET if separate_bn else EncoderBranch.SOURCE
            z_s = network.encode_content(source_images, EncoderBranch.SOURCE)
            z_t = network.encode_content(target_images, target_branch)
            s_s = network.encode_style(source_images, Domain.SOURCE)
            s_t = network.encode_style(target_images, Domain.TARGET)
            images = {
                "source": source_images,
                "target": target_images,
                "s2s": network.generate(z_s, s_s),
                "t2t": network.generate(z_t, s_t),
                "s2t": network.generate(z_s, s_t),
                "t2s": network.generate(z_t, s_s),
            }
    finally:
        network.train(was_training)
    return images


@dataclass
class ColorShift:
    """Distance of per-channel mean colours to the target's, before and after translation."""
    distance_before: float
    distance_after: float
    reduction: float

    def to_record(self) -> Dict[str, float]:
        return asdict(self)


def color_shift(
    source_images: torch.Tensor, translated_images: torch.Tensor, target_images: torch.Tensor
) -> ColorShift:
    def mean_color(images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.size(1) != 3:
            raise ShapeError(f"Expected an image batch [batch, 3, H, W], got {list(images.shape)}")
        return images.double().mean(dim=(0, 2, 3))

    target_mean = mean_color(target_images)
    before = float(torch.linalg.vector_norm(mean_color(source_images) - target_mean))
    after = float(torch.linalg.vector_norm(mean_color(translated_images) - target_mean))
    reduction = 1.0 - after / before if before > 0 else 0.0
    return ColorShift(distance_before=before, distance_after=after, reduction=reduction)
