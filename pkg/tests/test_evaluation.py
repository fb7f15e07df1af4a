import csv

import numpy as np
import pytest
import torch
from torch import nn

from core.evaluation import (
    METRIC_NAMES,
    MetricReport,
    color_shift,
    complexity_report,
    count_macs,
    count_params,
    depth_metrics,
    depth_predictor,
    evaluate,
    translate_batch,
    write_records_csv,
)
from core.exceptions import DatasetIOError, EmptyMaskError, ShapeError
from core.networks import LFDANetwork
from core.normalization import SeparateBatchNorm2d
from misc.variants_enum import DepthRoute, Variant


def _naive_metrics(pred, gt, cap, floor):
    abs_rel = sq_rel = sq = sq_log = 0.0
    hits = [0, 0, 0]
    count = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if not 0 < g <= cap:
            continue
        p = min(max(p, floor), cap)
        count += 1
        abs_rel += abs(p - g) / g
        sq_rel += (p - g) ** 2 / g
        sq += (p - g) ** 2
        sq_log += (np.log(p) - np.log(g)) ** 2
        ratio = max(p / g, g / p)
        for n in range(3):
            hits[n] += ratio < 1.25 ** (n + 1)
    return {
        "abs_rel": abs_rel / count,
        "sq_rel": sq_rel / count,
        "rmse": (sq / count) ** 0.5,
        "rmse_log": (sq_log / count) ** 0.5,
        "delta1": hits[0] / count,
        "delta2": hits[1] / count,
        "delta3": hits[2] / count,
    }


class ToyNet(nn.Module):
    """3 -> 8 -> 1 channels, 3x3 convolutions with padding 1."""

    def __init__(self) -> None:
        super().__init__()
        self.first = nn.Conv2d(3, 8, 3, padding=1)
        self.second = nn.Conv2d(8, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.second(torch.relu(self.first(x)))


def test_metrics_match_a_naive_reference():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gt = rng.uniform(-1, 25, size=(8, 8))
        gt[0, 0] = 5.0
        pred = rng.uniform(-1, 25, size=(8, 8))
        report = depth_metrics(pred, gt, cap=20.0, d_min_eval=1e-3)
        for name, value in _naive_metrics(pred, gt, 20.0, 1e-3).items():
            assert getattr(report, name) == pytest.approx(value, abs=1e-9), name


def test_perfect_prediction():
    gt = np.linspace(1, 10, 16).reshape(4, 4)
    report = depth_metrics(gt.copy(), gt)
    assert report.abs_rel == report.rmse == report.rmse_log == 0.0
    assert report.delta1 == report.delta3 == 1.0
    assert report.valid_pixels == 16


def test_doubled_prediction():
    gt = np.linspace(1, 9, 16).reshape(4, 4)
    report = depth_metrics(2 * gt, gt)
    assert report.abs_rel == 1.0
    assert report.delta1 == report.delta2 == report.delta3 == 0.0


def test_delta_thresholds_are_strict():
    report = depth_metrics(np.full((3, 3), 5.0), np.full((3, 3), 4.0))
    assert report.abs_rel == pytest.approx(0.25)
    assert report.rmse == pytest.approx(1.0)
    assert report.delta1 == 0.0
    assert report.delta2 == 1.0


def test_deltas_are_monotone():
    rng = np.random.default_rng(1)
    for _ in range(50):
        report = depth_metrics(rng.uniform(0.1, 30, (6, 6)), rng.uniform(0.1, 20, (6, 6)))
        assert 0 <= report.delta1 <= report.delta2 <= report.delta3 <= 1


def test_pixels_outside_the_cap_are_ignored():
    gt = np.array([[2.0, 50.0], [0.0, -1.0]])
    pred = np.array([[2.0, 1.0], [7.0, 3.0]])
    report = depth_metrics(pred, gt, cap=20.0)
    assert report.valid_pixels == 1
    assert report.abs_rel == 0.0


def test_metric_errors():
    with pytest.raises(EmptyMaskError):
        depth_metrics(np.ones((2, 2)), np.full((2, 2), 30.0), cap=20.0)
    with pytest.raises(ShapeError):
        depth_metrics(np.ones((2, 2)), np.ones((2, 3)))


def test_reports_average_per_image():
    first = depth_metrics(np.full((1, 1), 2.0), np.full((1, 1), 1.0))
    second = depth_metrics(np.ones((4, 4)), np.ones((4, 4)))
    mean = MetricReport.mean_of([first, second])
    assert mean.abs_rel == pytest.approx(0.5)
    assert mean.valid_pixels == 17
    assert all(name in mean.as_table() for name in METRIC_NAMES)


def test_parameter_counts():
    assert count_params(nn.Conv2d(1, 2, 3)) == 20
    assert count_params(SeparateBatchNorm2d(6, 2)) == 24
    assert count_params(nn.Sequential()) == 0
    assert count_params(ToyNet()) == (3 * 3 * 3 * 8 + 8) + (3 * 3 * 8 * 1 + 1)


def test_mac_counts():
    assert count_macs(nn.Conv2d(1, 1, 3), (1, 1, 6, 6)) == 144
    assert count_macs(ToyNet(), (1, 3, 16, 16)) == 73728


def test_mac_counting_ignores_bias_and_normalization():
    with_extras = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1, bias=True), nn.BatchNorm2d(8), nn.ReLU(),
                                nn.Upsample(scale_factor=2, mode="bilinear"))
    assert count_macs(with_extras, (1, 3, 16, 16)) == 3 * 3 * 3 * 8 * 16 * 16


def test_mac_counting_leaves_the_network_state_untouched(tiny_network: LFDANetwork):
    keys = list(tiny_network.state_dict())
    count_macs(tiny_network, (1, 3, 32, 32))
    assert list(tiny_network.state_dict()) == keys
    assert not any(hasattr(m, "total_ops") for m in tiny_network.modules())


def test_macs_scale_with_the_input_area(tiny_network: LFDANetwork):
    single = count_macs(tiny_network, (1, 3, 32, 32))
    assert count_macs(tiny_network, (1, 3, 64, 32)) == 2 * single
    assert count_macs(tiny_network, (1, 3, 64, 64)) == 4 * single


def test_complexity_covers_the_inference_path_only(tiny_network: LFDANetwork):
    report = complexity_report(tiny_network, (1, 3, 32, 64))
    inference = sum(count_params(m) for m in tiny_network.inference_modules().values())
    assert report.inference_params == inference
    assert report.training_params == count_params(tiny_network)
    assert report.training_params - report.inference_params == sum(
        count_params(m) for name, m in tiny_network.training_modules().items()
        if name not in tiny_network.inference_modules()
    )

    inference_convs = {id(m) for sub in tiny_network.inference_modules().values() for m in sub.modules()}
    seen = []
    handles = [
        m.register_forward_hook(lambda module, i, o: seen.append(id(module)))
        for m in tiny_network.modules() if isinstance(m, nn.Conv2d)
    ]
    count_macs(tiny_network, (1, 3, 32, 64))
    for handle in handles:
        handle.remove()
    assert seen and all(module_id in inference_convs for module_id in seen)
    assert tiny_network.training


def test_evaluation_is_deterministic_and_restores_train_mode(tiny_network: LFDANetwork, tiny_splits):
    predictor = depth_predictor(tiny_network, Variant.LFDA_FULL)
    first = evaluate(tiny_network, tiny_splits["target_val"], predictor)
    second = evaluate(tiny_network, tiny_splits["target_val"], predictor)
    assert first.report == second.report
    assert [r["seed"] for r in first.records] == tiny_splits["target_val"].seeds
    assert tiny_network.training


def test_low_resolution_predictions_are_upsampled(tiny_network: LFDANetwork, tiny_splits):
    def constant(images: torch.Tensor) -> torch.Tensor:
        return torch.full((images.size(0), 1, 8, 8), 5.0)

    result = evaluate(tiny_network, tiny_splits["source_val"], constant)
    assert result.report.valid_pixels == len(tiny_splits["source_val"]) * 32 * 32


def test_source_route_is_supported(tiny_network: LFDANetwork, tiny_splits):
    predictor = depth_predictor(tiny_network, Variant.LFDA_FULL, DepthRoute.SOURCE)
    assert evaluate(tiny_network, tiny_splits["source_val"], predictor).report.valid_pixels > 0


def test_unlabeled_split_cannot_be_evaluated(tiny_network: LFDANetwork, tiny_splits):
    with pytest.raises(DatasetIOError):
        evaluate(tiny_network, tiny_splits["target_train"], tiny_network.predict_target_depth)


def test_records_csv(tmp_path):
    records = [{"index": 0, "seed": 3, "abs_rel": 0.1}, {"index": 1, "seed": 4, "abs_rel": 1 / 3}]
    path = tmp_path / "metrics.csv"
    write_records_csv(path, records)
    rows = list(csv.DictReader(path.open()))
    assert float(rows[1]["abs_rel"]) == 1 / 3
    with pytest.raises(EmptyMaskError):
        write_records_csv(path, [])


def test_translate_batch_shapes(tiny_network: LFDANetwork, tiny_splits):
    source = tiny_splits["source_val"].left
    target = tiny_splits["target_val"].left
    images = translate_batch(tiny_network, source, target)
    assert set(images) == {"source", "target", "s2s", "t2t", "s2t", "t2s"}
    assert all(image.shape == source.shape for image in images.values())
    with pytest.raises(ShapeError):
        translate_batch(tiny_network, source, target[:1])


def test_color_shift():
    source = torch.zeros(2, 3, 4, 4)
    target = torch.ones(2, 3, 4, 4)
    shift = color_shift(source, torch.full_like(source, 0.75), target)
    assert shift.distance_before == pytest.approx(3 ** 0.5)
    assert shift.distance_after == pytest.approx(0.25 * 3 ** 0.5)
    assert shift.reduction == pytest.approx(0.75)
