import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from torch.optim import Optimizer
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from core.config_handler import ExperimentConfig
from core.evaluation import EvaluationResult, depth_predictor, evaluate
from core.exceptions import NonFiniteLossError, ShapeError
from core.interfaces import AbstractFeatureExtractor
from core.losses import (
    LossReport,
    alignment_loss,
    depth_l1,
    geometry_loss,
    inverse_warp,
    lsgan_disc_loss,
    reconstruction_loss,
    smoothness_loss,
    total_loss,
    translation_loss,
)
from core.model_factory import DISC_OPTIMIZER, MAIN_OPTIMIZER, ModelFactory, poly_decay
from core.networks import LFDANetwork
from core.scene_sources import SceneDataset
from misc.variants_enum import (
    DecoderBranch,
    DepthRoute,
    DiscriminatorKind,
    Domain,
    EncoderBranch,
    Variant,
)

logger = logging.getLogger("TRAIN")

__all__ = ["Trainer", "TrainResult", "train_loop", "poly_decay", "grl_lambda"]

STEP_LOG_NAME = "steps.jsonl"
FINAL_CHECKPOINT_NAME = "final.lfda"


def grl_lambda(step: int, total_steps: int, ramp: float, max_lambda: float = 1.0) -> float:
    """Gradient reversal coefficient, ramping linearly from 0 to max_lambda over ramp * total_steps."""
    ramp_steps = ramp * total_steps
    if ramp_steps <= 0:
        return max_lambda
    return max_lambda * min(1.0, step / ramp_steps)


def batch_indices(seed: int, step: int, domain: Domain, size: int, batch_size: int) -> List[int]:
    """Batch composition as a pure function of (seed, step, domain)."""
    rng = np.random.default_rng([seed, step, list(Domain).index(domain)])
    return [int(i) for i in rng.choice(size, size=batch_size, replace=size < batch_size)]


class Trainer:
    """
    One training run's state: the network, the frozen extractor, both optimizers and their
    schedulers. train_step performs one update of the objective followed by one update of
    the three discriminators.
    """

    def __init__(
        self,
        experiment: ExperimentConfig,
        network: LFDANetwork,
        extractor: AbstractFeatureExtractor,
        optimizers: Dict[str, Optimizer],
        schedulers: Dict[str, LambdaLR],
    ) -> None:
        self.experiment = experiment
        self.network = network
        self.extractor = extractor
        self.optimizers = optimizers
        self.schedulers = schedulers
        self.variant: Variant = experiment.train.variant
        self.spec = self.variant.spec

    @property
    def uses_discriminators(self) -> bool:
        return self.spec.use_target

    def batches(
        self, step: int, source: SceneDataset, target: Optional[SceneDataset]
    ) -> Dict[str, Dict[str, torch.Tensor]]:
        train = self.experiment.train
        batches = {"source": source.batch(batch_indices(train.seed, step, Domain.SOURCE, len(source), train.batch_size))}
        if target is not None:
            batches["target"] = target.batch(
                batch_indices(train.seed, step, Domain.TARGET, len(target), train.batch_size)
            )
        return batches

    def train_step(
        self,
        source_batch: Dict[str, torch.Tensor],
        target_batch: Optional[Dict[str, torch.Tensor]],
        step: int,
    ) -> LossReport:
        """
        One update of the variant's objective and, for variants that use target data, one
        update of the discriminators.

        Args:
            source_batch (Dict[str, torch.Tensor]): labeled source batch ("left", "depth")
            target_batch (Optional[Dict[str, torch.Tensor]]): unlabeled target batch ("left", "right")
            step (int): global step, drives the gradient reversal ramp

        Returns:
            LossReport: every active term, the weighted total and the discriminator losses

        Raises:
            NonFiniteLossError: naming the first non-finite term
        """
        if "depth" not in source_batch:
            raise ShapeError("The source batch carries no depth supervision")
        if self.spec.use_target and target_batch is None:
            raise ShapeError(f"Variant {self.variant.value} needs a target batch")

        net = self.network
        weights = self.experiment.loss
        data = self.experiment.data
        train = self.experiment.train
        net.train()

        main = self.optimizers[MAIN_OPTIMIZER]
        main.zero_grad(set_to_none=True)

        i_s = source_batch["left"]
        y_s = source_batch["depth"]
        terms: Dict[str, torch.Tensor] = {}
        disc_terms: Dict[str, torch.Tensor] = {}

        z_s = net.encode_content(i_s, EncoderBranch.SOURCE)
        terms["de_s"] = depth_l1(net.decode_depth(z_s), y_s)

        if self.spec.use_target:
            i_t = target_batch["left"]
            separate = self.spec.separate_bn
            target_branch = EncoderBranch.TARGET if separate else EncoderBranch.SOURCE
            z_t = net.encode_content(i_t, target_branch)
            s_t = net.encode_style(i_t, Domain.TARGET) if self.spec.fuse_style else None
            if separate:
                y_t = net.decode_depth(z_t, s_t, DepthRoute.TARGET, self.spec.style_branch)
            else:
                y_t = net.decode_depth(z_t)

            warped, mask = inverse_warp(target_batch["right"], y_t, data.focal, data.baseline)
            terms["geo"] = geometry_loss(i_t, warped, mask, weights)
            terms["sm"] = smoothness_loss(y_t, i_t)

            lambda_grl = grl_lambda(step, train.total_steps, train.grl_ramp, train.grl_max)
            feature_disc = net.discriminator(DiscriminatorKind.FEATURE)
            terms["align"], disc_terms["disc_feature"] = alignment_loss(
                z_s, z_t, feature_disc, lambda_grl, weights.align_source_label
            )

            if self.spec.decompose:
                self._decomposition_terms(i_s, y_s, i_t, z_s, z_t, s_t, terms, disc_terms)

        for name, value in {**terms, **disc_terms}.items():
            self._check_finite(name, value, step)
        objective = total_loss(terms, weights)
        objective.backward()
        main.step()

        if self.uses_discriminators:
            disc = self.optimizers[DISC_OPTIMIZER]
            # gradients left on the discriminators by the objective are discarded
            disc.zero_grad(set_to_none=True)
            sum(disc_terms.values()).backward()
            disc.step()

        for scheduler in self.schedulers.values():
            scheduler.step()

        report = LossReport(step=step)
        for name, value in {**terms, **disc_terms}.items():
            setattr(report, name, float(value.detach()))
        report.total = float(total_loss(report, weights))
        return report

    def _decomposition_terms(
        self,
        i_s: torch.Tensor,
        y_s: torch.Tensor,
        i_t: torch.Tensor,
        z_s: torch.Tensor,
        z_t: torch.Tensor,
        s_t: Optional[torch.Tensor],
        terms: Dict[str, torch.Tensor],
        disc_terms: Dict[str, torch.Tensor],
    ) -> None:
        net = self.network
        weights = self.experiment.loss
        if s_t is None:
            s_t = net.encode_style(i_t, Domain.TARGET)
        s_s = net.encode_style(i_s, Domain.SOURCE)

        i_s2s = net.generate(z_s, s_s)
        i_t2t = net.generate(z_t, s_t)
        i_s2t = net.generate(z_s, s_t)
        i_t2s = net.generate(z_t, s_s)

        terms["recon_s"] = reconstruction_loss(i_s, i_s2s, weights, self.extractor)
        terms["recon_t"] = reconstruction_loss(i_t, i_t2t, weights, self.extractor)
        disc_s2t = net.discriminator(DiscriminatorKind.SOURCE_TO_TARGET)
        disc_t2s = net.discriminator(DiscriminatorKind.TARGET_TO_SOURCE)
        terms["trans_s2t"] = translation_loss(i_s, i_t, i_s2t, disc_s2t, weights, self.extractor)
        terms["trans_t2s"] = translation_loss(i_t, i_s, i_t2s, disc_t2s, weights, self.extractor)

        # the translated source image re-enters the target branches, supervised by the source depth
        reentry = i_s2t.detach() if self.experiment.train.detach_translated else i_s2t
        z_s2t = net.encode_content(reentry, EncoderBranch.TARGET)
        s_s2t = net.encode_style(reentry, Domain.TARGET) if self.spec.fuse_style else None
        y_s2t = net.decode_depth(z_s2t, s_s2t, DepthRoute.TARGET, self.spec.style_branch)
        terms["de_s2t"] = depth_l1(y_s2t, y_s)

        disc_terms["disc_s2t"] = lsgan_disc_loss(disc_s2t(i_t), disc_s2t(i_s2t.detach()))
        disc_terms["disc_t2s"] = lsgan_disc_loss(disc_t2s(i_s), disc_t2s(i_t2s.detach()))

    @staticmethod
    def _check_finite(name: str, value: torch.Tensor, step: int) -> None:
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar, step)

    def checkpoint(self, step: int, factory: ModelFactory) -> Checkpoint:
        return Checkpoint.capture(
            self.network,
            self.optimizers,
            self.schedulers,
            step=step,
            config_hash=self.experiment.config_hash(),
            data_hash=self.experiment.data_hash(),
            model_hash=factory.model_hash,
            extra={"variant": self.variant.value},
        )


@dataclass
class TrainResult:
    checkpoint_path: Path
    reports: List[LossReport]
    evaluation: Optional[EvaluationResult] = None


def _target_style_branch_label(variant: Variant) -> str:
    spec = variant.spec
    if not spec.fuse_style:
        return "none"
    return "style" if spec.style_branch == DecoderBranch.TARGET_STYLE else "content"


def train_loop(
    experiment: ExperimentConfig,
    source_train: SceneDataset,
    target_train: Optional[SceneDataset],
    out_dir: Path,
    target_val: Optional[SceneDataset] = None,
    resume: Optional[Path] = None,
    show_progress: bool = True,
) -> TrainResult:
    """
    Trains one variant end-to-end for TRAIN_TOTAL_STEPS steps.

    Every step's LossReport is appended to <out_dir>/steps.jsonl; checkpoints are written
    every TRAIN_CHECKPOINT_EVERY steps and at the end (final.lfda); the final network is
    evaluated on the target validation split when one is given.

    Args:
        experiment (ExperimentConfig): resolved configuration
        source_train (SceneDataset): labeled source training split
        target_train (Optional[SceneDataset]): unlabeled target training split (unused by src_only)
        out_dir (Path): run directory
        target_val (Optional[SceneDataset]): labeled target split for the final evaluation
        resume (Optional[Path]): checkpoint to continue from
        show_progress (bool): display a progress bar

    Returns:
        TrainResult: final checkpoint path, the reports of the steps run and the final evaluation

    Raises:
        CheckpointMismatchError: if the resumed checkpoint comes from another config or dataset
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = experiment.train
    factory = ModelFactory(experiment)
    network = factory.get_network()
    extractor = factory.get_extractor()
    optimizers = factory.get_optimizers(network)
    schedulers = factory.get_schedulers(optimizers)
    trainer = Trainer(experiment, network, extractor, optimizers, schedulers)

    start_step = 0
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        checkpoint.check_compatible(experiment.config_hash(), experiment.data_hash(), factory.model_hash)
        checkpoint.apply(network, optimizers, schedulers)
        start_step = checkpoint.step
        logger.info(f"Resumed from {resume} at step {start_step}")

    logger.info(
        f"Training {train.variant.label} for {train.total_steps} steps "
        f"(style fusion: {_target_style_branch_label(train.variant)}, config {experiment.config_hash()[:12]})"
    )
    reports: List[LossReport] = []
    step_log = out_dir / STEP_LOG_NAME
    with step_log.open("a" if resume is not None else "w") as log_file:
        steps = range(start_step, train.total_steps)
        for step in tqdm(steps, desc=train.variant.value, disable=not show_progress):
            batches = trainer.batches(step, source_train, target_train if trainer.spec.use_target else None)
            report = trainer.train_step(batches["source"], batches.get("target"), step)
            reports.append(report)
            log_file.write(json.dumps(report.to_record()) + "\n")
            if step % train.log_every == 0:
                lr = poly_decay(train.lr_task, step, train.total_steps, train.decay_power)
                logger.info(f"step {step} total {report.total:.5f} de_s {report.de_s:.5f} lr_task {lr:.3e}")
            done = step + 1
            if train.checkpoint_every and done % train.checkpoint_every == 0 and done < train.total_steps:
                save_checkpoint(out_dir / f"step_{done}.lfda", trainer.checkpoint(done, factory))

    final_path = save_checkpoint(
        out_dir / FINAL_CHECKPOINT_NAME, trainer.checkpoint(max(train.total_steps, start_step), factory)
    )

    evaluation = None
    if target_val is not None:
        evaluation = evaluate(
            network,
            target_val,
            depth_predictor(network, train.variant, DepthRoute.TARGET),
            experiment.eval.cap,
            experiment.eval.d_min_eval,
        )
        with (out_dir / "final_eval.json").open("w") as file:
            json.dump(evaluation.report.to_record(), file, indent=4)
    return TrainResult(final_path, reports, evaluation)
