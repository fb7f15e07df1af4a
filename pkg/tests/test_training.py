import json
import math
from typing import Dict

import pytest
import torch

from conftest import make_experiment
from core.checkpoint import load_checkpoint
from core.exceptions import CheckpointMismatchError, NonFiniteLossError, ShapeError
from core.losses import total_loss
from core.model_factory import DISC_OPTIMIZER, MAIN_OPTIMIZER, ModelFactory
from core.training import (
    FINAL_CHECKPOINT_NAME,
    STEP_LOG_NAME,
    Trainer,
    batch_indices,
    grl_lambda,
    poly_decay,
    train_loop,
)
from misc.variants_enum import Domain, EncoderBranch, Variant


def _trainer(**overrides: str) -> Trainer:
    experiment = make_experiment(**overrides)
    factory = ModelFactory(experiment)
    network = factory.get_network()
    optimizers = factory.get_optimizers(network)
    return Trainer(experiment, network, factory.get_extractor(), optimizers, factory.get_schedulers(optimizers))


def _snapshot(module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {name: value.detach().clone() for name, value in module.state_dict().items()}


def _first_batches(trainer: Trainer, tiny_splits):
    return trainer.batches(0, tiny_splits["source_train"], tiny_splits["target_train"])


def test_poly_decay():
    assert poly_decay(1e-4, 0, 100) == 1e-4
    assert poly_decay(1e-4, 50, 100) == pytest.approx(5.359e-5, rel=1e-3)
    assert poly_decay(1e-4, 100, 100) == 0.0
    assert poly_decay(1e-4, 250, 100) == 0.0
    assert poly_decay(1e-4, 10, 0) == 1e-4
    with pytest.raises(ValueError):
        poly_decay(1e-4, -1, 100)


def test_grl_lambda_ramp():
    assert grl_lambda(0, 100, 0.2) == 0.0
    assert grl_lambda(10, 100, 0.2) == pytest.approx(0.5)
    assert grl_lambda(20, 100, 0.2) == 1.0
    assert grl_lambda(90, 100, 0.2, max_lambda=0.3) == pytest.approx(0.3)
    assert grl_lambda(0, 100, 0.0) == 1.0


def test_batch_composition_is_a_function_of_seed_step_and_domain():
    first = batch_indices(0, 5, Domain.SOURCE, 6, 4)
    assert first == batch_indices(0, 5, Domain.SOURCE, 6, 4)
    assert all(0 <= i < 6 for i in first)
    assert len(set(first)) == 4
    draws = {tuple(batch_indices(0, step, domain, 50, 4)) for step in range(5) for domain in Domain}
    assert len(draws) == 10
    # fewer samples than the batch size falls back to drawing with replacement
    assert len(batch_indices(0, 0, Domain.TARGET, 2, 4)) == 4


def test_scheduler_follows_the_poly_decay():
    trainer = _trainer(TRAIN_TOTAL_STEPS="10")
    main = trainer.optimizers[MAIN_OPTIMIZER]
    disc = trainer.optimizers[DISC_OPTIMIZER]
    train = trainer.experiment.train
    assert [group["lr"] for group in main.param_groups] == [train.lr_task, train.lr_other]
    for _ in range(5):
        main.step()
        disc.step()
        for scheduler in trainer.schedulers.values():
            scheduler.step()
    assert main.param_groups[0]["lr"] == pytest.approx(poly_decay(train.lr_task, 5, 10, train.decay_power))
    assert disc.param_groups[0]["lr"] == pytest.approx(poly_decay(train.lr_other, 5, 10, train.decay_power))


def test_source_only_touches_the_source_path_only(tiny_splits):
    trainer = _trainer(TRAIN_VARIANT="src_only")
    network = trainer.network
    untouched = {**network.auxiliary_modules(), **network.discriminator_modules()}
    before = {name: _snapshot(module) for name, module in untouched.items()}
    target_bn = [
        (stage.norm.weight[EncoderBranch.TARGET].detach().clone(), stage.norm.running_mean[EncoderBranch.TARGET].clone())
        for stage in network.content_encoder.stages
    ]

    batches = trainer.batches(0, tiny_splits["source_train"], None)
    report = trainer.train_step(batches["source"], None, 0)

    assert set(report.objective_terms()) == {"de_s"}
    assert report.disc_feature is None and report.disc_s2t is None
    assert report.total == pytest.approx(report.de_s)
    for name, module in untouched.items():
        for key, value in module.state_dict().items():
            assert torch.equal(value, before[name][key]), f"{name}.{key}"
    for stage, (weight, running) in zip(network.content_encoder.stages, target_bn):
        assert torch.equal(stage.norm.weight[EncoderBranch.TARGET], weight)
        assert torch.equal(stage.norm.running_mean[EncoderBranch.TARGET], running)


def test_full_step_reports_every_term(tiny_splits):
    trainer = _trainer()
    batches = _first_batches(trainer, tiny_splits)
    report = trainer.train_step(batches["source"], batches["target"], 0)

    record = report.to_record()
    for name in ("de_s", "de_s2t", "geo", "sm", "align", "recon_s", "recon_t", "trans_s2t", "trans_t2s",
                 "disc_feature", "disc_s2t", "disc_t2s", "total"):
        assert name in record and math.isfinite(record[name]) and record[name] >= 0, name
    assert report.total == pytest.approx(total_loss(report.objective_terms(), trainer.experiment.loss), abs=1e-6)


@pytest.mark.parametrize(
    "variant, expected",
    [
        (Variant.TGT_AL, {"de_s", "geo", "sm", "align"}),
        (Variant.TGT_CON_2BN, {"de_s", "de_s2t", "geo", "sm", "align", "recon_s", "recon_t", "trans_s2t", "trans_t2s"}),
    ],
)
def test_variant_terms(tiny_splits, variant, expected):
    trainer = _trainer(TRAIN_VARIANT=variant.value)
    batches = _first_batches(trainer, tiny_splits)
    assert set(trainer.train_step(batches["source"], batches["target"], 0).objective_terms()) == expected


def test_training_steps_are_deterministic(tiny_splits):
    first, second = _trainer(), _trainer()
    for step in range(2):
        for trainer in (first, second):
            batches = trainer.batches(step, tiny_splits["source_train"], tiny_splits["target_train"])
            trainer.train_step(batches["source"], batches["target"], step)
    state = second.network.state_dict()
    assert all(torch.equal(value, state[key]) for key, value in first.network.state_dict().items())


def test_discriminator_update_ignores_objective_gradients(tiny_splits):
    trainer = _trainer()
    batches = _first_batches(trainer, tiny_splits)
    trainer.train_step(batches["source"], batches["target"], 0)
    # the main optimizer never steps the discriminators, and main gradients are cleared first
    main_params = {id(p) for group in trainer.optimizers[MAIN_OPTIMIZER].param_groups for p in group["params"]}
    disc_params = [p for m in trainer.network.discriminator_modules().values() for p in m.parameters()]
    assert not any(id(p) in main_params for p in disc_params)
    assert all(p.grad is not None for p in disc_params)


def test_non_finite_term_names_the_culprit(tiny_splits):
    trainer = _trainer(TRAIN_VARIANT="src_only")
    batch = dict(trainer.batches(0, tiny_splits["source_train"], None)["source"])
    batch["depth"] = torch.full_like(batch["depth"], float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train_step(batch, None, 3)
    assert info.value.term == "de_s"
    assert info.value.step == 3


def test_non_finite_discriminator_term_aborts_before_any_update(tiny_splits, monkeypatch):
    trainer = _trainer()
    batches = _first_batches(trainer, tiny_splits)
    before = {name: p.detach().clone() for name, p in trainer.network.named_parameters()}
    monkeypatch.setattr(
        "core.training.lsgan_disc_loss", lambda real, fake: (real.mean() + fake.mean()) * float("inf")
    )
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train_step(batches["source"], batches["target"], 1)
    assert info.value.term == "disc_s2t"
    assert all(torch.equal(p, before[name]) for name, p in trainer.network.named_parameters())


def test_missing_batches_are_rejected(tiny_splits):
    trainer = _trainer()
    source = trainer.batches(0, tiny_splits["source_train"], None)["source"]
    with pytest.raises(ShapeError):
        trainer.train_step(source, None, 0)
    with pytest.raises(ShapeError):
        trainer.train_step({"left": source["left"]}, None, 0)


def test_zero_steps_keep_the_initial_network(tmp_path, tiny_splits):
    experiment = make_experiment(TRAIN_TOTAL_STEPS="0")
    result = train_loop(experiment, tiny_splits["source_train"], tiny_splits["target_train"], tmp_path,
                        show_progress=False)
    assert result.reports == []
    stored = load_checkpoint(result.checkpoint_path).model_state
    initial = ModelFactory(experiment).get_network().state_dict()
    assert all(torch.equal(stored[key], value) for key, value in initial.items())


def test_train_loop_outputs(tmp_path, tiny_splits):
    experiment = make_experiment()
    result = train_loop(experiment, tiny_splits["source_train"], tiny_splits["target_train"], tmp_path,
                        target_val=tiny_splits["target_val"], show_progress=False)

    assert [r.step for r in result.reports] == [0, 1, 2]
    lines = (tmp_path / STEP_LOG_NAME).read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [0, 1, 2]
    assert (tmp_path / "step_2.lfda").is_file()
    assert result.checkpoint_path == tmp_path / FINAL_CHECKPOINT_NAME
    checkpoint = load_checkpoint(result.checkpoint_path)
    assert checkpoint.step == 3
    assert checkpoint.extra["variant"] == "lfda_full"
    assert checkpoint.config_hash == experiment.config_hash()
    assert set(json.loads((tmp_path / "final_eval.json").read_text())) >= {"abs_rel", "delta1"}


def test_resuming_reproduces_an_uninterrupted_run(tmp_path, tiny_splits):
    experiment = make_experiment()
    splits = (tiny_splits["source_train"], tiny_splits["target_train"])
    straight = train_loop(experiment, *splits, tmp_path / "straight", show_progress=False)
    resumed = train_loop(experiment, *splits, tmp_path / "resumed", resume=tmp_path / "straight" / "step_2.lfda",
                         show_progress=False)

    assert [r.step for r in resumed.reports] == [2]
    assert resumed.reports[0].to_record() == straight.reports[2].to_record()
    expected = load_checkpoint(straight.checkpoint_path)
    found = load_checkpoint(resumed.checkpoint_path)
    assert found.step == expected.step
    assert all(torch.equal(found.model_state[key], value) for key, value in expected.model_state.items())


def test_resuming_under_another_config_is_rejected(tmp_path, tiny_splits):
    splits = (tiny_splits["source_train"], tiny_splits["target_train"])
    first = train_loop(make_experiment(), *splits, tmp_path / "first", show_progress=False)
    with pytest.raises(CheckpointMismatchError):
        train_loop(make_experiment(LOSS_ETA="0.3"), *splits, tmp_path / "second", resume=first.checkpoint_path,
                   show_progress=False)
