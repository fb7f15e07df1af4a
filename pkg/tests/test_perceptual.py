import pytest
import torch

from conftest import make_experiment
from core.exceptions import DataFormatError, ShapeError
from core.model_factory import ModelFactory
from core.perceptual import PerceptualExtractor, channel_mean
from core.training import train_loop


def test_stage_resolutions(tiny_extractor: PerceptualExtractor):
    maps = tiny_extractor.features(torch.rand(2, 3, 32, 48))
    assert [m.shape[-2:] for m in maps] == [(32 // r, 48 // r) for r in tiny_extractor.reductions]
    assert [m.size(1) for m in maps] == [4, 4, 8, 8, 8]


def test_weights_are_frozen_but_inputs_get_gradients(tiny_extractor: PerceptualExtractor):
    image = torch.rand(1, 3, 16, 16, requires_grad=True)
    sum(m.sum() for m in tiny_extractor.features(image)).backward()
    assert image.grad is not None and image.grad.abs().sum() > 0
    assert all(not p.requires_grad and p.grad is None for p in tiny_extractor.parameters())


def test_first_stage_responds_only_near_a_changed_pixel(tiny_extractor: PerceptualExtractor):
    torch.manual_seed(0)
    image = torch.rand(1, 3, 32, 32)
    changed = image.clone()
    changed[0, :, 16, 16] += 0.5
    diff = (tiny_extractor.features(changed)[0] - tiny_extractor.features(image)[0]).abs().sum(dim=1)[0]
    assert diff[15:18, 15:18].max() > 1e-3
    diff[15:18, 15:18] = 0
    assert diff.max() < 1e-6


def test_training_leaves_the_extractor_weights_untouched(tmp_path, tiny_splits, monkeypatch):
    built = []
    build = ModelFactory.get_extractor

    def recording(self):
        extractor = build(self)
        built.append(extractor)
        return extractor

    monkeypatch.setattr(ModelFactory, "get_extractor", recording)
    experiment = make_experiment()
    train_loop(experiment, tiny_splits["source_train"], tiny_splits["target_train"], tmp_path, show_progress=False)

    initial = PerceptualExtractor(experiment.model.perceptual_channels, experiment.model.perceptual_seed)
    assert built
    assert all(extractor.weights_digest() == initial.weights_digest() for extractor in built)


def test_train_mode_cannot_be_switched_on(tiny_extractor: PerceptualExtractor):
    tiny_extractor.train()
    assert not tiny_extractor.training


def test_seeded_weights_are_reproducible():
    assert PerceptualExtractor(seed=5).weights_digest() == PerceptualExtractor(seed=5).weights_digest()
    assert PerceptualExtractor(seed=5).weights_digest() != PerceptualExtractor(seed=6).weights_digest()


def test_size_not_divisible_by_sixteen(tiny_extractor: PerceptualExtractor):
    with pytest.raises(ShapeError):
        tiny_extractor.features(torch.rand(1, 3, 24, 32))


def test_channel_mean():
    feature = torch.arange(8.0).view(1, 2, 2, 2)
    assert torch.equal(channel_mean(feature), torch.tensor([[1.5, 5.5]]))


def test_weight_file_replaces_the_seeded_weights(tmp_path, tiny_extractor: PerceptualExtractor):
    path = tmp_path / "perceptual.bin"
    tiny_extractor.save_weights(path)
    other = PerceptualExtractor((4, 4, 8, 8, 8), seed=99)
    other.load_weights(path)
    assert other.weights_digest() == tiny_extractor.weights_digest()


def test_weight_file_with_other_shapes_is_rejected(tmp_path, tiny_extractor: PerceptualExtractor):
    path = tmp_path / "perceptual.bin"
    PerceptualExtractor((8, 8, 8, 8, 8)).save_weights(path)
    with pytest.raises(DataFormatError):
        tiny_extractor.load_weights(path)


def test_corrupt_weight_file(tmp_path, tiny_extractor: PerceptualExtractor):
    path = tmp_path / "perceptual.bin"
    tiny_extractor.save_weights(path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataFormatError):
        tiny_extractor.load_weights(path)
    path.write_bytes(raw[:-4])
    with pytest.raises(DataFormatError):
        tiny_extractor.load_weights(path)
