import logging
from pathlib import Path
from typing import Dict, List

from torch import nn
from torch.optim import Adam, Optimizer
from torch.optim.lr_scheduler import LambdaLR

from core.config_handler import ExperimentConfig, config_digest
from core.exceptions import ConfigError
from core.networks import LFDANetwork
from core.perceptual import PerceptualExtractor

logger = logging.getLogger("MODEL")

MAIN_OPTIMIZER = "main"
DISC_OPTIMIZER = "disc"


def poly_factor(step: int, total_steps: int, power: float) -> float:
    """
    Multiplier of the polynomial learning-rate decay (1 - step / total_steps) ** power.

    Raises:
        ValueError: for a negative step
    """
    if step < 0:
        raise ValueError(f"Step must be non-negative, got {step}")
    if total_steps <= 0:
        return 1.0
    if step >= total_steps:
        return 0.0
    return (1.0 - step / total_steps) ** power


def poly_decay(lr0: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return lr0 * poly_factor(step, total_steps, power)


def _parameters(modules: Dict[str, nn.Module]) -> List[nn.Parameter]:
    return [p for module in modules.values() for p in module.parameters()]


class ModelFactory:
    def __init__(self, experiment: ExperimentConfig) -> None:
        """
        Constructor

        Args:
            experiment (ExperimentConfig): resolved configuration of the run
        """
        self._experiment: ExperimentConfig = experiment

    @property
    def model_hash(self) -> str:
        """Digest of everything that shapes the network's parameters and outputs."""
        return config_digest(self._experiment.model, self._experiment.data)

    def get_network(self) -> LFDANetwork:
        """
        Creates the eight sub-networks, seeded by MODEL_INIT_SEED.

        Returns:
            LFDANetwork: the network container
        """
        return LFDANetwork(self._experiment.model, self._experiment.data)

    def get_extractor(self) -> PerceptualExtractor:
        """
        Creates the frozen perceptual extractor; MODEL_PERCEPTUAL_WEIGHTS replaces its seeded
        weights with the contents of a weight file.

        Returns:
            PerceptualExtractor: the extractor
        """
        model = self._experiment.model
        extractor = PerceptualExtractor(model.perceptual_channels, model.perceptual_seed)
        if model.perceptual_weights:
            path = Path(model.perceptual_weights)
            if not path.is_file():
                raise ConfigError(f"Perceptual weight file not found: {path}")
            extractor.load_weights(path)
        logger.info(f"Perceptual extractor weights {extractor.weights_digest()[:12]}")
        return extractor

    def get_optimizers(self, network: LFDANetwork) -> Dict[str, Optimizer]:
        """
        Creates the optimizer of the objective (task sub-networks at lr_task, the style
        encoders and the generator at lr_other) and the discriminator optimizer (lr_other).

        Args:
            network (LFDANetwork): network whose parameters are optimized

        Returns:
            Dict[str, Optimizer]: optimizers by name ("main", "disc")
        """
        train = self._experiment.train
        betas = (train.adam_beta1, train.adam_beta2)
        main = Adam(
            [
                {"params": _parameters(network.task_modules()), "lr": train.lr_task},
                {"params": _parameters(network.auxiliary_modules()), "lr": train.lr_other},
            ],
            betas=betas,
            eps=train.adam_eps,
        )
        disc = Adam(
            _parameters(network.discriminator_modules()), lr=train.lr_other, betas=betas, eps=train.adam_eps
        )
        return {MAIN_OPTIMIZER: main, DISC_OPTIMIZER: disc}

    def get_schedulers(self, optimizers: Dict[str, Optimizer]) -> Dict[str, LambdaLR]:
        train = self._experiment.train

        def factor(step: int) -> float:
            return poly_factor(step, train.total_steps, train.decay_power)

        return {name: LambdaLR(optimizer, lr_lambda=factor) for name, optimizer in optimizers.items()}
