import json
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import torch
from torch import nn
from torch.optim import Optimizer
from torch.optim.lr_scheduler import LRScheduler

from core.exceptions import CheckpointMismatchError, DataFormatError, DatasetIOError

logger = logging.getLogger("TRAIN")

CHECKPOINT_VERSION = 1
_FIELDS = (
    "format_version", "step", "config_hash", "data_hash", "model_hash", "model", "optimizers", "schedulers", "extra"
)


@dataclass
class Checkpoint:
    """
    Everything needed to resume or evaluate a run: sub-network parameters and buffers
    (including every separate-BN branch's running statistics), optimizer and scheduler
    states, the step reached and the hashes of the configuration that produced it.
    """
    step: int
    config_hash: str
    data_hash: str
    model_hash: str
    model_state: Dict[str, torch.Tensor]
    optimizer_states: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    scheduler_states: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def capture(
        cls,
        model: nn.Module,
        optimizers: Mapping[str, Optimizer],
        schedulers: Mapping[str, LRScheduler],
        step: int,
        config_hash: str,
        data_hash: str,
        model_hash: str,
        extra: Optional[Dict[str, Any]] = None,
    ) -> "Checkpoint":
        return cls(
            step=step,
            config_hash=config_hash,
            data_hash=data_hash,
            model_hash=model_hash,
            model_state=model.state_dict(),
            optimizer_states={name: opt.state_dict() for name, opt in optimizers.items()},
            scheduler_states={name: sched.state_dict() for name, sched in schedulers.items()},
            extra=dict(extra or {}),
        )

    def apply(
        self,
        model: nn.Module,
        optimizers: Optional[Mapping[str, Optimizer]] = None,
        schedulers: Optional[Mapping[str, LRScheduler]] = None,
    ) -> None:
        """
        Loads the stored states into freshly built objects.

        Raises:
            CheckpointMismatchError: if the stored states do not fit the given objects
        """
        try:
            model.load_state_dict(self.model_state)
        except RuntimeError as e:
            raise CheckpointMismatchError(f"Checkpoint does not fit the network: {e}") from e
        for name, optimizer in (optimizers or {}).items():
            if name not in self.optimizer_states:
                raise CheckpointMismatchError(f"Checkpoint has no state for optimizer '{name}'")
            try:
                optimizer.load_state_dict(self.optimizer_states[name])
            except (ValueError, KeyError) as e:
                raise CheckpointMismatchError(f"Optimizer '{name}' state does not fit: {e}") from e
        for name, scheduler in (schedulers or {}).items():
            if name not in self.scheduler_states:
                raise CheckpointMismatchError(f"Checkpoint has no state for scheduler '{name}'")
            scheduler.load_state_dict(self.scheduler_states[name])

    def check_compatible(self, config_hash: Optional[str] = None, data_hash: Optional[str] = None,
                         model_hash: Optional[str] = None) -> None:
        expected = {"config": (config_hash, self.config_hash), "data": (data_hash, self.data_hash),
                    "model": (model_hash, self.model_hash)}
        for what, (wanted, stored) in expected.items():
            if wanted is not None and wanted != stored:
                raise CheckpointMismatchError(
                    f"Checkpoint {what} hash {stored[:12]} differs from the current {what} hash {wanted[:12]}"
                )


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    """
    Writes a checkpoint as one torch archive. Saving a loaded checkpoint again under the
    same file name produces the same bytes.

    Args:
        path (Path): destination file
        checkpoint (Checkpoint): the checkpoint

    Returns:
        Path: the written file

    Raises:
        DataFormatError: if `extra` holds values other than plain JSON data
    """
    try:
        json.dumps(checkpoint.extra)
    except (TypeError, ValueError) as e:
        raise DataFormatError(f"Checkpoint extras must be plain data: {e}") from e
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": checkpoint.step,
        "config_hash": checkpoint.config_hash,
        "data_hash": checkpoint.data_hash,
        "model_hash": checkpoint.model_hash,
        "model": checkpoint.model_state,
        "optimizers": checkpoint.optimizer_states,
        "schedulers": checkpoint.scheduler_states,
        "extra": checkpoint.extra,
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise DatasetIOError(path, f"Cannot write checkpoint ({e})") from e
    logger.info(f"Saved checkpoint at step {checkpoint.step} to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Reads a checkpoint written by save_checkpoint.

    Raises:
        DataFormatError: if the file is not a torch archive, lacks fields or has another format version
        DatasetIOError: if the file cannot be read
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(path, "Checkpoint not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except OSError as e:
        raise DatasetIOError(path, f"Cannot read checkpoint ({e})") from e
    except (RuntimeError, pickle.UnpicklingError, EOFError, ValueError, KeyError, IndexError) as e:
        raise DataFormatError(f"Not a readable checkpoint: {path} ({e})") from e

    if not isinstance(payload, dict) or any(name not in payload for name in _FIELDS):
        raise DataFormatError(f"Checkpoint {path} lacks required fields")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise DataFormatError(f"Unsupported checkpoint version {payload['format_version']}: {path}")
    return Checkpoint(
        step=int(payload["step"]),
        config_hash=payload["config_hash"],
        data_hash=payload["data_hash"],
        model_hash=payload["model_hash"],
        model_state=payload["model"],
        optimizer_states=payload["optimizers"],
        scheduler_states=payload["schedulers"],
        extra=payload["extra"],
    )
