import hashlib
import logging
import struct
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from torch import nn

from core.exceptions import DataFormatError, DatasetIOError, ShapeError
from core.interfaces import AbstractFeatureExtractor

logger = logging.getLogger("MODEL")

_WEIGHTS_MAGIC = b"LFDAPERC"
_WEIGHTS_VERSION = 1


def channel_mean(feature: torch.Tensor) -> torch.Tensor:
    """
    Channel-wise mean of a feature map, the style statistic of the translation loss.

    Args:
        feature (torch.Tensor): feature map [batch, channels, h, w]

    Returns:
        torch.Tensor: means [batch, channels]
    """
    return feature.mean(dim=(2, 3))


class PerceptualExtractor(nn.Module, AbstractFeatureExtractor):
    """
    Five frozen conv stages with ReLU, reducing the input by {1, 2, 4, 8, 16}. Weights come
    from a seeded orthogonal initializer unless replaced through load_weights; they never
    receive gradients, while gradients still flow to the input image.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 64, 64), seed: int = 1234) -> None:
        """
        Constructor

        Args:
            channels (Sequence[int]): output width of each of the five stages
            seed (int): seed of the fixed weight initializer
        """
        super().__init__()
        if len(channels) != 5:
            raise ValueError("The perceptual extractor has exactly five stages")
        stages = []
        in_channels = 3
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for j, out_channels in enumerate(channels):
                conv = nn.Conv2d(in_channels, out_channels, 3, 1 if j == 0 else 2, 1)
                nn.init.orthogonal_(conv.weight, gain=nn.init.calculate_gain("relu"))
                nn.init.zeros_(conv.bias)
                stages.append(nn.Sequential(conv, nn.ReLU()))
                in_channels = out_channels
        self.stages = nn.ModuleList(stages)
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    @property
    def reductions(self) -> List[int]:
        return [1, 2, 4, 8, 16]

    def train(self, mode: bool = True) -> "PerceptualExtractor":
        # frozen: always behaves as in eval mode
        return super().train(False)

    def features(self, image: torch.Tensor) -> List[torch.Tensor]:
        if image.dim() != 4 or image.size(1) != 3:
            raise ShapeError(f"Expected an image batch [batch, 3, H, W], got {list(image.shape)}")
        if image.size(2) % 16 or image.size(3) % 16:
            raise ShapeError(f"Image size {image.size(2)}x{image.size(3)} is not divisible by 16")
        maps = []
        x = image
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        return self.features(image)

    def weights_digest(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def save_weights(self, path: Path) -> None:
        """
        Writes the stage weights as a flat float32 file: magic, version, stage count,
        per-stage weight shapes, then every stage's weights followed by its biases.

        Args:
            path (Path): destination file
        """
        convs = [stage[0] for stage in self.stages]
        header = bytearray(_WEIGHTS_MAGIC)
        header += struct.pack("<II", _WEIGHTS_VERSION, len(convs))
        for conv in convs:
            header += struct.pack("<4I", *conv.weight.shape)
        body = b"".join(
            conv.weight.detach().cpu().numpy().astype("<f4").tobytes()
            + conv.bias.detach().cpu().numpy().astype("<f4").tobytes()
            for conv in convs
        )
        try:
            Path(path).write_bytes(bytes(header) + body)
        except OSError as e:
            raise DatasetIOError(path, f"Cannot write perceptual weights ({e})") from e

    def load_weights(self, path: Path) -> None:
        """
        Replaces the fixed weights with the contents of a weight file (see save_weights).

        Args:
            path (Path): weight file

        Raises:
            DataFormatError: if the header or the stage shapes do not match this extractor
        """
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise DatasetIOError(path, f"Cannot read perceptual weights ({e})") from e

        prefix = len(_WEIGHTS_MAGIC) + 8
        if len(raw) < prefix or raw[: len(_WEIGHTS_MAGIC)] != _WEIGHTS_MAGIC:
            raise DataFormatError(f"Not a perceptual weight file: {path}")
        version, count = struct.unpack_from("<II", raw, len(_WEIGHTS_MAGIC))
        convs = [stage[0] for stage in self.stages]
        if version != _WEIGHTS_VERSION or count != len(convs):
            raise DataFormatError(f"Unsupported weight file (version {version}, {count} stages): {path}")
        if len(raw) < prefix + 16 * count:
            raise DataFormatError(f"Truncated weight file header: {path}")
        shapes = [struct.unpack_from("<4I", raw, prefix + 16 * j) for j in range(count)]
        offset = prefix + 16 * count

        loaded = []
        for conv, shape in zip(convs, shapes):
            if tuple(shape) != tuple(conv.weight.shape):
                raise DataFormatError(
                    f"Stage shape {shape} does not match extractor shape {tuple(conv.weight.shape)}: {path}"
                )
            n_weight = int(np.prod(shape))
            n_bias = shape[0]
            end = offset + 4 * (n_weight + n_bias)
            if end > len(raw):
                raise DataFormatError(f"Truncated weight file body: {path}")
            values = np.frombuffer(raw, dtype="<f4", count=n_weight + n_bias, offset=offset)
            loaded.append((values[:n_weight].reshape(shape), values[n_weight:]))
            offset = end
        if offset != len(raw):
            raise DataFormatError(f"Trailing bytes in weight file: {path}")

        with torch.no_grad():
            for conv, (weight, bias) in zip(convs, loaded):
                conv.weight.copy_(torch.from_numpy(weight.copy()))
                conv.bias.copy_(torch.from_numpy(bias.copy()))
        logger.info(f"Loaded perceptual weights from {path}")
