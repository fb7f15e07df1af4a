from abc import ABC, abstractmethod
from typing import Iterator, List

import torch

from misc.variants_enum import Domain, Split


class AbstractFeatureExtractor(ABC):
    """Interface for a fixed multi-stage feature extractor used by perceptual losses"""

    @property
    @abstractmethod
    def reductions(self) -> List[int]:
        """
        Spatial reduction factor of every stage, in stage order.

        Returns:
            List[int]: reduction of stage j relative to the input image
        """
        raise NotImplementedError

    @abstractmethod
    def features(self, image: torch.Tensor) -> List[torch.Tensor]:
        """
        Method computing the feature maps of every stage.

        Args:
            image (torch.Tensor): image batch [batch, 3, H, W]

        Returns:
            List[torch.Tensor]: one feature map per stage
        """
        raise NotImplementedError


class AbstractSceneSource(ABC):
    """Interface for a source of stereo scene samples of one domain and split"""

    @property
    @abstractmethod
    def domain(self) -> Domain:
        raise NotImplementedError

    @property
    @abstractmethod
    def split(self) -> Split:
        raise NotImplementedError

    @abstractmethod
    def __len__(self) -> int:
        raise NotImplementedError

    @abstractmethod
    def load(self, index: int):
        """
        Method loading one sample.

        Args:
            index (int): position of the sample within the split

        Returns:
            SceneSample: the sample
        """
        raise NotImplementedError

    def __iter__(self) -> Iterator:
        for index in range(len(self)):
            yield self.load(index)
