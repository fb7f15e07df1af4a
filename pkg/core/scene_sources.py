import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from core.config_handler import DataConfig, config_digest
from core.datagen import SceneSample, check_geometry, gen_scene, sample_seed
from core.exceptions import DataFormatError, DatasetIOError, ShapeError
from core.interfaces import AbstractSceneSource
from core.sample_io import (
    DATASET_FORMAT_VERSION,
    read_depth,
    read_manifest,
    read_png,
    read_sample,
    split_dir,
    write_manifest,
    write_sample,
)
from misc.variants_enum import Domain, Split

logger = logging.getLogger("DATA")


def split_count(config: DataConfig, split: Split) -> int:
    return {Split.TRAIN: config.train_count, Split.VAL: config.val_count, Split.TEST: config.test_count}[split]


def has_labels(domain: Domain, split: Split) -> bool:
    """Target training depth is never exposed; every other split keeps its ground truth."""
    return not (domain == Domain.TARGET and split == Split.TRAIN)


class SyntheticSceneSource(AbstractSceneSource):
    """Renders samples on demand from the per-sample seeds of a split."""

    def __init__(self, config: DataConfig, domain: Domain, split: Split) -> None:
        check_geometry(config)
        self._config = config
        self._domain = domain
        self._split = split

    @property
    def domain(self) -> Domain:
        return self._domain

    @property
    def split(self) -> Split:
        return self._split

    def __len__(self) -> int:
        return split_count(self._config, self._split)

    def load(self, index: int) -> SceneSample:
        if not 0 <= index < len(self):
            raise IndexError(f"Sample {index} outside of {self._domain.value}/{self._split.value}")
        seed = sample_seed(self._config.seed, self._domain, self._split, index)
        sample = gen_scene(seed, self._domain, self._config)
        if not has_labels(self._domain, self._split):
            sample.depth = None
        return sample


class DiskSceneSource(AbstractSceneSource):
    """Reads the samples of one split of a dataset written by generate_dataset."""

    def __init__(self, root: Path, domain: Domain, split: Split, with_depth: Optional[bool] = None) -> None:
        """
        Constructor

        Args:
            root (Path): dataset root
            domain (Domain): domain directory
            split (Split): split directory
            with_depth (Optional[bool]): load depth maps; defaults to False for the target
                training split and True otherwise
        """
        self._root = Path(root)
        self._domain = domain
        self._split = split
        self._with_depth = has_labels(domain, split) if with_depth is None else with_depth
        self._directory = split_dir(self._root, domain, split)
        if not self._directory.is_dir():
            raise DatasetIOError(self._directory, "Split directory not found")
        manifest = read_manifest(self._root)
        try:
            self._count = int(manifest["counts"][domain.value][split.value])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Manifest of {self._root} has no count for {domain.value}/{split.value}") from e

    @property
    def domain(self) -> Domain:
        return self._domain

    @property
    def split(self) -> Split:
        return self._split

    def __len__(self) -> int:
        return self._count

    def load(self, index: int) -> SceneSample:
        if not 0 <= index < self._count:
            raise IndexError(f"Sample {index} outside of {self._directory}")
        return read_sample(self._directory, index, self._domain, self._with_depth)


class ExternalDatasetSource(AbstractSceneSource):
    """
    Reads a real rectified stereo dataset laid out as

        <root>/<split>/image_02/<frame>.png   left images
        <root>/<split>/image_03/<frame>.png   right images
        <root>/<split>/depth/<frame>.f32      optional ground-truth depth (same header as
                                              the synthetic depth files)
        <root>/calib.json                     {"focal": <px>, "baseline": <depth units>}

    Frames are ordered by name and must already be resized so that both sides are
    divisible by 16.
    """

    def __init__(self, root: Path, domain: Domain, split: Split, with_depth: Optional[bool] = None) -> None:
        self._root = Path(root)
        self._domain = domain
        self._split = split
        self._with_depth = has_labels(domain, split) if with_depth is None else with_depth
        self._directory = self._root / split.value
        left_dir = self._directory / "image_02"
        self._frames: List[str] = sorted(p.stem for p in left_dir.glob("*.png")) if left_dir.is_dir() else []

    @property
    def domain(self) -> Domain:
        return self._domain

    @property
    def split(self) -> Split:
        return self._split

    def __len__(self) -> int:
        return len(self._frames)

    def calibration(self) -> Tuple[float, float]:
        """
        Reads the stereo calibration of the dataset.

        Returns:
            Tuple[float, float]: focal length in pixels and baseline in depth units
        """
        path = self._root / "calib.json"
        try:
            calib = json.loads(path.read_text())
            focal, baseline = float(calib["focal"]), float(calib["baseline"])
        except OSError as e:
            raise DatasetIOError(path, f"Cannot read calibration ({e})") from e
        except (ValueError, KeyError, TypeError) as e:
            raise DataFormatError(f"Calibration {path} needs numeric 'focal' and 'baseline': {e}") from e
        if focal <= 0 or baseline <= 0:
            raise DataFormatError(f"Calibration {path} has a non-positive focal length or baseline")
        return focal, baseline

    def load(self, index: int) -> SceneSample:
        if not 0 <= index < len(self):
            raise IndexError(f"Sample {index} outside of {self._directory}")
        frame = self._frames[index]
        left = read_png(self._directory / "image_02" / f"{frame}.png")
        right = read_png(self._directory / "image_03" / f"{frame}.png")
        if left.shape != right.shape:
            raise ShapeError(f"Frame {frame}: left {left.shape} and right {right.shape} differ")
        if left.shape[1] % 16 or left.shape[2] % 16:
            raise ShapeError(f"Frame {frame} of size {left.shape[1]}x{left.shape[2]} is not divisible by 16")

        depth = None
        depth_path = self._directory / "depth" / f"{frame}.f32"
        if self._with_depth and depth_path.is_file():
            depth, _ = read_depth(depth_path)
            if depth.shape != (1, *left.shape[1:]):
                raise ShapeError(f"Frame {frame}: depth {depth.shape} does not match the image")
        return SceneSample(left_image=left, right_image=right, depth=depth, domain=self._domain, seed=index)


class SceneDataset(Dataset):
    """
    In-memory torch dataset of one split. Items are dicts with "left", "right" ([3, H, W])
    and, for labeled splits, "depth" ([1, H, W]).
    """

    def __init__(self, source: AbstractSceneSource) -> None:
        self.domain: Domain = source.domain
        self.split: Split = source.split
        samples: List[SceneSample] = list(source)
        if not samples:
            raise DataFormatError(f"Split {source.domain.value}/{source.split.value} is empty")
        self.left = torch.from_numpy(np.stack([s.left_image for s in samples]))
        self.right = torch.from_numpy(np.stack([s.right_image for s in samples]))
        labeled = [s.depth is not None for s in samples]
        if any(labeled) and not all(labeled):
            raise DataFormatError(f"Split {self.domain.value}/{self.split.value} is partially labeled")
        self.depth: Optional[torch.Tensor] = (
            torch.from_numpy(np.stack([s.depth for s in samples])) if all(labeled) else None
        )
        self.seeds: List[int] = [s.seed for s in samples]

    @property
    def has_depth(self) -> bool:
        return self.depth is not None

    def __len__(self) -> int:
        return self.left.size(0)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        item = {"left": self.left[index], "right": self.right[index]}
        if self.depth is not None:
            item["depth"] = self.depth[index]
        return item

    def batch(self, indices: List[int]) -> Dict[str, torch.Tensor]:
        index = torch.as_tensor(indices, dtype=torch.long)
        item = {"left": self.left[index], "right": self.right[index]}
        if self.depth is not None:
            item["depth"] = self.depth[index]
        return item


def generate_dataset(root: Path, config: DataConfig) -> Dict[str, object]:
    """
    Renders every domain and split of the synthetic dataset into a directory tree
    <root>/<domain>/<split>/<index>.{left.png,right.png,depth.f32} with a manifest.

    Args:
        root (Path): output directory
        config (DataConfig): dataset configuration

    Returns:
        Dict[str, object]: the manifest written next to the data
    """
    root = Path(root)
    counts: Dict[str, Dict[str, int]] = {}
    for domain in Domain:
        counts[domain.value] = {}
        for split in Split:
            source = SyntheticSceneSource(config, domain, split)
            directory = split_dir(root, domain, split)
            directory.mkdir(parents=True, exist_ok=True)
            for index, sample in enumerate(
                tqdm(source, total=len(source), desc=f"{domain.value}/{split.value}", leave=False)
            ):
                write_sample(directory, index, sample)
            counts[domain.value][split.value] = len(source)
            logger.info(f"Wrote {len(source)} samples to {directory}")

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "data_hash": config_digest(config),
        "scenario": config.scenario.value,
        "seed": config.seed,
        "counts": counts,
    }
    write_manifest(root, manifest)
    return manifest


def load_split(
    root: Path, domain: Domain, split: Split, expected_hash: Optional[str] = None
) -> SceneDataset:
    """
    Loads one split of a generated dataset into memory.

    Args:
        root (Path): dataset root
        domain (Domain): domain to load
        split (Split): split to load
        expected_hash (Optional[str]): data hash the manifest must carry

    Returns:
        SceneDataset: the split (unlabeled for the target training split)

    Raises:
        DataFormatError: if the manifest's data hash differs from expected_hash
    """
    if expected_hash is not None:
        found = read_manifest(root).get("data_hash")
        if found != expected_hash:
            raise DataFormatError(
                f"Dataset {root} was generated with a different data config ({found} != {expected_hash})"
            )
    dataset = SceneDataset(DiskSceneSource(root, domain, split))
    logger.info(f"Loaded {len(dataset)} samples of {domain.value}/{split.value} from {root}")
    return dataset


def synthetic_split(config: DataConfig, domain: Domain, split: Split) -> SceneDataset:
    """In-memory split rendered directly, without going through the filesystem."""
    return SceneDataset(SyntheticSceneSource(config, domain, split))
