import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
from PIL import Image

from core.datagen import SceneSample, dequantize, quantize
from core.exceptions import DataFormatError, DatasetIOError
from misc.variants_enum import Domain, Split

logger = logging.getLogger("DATA")

DEPTH_MAGIC = b"LFDADPTH"
DEPTH_VERSION = 1
# magic, version, seed, channels, height, width
_DEPTH_HEADER = struct.Struct("<8sIqIII")
MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1


def split_dir(root: Path, domain: Domain, split: Split) -> Path:
    return Path(root) / domain.value / split.value


def sample_paths(directory: Path, index: int) -> Tuple[Path, Path, Path]:
    directory = Path(directory)
    return (
        directory / f"{index}.left.png",
        directory / f"{index}.right.png",
        directory / f"{index}.depth.f32",
    )


def write_png(path: Path, image: np.ndarray) -> None:
    """
    Writes a [3, H, W] image in [0, 1] as an 8-bit RGB PNG.
    """
    try:
        Image.fromarray(np.ascontiguousarray(quantize(image).transpose(1, 2, 0))).save(path, format="PNG")
    except OSError as e:
        raise DatasetIOError(path, f"Cannot write image ({e})") from e


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            codes = np.asarray(image.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError as e:
        raise DatasetIOError(path, "Image not found") from e
    except OSError as e:
        raise DataFormatError(f"Unreadable image {path}: {e}") from e
    return dequantize(codes.transpose(2, 0, 1))


def write_depth(path: Path, depth: np.ndarray, seed: int) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 3:
        raise DataFormatError(f"Depth must be [C, H, W], got shape {depth.shape}")
    header = _DEPTH_HEADER.pack(DEPTH_MAGIC, DEPTH_VERSION, seed, *depth.shape)
    try:
        Path(path).write_bytes(header + depth.tobytes())
    except OSError as e:
        raise DatasetIOError(path, f"Cannot write depth ({e})") from e


def read_depth_header(raw: bytes, path: Path) -> Tuple[int, Tuple[int, int, int]]:
    if len(raw) < _DEPTH_HEADER.size:
        raise DataFormatError(f"Truncated depth header: {path}")
    magic, version, seed, channels, height, width = _DEPTH_HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise DataFormatError(f"Not a depth file (bad magic): {path}")
    if version != DEPTH_VERSION:
        raise DataFormatError(f"Unsupported depth file version {version}: {path}")
    return seed, (channels, height, width)


def read_depth(path: Path) -> Tuple[np.ndarray, int]:
    """
    Reads a depth file written by write_depth.

    Args:
        path (Path): depth file

    Returns:
        Tuple[np.ndarray, int]: depth [C, H, W] float32 and the seed of the sample

    Raises:
        DataFormatError: on a bad magic, an unknown version or a payload of the wrong size
        DatasetIOError: if the file cannot be read
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(path, f"Cannot read depth ({e})") from e
    seed, shape = read_depth_header(raw, path)
    expected = _DEPTH_HEADER.size + 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise DataFormatError(f"Depth payload of {len(raw)} bytes, expected {expected}: {path}")
    depth = np.frombuffer(raw, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(shape)
    return depth.astype(np.float32), seed


def write_sample(directory: Path, index: int, sample: SceneSample) -> None:
    """
    Writes one sample as <index>.left.png, <index>.right.png and <index>.depth.f32. The depth
    file also carries the seed, so it is written (empty) for unlabeled samples too.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(directory, f"Cannot create sample directory ({e})") from e
    left_path, right_path, depth_path = sample_paths(directory, index)
    write_png(left_path, sample.left_image)
    write_png(right_path, sample.right_image)
    depth = sample.depth if sample.depth is not None else np.zeros((0, 0, 0), dtype=np.float32)
    write_depth(depth_path, depth, sample.seed)


def read_sample(directory: Path, index: int, domain: Domain, with_depth: bool = True) -> SceneSample:
    """
    Reads one sample back; read_sample(write_sample(s)) == s.

    Args:
        directory (Path): split directory
        index (int): sample index
        domain (Domain): domain of the split
        with_depth (bool): False drops the depth map (unlabeled target training split)

    Returns:
        SceneSample: the sample
    """
    left_path, right_path, depth_path = sample_paths(directory, index)
    depth, seed = read_depth(depth_path)
    if depth.size == 0:
        depth = None
    return SceneSample(
        left_image=read_png(left_path),
        right_image=read_png(right_path),
        depth=depth if with_depth else None,
        domain=domain,
        seed=seed,
    )


def write_manifest(root: Path, manifest: Dict[str, Any]) -> Path:
    path = Path(root) / MANIFEST_NAME
    try:
        path.write_text(json.dumps(manifest, indent=4, sort_keys=True))
    except OSError as e:
        raise DatasetIOError(path, f"Cannot write manifest ({e})") from e
    return path


def read_manifest(root: Path) -> Dict[str, Any]:
    path = Path(root) / MANIFEST_NAME
    try:
        with path.open("r") as file:
            return json.load(file)
    except FileNotFoundError as e:
        raise DatasetIOError(path, "Dataset manifest not found") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Corrupt dataset manifest {path}: {e}") from e
