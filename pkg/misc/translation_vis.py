from pathlib import Path
from typing import Dict, List, Optional

import torch
from torchvision.utils import make_grid, save_image

from core.exceptions import DatasetIOError

GRID_ORDER = ("source", "target", "s2s", "t2t", "s2t", "t2s")


def save_translation_grids(
    images: Dict[str, torch.Tensor],
    out_dir: Path,
    prefix: str = "sample",
    order: Optional[List[str]] = None,
) -> List[Path]:
    """
    Saves one PNG per sample showing, side by side, the source and target images, their
    reconstructions and both translations.

    Args:
        images (Dict[str, torch.Tensor]): batches keyed by role, all [batch, 3, H, W] in [0, 1]
        out_dir (Path): directory of the PNG files
        prefix (str): file name prefix, files are <prefix>_<index>.png
        order (Optional[List[str]]): roles in grid order, defaults to GRID_ORDER

    Returns:
        List[Path]: written files
    """
    order = list(order or GRID_ORDER)
    missing = [role for role in order if role not in images]
    if missing:
        raise KeyError(f"Missing images for {missing}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = []
    for index in range(images[order[0]].size(0)):
        tiles = torch.stack([images[role][index].detach().cpu().clamp(0, 1) for role in order])
        path = out_dir / f"{prefix}_{index}.png"
        try:
            save_image(make_grid(tiles, nrow=len(order), padding=2, pad_value=1.0), path)
        except OSError as e:
            raise DatasetIOError(path, f"Cannot write translation grid ({e})") from e
        paths.append(path)
    return paths
