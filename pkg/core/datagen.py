import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from core.config_handler import DataConfig
from core.exceptions import ConfigError
from misc.variants_enum import Domain, Scenario, Split

logger = logging.getLogger("DATA")

# max disparity stays at W/8 for the nearest admissible depth
_MAX_DISPARITY_FRACTION = 1 / 8


class ShapeKind(Enum):
    RECTANGLE = "rectangle"
    ELLIPSE = "ellipse"


class View(Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class Texture:
    """World-anchored sinusoid modulating the albedo of one surface."""
    freq_x: float
    freq_y: float
    phase: float

    def pattern(self, x_world: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.sin(self.freq_x * x_world + self.freq_y * y + self.phase)


@dataclass(frozen=True)
class SceneObject:
    """Fronto-parallel object at constant depth, placed in left-view pixel coordinates."""
    kind: ShapeKind
    cx: float
    cy: float
    rx: float
    ry: float
    depth: float
    albedo: Tuple[float, float, float]
    texture: Texture

    def covers(self, x_world: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.kind == ShapeKind.RECTANGLE:
            return (np.abs(x_world - self.cx) <= self.rx) & (np.abs(y - self.cy) <= self.ry)
        return ((x_world - self.cx) / self.rx) ** 2 + ((y - self.cy) / self.ry) ** 2 <= 1.0


@dataclass(frozen=True)
class SceneLayout:
    """
    Geometry and albedo of a scene, shared by both domains: a background plane whose depth
    ramps from `background_far` (top row) to `background_near` (bottom row) and a list of
    objects in front of it.
    """
    background_far: float
    background_near: float
    background_albedo: Tuple[float, float, float]
    background_texture: Texture
    objects: Tuple[SceneObject, ...] = ()

    def background_depth(self, y: np.ndarray, height: int) -> np.ndarray:
        t = y / max(height - 1, 1)
        return self.background_far + (self.background_near - self.background_far) * t


@dataclass(frozen=True)
class DomainStyle:
    """
    Pointwise appearance of one domain: texture amplitude, camera response (tint, gamma,
    saturation) and depth-dependent fog.
    """
    texture_amplitude: float = 0.04
    tint: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = 1.0
    saturation: float = 1.0
    fog_density: float = 0.0
    fog_gray: float = 0.7


@dataclass
class SceneSample:
    """
    One rendered stereo sample; arrays are float32, images [3, H, W] in [0, 1] on the 8-bit
    grid and depth [1, H, W] of the left view. Depth is None for unlabeled splits.
    """
    left_image: np.ndarray
    right_image: np.ndarray
    depth: Optional[np.ndarray]
    domain: Domain
    seed: int
    layout: Optional[SceneLayout] = field(default=None, compare=False, repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneSample):
            return NotImplemented
        same_depth = (self.depth is None and other.depth is None) or (
            self.depth is not None and other.depth is not None and np.array_equal(self.depth, other.depth)
        )
        return (
            self.domain == other.domain
            and self.seed == other.seed
            and np.array_equal(self.left_image, other.left_image)
            and np.array_equal(self.right_image, other.right_image)
            and same_depth
        )


def quantize(image: np.ndarray) -> np.ndarray:
    """Maps [0, 1] values onto 8-bit codes."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.float32) / np.float32(255.0)


def check_geometry(config: DataConfig) -> None:
    """
    Raises:
        ConfigError: if the nearest depth would produce a disparity above W/8
    """
    max_disparity = config.focal_baseline / config.d_min
    if max_disparity > config.width * _MAX_DISPARITY_FRACTION + 1e-9:
        raise ConfigError(
            f"focal * baseline / d_min = {max_disparity:.3f} px exceeds the W/8 disparity bound "
            f"({config.width * _MAX_DISPARITY_FRACTION:.3f} px)"
        )


def sample_seed(master_seed: int, domain: Domain, split: Split, index: int) -> int:
    """
    Seed of one dataset sample. Source and target seeds differ for the same index, so the
    two domains hold unpaired scenes.
    """
    domain_id = list(Domain).index(domain)
    split_id = list(Split).index(split)
    sequence = np.random.SeedSequence([master_seed, domain_id, split_id, index])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _sample_texture(rng: np.random.Generator) -> Texture:
    return Texture(
        freq_x=float(rng.uniform(0.2, 1.2)),
        freq_y=float(rng.uniform(0.2, 1.2)),
        phase=float(rng.uniform(0, 2 * np.pi)),
    )


def sample_layout(seed: int, config: DataConfig) -> SceneLayout:
    """
    Draws the scene geometry; depends on the seed and the geometric config fields only,
    never on the domain.

    Args:
        seed (int): scene seed
        config (DataConfig): image size, depth range and object count range

    Returns:
        SceneLayout: the layout
    """
    rng = np.random.default_rng(seed)
    span = config.d_max - config.d_min
    background_near = config.d_min + span * float(rng.uniform(0.3, 0.5))
    layout_objects: List[SceneObject] = []
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    for _ in range(count):
        kind = ShapeKind.RECTANGLE if rng.random() < 0.5 else ShapeKind.ELLIPSE
        rx = float(rng.uniform(0.06, 0.2)) * config.width
        ry = float(rng.uniform(0.08, 0.3)) * config.height
        layout_objects.append(
            SceneObject(
                kind=kind,
                cx=float(rng.uniform(0, config.width - 1)),
                cy=float(rng.uniform(0.3, 1.0)) * (config.height - 1),
                rx=rx,
                ry=ry,
                depth=float(rng.uniform(config.d_min, config.d_min + 0.6 * span)),
                albedo=tuple(float(v) for v in rng.uniform(0.15, 0.9, size=3)),
                texture=_sample_texture(rng),
            )
        )
    return SceneLayout(
        background_far=config.d_max,
        background_near=background_near,
        background_albedo=tuple(float(v) for v in rng.uniform(0.3, 0.7, size=3)),
        background_texture=_sample_texture(rng),
        objects=tuple(layout_objects),
    )


def domain_style(domain: Domain, config: DataConfig) -> DomainStyle:
    """
    Style preset of a domain under the configured scenario.

    Returns:
        DomainStyle: cross-camera changes the colour response, synthetic-to-real makes the
            target desaturated, warmer, darker and more textured, adverse-weather adds fog
            to the source look
    """
    source = DomainStyle(texture_amplitude=config.source_texture, fog_gray=config.fog_gray)
    if config.scenario == Scenario.SYNTHETIC_TO_REAL:
        source = DomainStyle(texture_amplitude=config.source_texture, saturation=1.3, fog_gray=config.fog_gray)
    if domain == Domain.SOURCE:
        return source

    if config.scenario == Scenario.CROSS_CAMERA:
        return DomainStyle(
            texture_amplitude=config.source_texture,
            tint=(1.12, 1.0, 0.82),
            gamma=1.35,
            saturation=0.85,
            fog_gray=config.fog_gray,
        )
    if config.scenario == Scenario.SYNTHETIC_TO_REAL:
        return DomainStyle(
            texture_amplitude=config.target_texture,
            tint=(1.08, 0.97, 0.84),
            gamma=1.25,
            saturation=0.6,
            fog_gray=config.fog_gray,
        )
    return DomainStyle(
        texture_amplitude=config.source_texture,
        fog_density=config.fog_density,
        fog_gray=config.fog_gray,
    )


def render_view(
    layout: SceneLayout, style: DomainStyle, config: DataConfig, view: View
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Renders one view of a rectified stereo pair with a per-view z-buffer. A right-view pixel
    x_r sees the surface point whose left-view coordinate is x_r + f * B / depth; textures
    are anchored to that coordinate so both views agree on every visible point.

    Args:
        layout (SceneLayout): geometry and albedo
        style (DomainStyle): appearance of the domain
        config (DataConfig): image size, focal length and baseline
        view (View): left or right view

    Returns:
        Tuple[np.ndarray, np.ndarray]: image [3, H, W] float32 on the 8-bit grid, depth [1, H, W] float32
    """
    height, width = config.height, config.width
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    shift = 0.0 if view == View.LEFT else 1.0

    depth = layout.background_depth(ys, height)
    x_world = xs + shift * config.focal_baseline / depth
    pattern = layout.background_texture.pattern(x_world, ys)
    albedo = np.broadcast_to(np.asarray(layout.background_albedo)[:, None, None], (3, height, width)).copy()

    # far to near; the z-buffer test keeps occlusion right when objects sink behind the ground ramp
    for obj in sorted(layout.objects, key=lambda o: o.depth, reverse=True):
        x_obj = xs + shift * config.focal_baseline / obj.depth
        visible = obj.covers(x_obj, ys) & (obj.depth < depth)
        depth = np.where(visible, obj.depth, depth)
        pattern = np.where(visible, obj.texture.pattern(x_obj, ys), pattern)
        albedo = np.where(visible[None], np.asarray(obj.albedo)[:, None, None], albedo)

    image = albedo * (1.0 + style.texture_amplitude * pattern)[None]
    image = _apply_style(image, depth, style)
    return dequantize(quantize(image)), depth[None].astype(np.float32)


def _apply_style(image: np.ndarray, depth: np.ndarray, style: DomainStyle) -> np.ndarray:
    if style.fog_density > 0:
        transmission = np.exp(-style.fog_density * depth)[None]
        image = image * transmission + style.fog_gray * (1.0 - transmission)
    if style.saturation != 1.0:
        gray = image.mean(axis=0, keepdims=True)
        image = gray + style.saturation * (image - gray)
    if style.tint != (1.0, 1.0, 1.0):
        image = image * np.asarray(style.tint)[:, None, None]
    image = np.clip(image, 0.0, 1.0)
    if style.gamma != 1.0:
        image = image ** style.gamma
    return image


def gen_scene(seed: int, domain: Domain, config: DataConfig) -> SceneSample:
    """
    Renders the stereo sample of a seed in a domain; bit-identical for equal arguments.

    Args:
        seed (int): scene seed (geometry)
        domain (Domain): domain whose style is applied
        config (DataConfig): dataset configuration

    Returns:
        SceneSample: left/right images and left-view depth
    """
    check_geometry(config)
    layout = sample_layout(seed, config)
    style = domain_style(domain, config)
    left, depth = render_view(layout, style, config, View.LEFT)
    right, _ = render_view(layout, style, config, View.RIGHT)
    return SceneSample(left_image=left, right_image=right, depth=depth, domain=domain, seed=seed, layout=layout)
