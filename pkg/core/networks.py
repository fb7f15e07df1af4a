import logging
from typing import Callable, Dict, Optional, Sequence, TypeVar

import torch
import torch.nn.functional as F
from torch import nn
from torch.autograd import Function

from core.config_handler import DataConfig, ModelConfig
from core.exceptions import RoutingError, ShapeError
from core.normalization import SeparateBatchNorm2d
from misc.variants_enum import (
    DecoderBranch,
    DepthRoute,
    DiscriminatorKind,
    Domain,
    EncoderBranch,
)

logger = logging.getLogger("MODEL")

M = TypeVar("M", bound=nn.Module)


class GradientReversalFunction(Function):
    """
    Identity in the forward pass; multiplies the incoming gradient by -lambda in the backward pass.
    """

    @staticmethod
    def forward(ctx, x: torch.Tensor, lambda_grl: float) -> torch.Tensor:
        ctx.lambda_grl = float(lambda_grl)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output.neg() * ctx.lambda_grl, None


def gradient_reverse(x: torch.Tensor, lambda_grl: float) -> torch.Tensor:
    return GradientReversalFunction.apply(x, lambda_grl)


class GradientReversal(nn.Module):
    def __init__(self, lambda_grl: float = 1.0) -> None:
        super().__init__()
        self.lambda_grl: float = lambda_grl

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gradient_reverse(x, self.lambda_grl)


class RoutedConvStage(nn.Module):
    """3x3 convolution, separate BN and ReLU; optionally preceded by 2x nearest upsampling."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        num_branches: int,
        upsample: bool = False,
        eps: float = 1e-5,
        momentum: float = 0.1,
    ) -> None:
        super().__init__()
        self.upsample: bool = upsample
        # the BN shift makes a convolution bias redundant
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.norm = SeparateBatchNorm2d(out_channels, num_branches, eps, momentum)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor, branch: int) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.act(self.norm(self.conv(x), branch))


def _check_image(image: torch.Tensor, stride: int) -> None:
    if image.dim() != 4 or image.size(1) != 3:
        raise ShapeError(f"Expected an image batch [batch, 3, H, W], got {list(image.shape)}")
    if image.size(2) % stride or image.size(3) % stride:
        raise ShapeError(
            f"Image size {image.size(2)}x{image.size(3)} is not divisible by the encoder stride {stride}"
        )


class ContentEncoder(nn.Module):
    """
    Shared content encoder; every stage normalizes through a two-branch separate BN
    (source, target).
    """

    def __init__(
        self,
        channels: Sequence[int],
        strides: Sequence[int],
        eps: float = 1e-5,
        momentum: float = 0.1,
    ) -> None:
        super().__init__()
        self.total_stride: int = 1
        stages = []
        in_channels = 3
        for out_channels, stride in zip(channels, strides):
            stages.append(
                RoutedConvStage(in_channels, out_channels, stride, len(EncoderBranch), eps=eps, momentum=momentum)
            )
            in_channels = out_channels
            self.total_stride *= stride
        self.stages = nn.ModuleList(stages)
        self.out_channels: int = in_channels

    def forward(self, image: torch.Tensor, branch: EncoderBranch) -> torch.Tensor:
        _check_image(image, self.total_stride)
        x = image
        for stage in self.stages:
            x = stage(x, branch)
        return x


class StyleEncoder(nn.Module):
    """Domain-specific style encoder with ordinary (single-branch) batch normalization."""

    def __init__(self, channels: Sequence[int], strides: Sequence[int]) -> None:
        super().__init__()
        self.total_stride: int = 1
        layers = []
        in_channels = 3
        for out_channels, stride in zip(channels, strides):
            layers += [
                nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False),
                nn.BatchNorm2d(out_channels),
                nn.ReLU(),
            ]
            in_channels = out_channels
            self.total_stride *= stride
        self.layers = nn.Sequential(*layers)
        self.out_channels: int = in_channels

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        _check_image(image, self.total_stride)
        return self.layers(image)


class DepthDecoder(nn.Module):
    """
    Depth decoder with three-branch separate BN (source content, target content, target style).
    Content and style paths share the convolutions; right before the output layer they are
    fused as out = content + Conv1x1(concat(content, style)). The head is a sigmoid rescaled
    to [d_min, d_max].
    """

    def __init__(
        self,
        in_channels: int,
        channels: Sequence[int],
        d_min: float,
        d_max: float,
        eps: float = 1e-5,
        momentum: float = 0.1,
    ) -> None:
        super().__init__()
        stages = []
        for i, out_channels in enumerate(channels):
            stages.append(
                RoutedConvStage(
                    in_channels, out_channels, 1, len(DecoderBranch), upsample=i > 0, eps=eps, momentum=momentum
                )
            )
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)
        self.fusion = nn.Conv2d(2 * in_channels, in_channels, 1)
        self.head = nn.Conv2d(in_channels, 1, 3, padding=1)
        self.d_min: float = d_min
        self.d_max: float = d_max

    def forward(
        self,
        content: torch.Tensor,
        style: Optional[torch.Tensor] = None,
        route: DepthRoute = DepthRoute.SOURCE,
        style_branch: DecoderBranch = DecoderBranch.TARGET_STYLE,
    ) -> torch.Tensor:
        if route == DepthRoute.SOURCE:
            if style is not None:
                raise RoutingError("The source depth route takes no style feature")
            content_branch = DecoderBranch.SOURCE_CONTENT
        elif route == DepthRoute.TARGET:
            content_branch = DecoderBranch.TARGET_CONTENT
        else:
            raise RoutingError(f"Unknown depth route {route!r}")
        if style is not None and style.shape != content.shape:
            raise ShapeError(
                f"Style feature {list(style.shape)} does not match content feature {list(content.shape)}"
            )

        x = self._run_stages(content, content_branch)
        if style is not None:
            s = self._run_stages(style, style_branch)
            x = x + self.fusion(torch.cat([x, s], dim=1))
        depth = self.d_min + (self.d_max - self.d_min) * torch.sigmoid(self.head(x))
        return depth.clamp(self.d_min, self.d_max)

    def _run_stages(self, x: torch.Tensor, branch: DecoderBranch) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x, branch)
        return x


class Generator(nn.Module):
    """Maps a (content, style) feature pair back to an RGB image in [0, 1]."""

    def __init__(self, content_channels: int, style_channels: int, channels: Sequence[int]) -> None:
        super().__init__()
        layers = []
        in_channels = content_channels + style_channels
        for i, out_channels in enumerate(channels):
            if i > 0:
                layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers += [nn.Conv2d(in_channels, out_channels, 3, padding=1), nn.LeakyReLU(0.2)]
            in_channels = out_channels
        layers.append(nn.Conv2d(in_channels, 3, 3, padding=1))
        self.layers = nn.Sequential(*layers)

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if content.dim() != 4 or style.dim() != 4 or content.shape[2:] != style.shape[2:]:
            raise ShapeError(
                f"Content {list(content.shape)} and style {list(style.shape)} spatial sizes differ"
            )
        return torch.sigmoid(self.layers(torch.cat([content, style], dim=1)))


class PatchDiscriminator(nn.Module):
    """
    Three-stage patch discriminator producing an unbounded one-channel score map.
    Stride-2 stages use 4x4 kernels, stride-1 stages 3x3 kernels, so small feature
    maps keep a non-empty score map.
    """

    def __init__(self, in_channels: int, channels: Sequence[int], strides: Sequence[int]) -> None:
        super().__init__()
        self.in_channels: int = in_channels
        layers = []
        for out_channels, stride in zip(channels, strides):
            kernel = 4 if stride == 2 else 3
            layers += [nn.Conv2d(in_channels, out_channels, kernel, stride, 1), nn.LeakyReLU(0.2)]
            in_channels = out_channels
        layers.append(nn.Conv2d(in_channels, 1, 3, 1, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.size(1) != self.in_channels:
            raise ShapeError(
                f"Discriminator expects {self.in_channels} input channels, got {list(x.shape)}"
            )
        return self.model(x)


def _seeded(seed: int, build: Callable[[], M]) -> M:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class LFDANetwork(nn.Module):
    """
    Container of the eight sub-networks. Only content_encoder, style_encoder_target and
    depth_decoder take part in target-domain inference.
    """

    def __init__(self, config: ModelConfig, data: DataConfig) -> None:
        """
        Constructor

        Args:
            config (ModelConfig): sub-network sizes and initialization seed
            data (DataConfig): supplies the depth range of the decoder head
        """
        super().__init__()
        seed = config.init_seed
        eps, momentum = config.bn_eps, config.bn_momentum
        c_con = config.content_channels[-1]
        c_sty = config.style_channels[-1]

        self.content_encoder = _seeded(
            seed, lambda: ContentEncoder(config.content_channels, config.content_strides, eps, momentum)
        )
        self.style_encoder_source = _seeded(
            seed + 1, lambda: StyleEncoder(config.style_channels, config.content_strides)
        )
        self.style_encoder_target = _seeded(
            seed + 2, lambda: StyleEncoder(config.style_channels, config.content_strides)
        )
        self.depth_decoder = _seeded(
            seed + 3,
            lambda: DepthDecoder(c_con, config.decoder_channels, data.d_min, data.d_max, eps, momentum),
        )
        self.generator = _seeded(seed + 4, lambda: Generator(c_con, c_sty, config.generator_channels))
        self.feature_disc = _seeded(
            seed + 5, lambda: PatchDiscriminator(c_con, config.disc_channels, (2, 1, 1))
        )
        self.disc_s2t = _seeded(seed + 6, lambda: PatchDiscriminator(3, config.disc_channels, (2, 2, 2)))
        self.disc_t2s = _seeded(seed + 7, lambda: PatchDiscriminator(3, config.disc_channels, (2, 2, 2)))
        logger.info(
            f"Built LFDA network with {sum(p.numel() for p in self.parameters())} parameters"
        )

    def encode_content(self, image: torch.Tensor, branch: EncoderBranch) -> torch.Tensor:
        return self.content_encoder(image, branch)

    def encode_style(self, image: torch.Tensor, which: Domain) -> torch.Tensor:
        if which == Domain.SOURCE:
            return self.style_encoder_source(image)
        if which == Domain.TARGET:
            return self.style_encoder_target(image)
        raise RoutingError(f"Unknown style encoder {which!r}")

    def decode_depth(
        self,
        content: torch.Tensor,
        style: Optional[torch.Tensor] = None,
        route: DepthRoute = DepthRoute.SOURCE,
        style_branch: DecoderBranch = DecoderBranch.TARGET_STYLE,
    ) -> torch.Tensor:
        return self.depth_decoder(content, style, route, style_branch)

    def generate(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.generator(content, style)

    def discriminate(self, x: torch.Tensor, which: DiscriminatorKind) -> torch.Tensor:
        return self.discriminator(which)(x)

    def discriminator(self, which: DiscriminatorKind) -> PatchDiscriminator:
        discriminators = {
            DiscriminatorKind.FEATURE: self.feature_disc,
            DiscriminatorKind.SOURCE_TO_TARGET: self.disc_s2t,
            DiscriminatorKind.TARGET_TO_SOURCE: self.disc_t2s,
        }
        if which not in discriminators:
            raise RoutingError(f"Unknown discriminator {which!r}")
        return discriminators[which]

    def predict_target_depth(
        self,
        image: torch.Tensor,
        fuse_style: bool = True,
        style_branch: DecoderBranch = DecoderBranch.TARGET_STYLE,
        separate_bn: bool = True,
    ) -> torch.Tensor:
        """
        Inference path for target images: E_con (target branch), E^t_sty and D (target route).

        Args:
            image (torch.Tensor): target images [batch, 3, H, W]
            fuse_style (bool): whether the style feature enters the decoder
            style_branch (DecoderBranch): decoder BN branch of the style path
            separate_bn (bool): route through the target BN branches (False for shared-BN variants)

        Returns:
            torch.Tensor: depth maps [batch, 1, H, W]
        """
        if not separate_bn:
            return self.decode_depth(self.encode_content(image, EncoderBranch.SOURCE))
        content = self.encode_content(image, EncoderBranch.TARGET)
        style = self.encode_style(image, Domain.TARGET) if fuse_style else None
        return self.decode_depth(content, style, DepthRoute.TARGET, style_branch)

    def predict_source_depth(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode_depth(self.encode_content(image, EncoderBranch.SOURCE))

    def inference_modules(self) -> Dict[str, nn.Module]:
        return {
            "content_encoder": self.content_encoder,
            "style_encoder_target": self.style_encoder_target,
            "depth_decoder": self.depth_decoder,
        }

    def task_modules(self) -> Dict[str, nn.Module]:
        """Sub-networks trained at the task learning rate."""
        return {"content_encoder": self.content_encoder, "depth_decoder": self.depth_decoder}

    def auxiliary_modules(self) -> Dict[str, nn.Module]:
        """Non-discriminator sub-networks trained at the auxiliary learning rate."""
        return {
            "style_encoder_source": self.style_encoder_source,
            "style_encoder_target": self.style_encoder_target,
            "generator": self.generator,
        }

    def discriminator_modules(self) -> Dict[str, nn.Module]:
        return {
            "feature_disc": self.feature_disc,
            "disc_s2t": self.disc_s2t,
            "disc_t2s": self.disc_t2s,
        }

    def training_modules(self) -> Dict[str, nn.Module]:
        return {**self.task_modules(), **self.auxiliary_modules(), **self.discriminator_modules()}
