import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from core.config_handler import LossWeights
from core.exceptions import EmptyMaskError, InvalidDepthError, NegativeLossError, ShapeError
from core.interfaces import AbstractFeatureExtractor
from core.networks import gradient_reverse
from core.perceptual import channel_mean

Scorer = Callable[[torch.Tensor], torch.Tensor]
Number = Union[float, torch.Tensor]

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossReport:
    """
    Every term of the composite objective for one training step; terms a variant does not
    use stay None. `total` is the weighted sum of the objective terms (the discriminator
    losses are reported but optimized separately).
    """
    step: int = 0
    de_s: Optional[float] = None
    de_s2t: Optional[float] = None
    geo: Optional[float] = None
    sm: Optional[float] = None
    align: Optional[float] = None
    recon_s: Optional[float] = None
    recon_t: Optional[float] = None
    trans_s2t: Optional[float] = None
    trans_t2s: Optional[float] = None
    disc_feature: Optional[float] = None
    disc_s2t: Optional[float] = None
    disc_t2s: Optional[float] = None
    total: Optional[float] = None

    def objective_terms(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in OBJECTIVE_TERMS if getattr(self, name) is not None}

    def to_record(self) -> Dict[str, float]:
        return {key: value for key, value in asdict(self).items() if value is not None}


# objective term name -> coefficient in the full objective
OBJECTIVE_TERMS: Dict[str, Callable[[LossWeights], float]] = {
    "de_s": lambda w: 1.0,
    "de_s2t": lambda w: 1.0,
    "geo": lambda w: w.lambda_geo,
    "sm": lambda w: w.lambda_sm,
    "align": lambda w: w.lambda_align,
    "recon_s": lambda w: w.lambda_recon,
    "recon_t": lambda w: w.lambda_recon,
    "trans_s2t": lambda w: w.lambda_trans,
    "trans_t2s": lambda w: w.lambda_trans,
}


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"Shape mismatch: {list(shape)} vs {list(t.shape)}")


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(values.dtype).expand_as(values)
    count = mask.sum()
    if count.item() == 0:
        raise EmptyMaskError("No valid pixels under the mask")
    return (values * mask).sum() / count


def translation_loss(
    content_ref: torch.Tensor,
    style_ref: torch.Tensor,
    translated: torch.Tensor,
    image_disc: Scorer,
    weights: LossWeights,
    extractor: AbstractFeatureExtractor,
) -> torch.Tensor:
    """
    Translation objective: a content perceptual term against the content reference, a
    channel-mean style term against the style reference, and a least-squares adversarial
    term pushing the translation discriminator's score towards 1.

    Args:
        content_ref (torch.Tensor): image whose content the translation keeps
        style_ref (torch.Tensor): image whose style the translation takes
        translated (torch.Tensor): generated image
        image_disc (Scorer): discriminator of this translation direction
        weights (LossWeights): per-stage weights and eta
        extractor (AbstractFeatureExtractor): fixed perceptual feature extractor

    Returns:
        torch.Tensor: scalar loss
    """
    _check_same_shape(content_ref, style_ref, translated)
    phi_content = extractor.features(content_ref)
    phi_style = extractor.features(style_ref)
    phi_translated = extractor.features(translated)

    loss = translated.new_zeros(())
    for w_con, w_sty, f_c, f_s, f_t in zip(
        weights.w_trans_con, weights.w_trans_sty, phi_content, phi_style, phi_translated
    ):
        if w_con:
            loss = loss + w_con * _l1(f_c, f_t)
        if w_sty:
            loss = loss + w_sty * _l1(channel_mean(f_s), channel_mean(f_t))
    scores = image_disc(translated)
    return loss + weights.eta * ((scores - 1) ** 2).mean()


def reconstruction_loss(
    image: torch.Tensor,
    reconstructed: torch.Tensor,
    weights: LossWeights,
    extractor: AbstractFeatureExtractor,
) -> torch.Tensor:
    _check_same_shape(image, reconstructed)
    loss = image.new_zeros(())
    for w, f_i, f_r in zip(weights.w_recon, extractor.features(image), extractor.features(reconstructed)):
        if w:
            loss = loss + w * _l1(f_i, f_r)
    return loss


def alignment_loss(
    z_s_con: torch.Tensor,
    z_t_con: torch.Tensor,
    feature_disc: Scorer,
    lambda_grl: float = 1.0,
    source_label: float = 1.0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Least-squares domain adversarial loss on content features.

    The discriminator regresses source features to `source_label` and target features to
    1 - source_label. The encoder-side loss evaluates the same objective on
    gradient-reversed features, so minimizing it trains the discriminator while pushing
    the encoder against it; the discriminator-side loss sees detached features.

    Args:
        z_s_con (torch.Tensor): source content features
        z_t_con (torch.Tensor): target content features
        feature_disc (Scorer): feature discriminator
        lambda_grl (float): gradient reversal coefficient
        source_label (float): label of the source domain (0 or 1)

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: encoder-side loss and discriminator-side loss
    """
    if z_s_con.dim() != 4 or z_t_con.dim() != 4 or z_s_con.size(1) != z_t_con.size(1):
        raise ShapeError(
            f"Content features {list(z_s_con.shape)} and {list(z_t_con.shape)} are not comparable"
        )
    target_label = 1.0 - source_label

    def objective(z_s: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
        return ((feature_disc(z_s) - source_label) ** 2).mean() + ((feature_disc(z_t) - target_label) ** 2).mean()

    encoder_loss = objective(gradient_reverse(z_s_con, lambda_grl), gradient_reverse(z_t_con, lambda_grl))
    disc_loss = objective(z_s_con.detach(), z_t_con.detach())
    return encoder_loss, disc_loss


def depth_l1(
    pred_depth: torch.Tensor, gt_depth: torch.Tensor, valid_mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    _check_same_shape(pred_depth, gt_depth)
    residual = (pred_depth - gt_depth).abs()
    if valid_mask is None:
        return residual.mean()
    return _masked_mean(residual, valid_mask)


def _gradient_x(img: torch.Tensor) -> torch.Tensor:
    return img[:, :, :, :-1] - img[:, :, :, 1:]


def _gradient_y(img: torch.Tensor) -> torch.Tensor:
    return img[:, :, :-1, :] - img[:, :, 1:, :]


def smoothness_loss(pred_depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """
    Edge-aware smoothness: exp(-|dI|) * |dY| with forward differences, the image gradient
    averaged over color channels. The x and y terms are each averaged over their pixels
    and then summed.

    Args:
        pred_depth (torch.Tensor): depth maps [batch, 1, H, W]
        image (torch.Tensor): guiding images [batch, 3, H, W]

    Returns:
        torch.Tensor: scalar loss
    """
    if pred_depth.shape[2:] != image.shape[2:] or pred_depth.size(0) != image.size(0):
        raise ShapeError(f"Depth {list(pred_depth.shape)} and image {list(image.shape)} do not match")
    weight_x = torch.exp(-_gradient_x(image).abs().mean(dim=1, keepdim=True))
    weight_y = torch.exp(-_gradient_y(image).abs().mean(dim=1, keepdim=True))
    smooth_x = weight_x * _gradient_x(pred_depth).abs()
    smooth_y = weight_y * _gradient_y(pred_depth).abs()
    return smooth_x.mean() + smooth_y.mean()


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Per-pixel SSIM over 3x3 uniform blocks (reflection padded, so the map keeps the input size).

    Args:
        a (torch.Tensor): images [batch, C, H, W] in [0, 1]
        b (torch.Tensor): images of the same shape

    Returns:
        torch.Tensor: SSIM values [batch, C, H, W]
    """
    _check_same_shape(a, b)
    a = F.pad(a, (1, 1, 1, 1), mode="reflect")
    b = F.pad(b, (1, 1, 1, 1), mode="reflect")

    mu_a = F.avg_pool2d(a, 3, 1)
    mu_b = F.avg_pool2d(b, 3, 1)
    sigma_a = F.avg_pool2d(a * a, 3, 1) - mu_a ** 2
    sigma_b = F.avg_pool2d(b * b, 3, 1) - mu_b ** 2
    sigma_ab = F.avg_pool2d(a * b, 3, 1) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + SSIM_C1) * (2 * sigma_ab + SSIM_C2)
    denominator = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (sigma_a + sigma_b + SSIM_C2)
    return numerator / denominator


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ssim_map(a, b).mean()


def inverse_warp(
    right_image: torch.Tensor, pred_depth: torch.Tensor, focal: float, baseline: float
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Synthesizes the left view from the right view of a rectified stereo pair:
    warped(x, y) = right(x - focal * baseline / depth(x, y), y), linearly interpolated.

    Args:
        right_image (torch.Tensor): right images [batch, C, H, W]
        pred_depth (torch.Tensor): left-view depth [batch, 1, H, W], strictly positive
        focal (float): focal length in pixels
        baseline (float): stereo baseline in depth units

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: warped image and boolean validity mask [batch, 1, H, W]
    """
    if pred_depth.dim() != 4 or pred_depth.size(1) != 1 or pred_depth.shape[2:] != right_image.shape[2:]:
        raise ShapeError(
            f"Depth {list(pred_depth.shape)} does not match image {list(right_image.shape)}"
        )
    if (pred_depth <= 0).any():
        raise InvalidDepthError("Inverse warping needs strictly positive depth")
    batch, _, height, width = right_image.shape

    disparity = focal * baseline / pred_depth
    xs = torch.arange(width, dtype=right_image.dtype, device=right_image.device).view(1, 1, 1, width)
    ys = torch.arange(height, dtype=right_image.dtype, device=right_image.device).view(1, 1, height, 1)
    x_src = xs - disparity
    y_src = ys.expand_as(x_src)

    grid_x = 2 * x_src / max(width - 1, 1) - 1
    grid_y = 2 * y_src / max(height - 1, 1) - 1
    grid = torch.cat([grid_x, grid_y], dim=1).permute(0, 2, 3, 1)
    warped = F.grid_sample(right_image, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    mask = (x_src >= 0) & (x_src <= width - 1)
    return warped, mask


def combine_geometry(ssim_value: Number, l1_value: Number, weights: LossWeights) -> Number:
    return weights.alpha_geo * (1 - ssim_value) + weights.beta_geo * l1_value


def geometry_loss(
    target_left: torch.Tensor,
    warped_left: torch.Tensor,
    mask: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """
    Stereo geometry consistency alpha * (1 - SSIM) + beta * L1, both averaged over the
    pixels the warp could sample.
    """
    _check_same_shape(target_left, warped_left)
    structural = _masked_mean(ssim_map(target_left, warped_left), mask)
    photometric = _masked_mean((target_left - warped_left).abs(), mask)
    return combine_geometry(structural, photometric, weights)


def lsgan_disc_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


def total_loss(parts: Union[LossReport, Mapping[str, Number]], weights: LossWeights) -> Number:
    """
    Weighted sum of the objective terms; absent terms contribute nothing.

    Args:
        parts (Union[LossReport, Mapping[str, Number]]): term values by name (floats or tensors)
        weights (LossWeights): lambda coefficients

    Returns:
        Number: (de_s + de_s2t) + l_geo geo + l_sm sm + l_align align
            + l_recon (recon_s + recon_t) + l_trans (trans_s2t + trans_t2s)

    Raises:
        NegativeLossError: if a present term is negative
        KeyError: if a mapping contains a name that is not an objective term
    """
    terms = parts.objective_terms() if isinstance(parts, LossReport) else dict(parts)
    unknown = set(terms) - set(OBJECTIVE_TERMS)
    if unknown:
        raise KeyError(f"Not objective terms: {sorted(unknown)}")

    total: Number = 0.0
    for name, coefficient in OBJECTIVE_TERMS.items():
        value = terms.get(name)
        if value is None:
            continue
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if scalar < 0 or (math.isnan(scalar)):
            raise NegativeLossError(f"Loss term '{name}' is negative ({scalar})")
        total = total + coefficient(weights) * value
    return total
