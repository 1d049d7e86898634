"""
Geometry - τοποθέτηση patches μέσα σε bounding boxes και augmentations.

Δύο χρήσεις:
1. Evaluation: το patch μπαίνει στο κέντρο κάθε ground truth box, με
   πλευρά scale × (μικρότερη πλευρά του box), χωρίς augmentation.
2. Training: πριν την τοποθέτηση περνάει από resize → color jitter →
   perspective → rotation, όλα differentiable ως προς τα pixels.

Οι εικόνες είναι (3, H, W) tensors με τιμές στο [0, 1].
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple, Union

import kornia.enhance as KE
import kornia.geometry.transform as KG
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError
from .patch_core import Patch
from .schemas import AugmentParams

logger = logging.getLogger(__name__)

# Το γκρι του letterbox padding (114/255, όπως στα YOLO pipelines)
LETTERBOX_FILL = 114.0 / 255.0

# resize, brightness, contrast, saturation, hue, 8 corner offsets, angle
_DRAWS_PER_AUGMENT = 14


@dataclass(frozen=True)
class BBox:
    """Box σε pixels: (x, y) πάνω αριστερά, πλάτος w, ύψος h."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidArgumentError(f"box must have positive size, got w={self.w}, h={self.h}")

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def xyxy(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def intersects_frame(self, width: float, height: float) -> bool:
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0

    def mapped(self, scale: float, pad_x: float = 0.0, pad_y: float = 0.0) -> "BBox":
        """Το box μετά από letterbox (scale και padding)."""
        return BBox(self.x * scale + pad_x, self.y * scale + pad_y, self.w * scale, self.h * scale)


@dataclass(frozen=True)
class Placement:
    """
    Πού και πόσο μεγάλο μπαίνει ένα patch.

    Το mask είναι alpha (1, S, S) με S = pixel_side. None σημαίνει πλήρως αδιαφανές.
    """

    center_x: float
    center_y: float
    side: float
    mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if not self.side > 0:
            raise InvalidArgumentError(f"placement side must be positive, got {self.side}")

    @property
    def pixel_side(self) -> int:
        return max(1, int(math.floor(self.side + 0.5)))

    def origin(self) -> Tuple[int, int]:
        """Πάνω αριστερή γωνία του τετραγώνου, στρογγυλεμένη στο πλησιέστερο pixel."""
        half = self.pixel_side / 2.0
        return (
            int(math.floor(self.center_x - half + 0.5)),
            int(math.floor(self.center_y - half + 0.5)),
        )


class Composite(NamedTuple):
    image: torch.Tensor
    placed: bool  # False όταν το τετράγωνο έπεσε εντελώς έξω από την εικόνα


class AugmentDraw(NamedTuple):
    """Οι τυχαίες τιμές ενός augmentation."""

    scale: float
    brightness: float
    contrast: float
    saturation: float
    hue: float  # κλάσμα του κύκλου
    corners: Tuple[float, ...]  # 8 inward offsets, κλάσματα της μισής πλευράς
    angle: float  # μοίρες


class AugmentedPatch(NamedTuple):
    canvas: torch.Tensor  # (3, S, S)
    mask: torch.Tensor  # (1, S, S)
    jittered: torch.Tensor  # (3, S, S) πριν το warp
    draw: AugmentDraw


class Letterboxed(NamedTuple):
    image: torch.Tensor
    scale: float
    pad_x: int
    pad_y: int


def target_square(box: BBox, scale: float) -> Placement:
    """
    Το τετράγωνο του evaluation: κέντρο του box, πλευρά scale·min(w, h).

    Με scale = 0.75 είναι ο κανόνας τοποθέτησης του evaluation protocol.
    """
    if not scale > 0:
        raise InvalidArgumentError(f"placement scale must be positive, got {scale}")
    cx, cy = box.center
    side = scale * min(box.w, box.h)
    pixels = max(1, int(math.floor(side + 0.5)))
    return Placement(center_x=cx, center_y=cy, side=side, mask=torch.ones(1, pixels, pixels))


def resize_square(x: torch.Tensor, side: int) -> torch.Tensor:
    """Bilinear resize ενός (C, h, w) tensor σε (C, side, side)."""
    if x.shape[-2] == side and x.shape[-1] == side:
        return x
    downscale = x.shape[-2] > side and x.shape[-1] > side
    return F.interpolate(
        x.unsqueeze(0), size=(side, side), mode="bilinear", align_corners=False, antialias=downscale
    ).squeeze(0)


def embed_patch(
    image: torch.Tensor,
    patch: Union[Patch, torch.Tensor],
    placement: Placement,
) -> Composite:
    """
    Βάζει το patch πάνω στην εικόνα (alpha compositing με το mask).

    Τα pixels έξω από το τετράγωνο μένουν bit-identical. Το αποτέλεσμα
    είναι differentiable ως προς τα pixels του patch.

    Args:
        image: (3, H, W) tensor
        patch: Patch ή (3, h, w) tensor
        placement: Κέντρο, πλευρά και mask

    Returns:
        Composite(image, placed) - placed=False αν το τετράγωνο είναι εντελώς έξω
    """
    if isinstance(patch, Patch):
        patch = patch.to_tensor(image.dtype)

    side = placement.pixel_side
    if placement.side < 1:
        raise InvalidArgumentError(f"placement side must be at least 1 px, got {placement.side}")

    _, height, width = image.shape
    x0, y0 = placement.origin()
    ix0, iy0 = max(x0, 0), max(y0, 0)
    ix1, iy1 = min(x0 + side, width), min(y0 + side, height)

    if ix0 >= ix1 or iy0 >= iy1:
        logger.warning(
            f"⚠️  Placement at ({placement.center_x:.1f}, {placement.center_y:.1f}) "
            f"is outside the {width}×{height} image, skipping"
        )
        return Composite(image, False)

    content = resize_square(patch.to(image.dtype), side)
    alpha = placement.mask if placement.mask is not None else torch.ones(1, side, side)
    alpha = resize_square(alpha.to(image.dtype).reshape(1, alpha.shape[-2], alpha.shape[-1]), side)

    # Κρατάμε μόνο το κομμάτι που πέφτει μέσα στην εικόνα
    content = content[:, iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0]
    alpha = alpha[:, iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0]

    out = image.clone()
    region = image[:, iy0:iy1, ix0:ix1]
    out[:, iy0:iy1, ix0:ix1] = alpha * content + (1.0 - alpha) * region
    return Composite(out, True)


def sample_augmentation(generator: torch.Generator, params: AugmentParams) -> AugmentDraw:
    """
    Τραβάει τις τυχαίες τιμές ενός augmentation.

    Πάντα καταναλώνει τον ίδιο αριθμό τιμών από τον generator, ώστε
    το stream να μη εξαρτάται από τις παραμέτρους.
    """
    u = torch.rand(_DRAWS_PER_AUGMENT, generator=generator, dtype=torch.float64).tolist()
    lo, hi = params.resize_range
    jitter = params.jitter

    return AugmentDraw(
        scale=lo + u[0] * (hi - lo),
        brightness=(2.0 * u[1] - 1.0) * jitter.brightness,
        contrast=1.0 + (2.0 * u[2] - 1.0) * jitter.contrast,
        saturation=1.0 + (2.0 * u[3] - 1.0) * jitter.saturation,
        hue=(2.0 * u[4] - 1.0) * jitter.hue,
        corners=tuple(v * params.perspective_scale for v in u[5:13]),
        angle=(2.0 * u[13] - 1.0) * params.rotation_deg,
    )


def color_jitter(x: torch.Tensor, draw: AugmentDraw) -> torch.Tensor:
    """Brightness, contrast, saturation, hue. Ουδέτερα stages παραλείπονται."""
    out = x
    if draw.brightness != 0.0:
        out = KE.adjust_brightness(out, draw.brightness, clip_output=False)
    if draw.contrast != 1.0:
        out = KE.adjust_contrast(out, draw.contrast, clip_output=False)
    if draw.saturation != 1.0:
        out = KE.adjust_saturation(out, draw.saturation)
    if draw.hue != 0.0:
        out = KE.adjust_hue(out, draw.hue * 2.0 * math.pi)
    return out


def _warp_matrix(side: int, draw: AugmentDraw, dtype: torch.dtype) -> torch.Tensor:
    last = float(side - 1)
    half = last / 2.0
    src = torch.tensor([[0.0, 0.0], [last, 0.0], [last, last], [0.0, last]], dtype=dtype)
    # Κάθε γωνία μετακινείται προς τα μέσα
    signs = torch.tensor([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]], dtype=dtype)
    offsets = torch.tensor(draw.corners, dtype=dtype).reshape(4, 2) * half
    dst = src + signs * offsets

    perspective = KG.get_perspective_transform(src.unsqueeze(0), dst.unsqueeze(0))
    rotation = KG.get_rotation_matrix2d(
        center=torch.tensor([[half, half]], dtype=dtype),
        angle=torch.tensor([draw.angle], dtype=dtype),
        scale=torch.ones(1, 2, dtype=dtype),
    )
    rotation = torch.cat([rotation, torch.tensor([[[0.0, 0.0, 1.0]]], dtype=dtype)], dim=1)
    return rotation @ perspective


def warp(x: torch.Tensor, draw: AugmentDraw) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Perspective και μετά rotation, σε ένα bilinear warp.

    Επιστρέφει (canvas, mask). Το mask δείχνει ποια pixels του canvas
    καλύπτει το patch, ώστε οι γωνίες να μη βάφουν την εικόνα.
    """
    side = x.shape[-1]
    if draw.angle == 0.0 and not any(draw.corners):
        return x, torch.ones(1, side, side, dtype=x.dtype)

    matrix = _warp_matrix(side, draw, x.dtype)
    stacked = torch.cat([x, torch.ones(1, side, side, dtype=x.dtype)], dim=0).unsqueeze(0)
    warped = KG.warp_perspective(
        stacked, matrix, dsize=(side, side), mode="bilinear", padding_mode="zeros", align_corners=True
    ).squeeze(0)
    return warped[:3], warped[3:4]


def augment_patch(
    patch: Union[Patch, torch.Tensor],
    placement: Placement,
    generator: torch.Generator,
    params: AugmentParams,
) -> AugmentedPatch:
    """
    Training-time augmentation: resize → color jitter → perspective → rotation.

    Args:
        patch: Patch ή (3, h, w) tensor (συνήθως με requires_grad)
        placement: Η τοποθέτηση στόχος - το resize είναι σχετικό με την πλευρά της
        generator: torch.Generator - ίδια κατάσταση δίνει ίδιο αποτέλεσμα
        params: Τα όρια των augmentations

    Returns:
        AugmentedPatch(canvas, mask, jittered, draw)
    """
    if isinstance(patch, Patch):
        patch = patch.to_tensor()

    draw = sample_augmentation(generator, params)
    side = max(1, int(math.floor(draw.scale * placement.side + 0.5)))

    resized = resize_square(patch, side)
    jittered = color_jitter(resized, draw)
    canvas, mask = warp(jittered, draw)
    return AugmentedPatch(canvas=canvas, mask=mask, jittered=jittered, draw=draw)


def letterbox(image: torch.Tensor, size: Tuple[int, int]) -> Letterboxed:
    """
    Aspect-preserving resize και padding στο input size του detector.

    Args:
        image: (3, h, w)
        size: (H, W) του detector
    """
    target_h, target_w = size
    _, h, w = image.shape
    if (h, w) == (target_h, target_w):
        return Letterboxed(image, 1.0, 0, 0)

    scale = min(target_h / h, target_w / w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    resized = F.interpolate(
        image.unsqueeze(0),
        size=(new_h, new_w),
        mode="bilinear",
        align_corners=False,
        antialias=scale < 1.0,
    ).squeeze(0)

    pad_x = (target_w - new_w) // 2
    pad_y = (target_h - new_h) // 2
    out = torch.full((3, target_h, target_w), LETTERBOX_FILL, dtype=image.dtype)
    out[:, pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    return Letterboxed(out, scale, pad_x, pad_y)
