"""
Losses - ο στόχος της βελτιστοποίησης.

Loss = λ_s·L_s + λ_v·L_v + λ_m·L_m

- L_s: smoothness (total variation) του patch
- L_v: validity, κρατάει τα pixels στο [0, 1]
- L_m: target loss, εξαρτάται από την ομάδα αρχιτεκτονικής του detector:
    OBJECTNESS_V7  → max objectness logit
    CLASSMAX       → max class logit
    DUALHEAD_V10   → max(one2many) + max(one2one)

Όλα τα target losses δουλεύουν σε logits πριν το sigmoid και το NMS.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F

from .detector_service import RawScores
from .errors import InvalidArgumentError
from .schemas import ArchGroup, LossWeights

logger = logging.getLogger(__name__)

SMOOTHNESS_EPS = 1e-8

Scalar = Union[float, torch.Tensor]


@dataclass
class LossBreakdown:
    l_s: Scalar
    l_v: Scalar
    l_m: Scalar
    total: Scalar

    def as_floats(self) -> Dict[str, float]:
        values = {key: getattr(self, key) for key in ("l_s", "l_v", "l_m", "total")}
        # detach: τα tensors του graph δεν γίνονται deepcopy
        return {key: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for key, v in values.items()}


def _as_chw(pixels: torch.Tensor) -> torch.Tensor:
    if pixels.dim() == 2:
        return pixels.unsqueeze(0)
    if pixels.dim() != 3:
        raise InvalidArgumentError(f"expected (C, H, W) or (H, W) pixels, got shape {tuple(pixels.shape)}")
    return pixels


def smoothness_loss(pixels: torch.Tensor) -> torch.Tensor:
    """
    Anisotropic total variation.

    Forward differences σε x και y, με μηδενική διαφορά στην τελευταία
    γραμμή/στήλη. Κάθε όρος είναι sqrt(d² + ε) − sqrt(ε), οπότε ένα σταθερό
    patch δίνει ακριβώς 0. Μέσος όρος πάνω σε channels και θέσεις.

    Args:
        pixels: (C, H, W) ή (H, W) tensor, H ≥ 2 και W ≥ 2
    """
    x = _as_chw(pixels)
    if x.shape[-2] < 2 or x.shape[-1] < 2:
        raise InvalidArgumentError(
            f"smoothness needs at least 2 rows and 2 columns, got {x.shape[-2]}×{x.shape[-1]}"
        )

    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))

    eps = torch.tensor(SMOOTHNESS_EPS, dtype=x.dtype)
    floor = torch.sqrt(eps)
    tv = (torch.sqrt(dx * dx + eps) - floor) + (torch.sqrt(dy * dy + eps) - floor)
    return tv.mean()


def validity_loss(pixels: torch.Tensor) -> torch.Tensor:
    """Quadratic hinge έξω από το [0, 1], άθροισμα πάνω σε όλα τα pixels."""
    return (F.relu(pixels - 1.0) ** 2 + F.relu(-pixels) ** 2).sum()


def _max_logit(logits: Optional[torch.Tensor], what: str) -> torch.Tensor:
    if logits is None or logits.numel() == 0:
        raise InvalidArgumentError(f"{what} is empty")
    return logits.max()


def _logits_of(scores: Union[RawScores, torch.Tensor], group: ArchGroup, field: str) -> torch.Tensor:
    if isinstance(scores, RawScores):
        if scores.group != group:
            raise InvalidArgumentError(f"expected {group.value} scores, got {scores.group.value}")
        return getattr(scores, field)
    return torch.as_tensor(scores)


def target_loss_objectness(scores: Union[RawScores, torch.Tensor]) -> torch.Tensor:
    """Ο μεγαλύτερος objectness logit πάνω σε όλα τα anchors."""
    logits = _logits_of(scores, ArchGroup.OBJECTNESS_V7, "objectness_logits")
    return _max_logit(logits, "objectness score set")


def target_loss_classmax(
    scores: Union[RawScores, torch.Tensor],
    target_class: Optional[int] = None,
) -> torch.Tensor:
    """
    Ο μεγαλύτερος class logit πάνω σε όλα τα candidates.

    Με target_class μόνο η στήλη αυτής της κλάσης (--target-class-only).
    """
    logits = _logits_of(scores, ArchGroup.CLASSMAX, "class_logits")
    if target_class is not None:
        logits = _class_column(logits, target_class)
    return _max_logit(logits, "class score set")


def target_loss_dualhead(
    one2many: Union[RawScores, torch.Tensor],
    one2one: Optional[torch.Tensor] = None,
    target_class: Optional[int] = None,
) -> torch.Tensor:
    """
    Dual-head loss: max(one2many) + max(one2one).

    Δέχεται είτε ένα RawScores με τα δύο heads είτε τα δύο tensors χωριστά.
    """
    if isinstance(one2many, RawScores):
        if one2many.group != ArchGroup.DUALHEAD_V10:
            raise InvalidArgumentError(f"expected DUALHEAD_V10 scores, got {one2many.group.value}")
        many, one = one2many.one2many_logits, one2many.one2one_logits
    else:
        many, one = torch.as_tensor(one2many), one2one

    if target_class is not None:
        many = _class_column(many, target_class) if many is not None else None
        one = _class_column(one, target_class) if one is not None else None
    return _max_logit(many, "one2many head") + _max_logit(one, "one2one head")


def _class_column(logits: torch.Tensor, target_class: int) -> torch.Tensor:
    if logits.dim() < 2:
        raise InvalidArgumentError("target_class needs a candidates×classes logit matrix")
    if not 0 <= target_class < logits.shape[-1]:
        raise InvalidArgumentError(f"target_class {target_class} outside 0..{logits.shape[-1] - 1}")
    return logits[..., target_class]


def target_loss(scores: RawScores, target_class: Optional[int] = None) -> torch.Tensor:
    """Διαλέγει το σωστό target loss από την ομάδα των scores."""
    if scores.group == ArchGroup.OBJECTNESS_V7:
        return target_loss_objectness(scores)
    if scores.group == ArchGroup.CLASSMAX:
        return target_loss_classmax(scores, target_class)
    return target_loss_dualhead(scores, target_class=target_class)


def total_loss(l_s: Scalar, l_v: Scalar, l_m: Scalar, weights: LossWeights) -> LossBreakdown:
    """Το σταθμισμένο άθροισμα. Δουλεύει και με floats και με tensors."""
    total = weights.lambda_s * l_s + weights.lambda_v * l_v + weights.lambda_m * l_m
    return LossBreakdown(l_s=l_s, l_v=l_v, l_m=l_m, total=total)
