"""
Adapter για το YOLOv7 μέσω torch.hub.

Σε eval mode το Detect head του YOLOv7 γυρνάει (predictions, raw maps).
Τα raw maps είναι (1, anchors, ny, nx, 5 + nc) πριν το sigmoid, και το
κανάλι 4 είναι το objectness logit.
"""

import logging
from typing import Mapping

import torch

from ..detector_service import Candidates, DetectorAdapter, RawScores
from ..errors import BackendUnavailableError
from ..schemas import AdapterEntry, ArchGroup
from ..settings import Settings
from . import fetch_weights

logger = logging.getLogger(__name__)

HUB_REPO = "WongKinYiu/yolov7"
OBJECTNESS_CHANNEL = 4


class YoloV7HubAdapter(DetectorAdapter):
    def __init__(self, entry: AdapterEntry, weights, person_class: int = 0):
        super().__init__(entry.name, entry.group, entry.input_size, entry.weights_id)
        logger.info(f"🔄 Loading {HUB_REPO} through torch.hub ({weights})")
        try:
            model = torch.hub.load(HUB_REPO, "custom", str(weights), autoshape=False, trust_repo=True)
        except (ImportError, OSError, RuntimeError) as e:
            raise BackendUnavailableError(f"Cannot load '{entry.name}' from torch.hub: {e}") from e

        self.model = model.float().eval()
        for parameter in self.model.parameters():
            parameter.requires_grad_(False)
        self.person_class = person_class

    @classmethod
    def from_entry(cls, entry: AdapterEntry, settings: Settings) -> "YoloV7HubAdapter":
        return cls(entry, fetch_weights(entry, settings), person_class=int(entry.options.get("person_class", 0)))

    def raw_scores(self, image: torch.Tensor) -> RawScores:
        self.check_image(image)
        _, maps = self.model(image.unsqueeze(0).to(torch.float32))
        logits = torch.cat([m[..., OBJECTNESS_CHANNEL].reshape(-1) for m in maps])
        return RawScores(group=ArchGroup.OBJECTNESS_V7, objectness_logits=logits)

    def candidates(self, image: torch.Tensor) -> Candidates:
        self.check_image(image)
        predictions, _ = self.model(image.unsqueeze(0).to(torch.float32))
        y = predictions[0].to(torch.float64)
        cx, cy, w, h = y[:, 0], y[:, 1], y[:, 2], y[:, 3]
        scores = y[:, OBJECTNESS_CHANNEL] * y[:, 5 + self.person_class]
        boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)
        return Candidates(boxes, scores, torch.zeros(len(scores), dtype=torch.int64))

    def state_tensors(self) -> Mapping[str, torch.Tensor]:
        return self.model.state_dict()
