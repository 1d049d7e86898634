"""
Adapter για detectors του ultralytics package (v8, v9, v10, RT-DETR).

Τα pre-sigmoid class logits τα παίρνουμε από το detection head:
το head γυρνάει τα raw feature maps όταν έχει training=True, οπότε
το ενεργοποιούμε μόνο για το head (τα BatchNorm μένουν σε eval).
Ο RT-DETR decoder δεν έχει τέτοιο path, εκεί αντιστρέφουμε το sigmoid.
"""

import logging
from typing import Mapping

import torch

from ..detector_service import Candidates, DetectorAdapter, RawScores
from ..errors import BackendUnavailableError, ConfigError
from ..schemas import AdapterEntry, ArchGroup
from ..settings import Settings
from . import fetch_weights

logger = logging.getLogger(__name__)

FAMILIES = ("yolo", "rtdetr")
LOGIT_CLAMP = 1e-6


class UltralyticsAdapter(DetectorAdapter):
    def __init__(self, entry: AdapterEntry, weights, family: str = "yolo", person_class: int = 0):
        if family not in FAMILIES:
            raise ConfigError(f"adapter '{entry.name}': unknown ultralytics family '{family}'")
        try:
            import ultralytics
        except ImportError as e:
            raise BackendUnavailableError(
                f"adapter '{entry.name}' needs the ultralytics package (pip install ultralytics)"
            ) from e

        super().__init__(entry.name, entry.group, entry.input_size, entry.weights_id)
        wrapper = ultralytics.RTDETR(str(weights)) if family == "rtdetr" else ultralytics.YOLO(str(weights))
        self.model = wrapper.model.float().eval()
        for parameter in self.model.parameters():
            parameter.requires_grad_(False)

        self.family = family
        self.person_class = person_class
        self.num_classes = int(self.model.model[-1].nc)
        # RT-DETR και v10 (one2one head) βγάζουν ήδη τελικά boxes
        self.uses_nms = family == "yolo" and self.group != ArchGroup.DUALHEAD_V10

    @classmethod
    def from_entry(cls, entry: AdapterEntry, settings: Settings) -> "UltralyticsAdapter":
        weights = fetch_weights(entry, settings)
        return cls(
            entry,
            weights,
            family=str(entry.options.get("family", "yolo")),
            person_class=int(entry.options.get("person_class", 0)),
        )

    def _forward(self, image: torch.Tensor, raw_head: bool):
        x = image.unsqueeze(0).to(torch.float32)
        head = self.model.model[-1]
        head.training = raw_head
        try:
            return self.model(x)
        finally:
            head.training = False

    def _class_logits(self, maps) -> torch.Tensor:
        flat = torch.cat([m.flatten(2) for m in maps], dim=2)
        return flat[0, -self.num_classes :, :].transpose(0, 1)

    def _eval_output(self, image: torch.Tensor) -> torch.Tensor:
        out = self._forward(image, raw_head=False)
        return out[0] if isinstance(out, (list, tuple)) else out

    def raw_scores(self, image: torch.Tensor) -> RawScores:
        self.check_image(image)

        if self.family == "rtdetr":
            probs = self._eval_output(image)[0, :, 4:]
            logits = torch.logit(probs.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP))
            return RawScores(group=ArchGroup.CLASSMAX, class_logits=logits)

        out = self._forward(image, raw_head=True)
        if isinstance(out, dict):
            return RawScores(
                group=ArchGroup.DUALHEAD_V10,
                one2many_logits=self._class_logits(out["one2many"]),
                one2one_logits=self._class_logits(out["one2one"]),
            )
        return RawScores(group=ArchGroup.CLASSMAX, class_logits=self._class_logits(out))

    def candidates(self, image: torch.Tensor) -> Candidates:
        self.check_image(image)
        y = self._eval_output(image)[0].to(torch.float64)
        height, width = self.input_size

        if self.family == "rtdetr":
            # (N, 4 + nc), κανονικοποιημένα xywh
            cx, cy = y[:, 0] * width, y[:, 1] * height
            w, h = y[:, 2] * width, y[:, 3] * height
            scores = y[:, 4 + self.person_class]
        elif y.shape[-1] == 6:
            # v10 end-to-end: (max_det, 6) = x1, y1, x2, y2, score, class
            person = y[:, 5] == self.person_class
            boxes = y[person, :4]
            return Candidates(boxes, y[person, 4], torch.zeros(len(boxes), dtype=torch.int64))
        else:
            # (4 + nc, N) με xywh σε pixels
            cx, cy, w, h = y[0], y[1], y[2], y[3]
            scores = y[4 + self.person_class]

        boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)
        return Candidates(boxes, scores, torch.zeros(len(scores), dtype=torch.int64))

    def state_tensors(self) -> Mapping[str, torch.Tensor]:
        return self.model.state_dict()

