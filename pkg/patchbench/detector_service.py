"""
Detector service - το contract ανάμεσα στο patchbench και τους detectors.

Κάθε detector τυλίγεται σε έναν DetectorAdapter που δίνει:
1. raw_scores(image) - logits πριν το sigmoid και το NMS, differentiable
   ως προς τα pixels (αυτά βελτιστοποιεί το training)
2. detect(image, conf, iou) - τελικά detections για το mAP

Ο ToyDetector είναι ένας μικρός differentiable detector (normalized
cross-correlation με ένα χρωματιστό template) για tests χωρίς GPU.
Οι πραγματικοί detectors φορτώνονται ως plugins από το backends/.
"""

import hashlib
import importlib
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import ValidationError
from torchvision.ops import batched_nms

from .errors import BackendUnavailableError, ConfigError, InvalidArgumentError
from .geometry import BBox
from .schemas import AdapterEntry, ArchGroup, ToyTemplateSpec
from .settings import Settings, get_settings

logger = logging.getLogger(__name__)

# Default thresholds για το inference
DEFAULT_CONF = 0.25
DEFAULT_IOU = 0.45

# Short names των backends. Οτιδήποτε άλλο πρέπει να είναι "module:Class".
BACKENDS = {
    "toy": "patchbench.detector_service:ToyDetector",
    "ultralytics": "patchbench.backends.ultralytics_adapter:UltralyticsAdapter",
    "yolov7-hub": "patchbench.backends.yolov7_hub:YoloV7HubAdapter",
}

_GROUP_FIELDS = {
    ArchGroup.OBJECTNESS_V7: ("objectness_logits",),
    ArchGroup.CLASSMAX: ("class_logits",),
    ArchGroup.DUALHEAD_V10: ("one2many_logits", "one2one_logits"),
}
_ALL_FIELDS = ("objectness_logits", "class_logits", "one2many_logits", "one2one_logits")


@dataclass
class RawScores:
    """
    Logits ενός detector, πριν το sigmoid και το NMS.

    Υπάρχουν ακριβώς τα πεδία της ομάδας (group). Το boxes είναι
    προαιρετικό: τα candidate boxes (N, 4) σε xyxy, όταν ο adapter τα ξέρει.
    """

    group: ArchGroup
    objectness_logits: Optional[torch.Tensor] = None
    class_logits: Optional[torch.Tensor] = None
    one2many_logits: Optional[torch.Tensor] = None
    one2one_logits: Optional[torch.Tensor] = None
    boxes: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.group = ArchGroup(self.group)
        expected = _GROUP_FIELDS[self.group]
        for name in _ALL_FIELDS:
            present = getattr(self, name) is not None
            if present != (name in expected):
                raise InvalidArgumentError(
                    f"{self.group.value} scores must carry exactly {', '.join(expected)}"
                )


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    category: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InvalidArgumentError(f"detection score must lie in [0, 1], got {self.score}")


class Candidates(NamedTuple):
    """Όλα τα candidates πριν τα thresholds: boxes xyxy, scores μετά το sigmoid, κλάσεις."""

    boxes: torch.Tensor
    scores: torch.Tensor
    categories: torch.Tensor


def check_thresholds(conf_thresh: float, iou_thresh: float) -> None:
    if not 0.0 < conf_thresh < 1.0:
        raise InvalidArgumentError(f"conf_thresh must lie in (0, 1), got {conf_thresh}")
    if not 0.0 < iou_thresh < 1.0:
        raise InvalidArgumentError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")


def postprocess(candidates: Candidates, conf_thresh: float, iou_thresh: float, use_nms: bool = True) -> List[Detection]:
    """
    Confidence filter → greedy NMS ανά κλάση → ταξινόμηση κατά score.

    Με use_nms=False (detectors χωρίς NMS, π.χ. RT-DETR) γίνεται μόνο το filter.
    """
    check_thresholds(conf_thresh, iou_thresh)
    boxes = candidates.boxes.detach().to(torch.float64)
    scores = candidates.scores.detach().to(torch.float64)
    categories = candidates.categories.detach().to(torch.int64)

    keep = scores >= conf_thresh
    boxes, scores, categories = boxes[keep], scores[keep], categories[keep]

    if use_nms and len(scores) > 0:
        order = batched_nms(boxes, scores, categories, iou_thresh)
    else:
        order = torch.sort(scores, descending=True, stable=True).indices

    detections = []
    for i in order.tolist():
        x1, y1, x2, y2 = boxes[i].tolist()
        if x2 <= x1 or y2 <= y1:
            continue
        detections.append(
            Detection(box=BBox(x1, y1, x2 - x1, y2 - y1), score=float(scores[i]), category=int(categories[i]))
        )
    return detections


class DetectorAdapter(ABC):
    """
    Βάση για όλους τους adapters.

    Οι υποκλάσεις υλοποιούν raw_scores() και candidates(). Τα βάρη του
    detector δεν αλλάζουν ποτέ μετά το load.
    """

    uses_nms: bool = True

    def __init__(self, name: str, group: ArchGroup, input_size: Tuple[int, int], weights_id: str):
        self.name = name
        self.group = ArchGroup(group)
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.weights_id = weights_id

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, group={self.group.value})"

    def check_image(self, image: torch.Tensor) -> None:
        expected = (3, *self.input_size)
        if tuple(image.shape) != expected:
            raise InvalidArgumentError(
                f"adapter '{self.name}' expects an image of shape {expected}, got {tuple(image.shape)}"
            )

    @abstractmethod
    def raw_scores(self, image: torch.Tensor) -> RawScores:
        """Logits για μία (3, H, W) εικόνα στο input size του adapter."""

    @abstractmethod
    def candidates(self, image: torch.Tensor) -> Candidates:
        """Όλα τα candidate boxes με scores μετά το sigmoid."""

    @abstractmethod
    def state_tensors(self) -> Mapping[str, torch.Tensor]:
        """Τα βάρη του detector (για το fingerprint)."""

    def detect(
        self,
        image: torch.Tensor,
        conf_thresh: float = DEFAULT_CONF,
        iou_thresh: float = DEFAULT_IOU,
    ) -> List[Detection]:
        check_thresholds(conf_thresh, iou_thresh)
        with torch.no_grad():
            found = self.candidates(image)
        return postprocess(found, conf_thresh, iou_thresh, use_nms=self.uses_nms)

    def fingerprint(self) -> str:
        """sha256 πάνω στα βάρη - πρέπει να μένει ίδιο πριν και μετά το training."""
        digest = hashlib.sha256()
        for key, tensor in sorted(self.state_tensors().items()):
            digest.update(key.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def toy_template(spec: ToyTemplateSpec) -> torch.Tensor:
    """
    Το K×K template του toy detector, ως (3, K, K) float32 tensor.

    Ένα τυχαίο δυαδικό pattern από το seed: όπου το bit είναι 1 το pixel
    έχει το χρώμα, αλλού το συμπληρωματικό του.
    """
    bits = np.random.default_rng(spec.seed).random((spec.size, spec.size)) < 0.5
    channels = [np.where(bits, c, 1.0 - c) for c in spec.color]
    return torch.from_numpy(np.stack(channels).astype(np.float32))


def is_toy_entry(entry: AdapterEntry) -> bool:
    return BACKENDS.get(entry.backend, entry.backend) == BACKENDS["toy"]


def toy_spec_from_entry(entry: AdapterEntry) -> ToyTemplateSpec:
    """Το ToyTemplateSpec ενός registry entry (τα options + το input_size)."""
    if not is_toy_entry(entry):
        raise ConfigError(f"adapter '{entry.name}' is not a toy detector (backend '{entry.backend}')")
    if entry.group != ArchGroup.OBJECTNESS_V7:
        raise ConfigError(f"toy adapter '{entry.name}' must be in group OBJECTNESS_V7")
    try:
        return ToyTemplateSpec(**{**entry.options, "input_size": entry.input_size})
    except ValidationError as e:
        raise ConfigError(f"invalid options for toy adapter '{entry.name}': {e}") from e


class ToyDetector(DetectorAdapter):
    """
    Differentiable toy detector.

    logit(window) = gain · NCC(window, template) + bias

    Κάθε K×K παράθυρο (με βήμα stride) είναι ένα candidate box.
    Σε κενή εικόνα το NCC είναι 0, άρα όλα τα logits ίσα με bias.
    """

    VARIANCE_EPS = 1e-6

    def __init__(self, spec: ToyTemplateSpec, name: str = "toy", weights_id: Optional[str] = None):
        height, width = spec.input_size
        if spec.size > height or spec.size > width:
            raise InvalidArgumentError(
                f"toy template size {spec.size} is larger than the input size {height}×{width}"
            )
        super().__init__(
            name=name,
            group=ArchGroup.OBJECTNESS_V7,
            input_size=spec.input_size,
            weights_id=weights_id or f"toy-s{spec.seed}",
        )
        self.spec = spec
        self.template = toy_template(spec)

        centered = self.template - self.template.mean()
        self._centered = centered
        self._norm = float(torch.linalg.vector_norm(centered))
        if self._norm == 0.0:
            raise InvalidArgumentError("toy template has no contrast; pick a color away from 0.5")

        ys = torch.arange(0, height - spec.size + 1, spec.stride, dtype=torch.float64)
        xs = torch.arange(0, width - spec.size + 1, spec.stride, dtype=torch.float64)
        grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
        grid_x, grid_y = grid_x.reshape(-1), grid_y.reshape(-1)
        self.window_shape = (len(ys), len(xs))
        self.windows = torch.stack([grid_x, grid_y, grid_x + spec.size, grid_y + spec.size], dim=1)

    @classmethod
    def from_entry(cls, entry: AdapterEntry, settings: Optional[Settings] = None) -> "ToyDetector":
        return cls(toy_spec_from_entry(entry), name=entry.name, weights_id=entry.weights_id)

    def logit_map(self, image: torch.Tensor) -> torch.Tensor:
        """Τα logits ως (rows, cols) χάρτης, ένα ανά παράθυρο."""
        self.check_image(image)
        k, stride = self.spec.size, self.spec.stride
        x = image.unsqueeze(0)
        weight = self._centered.to(image.dtype).unsqueeze(0)
        ones = torch.ones_like(weight)
        n = float(weight.numel())

        numerator = F.conv2d(x, weight, stride=stride)
        window_sum = F.conv2d(x, ones, stride=stride)
        window_sq = F.conv2d(x * x, ones, stride=stride)
        variance = (window_sq - window_sum * window_sum / n).clamp_min(0.0)

        ncc = numerator / (torch.sqrt(variance + self.VARIANCE_EPS) * self._norm)
        logits = self.spec.gain * ncc + self.spec.bias
        return logits[0, 0, : self.window_shape[0], : self.window_shape[1]]

    def raw_scores(self, image: torch.Tensor) -> RawScores:
        logits = self.logit_map(image).reshape(-1)
        return RawScores(
            group=ArchGroup.OBJECTNESS_V7,
            objectness_logits=logits,
            boxes=self.windows.to(image.dtype),
        )

    def candidates(self, image: torch.Tensor) -> Candidates:
        logits = self.logit_map(image).reshape(-1)
        return Candidates(
            boxes=self.windows,
            scores=torch.sigmoid(logits.to(torch.float64)),
            categories=torch.zeros(len(logits), dtype=torch.int64),
        )

    def state_tensors(self) -> Mapping[str, torch.Tensor]:
        return {"template": self.template}


@dataclass
class AdapterRegistry:
    """Τα adapters που ξέρει ένα run, με όνομα → AdapterEntry."""

    entries: Dict[str, AdapterEntry] = field(default_factory=dict)
    source: str = "<builtin>"

    def get(self, name: str) -> AdapterEntry:
        if name not in self.entries:
            known = ", ".join(sorted(self.entries)) or "none"
            raise ConfigError(f"adapter '{name}' not found in registry {self.source} (known: {known})")
        return self.entries[name]

    def __len__(self) -> int:
        return len(self.entries)


def default_registry() -> AdapterRegistry:
    """Δύο toy detectors με διαφορετικά templates (κόκκινο και μπλε)."""
    entries = {
        "toy-blue": AdapterEntry(
            name="toy-blue",
            group=ArchGroup.OBJECTNESS_V7,
            backend="toy",
            weights_id="toy-blue",
            input_size=(64, 64),
            options={"color": (0.0, 0.0, 1.0), "seed": 1},
        ),
        "toy-red": AdapterEntry(
            name="toy-red",
            group=ArchGroup.OBJECTNESS_V7,
            backend="toy",
            weights_id="toy-red",
            input_size=(64, 64),
            options={"color": (1.0, 0.0, 0.0), "seed": 0},
        ),
    }
    return AdapterRegistry(entries=entries)


def load_registry(path: Optional[Union[str, Path]] = None) -> AdapterRegistry:
    """
    Διαβάζει ένα TOML registry με ένα [adapters.<name>] table ανά adapter.

    Χωρίς path επιστρέφει το builtin registry με τους toy detectors.
    """
    if path is None:
        return default_registry()

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Adapter registry not found: {path}")

    try:
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})") from e

    tables = document.get("adapters", {})
    if not isinstance(tables, dict):
        raise ConfigError(f"{path}: 'adapters' must be a table")

    entries = {}
    for name, table in tables.items():
        try:
            entries[name] = AdapterEntry(name=name, **table)
        except (TypeError, ValidationError) as e:
            raise ConfigError(f"{path}: invalid entry for adapter '{name}' ({e})") from e

    logger.info(f"✅ Loaded {len(entries)} adapters from {path}")
    return AdapterRegistry(entries=entries, source=str(path))


def list_adapters(registry: AdapterRegistry) -> List[Tuple[str, ArchGroup, str]]:
    """(name, group, weights_id) για κάθε adapter, ταξινομημένα κατά όνομα."""
    return [
        (name, registry.entries[name].group, registry.entries[name].weights_id)
        for name in sorted(registry.entries)
    ]


def resolve_backend(backend: str):
    """
    Βρίσκει την κλάση ενός backend: short name ή "module:Class".

    Το import γίνεται εδώ, ώστε ένα λείπον package να επηρεάζει μόνο
    όποιον το χρειάζεται.
    """
    target = BACKENDS.get(backend, backend)
    if ":" not in target:
        raise ConfigError(f"unknown backend '{backend}' (expected one of {sorted(BACKENDS)} or 'module:Class')")

    module_name, class_name = target.split(":", 1)
    try:
        module = importlib.import_module(module_name)
    except ImportError as e:
        raise BackendUnavailableError(f"backend '{backend}' is not importable: {e}") from e
    try:
        return getattr(module, class_name)
    except AttributeError as e:
        raise ConfigError(f"backend module '{module_name}' has no class '{class_name}'") from e


def build_adapter(entry: AdapterEntry, settings: Optional[Settings] = None) -> DetectorAdapter:
    adapter_cls = resolve_backend(entry.backend)
    adapter = adapter_cls.from_entry(entry, settings or get_settings())
    if adapter.group != entry.group:
        raise ConfigError(
            f"adapter '{entry.name}' reports group {adapter.group.value}, registry says {entry.group.value}"
        )
    logger.info(f"✅ Adapter '{entry.name}' ready ({entry.group.value}, {entry.weights_id})")
    return adapter


def load_adapter(name: str, registry: AdapterRegistry, settings: Optional[Settings] = None) -> DetectorAdapter:
    return build_adapter(registry.get(name), settings)
