"""
Dataset Parser - διαβάζει τα datasets με τα ground truth person boxes.

Υποστηρίζει:
1. INRIA Person (τα αρχικά .txt annotations με "Bounding box" γραμμές)
2. COCO JSON, φιλτραρισμένο σε μία κατηγορία
3. Normalized manifest (JSON array) - για οποιοδήποτε άλλο person dataset
4. Συνθετικό dataset για τον toy detector

Τα boxes με μηδενικό εμβαδόν ή εκτός εικόνας πετιούνται με warning.
Η σειρά των samples είναι πάντα λεξικογραφική (determinism).
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from .detector_service import toy_template
from .errors import AnnotationParseError, InvalidArgumentError
from .geometry import BBox, letterbox
from .schemas import DatasetSpec, SyntheticSpec, ToyTemplateSpec

logger = logging.getLogger(__name__)

# INRIA annotation format
FILENAME_PATTERN = re.compile(r'^Image filename\s*:\s*"(?P<name>[^"]+)"')
SIZE_PATTERN = re.compile(r"^Image size \(X x Y x C\)\s*:\s*(?P<w>\d+)\s*x\s*(?P<h>\d+)")
BOX_PATTERN = re.compile(
    r"^Bounding box for object (?P<idx>\d+).*?:\s*"
    r"\(\s*(?P<x1>-?\d+(?:\.\d+)?)\s*,\s*(?P<y1>-?\d+(?:\.\d+)?)\s*\)\s*-\s*"
    r"\(\s*(?P<x2>-?\d+(?:\.\d+)?)\s*,\s*(?P<y2>-?\d+(?:\.\d+)?)\s*\)\s*$"
)
INRIA_SPLITS = {"train": ("Train", "train"), "test": ("Test", "test")}

# Πόσες φορές δοκιμάζουμε να βάλουμε ένα template χωρίς overlap
PLACEMENT_ATTEMPTS = 200


@dataclass
class Sample:
    """
    Μία εικόνα με τα boxes της.

    image_size είναι (width, height). Τα συνθετικά samples κρατάνε τα
    pixels στη μνήμη και δεν έχουν image_path.
    """

    image_path: Optional[Path]
    image_size: Tuple[int, int]
    boxes: List[BBox]
    pixels: Optional[torch.Tensor] = None

    @property
    def name(self) -> str:
        return self.image_path.name if self.image_path is not None else "<memory>"

    def load_image(self) -> torch.Tensor:
        """Η εικόνα ως (3, H, W) float32 tensor στο [0, 1]."""
        if self.pixels is not None:
            return self.pixels
        with Image.open(self.image_path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(array).permute(2, 0, 1).contiguous()


@dataclass
class AnnotatedDataset:
    id: str
    samples: List[Sample] = field(default_factory=list)
    category: str = "person"

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_boxes(self) -> int:
        return sum(len(s.boxes) for s in self.samples)

    def get_stats(self) -> Dict[str, object]:
        if not self.samples:
            return {"id": self.id, "samples": 0, "boxes": 0}
        sides = [min(b.w, b.h) for s in self.samples for b in s.boxes]
        return {
            "id": self.id,
            "category": self.category,
            "samples": len(self.samples),
            "boxes": self.num_boxes,
            "mean_shorter_side": round(float(np.mean(sides)), 2) if sides else 0.0,
        }


def _keep_box(box: Tuple[float, float, float, float], size: Tuple[int, int], where: str) -> Optional[BBox]:
    """BBox ή None (με warning) για μηδενικά boxes και boxes εκτός εικόνας."""
    x, y, w, h = box
    if not (w > 0 and h > 0) or not all(math.isfinite(v) for v in box):
        logger.warning(f"⚠️  Dropping degenerate box {box} in {where}")
        return None
    bbox = BBox(float(x), float(y), float(w), float(h))
    if not bbox.intersects_frame(*size):
        logger.warning(f"⚠️  Dropping box {box} outside the {size[0]}×{size[1]} image {where}")
        return None
    return bbox


def _image_size(path: Path) -> Tuple[int, int]:
    with Image.open(path) as img:
        return img.size


class InriaAnnotationParser:
    """
    Parser για ένα INRIA annotation αρχείο.

    Κρατάμε τρεις γραμμές: "Image filename", "Image size" και τα
    "Bounding box for object N ... : (Xmin, Ymin) - (Xmax, Ymax)".
    """

    def __init__(self, path: Path):
        self.path = path
        self.filename: Optional[str] = None
        self.size: Optional[Tuple[int, int]] = None
        self.boxes: List[Tuple[float, float, float, float]] = []

    def parse(self) -> "InriaAnnotationParser":
        text = self.path.read_text(encoding="latin-1")
        for line_no, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if stripped.startswith("Image filename"):
                match = FILENAME_PATTERN.match(stripped)
                if not match:
                    raise AnnotationParseError(self.path, line_no, line)
                self.filename = match.group("name")
            elif stripped.startswith("Image size"):
                match = SIZE_PATTERN.match(stripped)
                if not match:
                    raise AnnotationParseError(self.path, line_no, line)
                self.size = (int(match.group("w")), int(match.group("h")))
            elif stripped.startswith("Bounding box for object"):
                match = BOX_PATTERN.match(stripped)
                if not match:
                    raise AnnotationParseError(self.path, line_no, line)
                x1, y1, x2, y2 = (float(match.group(k)) for k in ("x1", "y1", "x2", "y2"))
                self.boxes.append((x1, y1, x2 - x1, y2 - y1))

        if self.filename is None:
            raise AnnotationParseError(self.path, 0, "", reason="no 'Image filename' line")
        return self


def _split_dir(root: Path, split: str) -> Path:
    if split not in INRIA_SPLITS:
        raise InvalidArgumentError(f"INRIA split must be 'train' or 'test', got '{split}'")
    for name in INRIA_SPLITS[split]:
        candidate = root / name
        if candidate.is_dir():
            return candidate
    raise FileNotFoundError(f"INRIA split directory not found under {root}: expected {INRIA_SPLITS[split][0]}/")


def _resolve_inria_image(root: Path, split_dir: Path, filename: str) -> Path:
    for candidate in (root / filename, split_dir / filename, split_dir / "pos" / Path(filename).name):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"Annotated image not found: {filename}")


def load_inria(root: Union[str, Path], split: str = "test") -> AnnotatedDataset:
    """
    Φορτώνει το INRIA Person στο αρχικό του layout.

    Args:
        root: Ο φάκελος που περιέχει Train/ και Test/
        split: train ή test

    Raises:
        FileNotFoundError: Λείπει ο φάκελος ή μια εικόνα που αναφέρεται
        AnnotationParseError: Γραμμή που δεν διαβάζεται (με αρχείο και αριθμό γραμμής)
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"INRIA root not found: {root}")
    split_dir = _split_dir(root, split)

    annotations_dir = split_dir / "annotations"
    files = sorted(annotations_dir.glob("*.txt")) if annotations_dir.is_dir() else []
    if not files:
        logger.warning(f"⚠️  No annotation files in {annotations_dir}, dataset is empty")
        return AnnotatedDataset(id=f"inria-{split}")

    samples = []
    for ann_path in files:
        parsed = InriaAnnotationParser(ann_path).parse()
        image_path = _resolve_inria_image(root, split_dir, parsed.filename)
        size = parsed.size or _image_size(image_path)
        boxes = [b for b in (_keep_box(box, size, ann_path.name) for box in parsed.boxes) if b is not None]
        if not boxes:
            logger.warning(f"⚠️  {ann_path.name} has no usable boxes, skipping the image")
            continue
        samples.append(Sample(image_path=image_path, image_size=size, boxes=boxes))

    dataset = AnnotatedDataset(id=f"inria-{split}", samples=samples)
    logger.info(f"✅ Loaded INRIA {split}: {len(dataset)} images, {dataset.num_boxes} boxes")
    return dataset


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        line = e.doc.splitlines()[e.lineno - 1] if e.doc and e.lineno <= len(e.doc.splitlines()) else ""
        raise AnnotationParseError(path, e.lineno, line, reason=f"invalid JSON ({e.msg})") from e


def load_coco_subset(
    ann_json: Union[str, Path],
    images_dir: Union[str, Path],
    category_name: str = "person",
) -> AnnotatedDataset:
    """
    Οι εικόνες ενός COCO annotation αρχείου που έχουν την κατηγορία.

    Boxes από [x, y, w, h]. Τα crowd annotations αγνοούνται. Εικόνες
    χωρίς κανένα έγκυρο box της κατηγορίας δεν μπαίνουν στο dataset.
    """
    ann_json, images_dir = Path(ann_json), Path(images_dir)
    if not ann_json.exists():
        raise FileNotFoundError(f"COCO annotation file not found: {ann_json}")
    if not images_dir.is_dir():
        raise FileNotFoundError(f"COCO images directory not found: {images_dir}")

    document = _read_json(ann_json)
    try:
        categories = {c["name"]: c["id"] for c in document["categories"]}
        images = {img["id"]: img for img in document["images"]}
        annotations = document["annotations"]
    except (KeyError, TypeError) as e:
        raise AnnotationParseError(ann_json, 0, "", reason=f"not a COCO detection file (missing {e})") from e

    if category_name not in categories:
        raise InvalidArgumentError(f"category '{category_name}' not in {ann_json.name} categories")
    category_id = categories[category_name]

    per_image: Dict[int, List[BBox]] = {}
    for ann in annotations:
        if ann.get("category_id") != category_id or ann.get("iscrowd", 0):
            continue
        image = images.get(ann.get("image_id"))
        if image is None:
            logger.warning(f"⚠️  Annotation {ann.get('id')} references unknown image {ann.get('image_id')}")
            continue
        try:
            size = (int(image["width"]), int(image["height"]))
            xywh = tuple(float(v) for v in ann["bbox"])
            file_name = image["file_name"]
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationParseError(
                ann_json, 0, json.dumps(ann, default=str)[:200], reason=f"bad annotation {ann.get('id')} ({e!r})"
            ) from e
        if len(xywh) != 4:
            raise AnnotationParseError(ann_json, 0, str(ann.get("bbox")), reason=f"annotation {ann.get('id')} bbox needs 4 values")
        box = _keep_box(xywh, size, file_name)
        if box is not None:
            per_image.setdefault(image["id"], []).append(box)

    samples = []
    for image_id in sorted(per_image, key=lambda i: images[i]["file_name"]):
        image = images[image_id]
        image_path = images_dir / image["file_name"]
        if not image_path.exists():
            raise FileNotFoundError(f"Annotated image not found: {image_path}")
        samples.append(
            Sample(
                image_path=image_path,
                image_size=(int(image["width"]), int(image["height"])),
                boxes=per_image[image_id],
            )
        )

    dataset = AnnotatedDataset(id=f"coco-{category_name}-{ann_json.stem}", samples=samples, category=category_name)
    logger.info(f"✅ Loaded COCO subset: {len(dataset)} images with '{category_name}', {dataset.num_boxes} boxes")
    return dataset


def write_manifest(dataset: AnnotatedDataset, path: Union[str, Path]) -> Path:
    """
    Γράφει normalized manifest: [{image, width, height, boxes: [[x, y, w, h], ...]}].

    Τα image paths γράφονται σχετικά με τον φάκελο του manifest όπου γίνεται.
    """
    path = Path(path)
    base = path.parent.resolve()
    entries = []
    for sample in dataset.samples:
        if sample.image_path is None:
            raise InvalidArgumentError("in-memory samples cannot be written to a manifest")
        image = sample.image_path.resolve()
        try:
            image = image.relative_to(base)
        except ValueError:
            pass
        entries.append(
            {
                "image": image.as_posix(),
                "width": sample.image_size[0],
                "height": sample.image_size[1],
                "boxes": [[b.x, b.y, b.w, b.h] for b in sample.boxes],
            }
        )
    path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    logger.info(f"💾 Wrote manifest with {len(entries)} images to {path}")
    return path


def load_manifest(path: Union[str, Path], category_name: str = "person") -> AnnotatedDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    entries = _read_json(path)
    if not isinstance(entries, list):
        raise AnnotationParseError(path, 1, "", reason="manifest must be a JSON array")

    samples = []
    for i, entry in enumerate(entries):
        try:
            image_path = (path.parent / entry["image"]).resolve()
            size = (int(entry["width"]), int(entry["height"]))
            raw_boxes = [tuple(float(v) for v in b) for b in entry["boxes"]]
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationParseError(path, i, json.dumps(entry)[:80], reason=f"invalid manifest entry ({e})") from e
        if not image_path.exists():
            raise FileNotFoundError(f"Annotated image not found: {image_path}")
        boxes = [b for b in (_keep_box(box, size, entry["image"]) for box in raw_boxes) if b is not None]
        if boxes:
            samples.append(Sample(image_path=image_path, image_size=size, boxes=boxes))

    samples.sort(key=lambda s: s.image_path.as_posix())
    return AnnotatedDataset(id=path.stem, samples=samples, category=category_name)


def _placement_grid(size: int, template: int, step: int) -> np.ndarray:
    return np.arange(0, size - template + 1, step)


def synthetic_dataset(spec: SyntheticSpec, seed: int = 0) -> AnnotatedDataset:
    """
    Συνθετικές εικόνες για τον toy detector.

    Κάθε εικόνα: uniform noise background, ένα instance από κάθε template
    (χωρίς overlap) σε θέσεις ευθυγραμμισμένες με το stride του detector,
    και Gaussian noise με σ ~ U(noise_std_range) ανά εικόνα.
    Τα ground truth boxes είναι ακριβώς τα K×K παράθυρα των templates.
    """
    rng = np.random.default_rng(seed)
    size = spec.image_size
    templates = [toy_template(t).numpy() for t in spec.templates]
    for t in spec.templates:
        if t.size > size:
            raise InvalidArgumentError(f"template size {t.size} exceeds image size {size}")
    step = math.lcm(*(t.stride for t in spec.templates)) if spec.templates else 1

    samples = []
    for _ in range(spec.count):
        image = rng.random((3, size, size))
        boxes: List[BBox] = []
        for t_spec, template in zip(spec.templates, templates):
            k = t_spec.size
            grid = _placement_grid(size, k, step)
            for _attempt in range(PLACEMENT_ATTEMPTS):
                x, y = int(rng.choice(grid)), int(rng.choice(grid))
                if all(x + k <= b.x or b.x + b.w <= x or y + k <= b.y or b.y + b.h <= y for b in boxes):
                    break
            else:
                raise InvalidArgumentError(f"cannot place {len(templates)} templates without overlap in {size}×{size}")
            image[:, y : y + k, x : x + k] = template
            boxes.append(BBox(float(x), float(y), float(k), float(k)))

        sigma = rng.uniform(*spec.noise_std_range)
        image = np.clip(image + rng.normal(0.0, 1.0, image.shape) * sigma, 0.0, 1.0)
        samples.append(
            Sample(
                image_path=None,
                image_size=(size, size),
                boxes=boxes,
                pixels=torch.from_numpy(image.astype(np.float32)),
            )
        )

    return AnnotatedDataset(id=f"synthetic-s{seed}-n{spec.count}", samples=samples, category=spec.category)


def load_dataset(spec: DatasetSpec, templates: Optional[Sequence[ToyTemplateSpec]] = None) -> AnnotatedDataset:
    """
    Φορτώνει ένα dataset από DatasetSpec.

    Για synthetic datasets, τα templates (αν δοθούν) αντικαθιστούν
    αυτά του spec - έτσι το dataset ταιριάζει με τους toy detectors του registry.
    """
    if spec.kind == "inria":
        return load_inria(spec.root, spec.split)
    if spec.kind == "coco":
        return load_coco_subset(spec.ann_json, spec.images_dir, spec.category_name)
    if spec.kind == "manifest":
        return load_manifest(spec.manifest, spec.category_name)

    synthetic = spec.synthetic or SyntheticSpec()
    if templates:
        synthetic = synthetic.model_copy(update={"templates": list(templates)})
    return synthetic_dataset(synthetic, spec.seed)


def load_dataset_file(path: Union[str, Path]) -> DatasetSpec:
    """Διαβάζει ένα DatasetSpec από JSON (π.χ. synth.json)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset spec not found: {path}")
    spec = DatasetSpec.model_validate(_read_json(path))
    # Σχετικά paths λύνονται ως προς τον φάκελο του spec
    updates = {}
    for name in ("root", "ann_json", "images_dir", "manifest"):
        value = getattr(spec, name)
        if value is not None and not value.is_absolute():
            updates[name] = path.parent / value
    return spec.model_copy(update=updates)


@dataclass
class PreparedSample:
    """Εικόνα στο input size ενός detector, με τα boxes μεταφερμένα."""

    image: torch.Tensor
    boxes: List[BBox]


def prepare_samples(dataset: AnnotatedDataset, input_size: Tuple[int, int]) -> List[PreparedSample]:
    """Letterbox κάθε εικόνας στο input size και αντίστοιχη μεταφορά των boxes."""
    prepared = []
    for sample in dataset.samples:
        boxed = letterbox(sample.load_image(), input_size)
        boxes = [b.mapped(boxed.scale, boxed.pad_x, boxed.pad_y) for b in sample.boxes]
        prepared.append(PreparedSample(image=boxed.image, boxes=boxes))
    return prepared
