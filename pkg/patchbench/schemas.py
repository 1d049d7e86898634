"""
Pydantic schemas για validation και serialization.

Αυτά τα models ορίζουν το "συμβόλαιο" ανάμεσα στο config file,
τα CLI flags και τα modules:
- Τι παραμέτρους δέχεται το training (TrainConfig)
- Πώς γίνεται το evaluation (EvalParams)
- Πώς περιγράφονται τα datasets και οι detectors (DatasetSpec, AdapterEntry)
"""

from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ArchGroup(str, Enum):
    """Η ομάδα αρχιτεκτονικής καθορίζει ποιο target loss χρησιμοποιείται."""

    OBJECTNESS_V7 = "OBJECTNESS_V7"
    CLASSMAX = "CLASSMAX"
    DUALHEAD_V10 = "DUALHEAD_V10"


class PatchKind(str, Enum):
    OPTIMIZED = "optimized"
    UNIFORM_NOISE = "uniform_noise"
    GRAYSCALE = "grayscale"


class LossWeights(BaseModel):
    """
    Τα βάρη του composite loss: λ_s·L_s + λ_v·L_v + λ_m·L_m.

    Οι default τιμές είναι δικές μας επιλογές, δεν δίνονται από κάπου.
    """

    model_config = ConfigDict(frozen=True)

    lambda_s: float = Field(default=0.1, ge=0, description="Smoothness (total variation) weight")
    lambda_v: float = Field(default=1.0, ge=0, description="Validity weight")
    lambda_m: float = Field(default=1.0, ge=0, description="Target (detector) weight")

    @model_validator(mode="after")
    def not_all_zero(self):
        if self.lambda_s == 0 and self.lambda_v == 0 and self.lambda_m == 0:
            raise ValueError("at least one loss weight must be positive")
        return self


class JitterParams(BaseModel):
    """Μέγιστα deltas του color jitter (κλάσματα)."""

    model_config = ConfigDict(frozen=True)

    brightness: float = Field(default=0.2, ge=0)
    contrast: float = Field(default=0.2, ge=0)
    saturation: float = Field(default=0.2, ge=0)
    hue: float = Field(default=0.05, ge=0, le=0.5)


class AugmentParams(BaseModel):
    """
    Παράμετροι του training-time augmentation.

    Η σειρά είναι σταθερή: resize → color jitter → perspective → rotation.
    """

    model_config = ConfigDict(frozen=True)

    resize_range: Tuple[float, float] = Field(
        default=(0.75, 1.0),
        description="Resize factor range, as fractions of the placement side",
    )
    rotation_deg: float = Field(default=30.0, ge=0, le=90)
    jitter: JitterParams = Field(default_factory=JitterParams)
    perspective_scale: float = Field(default=0.1, ge=0, le=1)

    @field_validator("resize_range")
    @classmethod
    def validate_resize_range(cls, v):
        lo, hi = v
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"resize_range must satisfy 0 < lo <= hi <= 1, got {v}")
        return v

    @classmethod
    def identity(cls) -> "AugmentParams":
        """Όλα τα stages ουδέτερα - χρήσιμο για tests και evaluation."""
        return cls(
            resize_range=(1.0, 1.0),
            rotation_deg=0.0,
            jitter=JitterParams(brightness=0, contrast=0, saturation=0, hue=0),
            perspective_scale=0.0,
        )


class OptimizerParams(BaseModel):
    """Παράμετροι του AdamW (decoupled weight decay)."""

    model_config = ConfigDict(frozen=True)

    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)


class TrainConfig(BaseModel):
    """Ρυθμίσεις για το patch optimization."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=100, ge=0)
    lr0: float = Field(default=0.01, gt=0)
    lr_drop_every: int = Field(default=25, ge=1)
    lr_drop_factor: float = Field(default=10.0, gt=1)
    batch_size: int = Field(default=8, ge=1)
    weights: LossWeights = Field(default_factory=LossWeights)
    augment: AugmentParams = Field(default_factory=AugmentParams)
    placement_scale: float = Field(default=0.75, gt=0)
    seed: int = 0
    optimizer: OptimizerParams = Field(default_factory=OptimizerParams)
    patch_size: int = Field(default=256, ge=8)
    target_class: Optional[int] = Field(
        default=None,
        ge=0,
        description="Restrict the class-max loss to this class logit (--target-class-only)",
    )
    checkpoint_every: int = Field(default=0, ge=0, description="0 disables checkpoints")


class EvalParams(BaseModel):
    """Ρυθμίσεις για το evaluation protocol."""

    model_config = ConfigDict(frozen=True)

    conf_thresh: float = Field(default=0.25, gt=0, lt=1)
    iou_thresh: float = Field(default=0.45, gt=0, lt=1)
    placement_scale: float = Field(default=0.75, gt=0)
    gray_levels: List[float] = Field(default_factory=lambda: [0.5])
    noise_seed: int = 0
    noise_count: int = Field(default=1, ge=1)
    patch_size: int = Field(default=256, ge=8)

    @field_validator("gray_levels")
    @classmethod
    def validate_levels(cls, v):
        for level in v:
            if not 0.0 <= level <= 1.0:
                raise ValueError(f"gray level {level} outside [0, 1]")
        # Χωρίς διπλά, με τη σειρά που δόθηκαν
        return list(dict.fromkeys(v))


class AnalysisParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    perplexity: float = Field(default=30.0, gt=0)
    seed: int = 0
    iterations: int = Field(default=1000, ge=250)
    extractor: Literal["projection", "inception"] = "projection"
    feature_dim: int = Field(default=64, ge=2)
    min_marker: float = Field(default=20.0, gt=0)
    max_marker: float = Field(default=200.0, gt=0)


class ToyTemplateSpec(BaseModel):
    """
    Ο toy detector: ένα K×K χρωματιστό template και normalized cross-correlation.

    Το pattern βγαίνει από το seed, το χρώμα από το color.
    """

    model_config = ConfigDict(frozen=True)

    size: int = Field(default=16, ge=2)
    stride: int = Field(default=4, ge=1)
    color: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    seed: int = 0
    gain: float = Field(default=10.0, gt=0)
    bias: float = -6.0
    input_size: Tuple[int, int] = (64, 64)

    @field_validator("color")
    @classmethod
    def validate_color(cls, v):
        if any(not 0.0 <= c <= 1.0 for c in v):
            raise ValueError(f"template color must lie in [0, 1], got {v}")
        return v


class SyntheticSpec(BaseModel):
    """Συνθετικό dataset για τον toy detector."""

    model_config = ConfigDict(frozen=True)

    count: int = Field(default=32, ge=0)
    image_size: int = Field(default=64, ge=8)
    templates: List[ToyTemplateSpec] = Field(default_factory=lambda: [ToyTemplateSpec()])
    noise_std_range: Tuple[float, float] = (0.0, 0.6)
    category: str = "person"

    @field_validator("noise_std_range")
    @classmethod
    def validate_noise(cls, v):
        lo, hi = v
        if not 0 <= lo <= hi:
            raise ValueError(f"noise_std_range must satisfy 0 <= lo <= hi, got {v}")
        return v


class DatasetSpec(BaseModel):
    """
    Περιγραφή dataset για το CLI (--data).

    Το kind αποφασίζει ποια πεδία χρειάζονται.
    """

    kind: Literal["inria", "coco", "manifest", "synthetic"]
    root: Optional[Path] = None
    split: Literal["train", "test"] = "test"
    ann_json: Optional[Path] = None
    images_dir: Optional[Path] = None
    manifest: Optional[Path] = None
    category_name: str = "person"
    synthetic: Optional[SyntheticSpec] = None
    template_adapters: List[str] = Field(
        default_factory=list,
        description="Registry adapters whose toy templates populate a synthetic dataset",
    )
    seed: int = 0

    @model_validator(mode="after")
    def check_fields_for_kind(self):
        required = {
            "inria": ["root"],
            "coco": ["ann_json", "images_dir"],
            "manifest": ["manifest"],
            "synthetic": [],
        }[self.kind]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"dataset kind '{self.kind}' requires: {', '.join(missing)}")
        return self


class AdapterEntry(BaseModel):
    """Μία εγγραφή του adapters registry."""

    name: str
    group: ArchGroup
    backend: str
    weights_id: str
    input_size: Tuple[int, int] = (640, 640)
    weights_url: Optional[str] = None
    options: Dict[str, object] = Field(default_factory=dict)


class RunConfig(BaseModel):
    """Όλο το run: registry, dataset, training, evaluation, analysis."""

    registry: Optional[Path] = None
    data: Optional[Path] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalParams = Field(default_factory=EvalParams)
    analysis: AnalysisParams = Field(default_factory=AnalysisParams)
    out: Path = Path("runs/default")
    seed: Optional[int] = None
    jobs: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def apply_global_seed(self):
        # Το global seed περνάει σε όλα τα υπο-configs
        if self.seed is not None:
            self.train = self.train.model_copy(update={"seed": self.seed})
            self.eval = self.eval.model_copy(update={"noise_seed": self.seed})
            self.analysis = self.analysis.model_copy(update={"seed": self.seed})
        return self
