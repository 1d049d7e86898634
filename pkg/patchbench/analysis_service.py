"""
Analysis Service - forensics πάνω στα patches.

Δύο αναλύσεις:
1. Feature embedding: features από ένα CNN (global average pooling του
   τελευταίου conv layer) → t-SNE σε 2 διαστάσεις
2. Histograms: 256-bin histograms ανά κανάλι (RGB ή HSV) και στατιστικά
   (mean, std, median, skewness, excess kurtosis) μόνο στα bins 1..254
"""

import logging
from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colors as mcolors
from sklearn.manifold import TSNE

from .errors import BackendUnavailableError, InvalidArgumentError, UndefinedStatisticError
from .evaluation_service import EvalRecord
from .patch_core import Patch, to_uint8
from .schemas import AnalysisParams, PatchKind
from .settings import Settings, get_settings

logger = logging.getLogger(__name__)

# Configuration
INCEPTION_LAYER = "Mixed_7c"
INCEPTION_SIDE = 299
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
EARLY_EXAGGERATION = 12.0
LEARNING_RATE_DIVISOR = 12.0  # learning rate = n / 12
MIN_TSNE_POINTS = 4

RGB_CHANNELS = ("R", "G", "B")
HSV_CHANNELS = ("H", "S", "V")
BINS = 256
STATS_RANGE = (1, 254)  # inclusive, τα ακραία bins αγνοούνται

SCOPES = ("single", "per_source", "all")
ALL_SOURCES = "All"


@dataclass
class FeatureVector:
    values: np.ndarray
    patch_id: str
    extractor_id: str


@dataclass
class EmbeddingPoint:
    x: float
    y: float
    patch_id: str
    source_model: str
    arch_group: str
    map_drop: float


@dataclass
class HistogramStats:
    channel: str
    scope: str
    source: str
    bins: List[int]
    mean: float
    std: float
    median: float
    skewness: float
    kurtosis: float


@dataclass
class HistogramPanel:
    """Ένα κελί του 3×3 grid: κανάλι × scope."""

    channel: str
    scope: str
    label: str
    bins: np.ndarray
    stats: Optional[HistogramStats]


# ============================================================
# Feature extraction
# ============================================================

class FeatureExtractor(ABC):
    extractor_id: str = "extractor"

    @abstractmethod
    def features(self, pixels: torch.Tensor) -> np.ndarray:
        """(3, H, W) pixels → 1-D feature vector."""


class RandomProjectionExtractor(FeatureExtractor):
    """
    Μικρός extractor χωρίς βάρη από το δίκτυο.

    Ένα σταθερό τυχαίο 1×1 "conv" (3 → dim), tanh, και global average
    pooling: f = mean_ij tanh(W·p_ij + b).
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((dim, 3))
        self.bias = rng.standard_normal(dim) * 0.1
        self.extractor_id = f"projection-d{dim}-s{seed}"

    def features(self, pixels: torch.Tensor) -> np.ndarray:
        flat = pixels.detach().to(torch.float64).reshape(3, -1).numpy()
        return np.tanh(self.weight @ flat + self.bias[:, None]).mean(axis=1)


class InceptionExtractor(FeatureExtractor):
    """
    Inception v3 (ImageNet βάρη), global average pooling του Mixed_7c.

    Τα βάρη κατεβαίνουν μέσω torchvision στο PATCHBENCH_CACHE.
    """

    def __init__(self, settings: Optional[Settings] = None):
        settings = settings or get_settings()
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3
            from torchvision.models.feature_extraction import create_feature_extractor

            torch.hub.set_dir(str(settings.cache_dir / "torch"))
            logger.info("📥 Loading Inception v3 (IMAGENET1K_V1)")
            model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1).eval()
            self.body = create_feature_extractor(model, return_nodes={INCEPTION_LAYER: "features"}).eval()
        except (ImportError, OSError, RuntimeError) as e:
            raise BackendUnavailableError(f"Inception v3 is not available: {e}") from e
        self.extractor_id = f"inception_v3-{INCEPTION_LAYER}"
        self._mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD).view(3, 1, 1)

    def features(self, pixels: torch.Tensor) -> np.ndarray:
        x = F.interpolate(
            pixels.unsqueeze(0).to(torch.float32),
            size=(INCEPTION_SIDE, INCEPTION_SIDE),
            mode="bilinear",
            align_corners=False,
        )
        x = (x - self._mean) / self._std
        with torch.no_grad():
            fmap = self.body(x)["features"]
        return fmap.mean(dim=(2, 3))[0].to(torch.float64).numpy()


def make_extractor(params: AnalysisParams) -> FeatureExtractor:
    if params.extractor == "inception":
        return InceptionExtractor()
    return RandomProjectionExtractor(dim=params.feature_dim, seed=params.seed)


def extract_features(extractor: FeatureExtractor, patch: Patch) -> FeatureVector:
    values = np.asarray(extractor.features(patch.to_tensor()), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError(f"non-finite features for patch '{patch.patch_id}'")
    return FeatureVector(values=values, patch_id=patch.patch_id, extractor_id=extractor.extractor_id)


# ============================================================
# t-SNE
# ============================================================

def tsne_embed(
    features: Sequence[FeatureVector],
    perplexity: float = 30.0,
    seed: int = 0,
    iterations: int = 1000,
) -> np.ndarray:
    """
    Exact t-SNE σε 2 διαστάσεις, PCA initialization.

    Τα vectors ταξινομούνται κατά patch_id πριν το embedding και οι
    συντεταγμένες επιστρέφουν στη σειρά εισόδου. Έτσι η σειρά με την
    οποία δίνονται τα patches δεν αλλάζει το αποτέλεσμα.

    Returns:
        (n, 2) array, γραμμή i για το features[i]
    """
    n = len(features)
    if n < MIN_TSNE_POINTS:
        raise InvalidArgumentError(f"t-SNE needs at least {MIN_TSNE_POINTS} points, got {n}")
    if not perplexity < (n - 1) / 3:
        raise InvalidArgumentError(f"perplexity {perplexity} is too large for {n} points (must be < {(n - 1) / 3:.2f})")
    ids = [f.patch_id for f in features]
    if len(set(ids)) != n:
        raise InvalidArgumentError("t-SNE inputs must have distinct patch ids")

    order = sorted(range(n), key=lambda i: ids[i])
    X = np.stack([features[i].values for i in order]).astype(np.float64)

    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        early_exaggeration=EARLY_EXAGGERATION,
        learning_rate=n / LEARNING_RATE_DIVISOR,
        max_iter=iterations,
        init="pca",
        method="exact",
        random_state=seed,
    )
    embedded = tsne.fit_transform(X)

    coords = np.empty_like(embedded)
    coords[order] = embedded
    return coords


def drops_by_patch(records: Sequence[EvalRecord]) -> Dict[str, float]:
    """
    mAP drop ανά patch, για το μέγεθος των σημείων του scatter.

    Προτιμάμε το drop στο δίκτυο στο οποίο εκπαιδεύτηκε το patch (model ==
    patch_set_id). Αλλιώς μέσος όρος σε όλους τους evaluators.
    """
    own: Dict[str, float] = {}
    pooled: Dict[str, List[float]] = defaultdict(list)
    for record in records:
        for patch_id, drop in zip(record.patch_ids, record.per_patch_drops):
            pooled[patch_id].append(drop)
            if record.model == record.patch_set_id:
                own[patch_id] = drop
    return {patch_id: own.get(patch_id, float(np.mean(values))) for patch_id, values in pooled.items()}


def embedding_points(patches: Sequence[Patch], coords: np.ndarray, drops: Mapping[str, float]) -> List[EmbeddingPoint]:
    points = []
    for patch, (x, y) in zip(patches, coords):
        if patch.patch_id not in drops:
            logger.debug(f"No eval record for {patch.patch_id}, using drop 0")
        group = patch.meta.arch_group
        points.append(
            EmbeddingPoint(
                x=float(x),
                y=float(y),
                patch_id=patch.patch_id,
                source_model=patch.meta.source_model,
                arch_group=getattr(group, "value", group),
                map_drop=float(drops.get(patch.patch_id, 0.0)),
            )
        )
    return points


# ============================================================
# Histograms
# ============================================================

def rgb_to_hsv(r: float, g: float, b: float) -> Tuple[float, float, float]:
    """Hexcone RGB → HSV. Για αχρωματικά χρώματα h = 0."""
    h, s, v = mcolors.rgb_to_hsv(np.array([r, g, b], dtype=np.float64))
    return float(h), float(s), float(v)


def hsv_to_rgb(h: float, s: float, v: float) -> Tuple[float, float, float]:
    r, g, b = mcolors.hsv_to_rgb(np.array([h, s, v], dtype=np.float64))
    return float(r), float(g), float(b)


def _channel_values(patch: Patch, space: str) -> np.ndarray:
    pixels = np.clip(patch.pixels.astype(np.float64), 0.0, 1.0)
    if space == "HSV":
        pixels = mcolors.rgb_to_hsv(pixels)
    return to_uint8(pixels)


def channel_histograms(patches: Sequence[Patch], space: str = "RGB") -> Dict[str, np.ndarray]:
    """
    Ένα 256-bin histogram ανά κανάλι, αθροισμένο σε όλα τα patches.

    Για HSV η μετατροπή γίνεται στα float pixels και μετά ο κβαντισμός
    (το hue πάει από [0, 1) σε 0..255).
    """
    if not patches:
        raise InvalidArgumentError("channel_histograms needs at least one patch")
    if space not in ("RGB", "HSV"):
        raise InvalidArgumentError(f"color space must be RGB or HSV, got '{space}'")

    names = RGB_CHANNELS if space == "RGB" else HSV_CHANNELS
    hist = {name: np.zeros(BINS, dtype=np.int64) for name in names}
    for patch in patches:
        values = _channel_values(patch, space)
        for c, name in enumerate(names):
            hist[name] += np.bincount(values[..., c].ravel(), minlength=BINS)
    return hist


def _weighted_median(values: np.ndarray, counts: np.ndarray) -> float:
    # Ίδιο με το np.median των "ανεπτυγμένων" τιμών
    total = counts.sum()
    cumulative = np.cumsum(counts)
    lo = np.floor((total - 1) / 2.0)
    hi = np.ceil((total - 1) / 2.0)
    v_lo = values[np.searchsorted(cumulative, lo, side="right")]
    v_hi = values[np.searchsorted(cumulative, hi, side="right")]
    return (float(v_lo) + float(v_hi)) / 2.0


def histogram_stats(
    bins: Sequence[float],
    channel: str = "",
    scope: str = "all",
    source: str = ALL_SOURCES,
) -> HistogramStats:
    """
    Στατιστικά της κατανομής στα bins 1..254.

    Skewness είναι το g1 και kurtosis το excess g2 (population moments).
    Με μηδενική διασπορά (ένα μόνο bin) skewness και kurtosis γράφονται 0.0.

    Raises:
        UndefinedStatisticError: Λιγότερες από 2 τιμές στο εύρος
    """
    bins = np.asarray(bins, dtype=np.float64)
    if bins.shape != (BINS,):
        raise InvalidArgumentError(f"expected {BINS} bins, got shape {bins.shape}")
    lo, hi = STATS_RANGE
    counts = bins[lo : hi + 1]
    values = np.arange(lo, hi + 1, dtype=np.float64)
    total = counts.sum()
    if total < 2:
        raise UndefinedStatisticError(f"need at least 2 values in bins {lo}..{hi}, got {total:g}")

    weights = counts / total
    mean = float(np.sum(weights * values))
    centered = values - mean
    variance = float(np.sum(weights * centered**2))
    if variance > 0:
        skewness = float(np.sum(weights * centered**3) / variance**1.5)
        kurtosis = float(np.sum(weights * centered**4) / variance**2 - 3.0)
    else:
        skewness = kurtosis = 0.0

    return HistogramStats(
        channel=channel,
        scope=scope,
        source=source,
        bins=[int(round(b)) for b in bins],
        mean=mean,
        std=float(np.sqrt(variance)),
        median=_weighted_median(values, counts),
        skewness=skewness,
        kurtosis=kurtosis,
    )


def _safe_stats(bins: np.ndarray, channel: str, scope: str, source: str) -> Optional[HistogramStats]:
    try:
        return histogram_stats(bins, channel, scope, source)
    except UndefinedStatisticError as e:
        logger.warning(f"⚠️  No statistics for {channel}/{source}: {e}")
        return None


def optimized_patches(patches: Sequence[Patch]) -> List[Patch]:
    return [p for p in patches if p.meta.kind == PatchKind.OPTIMIZED]


def histogram_grid(
    patches: Sequence[Patch],
    space: str = "RGB",
    single: Optional[str] = None,
    source: Optional[str] = None,
) -> List[HistogramPanel]:
    """
    Το 3×3 grid: γραμμές = κανάλια, στήλες = ένα patch, ένα source, όλα.

    Args:
        single: patch_id για την πρώτη στήλη (default: το πρώτο κατά id)
        source: source_model για τη δεύτερη στήλη (default: του single patch)
    """
    if not patches:
        raise InvalidArgumentError("histogram_grid needs at least one patch")
    by_id = {p.patch_id: p for p in patches}
    single_id = single or sorted(by_id)[0]
    if single_id not in by_id:
        raise InvalidArgumentError(f"unknown patch id '{single_id}'")
    source = source or by_id[single_id].meta.source_model
    source_set = [p for p in patches if p.meta.source_model == source]
    if not source_set:
        raise InvalidArgumentError(f"no patches from source '{source}'")

    columns = [
        ("single", single_id, channel_histograms([by_id[single_id]], space)),
        ("per_source", source, channel_histograms(source_set, space)),
        ("all", ALL_SOURCES, channel_histograms(patches, space)),
    ]
    names = RGB_CHANNELS if space == "RGB" else HSV_CHANNELS
    return [
        HistogramPanel(channel=name, scope=scope, label=label, bins=hist[name], stats=_safe_stats(hist[name], name, scope, label))
        for name in names
        for scope, label, hist in columns
    ]


def source_stats(patches: Sequence[Patch], space: str = "RGB") -> List[HistogramStats]:
    """Στατιστικά ανά κανάλι για κάθε source και για όλα μαζί (πίνακας)."""
    if not patches:
        raise InvalidArgumentError("source_stats needs at least one patch")
    names = RGB_CHANNELS if space == "RGB" else HSV_CHANNELS
    groups: Dict[str, List[Patch]] = defaultdict(list)
    for patch in patches:
        groups[patch.meta.source_model].append(patch)

    rows = []
    for name in names:
        for source in sorted(groups) + [ALL_SOURCES]:
            members = patches if source == ALL_SOURCES else groups[source]
            bins = channel_histograms(members, space)[name]
            scope = "all" if source == ALL_SOURCES else "per_source"
            stats = _safe_stats(bins, name, scope, source)
            if stats is not None:
                rows.append(stats)
    return rows
