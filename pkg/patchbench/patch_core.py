"""
Patch core - η βασική αναπαράσταση ενός adversarial patch.

Ένα Patch είναι μια H×W×3 εικόνα με τιμές στο [0, 1] μαζί με τα
metadata που λένε από πού προήλθε (ποιο δίκτυο, ποιο seed, πόσα epochs).

Αποθήκευση σε τρία αρχεία:
- <id>.patch.bin   float32 tensor με 16-byte header ("APCH", H, W, C)
- <id>.patch.json  sidecar με τα metadata και το sha256 των pixels
- <id>.png         8-bit preview (και είσοδος για τα histograms)
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import InvalidArgumentError, PatchFormatError
from .schemas import ArchGroup, LossWeights, PatchKind

logger = logging.getLogger(__name__)

# Configuration
MIN_SIDE = 8
DEFAULT_SIZE = 256
MAGIC = b"APCH"
HEADER_BYTES = 16
BASELINE_SOURCE = "baseline"
UNTRAINED_SOURCE = "untrained"


class PatchMeta(BaseModel):
    """
    Provenance ενός patch.

    Από εδώ χτίζεται ο άξονας "source" του compatibility matrix.
    """

    patch_id: str = Field(..., min_length=1)
    source_model: str = Field(default=BASELINE_SOURCE, min_length=1)
    arch_group: Union[ArchGroup, Literal["none"]] = "none"
    kind: PatchKind
    gray_level: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    seed: int = 0
    epochs_trained: int = Field(default=0, ge=0)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    # Η ώρα του run ζει στο run history, όχι εδώ
    created_at: Optional[datetime] = None

    @model_validator(mode="after")
    def check_kind_consistency(self):
        if (self.kind == PatchKind.GRAYSCALE) != (self.gray_level is not None):
            raise ValueError("gray_level must be set exactly for grayscale patches")
        if (self.kind == PatchKind.OPTIMIZED) != (self.source_model != BASELINE_SOURCE):
            raise ValueError("only optimized patches may name a source model other than 'baseline'")
        return self


@dataclass
class Patch:
    """
    Ένα patch: pixels (H×W×3, float32) και metadata.

    Τα pixels γίνονται read-only μετά την κατασκευή. Μόνο ο optimizer
    δουλεύει πάνω σε δικό του αντίγραφο (torch tensor).
    """

    pixels: np.ndarray
    meta: PatchMeta

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float32, copy=True)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidArgumentError(f"patch pixels must be H×W×3, got shape {pixels.shape}")
        if pixels.shape[0] < MIN_SIDE or pixels.shape[1] < MIN_SIDE:
            raise InvalidArgumentError(
                f"patch must be at least {MIN_SIDE}×{MIN_SIDE}, got {pixels.shape[0]}×{pixels.shape[1]}"
            )
        pixels.setflags(write=False)
        self.pixels = pixels

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def patch_id(self) -> str:
        return self.meta.patch_id

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Επιστρέφει τα pixels ως (3, H, W) tensor."""
        return torch.from_numpy(self.pixels.copy()).permute(2, 0, 1).contiguous().to(dtype)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, meta: PatchMeta, clamp: bool = True) -> "Patch":
        """Φτιάχνει Patch από (3, H, W) tensor, με clamp στο [0, 1] για export."""
        pixels = tensor.detach().to(torch.float32).cpu()
        if clamp:
            pixels = pixels.clamp(0.0, 1.0)
        return cls(pixels=pixels.permute(1, 2, 0).numpy(), meta=meta)


def _check_side(height: int, width: int) -> None:
    if height < MIN_SIDE or width < MIN_SIDE:
        raise InvalidArgumentError(
            f"patch dimensions must be >= {MIN_SIDE}, got {height}×{width}"
        )


def init_patch(
    seed: int,
    height: int = DEFAULT_SIZE,
    width: int = DEFAULT_SIZE,
    source_model: str = UNTRAINED_SOURCE,
    arch_group: Union[ArchGroup, str] = "none",
    loss_weights: Optional[LossWeights] = None,
) -> Patch:
    """
    Αρχικοποίηση με uniform noise στο [0, 1].

    Ίδιο seed → bitwise ίδια pixels.
    """
    _check_side(height, width)
    rng = np.random.default_rng(seed)
    pixels = rng.random((height, width, 3), dtype=np.float32)
    meta = PatchMeta(
        patch_id=f"{source_model}-s{seed}",
        source_model=source_model,
        arch_group=arch_group,
        kind=PatchKind.OPTIMIZED,
        seed=seed,
        epochs_trained=0,
        loss_weights=loss_weights or LossWeights(),
    )
    return Patch(pixels=pixels, meta=meta)


def baseline_patch(
    kind: Union[PatchKind, str],
    level: Optional[float] = None,
    seed: Optional[int] = None,
    height: int = DEFAULT_SIZE,
    width: int = DEFAULT_SIZE,
) -> Patch:
    """
    Baseline patches για σύγκριση: ένα γκρι επίπεδο ή uniform noise.

    Args:
        kind: grayscale ή uniform_noise
        level: Το γκρι επίπεδο στο [0, 1] (μόνο για grayscale)
        seed: Το seed του noise (μόνο για uniform_noise)
    """
    kind = PatchKind(kind)
    _check_side(height, width)

    if kind == PatchKind.GRAYSCALE:
        if level is None:
            raise InvalidArgumentError("grayscale baseline requires a level")
        if not 0.0 <= level <= 1.0:
            raise InvalidArgumentError(f"gray level must lie in [0, 1], got {level}")
        pixels = np.full((height, width, 3), level, dtype=np.float32)
        meta = PatchMeta(patch_id=f"gray-{level:.2f}", kind=kind, gray_level=float(level))
    elif kind == PatchKind.UNIFORM_NOISE:
        if seed is None:
            raise InvalidArgumentError("uniform_noise baseline requires a seed")
        pixels = np.random.default_rng(seed).random((height, width, 3), dtype=np.float32)
        meta = PatchMeta(patch_id=f"noise-s{seed}", kind=kind, seed=seed)
    else:
        raise InvalidArgumentError(f"'{kind.value}' is not a baseline kind")

    return Patch(pixels=pixels, meta=meta)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Κβαντισμός σε 8 bits: floor(v·255 + 0.5), δηλαδή round half up."""
    clipped = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def _stem(path: Union[str, Path]) -> Path:
    path = Path(path)
    for suffix in (".patch.bin", ".patch.json", ".png"):
        if path.name.endswith(suffix):
            return path.with_name(path.name[: -len(suffix)])
    return path


def patch_paths(path: Union[str, Path]) -> tuple:
    """(bin, json, png) paths για ένα patch stem."""
    stem = _stem(path)
    return (
        stem.with_name(stem.name + ".patch.bin"),
        stem.with_name(stem.name + ".patch.json"),
        stem.with_name(stem.name + ".png"),
    )


def _sidecar(patch: Patch, body: bytes) -> str:
    payload = {
        "format": MAGIC.decode("ascii"),
        "height": patch.height,
        "width": patch.width,
        "channels": 3,
        "sha256": hashlib.sha256(body).hexdigest(),
        "meta": patch.meta.model_dump(mode="json"),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def save_patch(patch: Patch, path: Union[str, Path]) -> Path:
    """
    Αποθηκεύει το patch (bin + json sidecar + png preview).

    Args:
        patch: Το patch
        path: Stem ή οποιοδήποτε από τα τρία ονόματα αρχείων

    Returns:
        Το path του .patch.bin
    """
    bin_path, json_path, png_path = patch_paths(path)
    if not bin_path.parent.is_dir():
        raise FileNotFoundError(f"Output directory does not exist: {bin_path.parent}")

    pixels = patch.pixels
    if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise InvalidArgumentError(f"patch '{patch.patch_id}' has pixels outside [0, 1]; clamp before saving")

    header = MAGIC + np.array([patch.height, patch.width, 3], dtype="<u4").tobytes()
    body = np.ascontiguousarray(pixels, dtype="<f4").tobytes()

    bin_path.write_bytes(header + body)
    json_path.write_text(_sidecar(patch, body), encoding="utf-8")
    Image.fromarray(to_uint8(pixels)).save(png_path)

    logger.debug(f"💾 Saved patch {patch.patch_id} to {bin_path}")
    return bin_path


def load_patch(path: Union[str, Path]) -> Patch:
    """
    Φορτώνει ένα patch και ελέγχει ότι bin και sidecar συμφωνούν.

    Raises:
        FileNotFoundError: Αν λείπει το .patch.bin
        PatchFormatError: Χαλασμένο header, mismatch με το sidecar, pixels εκτός [0, 1]
    """
    bin_path, json_path, _ = patch_paths(path)
    if not bin_path.exists():
        raise FileNotFoundError(f"Patch file not found: {bin_path}")

    raw = bin_path.read_bytes()
    if len(raw) < HEADER_BYTES or raw[:4] != MAGIC:
        raise PatchFormatError(f"{bin_path}: missing APCH header")

    height, width, channels = (int(v) for v in np.frombuffer(raw[4:HEADER_BYTES], dtype="<u4"))
    body = raw[HEADER_BYTES:]
    if channels != 3 or len(body) != height * width * channels * 4:
        raise PatchFormatError(
            f"{bin_path}: header says {height}×{width}×{channels} but body has {len(body)} bytes"
        )

    pixels = np.frombuffer(body, dtype="<f4").reshape(height, width, channels).astype(np.float32)
    if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise PatchFormatError(f"{bin_path}: pixel values outside [0, 1]")

    if not json_path.exists():
        raise PatchFormatError(f"{bin_path}: metadata sidecar {json_path.name} is missing")
    try:
        sidecar = json.loads(json_path.read_text(encoding="utf-8"))
        meta = PatchMeta.model_validate(sidecar["meta"])
    except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
        raise PatchFormatError(f"{json_path}: invalid sidecar ({e})") from e

    if sidecar.get("height") != height or sidecar.get("width") != width:
        raise PatchFormatError(f"{json_path}: size does not match {bin_path.name}")
    if sidecar.get("sha256") != hashlib.sha256(body).hexdigest():
        raise PatchFormatError(f"{json_path}: pixel digest does not match {bin_path.name}")

    try:
        return Patch(pixels=pixels, meta=meta)
    except InvalidArgumentError as e:
        raise PatchFormatError(f"{bin_path}: {e}") from e


def list_patch_files(directory: Union[str, Path]) -> List[Path]:
    """Όλα τα .patch.bin ενός φακέλου, ταξινομημένα."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Patch directory not found: {directory}")
    return sorted(directory.glob("*.patch.bin"))


def load_patch_dir(directory: Union[str, Path]) -> List[Patch]:
    return [load_patch(p) for p in list_patch_files(directory)]
