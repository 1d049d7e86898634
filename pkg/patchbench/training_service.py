"""
Training Service - βελτιστοποίηση ενός patch απέναντι σε έναν detector.

Η διαδικασία ανά batch:
1. Για κάθε εικόνα, για κάθε ground truth box:
   augment_patch (νέο draw ανά box) και embed στο κέντρο του box
2. raw_scores του detector στην εικόνα και target loss της ομάδας του
3. L_s και L_v πάνω στο patch, total = λ_s·L_s + λ_v·L_v + λ_m·L_m
4. AdamW step μόνο στα pixels του patch

Learning rate: lr0 / factor^(epoch // drop_every).
Στο τέλος τα pixels γίνονται clamp στο [0, 1].
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import torch

from .dataset_parser import AnnotatedDataset, PreparedSample, prepare_samples
from .detector_service import DetectorAdapter
from .errors import InvalidArgumentError, TrainingDivergedError
from .geometry import Placement, augment_patch, embed_patch, target_square
from .losses import LossBreakdown, smoothness_loss, target_loss, total_loss, validity_loss
from .patch_core import Patch, init_patch, save_patch
from .schemas import TrainConfig

logger = logging.getLogger(__name__)

# Κάθε πόσα epochs γράφουμε progress στο log
PROGRESS_EVERY = 10


@dataclass
class EpochRecord:
    epoch: int
    l_s: float
    l_v: float
    l_m: float
    total: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    """Ένα record ανά ολοκληρωμένο epoch (μέσοι όροι πάνω στα batches)."""

    patch_id: str
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {"patch_id": self.patch_id, "records": [asdict(r) for r in self.records]}


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 / factor^floor(epoch / drop_every)."""
    if not 0 <= epoch < cfg.epochs:
        raise InvalidArgumentError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    return cfg.lr0 / cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


def compose_training_image(
    sample: PreparedSample,
    patch: torch.Tensor,
    cfg: TrainConfig,
    generator: torch.Generator,
) -> torch.Tensor:
    """
    Η εικόνα με το augmented patch σε κάθε box.

    Τα boxes μπαίνουν με τη σειρά των annotations, οπότε όπου επικαλύπτονται
    τα τετράγωνα, το επόμενο patch γράφει πάνω στο προηγούμενο.
    """
    image = sample.image
    for box in sample.boxes:
        placement = target_square(box, cfg.placement_scale)
        augmented = augment_patch(patch, placement, generator, cfg.augment)
        side = augmented.canvas.shape[-1]
        image = embed_patch(
            image,
            augmented.canvas,
            Placement(placement.center_x, placement.center_y, float(side), augmented.mask),
        ).image
    return image


class PatchTrainer:
    """
    Ένα training run: adapter, prepared dataset και config.

    Τα βάρη του adapter και οι εικόνες δεν αλλάζουν ποτέ. Ο μόνος
    tensor με gradient είναι το patch.
    """

    def __init__(
        self,
        adapter: DetectorAdapter,
        samples: List[PreparedSample],
        cfg: TrainConfig,
        log_path: Optional[Path] = None,
        checkpoint_dir: Optional[Path] = None,
    ):
        if not samples or sum(len(s.boxes) for s in samples) == 0:
            raise InvalidArgumentError("training needs a dataset with at least one annotated box")
        self.adapter = adapter
        self.samples = samples
        self.cfg = cfg
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None

    def _batch_loss(self, patch: torch.Tensor, batch: List[PreparedSample], generator: torch.Generator) -> LossBreakdown:
        weights = self.cfg.weights
        if weights.lambda_m > 0:
            per_image = [
                target_loss(
                    self.adapter.raw_scores(compose_training_image(s, patch, self.cfg, generator)),
                    self.cfg.target_class,
                )
                for s in batch
            ]
            l_m = torch.stack(per_image).mean()
        else:
            l_m = torch.zeros((), dtype=patch.dtype)
        return total_loss(smoothness_loss(patch), validity_loss(patch), l_m, weights)

    def _checkpoint(self, patch: torch.Tensor, initial: Patch, epochs_done: int) -> None:
        meta = initial.meta.model_copy(update={"epochs_trained": epochs_done})
        stem = self.checkpoint_dir / f"{initial.patch_id}-e{epochs_done:04d}"
        save_patch(Patch.from_tensor(patch, meta), stem)

    def run(self) -> Tuple[Patch, TrainLog]:
        cfg = self.cfg
        initial = init_patch(
            cfg.seed,
            cfg.patch_size,
            cfg.patch_size,
            source_model=self.adapter.name,
            arch_group=self.adapter.group,
            loss_weights=cfg.weights,
        )
        log = TrainLog(patch_id=initial.patch_id)
        if cfg.epochs == 0:
            return initial, log

        generator = torch.Generator().manual_seed(cfg.seed)
        patch = initial.to_tensor().requires_grad_(True)
        optimizer = torch.optim.AdamW(
            [patch],
            lr=cfg.lr0,
            betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
            eps=cfg.optimizer.eps,
            weight_decay=cfg.optimizer.weight_decay,
        )

        batch_log = open(self.log_path, "w", encoding="utf-8") if self.log_path else None
        try:
            for epoch in range(cfg.epochs):
                started = time.perf_counter()
                lr = lr_schedule(epoch, cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                order = torch.randperm(len(self.samples), generator=generator).tolist()
                sums = {"l_s": 0.0, "l_v": 0.0, "l_m": 0.0, "total": 0.0}
                batches = 0
                for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
                    batch = [self.samples[i] for i in order[start : start + cfg.batch_size]]
                    optimizer.zero_grad()
                    breakdown = self._batch_loss(patch, batch, generator)
                    values = breakdown.as_floats()
                    if not torch.isfinite(breakdown.total):
                        raise TrainingDivergedError(
                            f"non-finite loss for {initial.patch_id} at epoch {epoch}, batch {batch_idx}: {values}"
                        )
                    breakdown.total.backward()
                    optimizer.step()

                    for key in sums:
                        sums[key] += values[key]
                    batches += 1
                    if batch_log:
                        batch_log.write(json.dumps({"epoch": epoch, "batch": batch_idx, **values, "lr": lr}, sort_keys=True) + "\n")

                record = EpochRecord(
                    epoch=epoch,
                    **{key: value / batches for key, value in sums.items()},
                    lr=lr,
                    wall_time=time.perf_counter() - started,
                )
                log.records.append(record)
                if (epoch + 1) % PROGRESS_EVERY == 0 or epoch + 1 == cfg.epochs:
                    logger.info(
                        f"🔄 {initial.patch_id} epoch {epoch + 1}/{cfg.epochs}: "
                        f"total={record.total:.4f} l_m={record.l_m:.4f} lr={lr:g}"
                    )
                if self.checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    self._checkpoint(patch, initial, epoch + 1)
        finally:
            if batch_log:
                batch_log.close()

        meta = initial.meta.model_copy(update={"epochs_trained": cfg.epochs})
        trained = Patch.from_tensor(patch, meta, clamp=True)
        logger.info(f"✅ Trained {trained.patch_id} for {cfg.epochs} epochs")
        return trained, log


def train_patch(
    adapter: DetectorAdapter,
    dataset: AnnotatedDataset,
    cfg: TrainConfig,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[Patch, TrainLog]:
    """
    Εκπαιδεύει ένα patch (ίδιο cfg.seed → ίδιο patch).

    Args:
        adapter: Ο detector-στόχος
        dataset: Εικόνες με ground truth boxes
        cfg: TrainConfig
        log_path: JSON lines αρχείο με ένα record ανά batch
        checkpoint_dir: Φάκελος για checkpoints κάθε cfg.checkpoint_every epochs

    Returns:
        (Patch, TrainLog)
    """
    samples = prepare_samples(dataset, adapter.input_size)
    return PatchTrainer(adapter, samples, cfg, log_path, checkpoint_dir).run()


def train_patch_set(
    adapter: DetectorAdapter,
    dataset: AnnotatedDataset,
    cfg: TrainConfig,
    count: int,
    jobs: int = 1,
    log_dir: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> List[Patch]:
    """
    count patches με seeds cfg.seed, cfg.seed + 1, ...

    Με jobs > 1 τα patches εκπαιδεύονται παράλληλα σε threads. Κάθε
    run έχει δικό του generator, οπότε το αποτέλεσμα δεν εξαρτάται από το jobs.
    """
    if count < 1:
        raise InvalidArgumentError(f"count must be at least 1, got {count}")
    samples = prepare_samples(dataset, adapter.input_size)

    def run_one(i: int) -> Patch:
        member_cfg = cfg.model_copy(update={"seed": cfg.seed + i})
        log_path = Path(log_dir) / f"{adapter.name}-s{member_cfg.seed}.train.jsonl" if log_dir else None
        patch, _ = PatchTrainer(adapter, samples, member_cfg, log_path, checkpoint_dir).run()
        return patch

    logger.info(f"🔄 Training {count} patches against '{adapter.name}' (jobs={jobs})")
    if jobs <= 1:
        return [run_one(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, range(count)))
