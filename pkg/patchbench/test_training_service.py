"""
Tests για το training loop.
"""

import json

import pytest
import torch
from pydantic import ValidationError

from .dataset_parser import AnnotatedDataset
from .detector_service import RawScores
from .errors import InvalidArgumentError, TrainingDivergedError
from .losses import smoothness_loss
from .patch_core import init_patch, list_patch_files
from .schemas import LossWeights, TrainConfig
from .training_service import lr_schedule, train_patch, train_patch_set


# ==================== LR SCHEDULE ====================


@pytest.mark.parametrize(
    "epoch,expected",
    [(0, 0.01), (24, 0.01), (25, 0.001), (50, 1e-4), (75, 1e-5), (99, 1e-5)],
)
def test_lr_schedule_defaults(epoch, expected):
    assert lr_schedule(epoch, TrainConfig()) == pytest.approx(expected, rel=1e-12)


def test_lr_schedule_without_drops():
    cfg = TrainConfig(epochs=10, lr_drop_every=11)
    assert {lr_schedule(e, cfg) for e in range(10)} == {cfg.lr0}


def test_lr_schedule_is_piecewise_constant():
    cfg = TrainConfig(epochs=60, lr_drop_every=7)
    lrs = [lr_schedule(e, cfg) for e in range(60)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    breaks = [e for e in range(1, 60) if lrs[e] != lrs[e - 1]]
    assert breaks == list(range(7, 60, 7))


def test_lr_schedule_rejects_out_of_range():
    with pytest.raises(InvalidArgumentError):
        lr_schedule(100, TrainConfig())
    with pytest.raises(InvalidArgumentError):
        lr_schedule(-1, TrainConfig())


# ==================== TRAIN PATCH ====================


def test_zero_epochs_returns_init(toy_red, red_dataset, quick_train):
    cfg = quick_train.model_copy(update={"epochs": 0, "seed": 5})
    patch, log = train_patch(toy_red, red_dataset, cfg)
    assert len(log) == 0
    assert patch.pixels.tobytes() == init_patch(5, 16, 16).pixels.tobytes()
    assert patch.meta.source_model == "toy-red"


def test_training_lowers_detector_loss(toy_red, red_dataset):
    cfg = TrainConfig(epochs=15, lr0=0.05, lr_drop_every=10, batch_size=4, patch_size=16)
    patch, log = train_patch(toy_red, red_dataset, cfg)
    assert len(log) == 15
    assert [r.epoch for r in log.records] == list(range(15))
    assert log.records[-1].l_m < log.records[0].l_m
    assert patch.meta.epochs_trained == 15
    assert 0.0 <= patch.pixels.min() and patch.pixels.max() <= 1.0


def test_pure_smoothing_flattens_the_patch(toy_red, red_dataset):
    cfg = TrainConfig(
        epochs=90,
        lr0=0.05,
        lr_drop_every=30,
        batch_size=1,
        patch_size=16,
        weights=LossWeights(lambda_s=100.0, lambda_v=1.0, lambda_m=0.0),
    )
    initial = init_patch(cfg.seed, 16, 16)
    patch, _ = train_patch(toy_red, red_dataset, cfg)
    before = float(smoothness_loss(initial.to_tensor()))
    after = float(smoothness_loss(patch.to_tensor()))
    assert after < 0.01 * before


def test_one_epoch_moves_the_patch(toy_red, red_dataset, quick_train):
    cfg = quick_train.model_copy(update={"epochs": 1})
    patch, log = train_patch(toy_red, red_dataset, cfg)
    assert len(log) == 1
    record = log.records[0]
    assert all(isinstance(v, float) for v in (record.l_s, record.l_v, record.l_m, record.total))
    assert patch.pixels.tobytes() != init_patch(cfg.seed, 16, 16).pixels.tobytes()


def test_all_zero_weights_are_rejected():
    with pytest.raises(ValidationError, match="at least one loss weight"):
        TrainConfig(weights={"lambda_s": 0.0, "lambda_v": 0.0, "lambda_m": 0.0})


def test_training_is_deterministic(toy_red, red_dataset, quick_train):
    a, _ = train_patch(toy_red, red_dataset, quick_train)
    b, _ = train_patch(toy_red, red_dataset, quick_train)
    assert a.pixels.tobytes() == b.pixels.tobytes()


def test_detector_weights_are_untouched(toy_red, red_dataset, quick_train):
    before = toy_red.fingerprint()
    train_patch(toy_red, red_dataset, quick_train)
    assert toy_red.fingerprint() == before


def test_training_needs_boxes(toy_red, quick_train):
    with pytest.raises(InvalidArgumentError):
        train_patch(toy_red, AnnotatedDataset(id="empty"), quick_train)


def test_non_finite_loss_aborts(toy_red, red_dataset, quick_train):
    class Exploding(type(toy_red)):
        def raw_scores(self, image):
            scores = super().raw_scores(image)
            return RawScores(scores.group, objectness_logits=scores.objectness_logits * float("nan"))

    exploding = Exploding(toy_red.spec, name="toy-nan")
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        train_patch(exploding, red_dataset, quick_train)


def test_batch_log_and_checkpoints(toy_red, red_dataset, quick_train, tmp_path):
    cfg = quick_train.model_copy(update={"checkpoint_every": 1})
    log_path = tmp_path / "train.jsonl"
    checkpoints = tmp_path / "checkpoints"
    checkpoints.mkdir()
    patch, log = train_patch(toy_red, red_dataset, cfg, log_path=log_path, checkpoint_dir=checkpoints)

    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    # 8 εικόνες σε batches των 4
    assert len(lines) == cfg.epochs * 2
    assert set(lines[0]) == {"epoch", "batch", "l_s", "l_v", "l_m", "total", "lr"}
    assert lines[-1]["epoch"] == cfg.epochs - 1

    assert len(list_patch_files(checkpoints)) == cfg.epochs
    assert log.to_dict()["patch_id"] == patch.patch_id


# ==================== PATCH SETS ====================


def test_patch_set_seeds_and_content(toy_red, red_dataset, quick_train):
    patches = train_patch_set(toy_red, red_dataset, quick_train, count=3)
    assert [p.meta.seed for p in patches] == [0, 1, 2]
    assert len({p.pixels.tobytes() for p in patches}) == 3
    assert len({p.patch_id for p in patches}) == 3


def test_patch_set_of_one_equals_train_patch(toy_red, red_dataset, quick_train):
    (single,) = train_patch_set(toy_red, red_dataset, quick_train, count=1)
    direct, _ = train_patch(toy_red, red_dataset, quick_train)
    assert single.pixels.tobytes() == direct.pixels.tobytes()


def test_patch_set_runs_are_reproducible(toy_red, red_dataset, quick_train):
    a = train_patch_set(toy_red, red_dataset, quick_train, count=2)
    b = train_patch_set(toy_red, red_dataset, quick_train, count=2)
    assert [p.pixels.tobytes() for p in a] == [p.pixels.tobytes() for p in b]


def test_patch_set_in_parallel(toy_red, red_dataset, quick_train):
    patches = train_patch_set(toy_red, red_dataset, quick_train, count=2, jobs=2)
    assert [p.meta.seed for p in patches] == [0, 1]
    serial = train_patch_set(toy_red, red_dataset, quick_train, count=2)
    for parallel_patch, serial_patch in zip(patches, serial):
        assert torch.allclose(parallel_patch.to_tensor(), serial_patch.to_tensor(), atol=1e-4)


def test_patch_set_count_must_be_positive(toy_red, red_dataset, quick_train):
    with pytest.raises(InvalidArgumentError):
        train_patch_set(toy_red, red_dataset, quick_train, count=0)
