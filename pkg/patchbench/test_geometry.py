"""
Tests για το geometry: τοποθέτηση, embedding και augmentation.
"""

import pytest
import torch

from .errors import InvalidArgumentError
from .geometry import (
    AugmentDraw,
    BBox,
    Placement,
    augment_patch,
    embed_patch,
    letterbox,
    sample_augmentation,
    target_square,
    warp,
)
from .patch_core import PatchKind, baseline_patch
from .schemas import AugmentParams, JitterParams


def test_target_square_examples():
    p = target_square(BBox(10, 20, 100, 200), 0.75)
    assert (p.center_x, p.center_y, p.side) == (60.0, 120.0, 75.0)
    assert p.mask.shape == (1, 75, 75) and bool(torch.all(p.mask == 1))

    p = target_square(BBox(0, 0, 50, 50), 1.0)
    assert (p.center_x, p.center_y, p.side) == (25.0, 25.0, 50.0)

    p = target_square(BBox(0, 0, 10, 40), 0.75)
    assert (p.center_x, p.center_y, p.side) == (5.0, 20.0, 7.5)


def test_target_square_rejects_bad_scale():
    with pytest.raises(InvalidArgumentError):
        target_square(BBox(0, 0, 10, 10), 0.0)


def test_bbox_invariants():
    with pytest.raises(InvalidArgumentError):
        BBox(0, 0, 0, 10)
    with pytest.raises(InvalidArgumentError):
        BBox(0, 0, 10, -1)
    box = BBox(-5, -5, 10, 10)
    assert box.intersects_frame(100, 100)
    assert not BBox(200, 0, 10, 10).intersects_frame(100, 100)


def test_embed_gray_patch_in_center():
    image = torch.zeros(3, 100, 100)
    gray = baseline_patch(PatchKind.GRAYSCALE, level=0.5, height=16, width=16)
    out = embed_patch(image, gray, Placement(50.0, 50.0, 50.0))
    assert out.placed
    assert torch.allclose(out.image[:, 25:75, 25:75], torch.full((3, 50, 50), 0.5), atol=1e-6)
    outside = out.image.clone()
    outside[:, 25:75, 25:75] = 0.0
    assert not outside.any()


def test_embed_clips_to_image():
    image = torch.rand(3, 100, 100)
    patch = torch.full((3, 16, 16), 0.5)
    out = embed_patch(image, patch, Placement(0.0, 0.0, 50.0)).image
    changed = (out != image).any(dim=0)
    assert int(changed.sum()) <= 25 * 25
    assert not changed[25:, :].any() and not changed[:, 25:].any()
    assert torch.allclose(out[:, :25, :25], torch.full((3, 25, 25), 0.5), atol=1e-6)


def test_embed_outside_is_noop():
    image = torch.rand(3, 20, 20)
    out = embed_patch(image, torch.ones(3, 8, 8), Placement(500.0, 500.0, 10.0))
    assert not out.placed
    assert torch.equal(out.image, image)


def test_embed_with_empty_mask_is_identity():
    image = torch.rand(3, 40, 40)
    placement = Placement(20.0, 20.0, 10.0, mask=torch.zeros(1, 10, 10))
    out = embed_patch(image, torch.ones(3, 10, 10), placement)
    assert torch.equal(out.image, image)


def test_embed_leaves_outside_pixels_bit_identical():
    generator = torch.Generator().manual_seed(4)
    image = torch.rand(3, 64, 48, generator=generator)
    patch = torch.rand(3, 16, 16, generator=generator)
    placement = target_square(BBox(5.3, 7.9, 30.2, 41.7), 0.75)
    out = embed_patch(image, patch, placement).image

    x0, y0 = placement.origin()
    side = placement.pixel_side
    inside = torch.zeros(64, 48, dtype=torch.bool)
    inside[max(y0, 0) : y0 + side, max(x0, 0) : x0 + side] = True
    assert torch.equal(out[:, ~inside], image[:, ~inside])


def test_embed_gradient_matches_finite_differences():
    generator = torch.Generator().manual_seed(0)
    image = torch.rand(3, 40, 40, dtype=torch.float64, generator=generator)
    placement = Placement(20.0, 20.0, 24.0)
    weights = torch.rand(3, 40, 40, dtype=torch.float64, generator=generator)

    def objective(patch):
        return (embed_patch(image, patch, placement).image * weights).sum()

    patch = torch.rand(3, 16, 16, dtype=torch.float64, generator=generator, requires_grad=True)
    assert torch.autograd.gradcheck(objective, (patch,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_identity_augmentation():
    patch = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(1))
    placement = Placement(50.0, 50.0, 32.0)
    result = augment_patch(patch, placement, torch.Generator().manual_seed(0), AugmentParams.identity())
    assert torch.allclose(result.canvas, patch, atol=1e-6)
    assert bool(torch.all(result.mask == 1))


def test_augmentation_is_reproducible():
    patch = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(1))
    placement = Placement(50.0, 50.0, 40.0)
    params = AugmentParams()
    a = augment_patch(patch, placement, torch.Generator().manual_seed(9), params)
    b = augment_patch(patch, placement, torch.Generator().manual_seed(9), params)
    assert torch.equal(a.canvas, b.canvas)
    assert torch.equal(a.mask, b.mask)
    assert a.draw == b.draw


def test_rotation_draws_cover_the_bound():
    generator = torch.Generator().manual_seed(0)
    params = AugmentParams(rotation_deg=30.0)
    angles = [sample_augmentation(generator, params).angle for _ in range(10_000)]
    assert min(angles) >= -30.0 and max(angles) <= 30.0
    assert min(angles) <= -29.0 and max(angles) >= 29.0


def test_resize_range_bounds_canvas_side():
    generator = torch.Generator().manual_seed(0)
    patch = torch.rand(3, 32, 32)
    placement = Placement(100.0, 100.0, 100.0)
    params = AugmentParams(resize_range=(0.75, 1.0))
    for _ in range(50):
        side = augment_patch(patch, placement, generator, params).canvas.shape[-1]
        assert 75 <= side <= 100


def test_zero_jitter_is_identity():
    generator = torch.Generator().manual_seed(0)
    params = AugmentParams(
        resize_range=(1.0, 1.0),
        rotation_deg=0.0,
        perspective_scale=0.0,
        jitter=JitterParams(brightness=0, contrast=0, saturation=0, hue=0),
    )
    patch = torch.rand(3, 20, 20)
    result = augment_patch(patch, Placement(10.0, 10.0, 20.0), generator, params)
    assert torch.equal(result.jittered, patch)


def test_augmentation_is_differentiable():
    patch = torch.rand(3, 24, 24, requires_grad=True)
    result = augment_patch(patch, Placement(50.0, 50.0, 30.0), torch.Generator().manual_seed(3), AugmentParams())
    (result.canvas * result.mask).sum().backward()
    assert patch.grad is not None
    assert torch.isfinite(patch.grad).all()
    assert patch.grad.abs().sum() > 0


def test_warp_mask_marks_uncovered_corners():
    draw = AugmentDraw(
        scale=1.0, brightness=0.0, contrast=1.0, saturation=1.0, hue=0.0, corners=(0.0,) * 8, angle=30.0
    )
    canvas, mask = warp(torch.rand(3, 40, 40), draw)
    assert canvas.shape == (3, 40, 40)
    assert float(mask[0, 0, 0]) < 0.5
    assert float(mask[0, 20, 20]) > 0.99
    assert float(mask.min()) >= 0.0 and float(mask.max()) <= 1.0 + 1e-6


def test_letterbox_preserves_aspect():
    image = torch.rand(3, 50, 100)
    boxed = letterbox(image, (64, 64))
    assert boxed.image.shape == (3, 64, 64)
    assert boxed.scale == pytest.approx(0.64)
    assert boxed.pad_x == 0 and boxed.pad_y == 16
    assert bool(torch.all(boxed.image[:, :16, :] == 114.0 / 255.0))

    same = letterbox(image, (50, 100))
    assert same.image is image and same.scale == 1.0
