"""Visual prompt rendering semantics and golden-image pinning."""

import io
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from recurseg.core import BinMask
from recurseg.prompter import (EmptyMaskError, PromptSpec,
                               apply_visual_prompts, gaussian_blur)

GOLDEN_DIR = Path(__file__).parent / "golden"


def fixture_image():
    """Deterministic 32x32 RGB fixture: gradient plus two color patches."""
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    rr = np.arange(32).reshape(-1, 1)
    cc = np.arange(32).reshape(1, -1)
    img[..., 0] = (rr * 6) % 256
    img[..., 1] = (cc * 6) % 256
    img[..., 2] = ((rr + cc) * 3) % 256
    img[4:10, 20:28] = (40, 180, 90)
    img[22:30, 3:11] = (200, 160, 30)
    return img


def fixture_mask():
    """Centered 10x10 square mask."""
    m = np.zeros((32, 32), dtype=bool)
    m[11:21, 11:21] = True
    return m


def encode_png(image):
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class TestBlackPrompt:
    def test_equals_image_times_mask(self, rng):
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        mask = rng.random((16, 16)) > 0.5
        out = apply_visual_prompts(img, mask, PromptSpec(types=("black",)))
        np.testing.assert_array_equal(out, img * mask[:, :, None])

    def test_idempotent(self, rng):
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        mask = rng.random((16, 16)) > 0.5
        spec = PromptSpec(types=("black",))
        once = apply_visual_prompts(img, mask, spec)
        twice = apply_visual_prompts(once, mask, spec)
        np.testing.assert_array_equal(once, twice)


class TestBlurGray:
    def test_blur_keeps_inside_bits(self, rng):
        for _ in range(5):
            img = rng.integers(0, 256, (24, 24, 3)).astype(np.uint8)
            mask = rng.random((24, 24)) > 0.6
            out = apply_visual_prompts(img, mask, PromptSpec(types=("blur",)))
            np.testing.assert_array_equal(out[mask], img[mask])

    def test_gray_keeps_inside_bits(self, rng):
        img = rng.integers(0, 256, (24, 24, 3)).astype(np.uint8)
        mask = rng.random((24, 24)) > 0.6
        out = apply_visual_prompts(img, mask, PromptSpec(types=("gray",)))
        np.testing.assert_array_equal(out[mask], img[mask])

    def test_gray_outside_is_bt601_luma(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        img[...] = (100, 150, 200)
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        out = apply_visual_prompts(img, mask, PromptSpec(types=("gray",)))
        # floor(0.299*100 + 0.587*150 + 0.114*200 + 0.5) = floor(141.75) = 141
        assert tuple(out[3, 3]) == (141, 141, 141)

    def test_gray_is_channel_uniform_outside(self, rng):
        img = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:4, 2:4] = True
        out = apply_visual_prompts(img, mask, PromptSpec(types=("gray",)))
        outside = out[~mask]
        assert (outside[:, 0] == outside[:, 1]).all()
        assert (outside[:, 1] == outside[:, 2]).all()


class TestGaussianBlur:
    def test_constant_image_unchanged(self):
        img = np.full((10, 10, 3), 137, dtype=np.uint8)
        np.testing.assert_array_equal(gaussian_blur(img, 15), img)

    def test_kernel_one_identity(self, rng):
        img = rng.integers(0, 256, (9, 9, 3)).astype(np.uint8)
        np.testing.assert_array_equal(gaussian_blur(img, 1), img)

    def test_impulse_matches_dense_convolution(self):
        """Separable pass against a direct 2-D convolution oracle."""
        img = np.zeros((9, 9, 3), dtype=np.uint8)
        img[4, 4] = (255, 255, 255)
        kernel, sigma = 3, 0.8
        out = gaussian_blur(img, kernel, sigma)

        x = np.arange(kernel) - kernel // 2
        w1 = np.exp(-(x ** 2) / (2 * sigma ** 2))
        w1 /= w1.sum()
        w2 = np.outer(w1, w1)
        dense = np.zeros((9, 9, 3))
        padded = np.pad(img.astype(np.float64), ((1, 1), (1, 1), (0, 0)),
                        mode="edge")
        for r in range(9):
            for c in range(9):
                for ch in range(3):
                    dense[r, c, ch] = (
                        w2 * padded[r:r + 3, c:c + 3, ch]).sum()
        dense = np.clip(np.floor(dense + 0.5), 0, 255).astype(np.uint8)
        diff = np.abs(out.astype(int) - dense.astype(int))
        assert diff.max() <= 1

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            gaussian_blur(np.zeros((4, 4, 3), dtype=np.uint8), 4)

    def test_default_sigma_convention(self):
        # kernel 15 implies sigma = 0.3*((15-1)*0.5 - 1) + 0.8 = 2.6
        assert PromptSpec(blur_kernel=15).sigma == pytest.approx(2.6)


class TestGeometricPrompts:
    def test_circle_geometry_on_centered_square(self):
        """10x10 mask centered in 32x32: ellipse axes (5, 5) at (16, 16)."""
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        out = apply_visual_prompts(img, fixture_mask(),
                                   PromptSpec(types=("circle",)))
        red = np.argwhere((out == (255, 0, 0)).all(axis=2))
        assert len(red) > 0
        rows, cols = red[:, 0], red[:, 1]
        # a radius-5 midpoint circle centered at (16,16) spans 11..21
        assert rows.min() == 11 and rows.max() == 21
        assert cols.min() == 11 and cols.max() == 21
        # extreme points of the outline
        for point in ((11, 16), (21, 16), (16, 11), (16, 21)):
            assert (out[point] == (255, 0, 0)).all()
        # the center stays untouched
        assert (out[16, 16] == (0, 0, 0)).all()

    def test_rectangle_outline(self):
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        out = apply_visual_prompts(img, fixture_mask(),
                                   PromptSpec(types=("rectangle",)))
        red = (out == (255, 0, 0)).all(axis=2)
        assert red[11, 11] and red[11, 21] and red[21, 11] and red[21, 21]
        assert red[11, 11:22].all() and red[21, 11:22].all()
        assert red[11:22, 11].all() and red[11:22, 21].all()
        assert not red[12:21, 12:21].any()  # interior untouched

    def test_contour_traces_filled_boundary(self):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:12, 4:12] = True
        mask[7:9, 7:9] = False  # hole gets filled before tracing
        out = apply_visual_prompts(img, mask, PromptSpec(types=("contour",)))
        red = (out == (255, 0, 0)).all(axis=2)
        assert red[4, 4] and red[11, 11]
        assert not red[7:9, 7:9].any()  # hole boundary not drawn
        assert red.sum() == 28  # perimeter of the 8x8 square

    def test_perimeter_bound(self):
        """Circle and rectangle alter at most perimeter x thickness pixels."""
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        mask = fixture_mask()
        for types in (("circle",), ("rectangle",)):
            out = apply_visual_prompts(img, mask, PromptSpec(types=types))
            changed = (out != img).any(axis=2).sum()
            assert changed <= 4 * 11  # bbox span is 11 pixels per side

    def test_empty_mask_errors(self):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        empty = np.zeros((8, 8), dtype=bool)
        for ptype in ("circle", "rectangle", "contour"):
            with pytest.raises(EmptyMaskError, match="empty mask"):
                apply_visual_prompts(img, empty, PromptSpec(types=(ptype,)))
        # restyling prompts accept an empty mask
        apply_visual_prompts(img, empty, PromptSpec(types=("black",)))

    def test_composition_order(self):
        """blur + circle: outside pixels blurred, then geometry on top."""
        img = fixture_image()
        mask = fixture_mask()
        combo = apply_visual_prompts(img, mask,
                                     PromptSpec(types=("circle", "blur")))
        blur_only = apply_visual_prompts(img, mask,
                                         PromptSpec(types=("blur",)))
        circle_on_blur = apply_visual_prompts(blur_only, mask,
                                              PromptSpec(types=("circle",)))
        np.testing.assert_array_equal(combo, circle_on_blur)


class TestBinMaskInput:
    def test_accepts_binmask(self, rng):
        img = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
        arr = rng.random((8, 8)) > 0.5
        a = apply_visual_prompts(img, arr, PromptSpec(types=("black",)))
        b = apply_visual_prompts(img, BinMask.from_array(arr),
                                 PromptSpec(types=("black",)))
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_visual_prompts(np.zeros((8, 8, 3), dtype=np.uint8),
                                 np.zeros((4, 4), dtype=bool),
                                 PromptSpec(types=("black",)))


@pytest.mark.parametrize("ptype", ["circle", "rectangle", "contour",
                                   "blur", "gray", "black"])
def test_golden_images(ptype):
    """Each prompt type matches its committed reference PNG byte-for-byte."""
    golden_path = GOLDEN_DIR / f"prompt_{ptype}.png"
    assert golden_path.exists(), f"golden file missing: {golden_path}"
    rendered = apply_visual_prompts(fixture_image(), fixture_mask(),
                                    PromptSpec(types=(ptype,)))
    assert encode_png(rendered) == golden_path.read_bytes()
