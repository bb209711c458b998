"""구성요소 마스크 테스트."""

import numpy as np
import pytest
import torch

from xspec_frontalizer.errors import LandmarkError, ShapeMismatchError
from xspec_frontalizer.masks import (
    ComponentMask,
    apply_mask,
    component_boxes,
    mask_from_landmarks,
    read_landmark_file,
    synthetic_landmarks,
)
from xspec_frontalizer.types import LandmarkSet


@pytest.fixture
def landmarks() -> LandmarkSet:
    return LandmarkSet(
        left_eye=(44, 52), right_eye=(84, 52), nose=(64, 74), mouth_left=(50, 94), mouth_right=(78, 94)
    )


def oracle_mask(lm: LandmarkSet, size: int = 128) -> np.ndarray:
    """박스 정의를 그대로 따라가는 픽셀 단위 point-in-box 판정."""
    d = float(np.hypot(lm.right_eye[0] - lm.left_eye[0], lm.right_eye[1] - lm.left_eye[1]))
    boxes = []
    for ex, ey in (lm.left_eye, lm.right_eye):
        cy = ey - 0.1 * d
        boxes.append((ex - 0.225 * d, cy - 0.175 * d, ex + 0.225 * d, cy + 0.175 * d))
    nx, ny = lm.nose
    boxes.append((nx - 0.175 * d, ny - 0.225 * d, nx + 0.175 * d, ny + 0.225 * d))
    (lx, ly), (rx, ry) = lm.mouth_left, lm.mouth_right
    pad = 0.15 * d
    boxes.append((min(lx, rx) - pad, min(ly, ry) - pad, max(lx, rx) + pad, max(ly, ry) + pad))

    mask = np.zeros((size, size), dtype=bool)
    for h in range(size):
        for w in range(size):
            px, py = w + 0.5, h + 0.5
            for x0, y0, x1, y1 in boxes:
                x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, size), min(y1, size)
                if x0 <= px < x1 and y0 <= py < y1:
                    mask[h, w] = True
                    break
    return mask


class TestMaskFromLandmarks:
    """랜드마크 → 마스크 테스트."""

    def test_matches_brute_force_oracle(self, landmarks):
        """박스 합집합 픽셀 수가 독립 oracle과 같다."""
        mask = mask_from_landmarks(landmarks, (128, 128))
        expected = oracle_mask(landmarks)
        assert mask.area == int(expected.sum())
        assert np.array_equal(mask.mask[0], expected)

    def test_binary_and_nonempty(self, landmarks):
        mask = mask_from_landmarks(landmarks)
        assert mask.mask.dtype == bool
        assert mask.mask.shape == (1, 128, 128)
        assert mask.area >= 0.01 * 128 * 128
        assert set(mask.boxes) == {"left_eye", "right_eye", "nose", "mouth"}

    def test_translation_equivariance(self, landmarks):
        """(+5,+5) 이동한 랜드마크의 마스크는 같은 마스크를 (+5,+5) 이동한 것."""
        base = mask_from_landmarks(landmarks).mask[0]
        moved = mask_from_landmarks(landmarks.translated(5, 5)).mask[0]
        assert moved.sum() == base.sum()
        assert np.array_equal(moved[5:, 5:], base[:-5, :-5])

    def test_boxes_clipped_to_frame(self):
        lm = LandmarkSet(
            left_eye=(2, 3), right_eye=(60, 3), nose=(31, 30), mouth_left=(15, 50), mouth_right=(45, 50)
        )
        for x0, y0, x1, y1 in component_boxes(lm).values():
            assert 0 <= x0 <= x1 <= 128 and 0 <= y0 <= y1 <= 128

    def test_coincident_eyes_rejected(self):
        lm = LandmarkSet(
            left_eye=(64, 52), right_eye=(64, 52), nose=(64, 74), mouth_left=(50, 94), mouth_right=(78, 94)
        )
        with pytest.raises(LandmarkError, match="landmarks collapsed"):
            mask_from_landmarks(lm)

    def test_swapped_eyes_rejected(self, landmarks):
        swapped = landmarks.model_copy(update={"left_eye": landmarks.right_eye, "right_eye": landmarks.left_eye})
        with pytest.raises(LandmarkError):
            mask_from_landmarks(swapped)

    def test_point_outside_frame_rejected(self):
        with pytest.raises(ValueError):
            LandmarkSet(
                left_eye=(-1, 52), right_eye=(84, 52), nose=(64, 74), mouth_left=(50, 94), mouth_right=(78, 94)
            )

    def test_deterministic(self, landmarks):
        a, b = mask_from_landmarks(landmarks), mask_from_landmarks(landmarks)
        assert np.array_equal(a.mask, b.mask)


class TestApplyMask:
    """마스크 적용 테스트."""

    def test_all_ones_is_identity(self):
        img = torch.rand(2, 3, 128, 128)
        assert torch.equal(apply_mask(ComponentMask.full(), img), img)

    def test_all_zeros_gives_zero(self):
        img = torch.rand(3, 128, 128)
        zeros = ComponentMask(mask=np.zeros((1, 128, 128), dtype=bool))
        assert torch.equal(apply_mask(zeros, img), torch.zeros_like(img))

    def test_elementwise_oracle(self):
        """out[c,h,w] = img[c,h,w] * M[h,w]."""
        gen = torch.Generator().manual_seed(1)
        m = (torch.rand(16, 16, generator=gen) > 0.5).float()
        img = torch.rand(3, 16, 16, generator=gen)
        out = apply_mask(m, img)
        for c in range(3):
            for h in range(16):
                for w in range(16):
                    assert out[c, h, w].item() == img[c, h, w].item() * m[h, w].item()

    def test_batched_masks(self):
        m = torch.zeros(2, 1, 8, 8)
        m[0] = 1.0
        img = torch.rand(2, 3, 8, 8)
        out = apply_mask(m, img)
        assert torch.equal(out[0], img[0])
        assert torch.equal(out[1], torch.zeros(3, 8, 8))

    def test_linearity(self):
        m = (torch.rand(8, 8) > 0.3).float()
        x, z = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        lhs = apply_mask(m, 2.0 * x + 3.0 * z)
        rhs = 2.0 * apply_mask(m, x) + 3.0 * apply_mask(m, z)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_size_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            apply_mask(torch.ones(64, 64), torch.rand(3, 128, 128))


class TestSyntheticLandmarks:
    """합성 얼굴 랜드마크 테스트."""

    def test_frontal_symmetry(self):
        """0도에서 좌우 눈은 중앙선에 대해 대칭 (1px 이내)."""
        lm = synthetic_landmarks(11, 0.0)
        assert abs((lm.left_eye[0] + lm.right_eye[0]) / 2 - 64.0) < 1.0
        assert abs(lm.left_eye[1] - lm.right_eye[1]) < 1.0

    def test_deterministic(self):
        assert synthetic_landmarks(5, 30.0) == synthetic_landmarks(5, 30.0)

    def test_pose_shrinks_interocular(self):
        for seed in range(5):
            assert synthetic_landmarks(seed, 60.0).interocular < synthetic_landmarks(seed, 0.0).interocular

    def test_pose_out_of_range(self):
        with pytest.raises(LandmarkError):
            synthetic_landmarks(0, 120.0)

    def test_valid_mask_for_frontal(self):
        mask = mask_from_landmarks(synthetic_landmarks(3, 0.0))
        assert mask.area > 0


class TestLandmarkFile:
    """랜드마크 파일 읽기 테스트."""

    def test_read_lines(self, tmp_path, landmarks):
        path = tmp_path / "landmarks.txt"
        path.write_text("# comment\n" + landmarks.to_line("images/a.png") + "\n\n", encoding="utf-8")
        records = read_landmark_file(path)
        assert list(records) == ["images/a.png"]
        assert records["images/a.png"].left_eye == (44.0, 52.0)

    def test_malformed_line_number(self, tmp_path, landmarks):
        path = tmp_path / "landmarks.txt"
        path.write_text(landmarks.to_line("a.png") + "\nb.png 1 2 3\n", encoding="utf-8")
        with pytest.raises(LandmarkError, match="line 2"):
            read_landmark_file(path)
