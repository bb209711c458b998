"""랜드마크 기반 얼굴 구성요소 마스크."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import structlog
import torch
from pydantic import ValidationError

from .errors import LandmarkError, ShapeMismatchError
from .synthetic import FaceGeometry
from .types import LandmarkSet

logger = structlog.get_logger(__name__)

# 최소 눈 사이 거리 (px)
MIN_INTEROCULAR = 4.0
# 마스크가 프레임에서 차지해야 하는 최소 비율
MIN_MASK_FRACTION = 0.01

Box = tuple[float, float, float, float]


@dataclass
class ComponentMask:
    """눈/눈썹, 코, 입 박스의 합집합으로 된 이진 마스크."""
    mask: np.ndarray  # bool [1, H, W]
    boxes: dict[str, Box] = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        """(H, W)."""
        return (self.mask.shape[1], self.mask.shape[2])

    @property
    def area(self) -> int:
        """마스크 픽셀 수."""
        return int(self.mask.sum())

    def to_tensor(self) -> torch.Tensor:
        """[1,H,W] float 텐서."""
        return torch.from_numpy(self.mask.astype(np.float32))

    @classmethod
    def full(cls, size: tuple[int, int] = (128, 128)) -> "ComponentMask":
        """랜드마크가 없을 때 쓰는 전체 마스크."""
        return cls(mask=np.ones((1, *size), dtype=bool))


def _clip(box: Box, size: tuple[int, int]) -> Box:
    h, w = size
    x0, y0, x1, y1 = box
    return (max(x0, 0.0), max(y0, 0.0), min(x1, float(w)), min(y1, float(h)))


def _centered(cx: float, cy: float, width: float, height: float) -> Box:
    return (cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2)


def component_boxes(lm: LandmarkSet, size: tuple[int, int] = (128, 128)) -> dict[str, Box]:
    """눈 사이 거리 d에 비례하는 구성요소 박스를 계산합니다 (프레임에 clip)."""
    d = lm.interocular
    if d < MIN_INTEROCULAR:
        raise LandmarkError(f"landmarks collapsed: interocular distance {d:.2f}px < {MIN_INTEROCULAR}px")
    if lm.left_eye[0] >= lm.right_eye[0]:
        raise LandmarkError("left_eye must lie left of right_eye")

    boxes: dict[str, Box] = {}
    for name, eye, brow in (
        ("left_eye", lm.left_eye, lm.left_brow),
        ("right_eye", lm.right_eye, lm.right_brow),
    ):
        # 눈썹을 포함하도록 눈 위쪽으로 치우친 박스
        x0, y0, x1, y1 = _centered(eye[0], eye[1] - 0.1 * d, 0.45 * d, 0.35 * d)
        if brow is not None:
            y0 = min(y0, brow[1] - 0.05 * d)
        boxes[name] = (x0, y0, x1, y1)

    boxes["nose"] = _centered(lm.nose[0], lm.nose[1], 0.35 * d, 0.45 * d)

    pad = 0.15 * d
    xs = (lm.mouth_left[0], lm.mouth_right[0])
    ys = (lm.mouth_left[1], lm.mouth_right[1])
    boxes["mouth"] = (min(xs) - pad, min(ys) - pad, max(xs) + pad, max(ys) + pad)

    return {name: _clip(box, size) for name, box in boxes.items()}


def rasterize_boxes(boxes: dict[str, Box], size: tuple[int, int]) -> np.ndarray:
    """픽셀 중심이 박스 [x0,x1) x [y0,y1) 안에 있으면 1."""
    h, w = size
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    mask = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in boxes.values():
        inside_x = (xs >= x0) & (xs < x1)
        inside_y = (ys >= y0) & (ys < y1)
        mask |= inside_y[:, None] & inside_x[None, :]
    return mask


def mask_from_landmarks(lm: LandmarkSet, size: tuple[int, int] = (128, 128)) -> ComponentMask:
    """정면 가시광 이미지의 랜드마크로 구성요소 마스크 M을 만듭니다."""
    boxes = component_boxes(lm, size)
    mask = rasterize_boxes(boxes, size)[None]
    if mask.sum() < MIN_MASK_FRACTION * size[0] * size[1]:
        raise LandmarkError(f"component mask covers only {int(mask.sum())} pixels")
    return ComponentMask(mask=mask, boxes=boxes)


def apply_mask(mask: ComponentMask | torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    """M ⊙ img. 마스크는 [H,W], [1,H,W], [B,1,H,W] 형태를 받습니다."""
    m = mask.to_tensor() if isinstance(mask, ComponentMask) else mask
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:
        m = m[None]
    if m.shape[-2:] != img.shape[-2:]:
        raise ShapeMismatchError(
            f"mask size {list(m.shape[-2:])} does not match image size {list(img.shape[-2:])}"
        )
    if img.dim() == 3:
        m = m[0]
    return img * m.to(device=img.device, dtype=img.dtype)


def synthetic_landmarks(identity_seed: int, pose: float) -> LandmarkSet:
    """합성 얼굴 렌더러와 같은 기하 모델로 랜드마크를 계산합니다."""
    if not -90.0 <= pose <= 90.0:
        raise LandmarkError(f"pose {pose} outside [-90, 90]")
    return FaceGeometry.from_seed(identity_seed).landmarks(pose)


def read_landmark_file(path: Path, frame_size: int = 128) -> dict[str, LandmarkSet]:
    """이미지 경로와 10개 좌표로 된 랜드마크 파일을 읽습니다."""
    records: dict[str, LandmarkSet] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                values = [float(v) for v in parts[1:]]
                records[parts[0]] = LandmarkSet.from_values(values, frame_size)
            except (ValueError, ValidationError) as e:
                raise LandmarkError(f"{path}: line {line_no}: {e}") from e
    return records
