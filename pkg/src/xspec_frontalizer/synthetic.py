"""절차적 합성 얼굴 데이터셋.

접근이 제한된 실제 열화상/가시광 쌍 데이터 대신 쓰는 결정적 렌더러다.
신원마다 눈 간격, 코 길이, 입 너비, 피부/머리 색이 시드로 정해지고,
yaw 포즈는 수평 압축(cos)과 깊이에 비례한 이동(sin)으로 구현한다.
열화상은 가시광 렌더링의 휘도를 얼굴 영역에서 반전/재매핑하고 흐린 결과다.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import structlog
from PIL import Image, ImageFilter

from .errors import ConfigError
from .types import FRONTAL_POSE_LIMIT, Domain, LandmarkSet

logger = structlog.get_logger(__name__)

FRAME = 128
CENTER_X = FRAME / 2

# 카메라 방향 깊이 (px)
DEPTH_EYE = 10.0
DEPTH_BROW = 12.0
DEPTH_NOSE = 24.0
DEPTH_MOUTH = 14.0
DEPTH_HEAD = 6.0

MANIFEST_FIELDS = ("path", "identity", "domain", "pose", "frontal", "landmarks")
LANDMARK_FILE = "landmarks/landmarks.txt"

# 표정 추첨용 RNG 스트림 번호
EXPRESSION_STREAM = 1


@dataclass(frozen=True)
class FaceGeometry:
    """신원별 얼굴 기하와 색상."""
    half_eye_spacing: float
    eye_y: float
    nose_length: float
    mouth_half_width: float
    mouth_gap: float
    brow_gap: float
    eye_rx: float
    eye_ry: float
    face_rx: float
    face_ry: float
    face_cy: float
    hair_line: float
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    iris: tuple[float, float, float]
    lips: tuple[float, float, float]

    @classmethod
    def from_seed(cls, seed: int) -> "FaceGeometry":
        """시드로 신원의 얼굴 기하와 색상을 정합니다."""
        rng = np.random.default_rng(seed)
        u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
        skin_base = u(0.45, 0.9)
        return cls(
            half_eye_spacing=u(16.0, 24.0),
            eye_y=u(48.0, 56.0),
            nose_length=u(14.0, 22.0),
            mouth_half_width=u(10.0, 18.0),
            mouth_gap=u(12.0, 18.0),
            brow_gap=u(6.0, 9.0),
            eye_rx=u(5.0, 7.5),
            eye_ry=u(2.5, 4.0),
            face_rx=u(38.0, 48.0),
            face_ry=u(50.0, 56.0),
            face_cy=u(64.0, 68.0),
            hair_line=u(0.25, 0.45),
            skin=(skin_base, skin_base * u(0.7, 0.85), skin_base * u(0.55, 0.75)),
            hair=(u(0.05, 0.5), u(0.03, 0.35), u(0.02, 0.25)),
            iris=(u(0.1, 0.5), u(0.1, 0.5), u(0.1, 0.6)),
            lips=(u(0.55, 0.85), u(0.2, 0.4), u(0.25, 0.4)),
        )

    @property
    def nose_y(self) -> float:
        return self.eye_y + self.nose_length

    @property
    def mouth_y(self) -> float:
        return self.nose_y + self.mouth_gap

    def landmarks(self, pose: float) -> LandmarkSet:
        """pose 각도로 투영한 5점 + 눈썹 랜드마크."""
        s = self.half_eye_spacing
        brow_y = self.eye_y - self.brow_gap
        return LandmarkSet(
            left_eye=project(CENTER_X - s, self.eye_y, DEPTH_EYE, pose),
            right_eye=project(CENTER_X + s, self.eye_y, DEPTH_EYE, pose),
            nose=project(CENTER_X, self.nose_y, DEPTH_NOSE, pose),
            mouth_left=project(CENTER_X - self.mouth_half_width, self.mouth_y, DEPTH_MOUTH, pose),
            mouth_right=project(CENTER_X + self.mouth_half_width, self.mouth_y, DEPTH_MOUTH, pose),
            left_brow=project(CENTER_X - s, brow_y, DEPTH_BROW, pose),
            right_brow=project(CENTER_X + s, brow_y, DEPTH_BROW, pose),
            frame_size=FRAME,
        )


def project(x: float, y: float, depth: float, pose: float) -> tuple[float, float]:
    """정면 좌표를 yaw 포즈로 투영합니다: 수평 압축 + 깊이 이동."""
    theta = math.radians(pose)
    return (CENTER_X + (x - CENTER_X) * math.cos(theta) + depth * math.sin(theta), y)


def _grid() -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(FRAME, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _soft_ellipse(
    xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, rx: float, ry: float, softness: float = 1.0
) -> np.ndarray:
    r = np.sqrt(((xx - cx) / max(rx, 1e-3)) ** 2 + ((yy - cy) / max(ry, 1e-3)) ** 2)
    return _sigmoid((1.0 - r) * min(rx, ry) / softness)


def _blend(img: np.ndarray, alpha: np.ndarray, color: tuple[float, float, float]) -> np.ndarray:
    a = alpha[..., None]
    return img * (1.0 - a) + np.asarray(color)[None, None, :] * a


def render_visible(geom: FaceGeometry, pose: float, expression: int = 0) -> np.ndarray:
    """가시광 얼굴을 [H, W, 3] float 배열로 렌더링합니다."""
    xx, yy = _grid()
    theta = math.radians(pose)
    c, s = math.cos(theta), math.sin(theta)
    squash = max(c, 0.15)

    bg = 0.55 + 0.15 * (yy / FRAME)
    img = np.stack([bg * 0.9, bg * 0.95, bg], axis=-1)

    fcx = CENTER_X + DEPTH_HEAD * s
    frx = geom.face_rx * (0.8 + 0.2 * c)
    face = _soft_ellipse(xx, yy, fcx, geom.face_cy, frx, geom.face_ry, softness=1.5)

    # 정면광 + 포즈 방향 측광
    nx = (xx - fcx) / frx
    shade = np.clip(0.78 + 0.22 * (1.0 - nx**2) + 0.08 * s * nx, 0.4, 1.05)
    skin = np.asarray(geom.skin)[None, None, :] * shade[..., None]
    img = img * (1.0 - face[..., None]) + skin * face[..., None]

    hair_top = geom.face_cy - geom.face_ry
    hair_edge = hair_top + geom.hair_line * geom.face_ry
    hair = _soft_ellipse(xx, yy, fcx, geom.face_cy, frx + 3.0, geom.face_ry + 4.0) * _sigmoid(
        (hair_edge - yy) / 1.5
    )
    img = _blend(img, hair, geom.hair)

    lm = geom.landmarks(pose)
    for eye, brow in ((lm.left_eye, lm.left_brow), (lm.right_eye, lm.right_brow)):
        sclera = _soft_ellipse(xx, yy, eye[0], eye[1], geom.eye_rx * squash, geom.eye_ry, 0.6)
        img = _blend(img, sclera, (0.95, 0.95, 0.93))
        iris = _soft_ellipse(xx, yy, eye[0], eye[1], 0.8 * geom.eye_ry * squash, 0.8 * geom.eye_ry, 0.5)
        img = _blend(img, iris, geom.iris)
        if brow is not None:
            bar = _soft_ellipse(xx, yy, brow[0], brow[1], 1.3 * geom.eye_rx * squash, 1.4, 0.6)
            img = _blend(img, 0.85 * bar, geom.hair)

    # 콧대 그림자와 콧구멍
    bridge_top = project(CENTER_X, geom.eye_y, DEPTH_EYE, pose)
    nose = lm.nose
    ridge_cx = 0.5 * (bridge_top[0] + nose[0]) - 2.5 * c
    ridge = _soft_ellipse(xx, yy, ridge_cx, 0.5 * (geom.eye_y + nose[1]), 1.6, 0.5 * geom.nose_length, 0.8)
    img = _blend(img, 0.35 * ridge, tuple(0.6 * v for v in geom.skin))  # type: ignore[arg-type]
    for side in (-1.0, 1.0):
        nostril = _soft_ellipse(xx, yy, nose[0] + side * 3.5 * squash, nose[1], 1.8 * squash, 1.2, 0.5)
        img = _blend(img, 0.8 * nostril, (0.2, 0.12, 0.1))

    mouth_cx = 0.5 * (lm.mouth_left[0] + lm.mouth_right[0])
    mouth_rx = 0.5 * (lm.mouth_right[0] - lm.mouth_left[0])
    mouth_ry = 2.5 + 1.2 * expression
    mouth = _soft_ellipse(xx, yy, mouth_cx, lm.mouth_left[1], max(mouth_rx, 1.0), mouth_ry, 0.7)
    img = _blend(img, mouth, geom.lips)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_thermal(geom: FaceGeometry, pose: float, expression: int = 0) -> np.ndarray:
    """열화상 얼굴을 [H, W] float 배열로 렌더링합니다.

    얼굴 영역 안에서는 휘도를 반전해 눈/입 주변이 뜨겁게 보이고,
    머리카락과 배경은 차갑게 눌린다.
    """
    visible = render_visible(geom, pose, expression)
    lum = visible @ np.array([0.299, 0.587, 0.114])
    xx, yy = _grid()
    theta = math.radians(pose)
    fcx = CENTER_X + DEPTH_HEAD * math.sin(theta)
    frx = geom.face_rx * (0.8 + 0.2 * math.cos(theta))
    face = _soft_ellipse(xx, yy, fcx, geom.face_cy, frx, geom.face_ry, softness=1.5)
    hair_edge = geom.face_cy - geom.face_ry + geom.hair_line * geom.face_ry
    hair = face * _sigmoid((hair_edge - yy) / 1.5)

    heat = 0.5 + 0.45 * (1.0 - lum)
    thermal = face * heat + (1.0 - face) * 0.08
    thermal = thermal * (1.0 - 0.7 * hair)

    image = Image.fromarray(np.clip(thermal * 255.0 + 0.5, 0, 255).astype(np.uint8), mode="L")
    blurred = image.filter(ImageFilter.GaussianBlur(radius=1.5))
    return np.asarray(blurred, dtype=np.float32) / 255.0


@dataclass(frozen=True)
class SyntheticFaceSpec:
    """렌더링 입력. 결과는 이 값들의 순수 함수."""
    identity_seed: int
    pose: float
    domain: Domain
    expression: int = 0

    def render(self) -> np.ndarray:
        """가시광은 [H,W,3], 열화상은 [H,W] float 배열."""
        geom = FaceGeometry.from_seed(self.identity_seed)
        if self.domain is Domain.VISIBLE:
            return render_visible(geom, self.pose, self.expression)
        return render_thermal(geom, self.pose, self.expression)

    def to_image(self) -> Image.Image:
        """8비트 PIL 이미지."""
        pixels = np.clip(self.render() * 255.0 + 0.5, 0, 255).astype(np.uint8)
        return Image.fromarray(pixels, mode="RGB" if pixels.ndim == 3 else "L")


def identity_seed(seed: int, index: int) -> int:
    """데이터셋 시드와 신원 번호로 신원 시드를 만듭니다."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _pose_token(pose: float) -> str:
    return f"{int(round(pose)):+04d}"


def generate_synthetic_dataset(
    n_identities: int,
    poses: list[float],
    out_dir: Path,
    seed: int = 7,
    expression_fraction: float = 0.5,
) -> Path:
    """합성 쌍 데이터셋을 쓰고 매니페스트 경로를 반환합니다.

    신원마다 가시광 정면 1장, 열화상 정면 1장, 포즈별 열화상 1장을 만든다.
    가시광 정면(갤러리/정답)은 무표정이고, 열화상 이미지는 신원별 시드 RNG로
    ``expression_fraction`` 확률만큼 표정 있는 얼굴이 된다.
    """
    if n_identities < 2:
        raise ConfigError("n_identities must be at least 2 for pair sampling")
    if not 0.0 <= expression_fraction <= 1.0:
        raise ConfigError(f"expression_fraction {expression_fraction} must lie in [0, 1]")
    for pose in poses:
        if abs(pose) <= FRONTAL_POSE_LIMIT or abs(pose) > 90:
            raise ConfigError(f"pose {pose} must be a profile angle in (5, 90] degrees")
    if len({_pose_token(p) for p in poses}) != len(poses):
        raise ConfigError("poses must be distinct")

    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "landmarks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error("Cannot create dataset directory", out_dir=str(out_dir), error=str(e))
        raise

    rows: list[dict[str, str]] = []
    landmark_lines: list[str] = []
    expressions: dict[str, int] = {}
    for index in range(n_identities):
        identity = f"id_{index:03d}"
        id_seed = identity_seed(seed, index)
        geom = FaceGeometry.from_seed(id_seed)
        expression_rng = np.random.default_rng([seed, index, EXPRESSION_STREAM])
        (out_dir / "images" / identity).mkdir(exist_ok=True)
        renders = [(Domain.VISIBLE, 0.0), (Domain.THERMAL, 0.0)] + [(Domain.THERMAL, float(p)) for p in poses]
        for domain, pose in renders:
            rel = f"images/{identity}/{domain.value}_p{_pose_token(pose)}.png"
            expression = 0
            if domain is Domain.THERMAL:
                expression = int(expression_rng.random() < expression_fraction)
            expressions[rel] = expression
            SyntheticFaceSpec(id_seed, pose, domain, expression).to_image().save(out_dir / rel)
            lm = geom.landmarks(pose)
            landmark_lines.append(lm.to_line(rel))
            rows.append({
                "path": rel,
                "identity": identity,
                "domain": domain.value,
                "pose": f"{pose:g}",
                "frontal": str(abs(pose) <= FRONTAL_POSE_LIMIT).lower(),
                "landmarks": LANDMARK_FILE,
            })

    (out_dir / LANDMARK_FILE).write_text("\n".join(landmark_lines) + "\n", encoding="utf-8")
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / "generation.json").write_text(
        json.dumps(
            {
                "n_identities": n_identities,
                "poses": list(poses),
                "seed": seed,
                "expression_fraction": expression_fraction,
                "expressions": expressions,
            },
            indent=2,
        ),
        encoding="utf-8",
    )

    logger.info("Synthetic dataset written", out_dir=str(out_dir), identities=n_identities, images=len(rows))
    return manifest
