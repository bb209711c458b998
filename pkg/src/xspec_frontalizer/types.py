"""Pydantic 모델과 타입 정의."""

import math
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Domain(str, Enum):
    """영상 도메인."""
    THERMAL = "thermal"
    VISIBLE = "visible"


FRONTAL_POSE_LIMIT = 5.0


class LossWeights(BaseModel):
    """손실 가중치 묶음."""
    model_config = ConfigDict(extra="forbid")

    lambda_id: float = Field(10.0, ge=0, description="identity 손실 가중치")
    lambda_adv: float = Field(1.0, ge=0, description="adversarial 손실 가중치")
    lambda_contrastive: float = Field(0.01, ge=0, description="contrastive 손실 가중치")
    lambda_tv: float = Field(1e-4, ge=0, description="total variation 가중치")
    lambda_gp: float = Field(10.0, ge=0, description="gradient penalty 가중치")
    lambda_local: float = Field(0.1, ge=0, description="local 판별기 가중치")
    lambda_grl: float = Field(0.01, ge=0, description="gradient reversal 계수")
    lambda_cls: float = Field(1.0, ge=0, description="도메인 분류 손실 가중치")
    margin: float = Field(1.2, gt=0, description="contrastive 마진")
    eps: float = Field(1e-8, gt=0, description="feature equalization epsilon")


class EqualizationConfig(BaseModel):
    """Feature equalization 설정."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    eps: float = Field(1e-8, gt=0)


class GeneratorConfig(BaseModel):
    """U-Net 생성기 구조 설정."""
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(128, description="입출력 해상도")
    in_channels: int = Field(3, ge=1)
    out_channels: int = Field(3, ge=1)
    encoder_channels: list[int] = Field(default_factory=lambda: [32, 64, 128, 256, 512])
    negative_slope: float = Field(0.2, ge=0)
    eps: float = Field(1e-8, gt=0)
    side_output_sizes: list[int] = Field(default_factory=lambda: [32, 64])

    @model_validator(mode="after")
    def _check_geometry(self) -> "GeneratorConfig":
        if self.image_size != 128:
            raise ValueError("generator supports 128x128 inputs only")
        depth = len(self.encoder_channels)
        if depth < 2 or any(c < 1 for c in self.encoder_channels):
            raise ValueError("encoder_channels needs at least two positive entries")
        if self.image_size % (2 ** depth) != 0:
            raise ValueError("image_size is not divisible by 2**depth")
        for size in self.side_output_sizes:
            if size >= self.image_size or self.image_size % size != 0:
                raise ValueError(f"invalid side output size {size}")
            if size < self.bottleneck_size * 2:
                raise ValueError(f"side output size {size} is below the first decoder stage")
        return self

    @property
    def depth(self) -> int:
        """인코더 스테이지 수."""
        return len(self.encoder_channels)

    @property
    def bottleneck_size(self) -> int:
        """bottleneck 한 변의 크기."""
        return self.image_size // (2 ** self.depth)

    @property
    def output_sizes(self) -> list[int]:
        """오름차순 출력 해상도."""
        return sorted(self.side_output_sizes) + [self.image_size]


class CriticConfig(BaseModel):
    """WGAN 판별기 구조 설정."""
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(128, ge=2)
    in_channels: int = Field(3, ge=1)
    channels: list[int] = Field(default_factory=lambda: [32, 64, 128, 256, 512])
    negative_slope: float = Field(0.2, ge=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "CriticConfig":
        if not self.channels or self.image_size % (2 ** len(self.channels)) != 0:
            raise ValueError("critic image_size is not divisible by 2**stages")
        return self

    @property
    def final_size(self) -> int:
        """마지막 특징 맵 한 변의 크기."""
        return self.image_size // (2 ** len(self.channels))


class ClassifierConfig(BaseModel):
    """도메인 분류기 설정."""
    model_config = ConfigDict(extra="forbid")

    hidden_dim: int = Field(256, ge=1)


class EmbedderKind(str, Enum):
    """얼굴 임베더 종류."""
    CONV = "conv"
    MEAN_PIXEL = "mean_pixel"


class EmbedderConfig(BaseModel):
    """고정 임베더 설정."""
    model_config = ConfigDict(extra="forbid")

    kind: EmbedderKind = EmbedderKind.CONV
    dim: int = Field(64, ge=1)
    seed: int = 0


class AblationFlags(BaseModel):
    """구성 요소 on/off 스위치."""
    model_config = ConfigDict(extra="forbid")

    # ablation ladder 순서
    multiscale_pixel: bool = True
    identity_loss: bool = True
    self_attention: bool = True
    local_critic: bool = True
    equalization: bool = True
    cls_loss: bool = True
    contrastive_loss: bool = True
    # baseline에 항상 포함되는 요소
    adversarial: bool = True
    total_variation: bool = True


LADDER_FLAGS: tuple[str, ...] = (
    "multiscale_pixel",
    "identity_loss",
    "self_attention",
    "local_critic",
    "equalization",
    "cls_loss",
    "contrastive_loss",
)


class TrainConfig(BaseModel):
    """학습 설정."""
    model_config = ConfigDict(extra="forbid")

    loss: LossWeights = Field(default_factory=LossWeights)
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    critic: CriticConfig = Field(default_factory=CriticConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    embedder: EmbedderConfig = Field(default_factory=EmbedderConfig)
    learning_rate: float = Field(0.01, gt=0)
    lr_decay: float = Field(1.0, gt=0, le=1.0, description="스텝당 지수 감쇠 계수")
    adam_betas: tuple[float, float] = (0.0, 0.99)
    batch_size: int = Field(8, ge=2, description="스텝당 이미지 수 (쌍 수의 2배)")
    total_steps: int = Field(500, ge=0)
    critic_steps: int = Field(1, ge=1)
    seed: int = 7
    same_id_fraction: float = Field(0.5, ge=0, le=1)
    checkpoint_every: int = Field(100, ge=1)
    log_every: int = Field(10, ge=1)
    train_fraction: float = Field(0.75, gt=0, lt=1)

    @field_validator("batch_size")
    @classmethod
    def _even_batch(cls, value: int) -> int:
        if value % 2 != 0:
            raise ValueError("batch_size must be even (dual-path pairs)")
        return value

    @model_validator(mode="after")
    def _critic_matches_generator(self) -> "TrainConfig":
        if self.critic.image_size != self.generator.image_size:
            raise ValueError("critic and generator image sizes differ")
        return self

    @property
    def pairs_per_step(self) -> int:
        """스텝당 dual-path 쌍 수."""
        return self.batch_size // 2


class FaceRecord(BaseModel):
    """매니페스트 한 행."""
    model_config = ConfigDict(frozen=True)

    path: str = Field(..., description="매니페스트 기준 상대 경로")
    identity: str
    domain: Domain
    pose: float = Field(..., ge=-90, le=90, description="yaw 각도 (도)")
    frontal: bool
    landmarks: str | None = Field(None, description="랜드마크 파일 참조")

    @model_validator(mode="after")
    def _frontal_matches_pose(self) -> "FaceRecord":
        if self.frontal != (abs(self.pose) <= FRONTAL_POSE_LIMIT):
            raise ValueError(f"frontal flag {self.frontal} contradicts pose {self.pose}")
        return self


class LossRecord(BaseModel):
    """학습 스텝 하나의 손실 기록."""
    step: int = Field(..., ge=0)
    pixel: float = Field(0.0, ge=0)
    id: float = Field(0.0, ge=0)
    adv_g: float = 0.0
    adv_l: float = 0.0
    tv: float = Field(0.0, ge=0)
    cls: float = Field(0.0, ge=0)
    contrastive: float = Field(0.0, ge=0)
    gp: float = Field(0.0, ge=0)
    critic: float = 0.0
    total: float

    @field_validator("total")
    @classmethod
    def _finite_total(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("total loss is not finite")
        return value


class ScoreSet(BaseModel):
    """genuine/imposter 유사도 점수 집합."""
    genuine: list[float] = Field(default_factory=list)
    imposter: list[float] = Field(default_factory=list)

    @field_validator("genuine", "imposter")
    @classmethod
    def _finite_scores(cls, values: list[float]) -> list[float]:
        if not all(math.isfinite(v) for v in values):
            raise ValueError("scores must be finite")
        return values


class RocPoint(BaseModel):
    """ROC 곡선의 한 점."""
    threshold: float | None = Field(None, description="None은 모두 거부하는 시작점")
    far: float
    tar: float


class VerificationReport(BaseModel):
    """검증 성능 보고서 (백분율)."""
    auc: float = Field(..., ge=0, le=100)
    eer: float = Field(..., ge=0, le=100)
    tar_at_far_1: float = Field(..., ge=0, le=100)
    tar_at_far_5: float = Field(..., ge=0, le=100)
    n_genuine: int
    n_imposter: int
    protocol: str = "profile"
    roc: list[RocPoint] = Field(default_factory=list)


Point = tuple[float, float]

LANDMARK_NAMES: tuple[str, ...] = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")


class LandmarkSet(BaseModel):
    """128x128 프레임 기준 5점 랜드마크 (선택적으로 눈썹 2점)."""
    model_config = ConfigDict(frozen=True)

    left_eye: Point
    right_eye: Point
    nose: Point
    mouth_left: Point
    mouth_right: Point
    left_brow: Point | None = None
    right_brow: Point | None = None
    frame_size: int = 128

    @model_validator(mode="after")
    def _inside_frame(self) -> "LandmarkSet":
        for name, point in self.named_points().items():
            x, y = point
            if not (0 <= x < self.frame_size and 0 <= y < self.frame_size):
                raise ValueError(f"landmark {name}={point} outside {self.frame_size}px frame")
        return self

    def named_points(self) -> dict[str, Point]:
        """눈썹을 포함한 이름별 좌표."""
        points = {name: getattr(self, name) for name in LANDMARK_NAMES}
        if self.left_brow is not None:
            points["left_brow"] = self.left_brow
        if self.right_brow is not None:
            points["right_brow"] = self.right_brow
        return points

    @property
    def interocular(self) -> float:
        """두 눈 사이 거리."""
        return math.dist(self.left_eye, self.right_eye)

    def as_values(self) -> list[float]:
        """파일 저장용 10개 좌표 (x, y 순)."""
        return [v for name in LANDMARK_NAMES for v in getattr(self, name)]

    def to_line(self, image_path: str) -> str:
        """랜드마크 파일 한 줄: 이미지 경로와 10개 좌표."""
        return " ".join([image_path, *(f"{v:.3f}" for v in self.as_values())])

    @classmethod
    def from_values(cls, values: list[float], frame_size: int = 128) -> "LandmarkSet":
        """10개 좌표 목록에서 만듭니다."""
        if len(values) != 2 * len(LANDMARK_NAMES):
            raise ValueError(f"expected {2 * len(LANDMARK_NAMES)} coordinates, got {len(values)}")
        points = {
            name: (values[2 * i], values[2 * i + 1]) for i, name in enumerate(LANDMARK_NAMES)
        }
        return cls(frame_size=frame_size, **points)

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        """평행 이동한 사본."""
        moved = {name: (p[0] + dx, p[1] + dy) for name, p in self.named_points().items()}
        return LandmarkSet(frame_size=self.frame_size, **moved)


class LatentSeparation(BaseModel):
    """같은/다른 identity 열화상 쌍의 평균 RMS latent 거리."""
    same_identity: float = Field(..., ge=0)
    different_identity: float = Field(..., ge=0)
    n_same: int = Field(..., ge=0)
    n_different: int = Field(..., ge=0)

    @property
    def gap(self) -> float:
        """다른 identity 거리 - 같은 identity 거리."""
        return self.different_identity - self.same_identity
