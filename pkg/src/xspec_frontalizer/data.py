"""매니페스트 기반 데이터셋, 전처리, dual-path 쌍 샘플링."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from .checkpoint import atomic_write_bytes
from .errors import ConfigError, LandmarkError, ManifestError, PreprocessError
from .masks import ComponentMask, mask_from_landmarks, read_landmark_file
from .synthetic import MANIFEST_FIELDS
from .types import Domain, FaceRecord, LandmarkSet

logger = structlog.get_logger(__name__)

IMAGE_SIZE = 128


def preprocess_tensor(img: torch.Tensor, size: int = IMAGE_SIZE) -> torch.Tensor:
    """[C,H,W] 텐서를 [3,size,size], [0,1] 범위로 맞춥니다."""
    if img.dim() == 2:
        img = img[None]
    if img.dim() != 3 or img.shape[0] not in (1, 3):
        raise PreprocessError(f"expected a 1- or 3-channel image, got shape {list(img.shape)}")
    img = img.float()
    if tuple(img.shape[1:]) != (size, size):
        img = F.interpolate(img[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    if img.shape[0] == 1:
        img = img.expand(3, -1, -1)
    return img.clamp(0.0, 1.0).contiguous()


HIGH_BIT_SCALE = 65535.0


def _high_bit_pixels(image: Image.Image) -> np.ndarray:
    """16비트/정수/실수 모드 이미지를 [0,1] 단일 채널 배열로 옮깁니다."""
    pixels = np.asarray(image, dtype=np.float64)
    if image.mode == "F":
        lo, hi = float(pixels.min()), float(pixels.max())
        if hi <= lo:
            return np.zeros(pixels.shape, dtype=np.float32)
        return ((pixels - lo) / (hi - lo)).astype(np.float32)
    scale = HIGH_BIT_SCALE if image.mode.startswith("I;16") else max(HIGH_BIT_SCALE, float(pixels.max()))
    return (np.clip(pixels, 0.0, None) / scale).astype(np.float32)


def preprocess(raw: bytes | Image.Image, source: str = "<bytes>", size: int = IMAGE_SIZE) -> torch.Tensor:
    """이미지를 디코딩해 [3,128,128], [0,1] 텐서로 만듭니다.

    8비트 이미지는 bilinear 리사이즈 후 255로 나눈다. ``I;16``은 65535, ``I``는 65535와
    관측 최댓값 중 큰 값으로 나누고 ``F``는 min-max 정규화한 뒤 리사이즈한다.
    단일 채널은 3채널로 복제한다.
    """
    try:
        image = raw if isinstance(raw, Image.Image) else Image.open(io.BytesIO(raw))
        image.load()
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise PreprocessError(f"cannot decode image {source}: {e}") from e

    if image.mode in ("I", "F") or image.mode.startswith("I;16"):
        return preprocess_tensor(torch.from_numpy(_high_bit_pixels(image)), size=size)
    if image.mode not in ("L", "RGB"):
        image = image.convert("L" if image.mode == "LA" else "RGB")
    if image.size != (size, size):
        image = image.resize((size, size), Image.Resampling.BILINEAR)
    pixels = np.asarray(image, dtype=np.float32) / 255.0
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[None], 3, axis=0)
    else:
        pixels = pixels.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(pixels))


def load_image(path: Path, size: int = IMAGE_SIZE) -> torch.Tensor:
    """파일을 읽어 전처리합니다."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise PreprocessError(f"cannot read image {path}: {e}") from e
    return preprocess(raw, source=str(path), size=size)


def to_pil(img: torch.Tensor) -> Image.Image:
    """[3,H,W] 또는 [1,H,W] [0,1] 텐서를 8비트 이미지로 변환합니다."""
    pixels = (img.detach().cpu().float().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    if pixels.shape[0] == 1:
        return Image.fromarray(pixels[0].numpy(), mode="L")
    return Image.fromarray(pixels.permute(1, 2, 0).numpy(), mode="RGB")


def save_image(img: torch.Tensor, path: Path) -> Path:
    """텐서를 PNG로 원자적으로 저장합니다."""
    buffer = io.BytesIO()
    to_pil(img).save(buffer, format="PNG")
    return atomic_write_bytes(Path(path), buffer.getvalue())


def image_grid(rows: list[list[torch.Tensor]], pad: int = 2, fill: float = 1.0) -> torch.Tensor:
    """같은 크기 이미지들을 행렬로 배치한 [3,H,W] 텐서."""
    if not rows or not rows[0]:
        raise ValueError("image grid needs at least one image")
    _, h, w = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    grid = torch.full(
        (3, len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad), fill, dtype=torch.float32
    )
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            top, left = pad + i * (h + pad), pad + j * (w + pad)
            grid[:, top:top + h, left:left + w] = img.detach().cpu().float().expand(3, -1, -1)
    return grid


class FaceDataset:
    """identity별로 묶은 FaceRecord 모음. 로드 후에는 읽기 전용."""

    def __init__(self, records: list[FaceRecord], root: Path) -> None:
        self.records = list(records)
        self.root = Path(root)
        self._by_identity: dict[str, list[FaceRecord]] = {}
        for record in self.records:
            self._by_identity.setdefault(record.identity, []).append(record)
        self._images: dict[str, torch.Tensor] = {}
        self._landmark_files: dict[str, dict[str, LandmarkSet]] = {}
        self._masks: dict[str, ComponentMask] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def identities(self) -> list[str]:
        """정렬된 identity 목록."""
        return sorted(self._by_identity)

    def records_for(self, identity: str) -> list[FaceRecord]:
        """identity의 모든 레코드."""
        return self._by_identity.get(identity, [])

    def visible_frontal(self, identity: str) -> FaceRecord:
        """identity의 가시광 정면 레코드 (갤러리/정답)."""
        for record in self.records_for(identity):
            if record.domain is Domain.VISIBLE and record.frontal:
                return record
        raise ManifestError(f"identity {identity} has no visible frontal image")

    def thermal_profiles(self, identity: str) -> list[FaceRecord]:
        """|pose| > 5 인 열화상 레코드."""
        return [r for r in self.records_for(identity) if r.domain is Domain.THERMAL and not r.frontal]

    def thermal_frontal(self, identity: str) -> list[FaceRecord]:
        """identity의 열화상 정면 레코드."""
        return [r for r in self.records_for(identity) if r.domain is Domain.THERMAL and r.frontal]

    @property
    def trainable_identities(self) -> list[str]:
        """가시광 정면과 열화상 측면을 모두 가진 identity."""
        return [
            i for i in self.identities
            if self.thermal_profiles(i)
            and any(r.domain is Domain.VISIBLE and r.frontal for r in self.records_for(i))
        ]

    @property
    def poses(self) -> list[float]:
        """열화상 프로필 포즈의 정렬된 목록."""
        return sorted({r.pose for r in self.records if r.domain is Domain.THERMAL and not r.frontal})

    def image(self, record: FaceRecord) -> torch.Tensor:
        """전처리된 이미지 텐서 (캐시)."""
        if record.path not in self._images:
            self._images[record.path] = load_image(self.root / record.path)
        return self._images[record.path]

    def landmarks_for(self, record: FaceRecord) -> LandmarkSet | None:
        """레코드의 랜드마크. 없으면 None."""
        if record.landmarks is None:
            return None
        if record.landmarks not in self._landmark_files:
            self._landmark_files[record.landmarks] = read_landmark_file(self.root / record.landmarks)
        entries = self._landmark_files[record.landmarks]
        if record.path not in entries:
            raise LandmarkError(f"{record.landmarks} has no entry for {record.path}")
        return entries[record.path]

    def mask_for(self, identity: str) -> ComponentMask:
        """정답 가시광 정면 이미지의 랜드마크로 만든 구성요소 마스크."""
        if identity not in self._masks:
            lm = self.landmarks_for(self.visible_frontal(identity))
            if lm is None:
                logger.warning("No landmarks for visible frontal, using full mask", identity=identity)
                self._masks[identity] = ComponentMask.full((IMAGE_SIZE, IMAGE_SIZE))
            else:
                self._masks[identity] = mask_from_landmarks(lm, (IMAGE_SIZE, IMAGE_SIZE))
        return self._masks[identity]

    def subset(self, identities: list[str]) -> "FaceDataset":
        """주어진 identity만 남긴 새 데이터셋."""
        keep = set(identities)
        sub = FaceDataset([r for r in self.records if r.identity in keep], self.root)
        sub._images = self._images
        sub._landmark_files = self._landmark_files
        sub._masks = self._masks
        return sub

    def split_identities(self, train_fraction: float = 0.75) -> tuple[list[str], list[str]]:
        """정렬된 identity 앞쪽을 학습용으로 나누는 서로소 분할."""
        ids = self.identities
        if len(ids) < 2:
            raise ConfigError("identity split needs at least two identities")
        n_train = min(max(int(round(len(ids) * train_fraction)), 1), len(ids) - 1)
        return ids[:n_train], ids[n_train:]


def _parse_bool(token: str) -> bool:
    lowered = token.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"invalid frontal flag '{token}'")


def load_manifest(path: Path) -> FaceDataset:
    """CSV 매니페스트를 읽고 쌍 불변식을 검증합니다."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    records: list[FaceRecord] = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"{path}: line 1: missing columns {sorted(missing)}")
        for row in reader:
            line = reader.line_num
            domain_token = (row.get("domain") or "").strip()
            try:
                domain = Domain(domain_token)
            except ValueError as e:
                raise ManifestError(f"{path}: line {line}: unknown domain '{domain_token}'") from e
            try:
                records.append(FaceRecord(
                    path=row["path"].strip(),
                    identity=row["identity"].strip(),
                    domain=domain,
                    pose=float(row["pose"]),
                    frontal=_parse_bool(row["frontal"]),
                    landmarks=(row.get("landmarks") or "").strip() or None,
                ))
            except (ValueError, TypeError, AttributeError, ValidationError) as e:
                raise ManifestError(f"{path}: line {line}: {e}") from e

    if not records:
        raise ManifestError(f"{path}: manifest has no records")

    dataset = FaceDataset(records, path.parent)
    unpaired = [
        i for i in dataset.identities
        if dataset.thermal_profiles(i)
        and not any(r.domain is Domain.VISIBLE and r.frontal for r in dataset.records_for(i))
    ]
    if unpaired:
        raise ManifestError(
            f"{path}: thermal profiles without a visible frontal partner: {', '.join(unpaired)}"
        )
    logger.info("Manifest loaded", path=str(path), records=len(records), identities=len(dataset.identities))
    return dataset


@dataclass(frozen=True)
class PairPlan:
    """이미지를 읽기 전의 쌍 인덱스."""
    first: tuple[FaceRecord, ...]
    second: tuple[FaceRecord, ...]
    labels: tuple[int, ...]


def sample_pair_plan(
    dataset: FaceDataset,
    n_pairs: int,
    same_id_fraction: float,
    rng: np.random.Generator,
) -> PairPlan:
    """l=1 확률이 same_id_fraction인 열화상 측면 쌍을 뽑습니다."""
    if n_pairs < 1:
        raise ConfigError(f"batch_size must be at least 1, got {n_pairs}")
    if not 0.0 <= same_id_fraction <= 1.0:
        raise ConfigError(f"same_id_fraction {same_id_fraction} outside [0, 1]")
    ids = dataset.trainable_identities
    if len(ids) < 2:
        raise ConfigError("pair sampling needs at least two identities with profile images")

    first, second, labels = [], [], []
    for _ in range(n_pairs):
        same = bool(rng.random() < same_id_fraction)
        i1 = int(rng.integers(len(ids)))
        if same:
            i2 = i1
        else:
            i2 = int(rng.integers(len(ids) - 1))
            if i2 >= i1:
                i2 += 1
        pool1 = dataset.thermal_profiles(ids[i1])
        pool2 = dataset.thermal_profiles(ids[i2])
        first.append(pool1[int(rng.integers(len(pool1)))])
        second.append(pool2[int(rng.integers(len(pool2)))])
        labels.append(int(same))
    return PairPlan(tuple(first), tuple(second), tuple(labels))


@dataclass
class PairBatch:
    """dual-path 학습 배치. 첫 축은 쌍 인덱스."""
    x1: torch.Tensor
    x2: torch.Tensor
    y1: torch.Tensor
    y2: torch.Tensor
    m1: torch.Tensor
    m2: torch.Tensor
    labels: torch.Tensor
    identities: tuple[tuple[str, str], ...]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def domain_labels(self) -> torch.Tensor:
        """[x1; x2; y1; y2] 순서의 도메인 라벨 k (열화상 0, 가시광 1)."""
        n = 2 * len(self)
        return torch.cat([torch.zeros(n), torch.ones(n)]).to(self.labels)

    def to(self, device: str | torch.device) -> "PairBatch":
        """모든 텐서를 device로 옮깁니다."""
        return PairBatch(
            x1=self.x1.to(device), x2=self.x2.to(device),
            y1=self.y1.to(device), y2=self.y2.to(device),
            m1=self.m1.to(device), m2=self.m2.to(device),
            labels=self.labels.to(device),
            identities=self.identities,
        )


def materialize_pairs(dataset: FaceDataset, plan: PairPlan) -> PairBatch:
    """쌍 계획의 레코드를 이미지/마스크 텐서로 불러옵니다."""
    def stack(records: tuple[FaceRecord, ...]) -> torch.Tensor:
        return torch.stack([dataset.image(r) for r in records])

    def targets(records: tuple[FaceRecord, ...]) -> torch.Tensor:
        return torch.stack([dataset.image(dataset.visible_frontal(r.identity)) for r in records])

    def masks(records: tuple[FaceRecord, ...]) -> torch.Tensor:
        return torch.stack([dataset.mask_for(r.identity).to_tensor() for r in records])

    return PairBatch(
        x1=stack(plan.first), x2=stack(plan.second),
        y1=targets(plan.first), y2=targets(plan.second),
        m1=masks(plan.first), m2=masks(plan.second),
        labels=torch.tensor(plan.labels, dtype=torch.float32),
        identities=tuple((a.identity, b.identity) for a, b in zip(plan.first, plan.second)),
    )


def sample_dual_path_batch(
    dataset: FaceDataset,
    batch_size: int,
    same_id_fraction: float,
    rng: np.random.Generator,
) -> PairBatch:
    """batch_size개의 쌍으로 된 dual-path 배치를 샘플링합니다."""
    return materialize_pairs(dataset, sample_pair_plan(dataset, batch_size, same_id_fraction, rng))
