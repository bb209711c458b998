"""갤러리/프로브 검증 평가.

점수는 cosine similarity(클수록 같은 사람)이며 score >= t 이면 수락한다.
ROC는 서로 다른 모든 점수를 임계값으로 훑어 만들고, 같은 점수는 한 구간으로 묶는다.
"""

import csv
import io
from collections.abc import Callable
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import structlog
import torch
import torch.nn.functional as F

from .checkpoint import atomic_write_bytes
from .data import FaceDataset
from .errors import ProtocolError
from .losses import rms_distance
from .nets import Generator
from .types import FaceRecord, LatentSeparation, RocPoint, ScoreSet, VerificationReport

logger = structlog.get_logger(__name__)

Frontalizer = Callable[[torch.Tensor], torch.Tensor]

PROFILE = "profile"
FRONTAL = "frontal"


def extract_embedding(img: torch.Tensor, embedder: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """L2 정규화된 임베딩. [3,H,W] 입력이면 [D], [B,3,H,W]이면 [B,D]."""
    single = img.dim() == 3
    x = img[None] if single else img
    with torch.no_grad():
        e = F.normalize(embedder(x).double(), dim=1)
    return e[0] if single else e


def embed_images(
    images: torch.Tensor,
    embedder: Callable[[torch.Tensor], torch.Tensor],
    frontalize: Frontalizer | None = None,
    batch_size: int = 32,
) -> torch.Tensor:
    """배치 단위로 임베딩을 추출합니다."""
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = images[start:start + batch_size]
            if frontalize is not None:
                x = frontalize(x)
            chunks.append(extract_embedding(x, embedder))
    return torch.cat(chunks)


def generator_frontalizer(generator: Generator) -> Frontalizer:
    """생성기를 no-grad 정면화 함수로 감쌉니다."""
    generator.eval()

    def run(x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return generator.frontalize(x)

    return run


@dataclass
class LabeledImages:
    """identity 라벨이 붙은 이미지 묶음."""
    identities: list[str]
    paths: list[str]
    images: torch.Tensor

    def __len__(self) -> int:
        return len(self.identities)

    @classmethod
    def from_records(cls, dataset: FaceDataset, records: list[FaceRecord]) -> "LabeledImages":
        """레코드들의 이미지를 모아 LabeledImages를 만듭니다."""
        if not records:
            raise ProtocolError("protocol selected no images")
        return cls(
            identities=[r.identity for r in records],
            paths=[r.path for r in records],
            images=torch.stack([dataset.image(r) for r in records]),
        )


@dataclass
class ScoredProtocol:
    """점수 집합과 CSV 내보내기용 행."""
    scores: ScoreSet
    rows: list[tuple[str, str, float, bool]] = field(default_factory=list)


def score_pairs(
    gallery: LabeledImages,
    probe: LabeledImages,
    embedder: Callable[[torch.Tensor], torch.Tensor],
    frontalize: Frontalizer | None = None,
) -> ScoredProtocol:
    """갤러리 x 프로브 cosine 점수와 행별 기록."""
    missing = sorted(set(probe.identities) - set(gallery.identities))
    if missing:
        raise ProtocolError(f"probe identities absent from gallery: {', '.join(missing)}")

    g = embed_images(gallery.images, embedder)
    p = embed_images(probe.images, embedder, frontalize)
    similarity = (p @ g.T).tolist()

    genuine: list[float] = []
    imposter: list[float] = []
    rows: list[tuple[str, str, float, bool]] = []
    for i, probe_id in enumerate(probe.identities):
        for j, gallery_id in enumerate(gallery.identities):
            score = float(similarity[i][j])
            same = probe_id == gallery_id
            (genuine if same else imposter).append(score)
            rows.append((gallery.paths[j], probe.paths[i], score, same))
    return ScoredProtocol(scores=ScoreSet(genuine=genuine, imposter=imposter), rows=rows)


def score_protocol(
    gallery: LabeledImages,
    probe: LabeledImages,
    embedder: Callable[[torch.Tensor], torch.Tensor],
    frontalize: Frontalizer | None = None,
) -> ScoreSet:
    """갤러리 x 프로브 cosine similarity를 genuine/imposter로 나눕니다.

    frontalize가 주어지면 프로브를 먼저 정면화한 뒤 임베딩한다.
    """
    return score_pairs(gallery, probe, embedder, frontalize).scores


def roc_curve(scores: ScoreSet) -> list[RocPoint]:
    """모두 거부하는 시작점 이후 내림차순 임계값별 (FAR, TAR)."""
    if not scores.genuine or not scores.imposter:
        raise ProtocolError("ROC needs nonempty genuine and imposter score sets")
    genuine = np.sort(np.asarray(scores.genuine, dtype=np.float64))
    imposter = np.sort(np.asarray(scores.imposter, dtype=np.float64))
    thresholds = np.unique(np.concatenate([genuine, imposter]))[::-1]

    tar = (len(genuine) - np.searchsorted(genuine, thresholds, side="left")) / len(genuine)
    far = (len(imposter) - np.searchsorted(imposter, thresholds, side="left")) / len(imposter)

    points = [RocPoint(threshold=None, far=0.0, tar=0.0)]
    points += [RocPoint(threshold=float(t), far=float(a), tar=float(r)) for t, a, r in zip(thresholds, far, tar)]
    return points


def _auc(points: list[RocPoint]) -> float:
    area = 0.0
    for prev, cur in zip(points, points[1:]):
        area += (cur.far - prev.far) * (cur.tar + prev.tar) / 2.0
    return area


def _eer(points: list[RocPoint]) -> float:
    """FRR - FAR 부호가 바뀌는 구간에서 선형 보간."""
    diffs = [(1.0 - p.tar) - p.far for p in points]
    for i in range(1, len(points)):
        if diffs[i] <= 0.0:
            if diffs[i] == 0.0:
                return points[i].far
            t = diffs[i - 1] / (diffs[i - 1] - diffs[i])
            return points[i - 1].far + t * (points[i].far - points[i - 1].far)
    return points[-1].far


def tar_at_far(points: list[RocPoint], target: float) -> float:
    """FAR <= target 인 ROC 점들 중 최대 TAR (보간 없음)."""
    return max(p.tar for p in points if p.far <= target)


def _percent(value: float) -> float:
    return min(max(100.0 * value, 0.0), 100.0)


def roc_metrics(scores: ScoreSet, protocol: str = PROFILE) -> VerificationReport:
    """ROC 곡선에서 AUC/EER/TAR@FAR 보고서를 만듭니다 (백분율)."""
    points = roc_curve(scores)
    report = VerificationReport(
        auc=_percent(_auc(points)),
        eer=_percent(_eer(points)),
        tar_at_far_1=_percent(tar_at_far(points, 0.01)),
        tar_at_far_5=_percent(tar_at_far(points, 0.05)),
        n_genuine=len(scores.genuine),
        n_imposter=len(scores.imposter),
        protocol=protocol,
        roc=points,
    )
    logger.info(
        "Verification metrics",
        protocol=protocol,
        auc=round(report.auc, 2),
        eer=round(report.eer, 2),
        tar_at_far_1=round(report.tar_at_far_1, 2),
        tar_at_far_5=round(report.tar_at_far_5, 2),
    )
    return report


def pose_protocol_name(pose: float) -> str:
    """포즈 버킷 프로토콜 이름 (예: pose+30)."""
    return f"pose{pose:+.0f}"


def protocol_names(dataset: FaceDataset) -> list[str]:
    """profile, frontal, 그리고 포즈별 프로브 버킷."""
    return [PROFILE, FRONTAL, *(pose_protocol_name(p) for p in dataset.poses)]


def build_protocol(
    dataset: FaceDataset, identities: list[str], protocol: str = PROFILE
) -> tuple[LabeledImages, LabeledImages]:
    """가시광 정면 갤러리와 열화상 프로브를 만듭니다."""
    gallery = [dataset.visible_frontal(i) for i in identities]
    if protocol == PROFILE:
        probes = [r for i in identities for r in dataset.thermal_profiles(i)]
    elif protocol == FRONTAL:
        probes = [r for i in identities for r in dataset.thermal_frontal(i)]
    else:
        probes = [
            r for i in identities for r in dataset.thermal_profiles(i)
            if pose_protocol_name(r.pose) == protocol
        ]
        if not probes and protocol not in protocol_names(dataset):
            raise ProtocolError(f"unknown protocol '{protocol}'")
    return LabeledImages.from_records(dataset, gallery), LabeledImages.from_records(dataset, probes)


def latent_separation(generator: Generator, dataset: FaceDataset, identities: list[str]) -> LatentSeparation:
    """열화상 측면 이미지 쌍의 bottleneck RMS 거리를 같은/다른 identity로 나눠 평균합니다."""
    records = [r for i in identities for r in dataset.thermal_profiles(i)]
    if len(records) < 2:
        raise ProtocolError("latent separation needs at least two profile images")
    generator.eval()
    with torch.no_grad():
        images = torch.stack([dataset.image(r) for r in records])
        z = torch.cat([generator.encode(images[s:s + 32]).bottleneck for s in range(0, len(records), 32)])

    same: list[float] = []
    different: list[float] = []
    for i, j in combinations(range(len(records)), 2):
        d = float(rms_distance(z[i:i + 1], z[j:j + 1])[0])
        (same if records[i].identity == records[j].identity else different).append(d)
    return LatentSeparation(
        same_identity=float(np.mean(same)) if same else 0.0,
        different_identity=float(np.mean(different)) if different else 0.0,
        n_same=len(same),
        n_different=len(different),
    )


def write_report(report: VerificationReport, path: Path) -> Path:
    """보고서를 JSON으로 저장합니다."""
    return atomic_write_bytes(Path(path), report.model_dump_json(indent=2).encode("utf-8"))


def _write_csv(path: Path, header: list[str], rows: list[list[object]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return atomic_write_bytes(Path(path), buffer.getvalue().encode("utf-8"))


def write_scores_csv(scored: ScoredProtocol, path: Path) -> Path:
    """점수 행을 CSV로 저장합니다."""
    rows: list[list[object]] = [[g, p, repr(s), int(same)] for g, p, s, same in scored.rows]
    return _write_csv(path, ["gallery", "probe", "score", "genuine"], rows)


def write_roc_csv(points: list[RocPoint], path: Path) -> Path:
    """ROC 점을 CSV로 저장합니다."""
    rows: list[list[object]] = [
        ["" if p.threshold is None else repr(p.threshold), repr(p.far), repr(p.tar)] for p in points
    ]
    return _write_csv(path, ["threshold", "far", "tar"], rows)
