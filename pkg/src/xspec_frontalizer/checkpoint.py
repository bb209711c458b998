"""버전이 붙은 체크포인트 포맷과 원자적 파일 쓰기.

파일 구조: MAGIC(8B) | struct "<HI" (format_version, header_len) | JSON header | torch.save payload.
헤더에는 step과 해석된 TrainConfig가 들어 있어 텐서를 읽지 않고도 구조를 알 수 있다.
"""

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import structlog
import torch
from pydantic import ValidationError
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .config import config
from .errors import CheckpointError
from .nets import Generator
from .types import TrainConfig

logger = structlog.get_logger(__name__)

MAGIC = b"XSFCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<HI")


@retry(
    retry=retry_if_exception_type(OSError),
    stop=stop_after_attempt(config.WRITE_RETRIES),
    wait=wait_exponential(multiplier=0.1, max=1),
    reraise=True,
)
def atomic_write_bytes(path: Path, data: bytes) -> Path:
    """임시 파일에 쓴 뒤 rename 합니다."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        logger.warning("Write failed, retrying", path=str(path), error=str(e))
        raise
    return path


@dataclass
class Checkpoint:
    """읽어 들인 체크포인트."""
    header: dict[str, Any]
    config: TrainConfig
    state: dict[str, Any]

    @property
    def step(self) -> int:
        """헤더에 기록된 학습 스텝."""
        return int(self.header["step"])


def encode_checkpoint(
    train_config: TrainConfig,
    step: int,
    state: dict[str, Any],
    extra: dict[str, Any] | None = None,
) -> bytes:
    """매직, JSON 헤더, torch 페이로드를 한 바이트열로 직렬화합니다."""
    header = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "config": train_config.model_dump(mode="json"),
        **(extra or {}),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = io.BytesIO()
    torch.save(state, payload)
    return MAGIC + _PREFIX.pack(FORMAT_VERSION, len(header_bytes)) + header_bytes + payload.getvalue()


def save_checkpoint(
    path: Path,
    train_config: TrainConfig,
    step: int,
    state: dict[str, Any],
    extra: dict[str, Any] | None = None,
) -> Path:
    """체크포인트를 원자적으로 저장합니다."""
    data = encode_checkpoint(train_config, step, state, extra)
    try:
        atomic_write_bytes(Path(path), data)
    except OSError as e:
        logger.error("Failed to write checkpoint", path=str(path), error=str(e))
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("Checkpoint saved", path=str(path), step=step, size=len(data))
    return Path(path)


def _split(path: Path) -> tuple[dict[str, Any], bytes]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + _PREFIX.size:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = _PREFIX.unpack_from(blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version}")
    start = len(MAGIC) + _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {e}") from e
    return header, blob[start + header_len:]


def read_header(path: Path) -> dict[str, Any]:
    """텐서를 읽지 않고 JSON 헤더만 반환합니다."""
    header, _ = _split(path)
    return header


def load_checkpoint(path: Path, device: str = "cpu") -> Checkpoint:
    """체크포인트를 읽어 설정과 상태 사전을 복원합니다."""
    header, payload = _split(path)
    try:
        train_config = TrainConfig.model_validate(header["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid embedded config: {e}") from e
    try:
        state = torch.load(io.BytesIO(payload), map_location=device, weights_only=True)
    except Exception as e:
        logger.error("Failed to load checkpoint payload", path=str(path), error=str(e))
        raise CheckpointError(f"{path}: corrupt checkpoint payload: {e}") from e
    return Checkpoint(header=header, config=train_config, state=state)


def build_generator(train_config: TrainConfig) -> Generator:
    """설정의 ablation 플래그를 반영해 생성기를 만듭니다."""
    return Generator(
        train_config.generator,
        self_attention=train_config.ablation.self_attention,
        equalization=train_config.ablation.equalization,
    )


def load_generator(path: Path, device: str = "cpu") -> tuple[Generator, TrainConfig]:
    """체크포인트에서 추론용 생성기를 복원합니다."""
    ckpt = load_checkpoint(path, device)
    generator = build_generator(ckpt.config)
    try:
        generator.load_state_dict(ckpt.state["generator"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path}: generator weights do not match config: {e}") from e
    generator.to(device).eval()
    logger.debug("Generator restored", path=str(path), step=ckpt.step)
    return generator, ckpt.config
