"""고정 얼굴 임베더.

학습되지 않는 측정 도구로, identity loss와 검증 점수 계산에 쓰인다.
"""

import math

import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .types import EmbedderConfig, EmbedderKind

logger = structlog.get_logger(__name__)


class FixedConvEmbedder(nn.Module):
    """시드로 초기화한 뒤 동결한 4층 conv 임베더.

    마지막 특징 맵을 2x2로 평균 풀링해 펼치므로 대략적인 공간 배치가 남는다.
    """

    def __init__(self, dim: int = 64, seed: int = 0, negative_slope: float = 0.2) -> None:
        super().__init__()
        if dim % 4 != 0:
            raise ConfigError(f"embedder dim must be divisible by 4, got {dim}")
        self.dim = dim
        self.negative_slope = negative_slope
        channels = [3, 16, 32, 64, dim // 4]
        self.convs = nn.ModuleList(
            nn.Conv2d(channels[i], channels[i + 1], 4, stride=2, padding=1) for i in range(4)
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FixedConvEmbedder":
        """항상 eval 모드를 유지합니다."""
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[B,3,H,W] 이미지 → [B,dim] 특징."""
        h = x - 0.5
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.negative_slope)
        return F.adaptive_avg_pool2d(h, 2).flatten(1)


class MeanPixelEmbedder(nn.Module):
    """이미지 평균 밝기 1차원 임베더 (테스트용)."""

    dim = 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """채널 평균 밝기 하나로 된 1차원 특징."""
        return x.flatten(1).mean(dim=1, keepdim=True)


def build_embedder(cfg: EmbedderConfig | None = None) -> nn.Module:
    """설정에 맞는 고정 임베더를 만듭니다."""
    cfg = cfg or EmbedderConfig()
    if cfg.kind is EmbedderKind.MEAN_PIXEL:
        return MeanPixelEmbedder()
    return FixedConvEmbedder(dim=cfg.dim, seed=cfg.seed)
