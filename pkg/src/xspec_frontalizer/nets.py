"""생성기, 판별기, 도메인 분류기 네트워크.

생성기는 strided-conv 인코더와 transposed-conv 디코더를 skip 연결로 묶은
U-Net 구조이며, batch normalization 대신 모든 conv 단계 뒤에 픽셀 단위
feature equalization을 적용한다. 배치 통계를 쓰지 않으므로 배치의 각
원소 출력은 그 원소의 입력에만 의존한다.
"""

from dataclasses import dataclass
from typing import Any

import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteError, ShapeMismatchError
from .types import ClassifierConfig, CriticConfig, EqualizationConfig, GeneratorConfig

logger = structlog.get_logger(__name__)

# 분류기 출력은 (0,1) 개구간
_PROB_EPS = 1e-6


def check_finite(x: torch.Tensor, source: str) -> None:
    """NaN/Inf가 있으면 출처를 담아 예외를 던집니다."""
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {source}")


def equalize_features(
    a: torch.Tensor,
    cfg: EqualizationConfig | None = None,
    source: str = "features",
) -> torch.Tensor:
    """채널 벡터를 픽셀마다 RMS 1로 정규화합니다.

    b = a / sqrt(mean_c(a^2) + eps). 채널 축은 dim=1이며 [B,C] 벡터에도 동작한다.
    """
    eps = (cfg or EqualizationConfig()).eps
    check_finite(a, source)
    return a / torch.sqrt(a.pow(2).mean(dim=1, keepdim=True) + eps)


class EqualizeFeatures(nn.Module):
    """feature equalization 레이어."""

    def __init__(self, eps: float = 1e-8, source: str = "features", enabled: bool = True) -> None:
        super().__init__()
        self.cfg = EqualizationConfig(eps=eps)
        self.source = source
        self.enabled = enabled

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """비활성화 시 유한성만 검사하고 그대로 통과시킵니다."""
        if not self.enabled:
            check_finite(x, self.source)
            return x
        return equalize_features(x, self.cfg, self.source)

    def extra_repr(self) -> str:
        return f"source={self.source}, eps={self.cfg.eps}, enabled={self.enabled}"


class GradReverse(torch.autograd.Function):
    """순전파는 항등, 역전파는 기울기에 -scale을 곱합니다."""

    @staticmethod
    def forward(ctx: Any, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx: Any, grad_output: torch.Tensor) -> tuple[torch.Tensor, None]:
        return grad_output.neg() * ctx.scale, None


def gradient_reversal(x: torch.Tensor, lambda_grl: float) -> torch.Tensor:
    """gradient reversal 노드를 통과시킵니다."""
    return GradReverse.apply(x, lambda_grl)


class GradientReversal(nn.Module):
    """gradient reversal 레이어."""

    def __init__(self, lambda_grl: float) -> None:
        super().__init__()
        self.lambda_grl = lambda_grl

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gradient_reversal(x, self.lambda_grl)

    def extra_repr(self) -> str:
        return f"lambda_grl={self.lambda_grl}"


class SelfAttention(nn.Module):
    """query/key/value 공간 self-attention 블록.

    out = x + gamma * (value를 row-stochastic attention map으로 가중합).
    gamma는 0으로 초기화되므로 초기 상태에서는 항등 사상이다.
    """

    def __init__(self, channels: int) -> None:
        super().__init__()
        inner = max(channels // 8, 1)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(()))

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """[B, N, N] attention 행렬, 각 행의 합은 1."""
        q = self.query(x).flatten(2).transpose(1, 2)
        k = self.key(x).flatten(2)
        return F.softmax(torch.bmm(q, k), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x + gamma * attention 가중 value."""
        b, c, h, w = x.shape
        attn = self.attention_map(x)
        v = self.value(x).flatten(2)
        out = torch.bmm(v, attn.transpose(1, 2)).view(b, c, h, w)
        return x + self.gamma * out


def init_weights(module: nn.Module, negative_slope: float = 0.2) -> None:
    """conv/linear 가중치를 scaled-normal로, bias를 0으로 초기화합니다."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=negative_slope, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class LatentFeatures:
    """인코더 출력: bottleneck과 단계별 skip feature."""
    bottleneck: torch.Tensor
    skips: tuple[torch.Tensor, ...]


@dataclass
class GeneratorOutput:
    """생성기 출력: 해상도별 합성 이미지와 latent."""
    images: dict[int, torch.Tensor]
    latent: LatentFeatures

    @property
    def image(self) -> torch.Tensor:
        """최고 해상도 출력."""
        return self.images[max(self.images)]


def _stage(
    conv: nn.Module, negative_slope: float, eps: float, source: str, equalization: bool
) -> nn.Sequential:
    return nn.Sequential(
        conv,
        nn.LeakyReLU(negative_slope),
        EqualizeFeatures(eps, source=source, enabled=equalization),
    )


class Encoder(nn.Module):
    """strided-conv 인코더 E."""

    def __init__(self, config: GeneratorConfig, equalization: bool = True) -> None:
        super().__init__()
        self.config = config
        stages = []
        prev = config.in_channels
        for i, ch in enumerate(config.encoder_channels):
            conv = nn.Conv2d(prev, ch, 4, stride=2, padding=1)
            stages.append(_stage(conv, config.negative_slope, config.eps, f"encoder.stage{i}", equalization))
            prev = ch
        self.stages = nn.ModuleList(stages)
        init_weights(self, config.negative_slope)

    def forward(self, x: torch.Tensor) -> LatentFeatures:
        """스테이지별 skip 특징과 bottleneck."""
        size = self.config.image_size
        expected = (self.config.in_channels, size, size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"encoder input must be [B,{expected[0]},{size},{size}], got {list(x.shape)}"
            )
        check_finite(x, "encoder input")
        skips = []
        h = x
        for stage in self.stages:
            h = stage(h)
            skips.append(h)
        return LatentFeatures(bottleneck=h, skips=tuple(skips))


class Decoder(nn.Module):
    """skip 연결과 다중 해상도 side-output을 갖는 디코더 G."""

    def __init__(self, config: GeneratorConfig, equalization: bool = True) -> None:
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        n = len(ch)
        stages = []
        self.stage_channels: list[int] = []
        self.stage_sizes: list[int] = []
        in_ch = ch[-1]
        size = config.bottleneck_size
        for j in range(n):
            out_ch = ch[n - 2 - j] if j < n - 1 else ch[0]
            conv = nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)
            stages.append(_stage(conv, config.negative_slope, config.eps, f"decoder.stage{j}", equalization))
            size *= 2
            # 마지막 단계를 제외하면 같은 해상도의 인코더 skip과 concat
            in_ch = 2 * out_ch if j < n - 1 else out_ch
            self.stage_channels.append(in_ch)
            self.stage_sizes.append(size)
        self.stages = nn.ModuleList(stages)
        self.side_heads = nn.ModuleDict({
            str(s): nn.Conv2d(self.stage_channels[self.stage_sizes.index(s)], config.out_channels, 1)
            for s in config.side_output_sizes
        })
        self.head = nn.Conv2d(ch[0], config.out_channels, 3, padding=1)
        init_weights(self, config.negative_slope)

    def forward(self, bottleneck: torch.Tensor, skips: tuple[torch.Tensor, ...]) -> dict[int, torch.Tensor]:
        """해상도별 합성 이미지 {32, 64, 128}."""
        cfg = self.config
        n = cfg.depth
        b = cfg.bottleneck_size
        if bottleneck.dim() != 4 or tuple(bottleneck.shape[1:]) != (cfg.encoder_channels[-1], b, b):
            raise ShapeMismatchError(
                f"bottleneck must be [B,{cfg.encoder_channels[-1]},{b},{b}], got {list(bottleneck.shape)}"
            )
        if len(skips) < n - 1:
            raise ShapeMismatchError(f"expected {n - 1} skip tensors, got {len(skips)}")
        images: dict[int, torch.Tensor] = {}
        h = bottleneck
        for j, stage in enumerate(self.stages):
            h = stage(h)
            if j < n - 1:
                skip = skips[n - 2 - j]
                if skip.shape[0] != h.shape[0] or skip.shape[1:] != h.shape[1:]:
                    raise ShapeMismatchError(
                        f"skip mismatch at decoder stage {j}: "
                        f"expected {list(h.shape)}, got {list(skip.shape)}"
                    )
                h = torch.cat([h, skip], dim=1)
            key = str(self.stage_sizes[j])
            if key in self.side_heads:
                images[self.stage_sizes[j]] = torch.sigmoid(self.side_heads[key](h))
        images[cfg.image_size] = torch.sigmoid(self.head(h))
        return images


class Generator(nn.Module):
    """인코더-디코더 생성기 F = G(E(x)).

    attention 블록은 인코더/디코더 뒤에 생성되므로 같은 시드라면 attention
    유무와 관계없이 인코더/디코더 가중치가 동일하다.
    """

    def __init__(
        self,
        config: GeneratorConfig | None = None,
        *,
        self_attention: bool = True,
        equalization: bool = True,
    ) -> None:
        super().__init__()
        self.config = config or GeneratorConfig()
        self.encoder = Encoder(self.config, equalization)
        self.decoder = Decoder(self.config, equalization)
        self.attention: SelfAttention | None = None
        if self_attention:
            self.attention = SelfAttention(self.config.encoder_channels[-1])
            init_weights(self.attention, self.config.negative_slope)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        """bottleneck의 (C, H, W)."""
        b = self.config.bottleneck_size
        return (self.config.encoder_channels[-1], b, b)

    def encode(self, x: torch.Tensor) -> LatentFeatures:
        """인코더 E."""
        return self.encoder(x)

    def decode(self, latent: LatentFeatures) -> dict[int, torch.Tensor]:
        """self-attention 후 디코더 G."""
        h = latent.bottleneck
        if self.attention is not None:
            h = self.attention(h)
        return self.decoder(h, latent.skips)

    def forward(self, x: torch.Tensor) -> GeneratorOutput:
        """인코딩과 디코딩을 한 번에 수행합니다."""
        latent = self.encode(x)
        return GeneratorOutput(images=self.decode(latent), latent=latent)

    def frontalize(self, x: torch.Tensor) -> torch.Tensor:
        """최고 해상도 합성 이미지만 반환합니다."""
        return self.forward(x).image


class DomainClassifier(nn.Module):
    """bottleneck에서 가시광(k=1) 확률을 예측하는 3층 MLP C."""

    def __init__(
        self,
        in_features: int,
        config: ClassifierConfig | None = None,
        *,
        negative_slope: float = 0.2,
        eps: float = 1e-8,
        equalization: bool = True,
    ) -> None:
        super().__init__()
        cfg = config or ClassifierConfig()
        self.in_features = in_features
        self.net = nn.Sequential(
            nn.Linear(in_features, cfg.hidden_dim),
            nn.LeakyReLU(negative_slope),
            EqualizeFeatures(eps, source="classifier.fc1", enabled=equalization),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.LeakyReLU(negative_slope),
            EqualizeFeatures(eps, source="classifier.fc2", enabled=equalization),
            nn.Linear(cfg.hidden_dim, 1),
        )
        init_weights(self, negative_slope)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        """sigmoid 이전 값 [B]. 학습 손실은 이 값에서 계산한다."""
        flat = z.flatten(1)
        if flat.shape[1] != self.in_features:
            raise ShapeMismatchError(
                f"classifier expects {self.in_features} features, got {flat.shape[1]}"
            )
        return self.net(flat).squeeze(1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """가시광 확률 [B], (0,1) 안으로 제한."""
        return torch.sigmoid(self.logits(z)).clamp(_PROB_EPS, 1.0 - _PROB_EPS)


class Critic(nn.Module):
    """WGAN critic. D_g와 D_l은 같은 구조의 독립 인스턴스."""

    def __init__(self, config: CriticConfig | None = None) -> None:
        super().__init__()
        self.config = config or CriticConfig()
        layers: list[nn.Module] = []
        prev = self.config.in_channels
        for ch in self.config.channels:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.LeakyReLU(self.config.negative_slope)]
            prev = ch
        self.features = nn.Sequential(*layers)
        fs = self.config.final_size
        self.score = nn.Linear(prev * fs * fs, 1)
        init_weights(self, self.config.negative_slope)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """배치별 critic 점수 [B]."""
        size = self.config.image_size
        expected = (self.config.in_channels, size, size)
        if img.dim() != 4 or tuple(img.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"critic input must be [B,{expected[0]},{size},{size}], got {list(img.shape)}"
            )
        return self.score(self.features(img).flatten(1)).squeeze(1)


def encoder_forward(x: torch.Tensor, generator: Generator) -> LatentFeatures:
    """인코더 순전파."""
    return generator.encode(x)


def decoder_forward(latent: LatentFeatures, generator: Generator) -> dict[int, torch.Tensor]:
    """디코더 순전파."""
    return generator.decode(latent)


def self_attention(x: torch.Tensor, block: SelfAttention) -> torch.Tensor:
    """self-attention 블록 적용."""
    return block(x)


def domain_classifier_forward(z: torch.Tensor, classifier: DomainClassifier) -> torch.Tensor:
    """도메인 분류기의 가시광 확률."""
    return classifier(z)


def critic_forward(img: torch.Tensor, critic: Critic) -> torch.Tensor:
    """critic 점수."""
    return critic(img)


def count_parameters(module: nn.Module) -> int:
    """학습 가능한 파라미터 수."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
