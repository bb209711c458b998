"""학습 목적 함수.

모든 판별기/생성기 손실은 최소화 형태(descent form)로 표현되어 하나의
최소화 optimizer로 모든 파라미터 그룹을 다룬다.
"""

from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import structlog
import torch
import torch.nn.functional as F

from .errors import InvalidProbabilityError, NonDifferentiableCriticError, ShapeMismatchError
from .masks import apply_mask
from .types import LossWeights

logger = structlog.get_logger(__name__)

# BCE log guard
LOG_GUARD = 1e-12

CriticFn = Callable[[torch.Tensor], torch.Tensor]
Scalar = torch.Tensor | float


def image_pyramid(y: torch.Tensor, sizes: Iterable[int]) -> dict[int, torch.Tensor]:
    """area 평균 다운샘플로 정답 이미지의 해상도별 버전을 만듭니다."""
    pyramid = {}
    for s in sizes:
        pyramid[s] = y if y.shape[-1] == s else F.interpolate(y, size=(s, s), mode="area")
    return pyramid


def multiscale_pixel_loss(y_hat: Mapping[int, torch.Tensor], y: Mapping[int, torch.Tensor]) -> torch.Tensor:
    """해상도별 평균 절대 오차의 합."""
    if set(y_hat) != set(y):
        raise ShapeMismatchError(f"scale sets differ: {sorted(y_hat)} vs {sorted(y)}")
    total = None
    for s in sorted(y_hat):
        if y_hat[s].shape != y[s].shape:
            raise ShapeMismatchError(
                f"pixel loss shape mismatch at scale {s}: {list(y_hat[s].shape)} vs {list(y[s].shape)}"
            )
        term = (y_hat[s] - y[s]).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise ShapeMismatchError("pixel loss needs at least one scale")
    return total


def identity_loss(y_hat: torch.Tensor, y: torch.Tensor, embedder: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """임베딩 공간 L2 거리의 배치 평균."""
    e_hat = embedder(y_hat)
    e = embedder(y)
    if e_hat.dim() != 2 or e_hat.shape != e.shape or e_hat.shape[0] != y_hat.shape[0]:
        raise ShapeMismatchError(
            f"embedder must map [B,...] to [B,D], got {list(e_hat.shape)} and {list(e.shape)}"
        )
    expected = getattr(embedder, "dim", None)
    if expected is not None and e_hat.shape[1] != expected:
        raise ShapeMismatchError(f"embedding dimension {e_hat.shape[1]} != configured {expected}")
    return torch.linalg.vector_norm(e_hat - e, dim=1).mean()


def total_variation_loss(img: torch.Tensor) -> torch.Tensor:
    """수평/수직 인접 차이 제곱의 평균 합."""
    dh = img[..., :, 1:] - img[..., :, :-1]
    dv = img[..., 1:, :] - img[..., :-1, :]
    return dh.pow(2).mean() + dv.pow(2).mean()


def gradient_penalty(
    critic: CriticFn,
    real: torch.Tensor,
    fake: torch.Tensor,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """real/fake 사이 직선 위 보간점에서 (||grad D|| - 1)^2 의 평균."""
    if real.shape != fake.shape:
        raise ShapeMismatchError(f"real {list(real.shape)} and fake {list(fake.shape)} differ")
    shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    u = torch.rand(shape, generator=generator, dtype=real.dtype, device=real.device)
    interp = (u * real.detach() + (1.0 - u) * fake.detach()).requires_grad_(True)
    score = critic(interp)
    if not score.requires_grad:
        raise NonDifferentiableCriticError("critic output is not differentiable w.r.t. its input")
    (grad,) = torch.autograd.grad(
        outputs=score.sum(),
        inputs=interp,
        create_graph=True,
        allow_unused=True,
    )
    if grad is None:
        grad = torch.zeros_like(interp)
    norm = torch.linalg.vector_norm(grad.flatten(1), dim=1)
    return (norm - 1.0).pow(2).mean()


@dataclass
class CriticTerms:
    real_score: torch.Tensor
    fake_score: torch.Tensor
    gp: torch.Tensor

    def total(self, lambda_gp: float) -> torch.Tensor:
        """lambda_gp를 곱한 GP를 더한 critic 손실."""
        return -self.real_score + self.fake_score + lambda_gp * self.gp


def critic_loss_terms(
    critic: CriticFn,
    real: torch.Tensor,
    fake: torch.Tensor,
    generator: torch.Generator | None = None,
) -> CriticTerms:
    """critic 손실의 항별 값 (Wasserstein 차이와 GP)."""
    fake = fake.detach()
    return CriticTerms(
        real_score=critic(real).mean(),
        fake_score=critic(fake).mean(),
        gp=gradient_penalty(critic, real, fake, generator),
    )


def critic_loss(
    critic: CriticFn,
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """-E[D(real)] + E[D(fake)] + lambda_gp * GP. fake는 생성기에서 분리된다."""
    return critic_loss_terms(critic, real, fake, generator).total(lambda_gp)


def generator_adversarial_terms(
    global_critic: CriticFn | None,
    local_critic: CriticFn | None,
    y_hat: torch.Tensor,
    mask: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(global 항, local 항). 비활성 판별기의 항은 0."""
    zero = y_hat.new_zeros(())
    adv_g = -global_critic(y_hat).mean() if global_critic is not None else zero
    adv_l = -local_critic(apply_mask(mask, y_hat)).mean() if local_critic is not None else zero
    return adv_g, adv_l


def generator_adversarial_loss(
    global_critic: CriticFn | None,
    local_critic: CriticFn | None,
    y_hat: torch.Tensor,
    mask: torch.Tensor,
    lambda_local: float,
) -> torch.Tensor:
    """-E[D_g(y_hat)] + lambda_l * (-E[D_l(M * y_hat)])."""
    if lambda_local == 0:
        local_critic = None
    adv_g, adv_l = generator_adversarial_terms(global_critic, local_critic, y_hat, mask)
    if local_critic is None:
        return adv_g
    return adv_g + lambda_local * adv_l


def domain_classification_loss(p: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """가시광(k=1)/열화상(k=0) 이진 cross-entropy의 평균."""
    if p.shape != k.shape:
        raise ShapeMismatchError(f"probabilities {list(p.shape)} and labels {list(k.shape)} differ")
    if not bool(torch.isfinite(p).all()) or bool((p < 0).any()) or bool((p > 1).any()):
        raise InvalidProbabilityError("classifier probabilities must lie in [0, 1]")
    k = k.to(p.dtype)
    log_p = torch.log(p.clamp(min=LOG_GUARD))
    log_q = torch.log((1.0 - p).clamp(min=LOG_GUARD))
    return -(k * log_p + (1.0 - k) * log_q).mean()


def domain_classification_loss_from_logits(logits: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """logit에서 직접 계산한 같은 BCE. 포화 구간에서도 기울기가 남는다."""
    if logits.shape != k.shape:
        raise ShapeMismatchError(f"logits {list(logits.shape)} and labels {list(k.shape)} differ")
    return F.binary_cross_entropy_with_logits(logits, k.to(logits.dtype))


def rms_distance(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """flatten한 벡터의 L2 거리 / sqrt(dim)."""
    a, b = z1.flatten(1), z2.flatten(1)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"latent shapes differ: {list(z1.shape)} vs {list(z2.shape)}")
    return torch.linalg.vector_norm(a - b, dim=1) / (a.shape[1] ** 0.5)


def contrastive_loss(
    z1: torch.Tensor,
    z2: torch.Tensor,
    labels: torch.Tensor | float,
    margin: float = 1.2,
) -> torch.Tensor:
    """l*d + (1-l)*max(0, m - d) 의 배치 평균 (d는 RMS 거리)."""
    d = rms_distance(z1, z2)
    same = torch.as_tensor(labels, dtype=d.dtype, device=d.device).expand_as(d)
    return (same * d + (1.0 - same) * torch.clamp(margin - d, min=0.0)).mean()


@dataclass
class FrontalizationTerms:
    pixel: Scalar = 0.0
    identity: Scalar = 0.0
    adversarial: Scalar = 0.0
    tv: Scalar = 0.0


def frontalization_total(terms: FrontalizationTerms, w: LossWeights) -> Scalar:
    """L_front = pixel + lambda_id*id + lambda_adv*adv + lambda_tv*tv."""
    return terms.pixel + w.lambda_id * terms.identity + w.lambda_adv * terms.adversarial + w.lambda_tv * terms.tv


def total_objective(front: Scalar, contrastive: Scalar, cls: Scalar, w: LossWeights) -> Scalar:
    """L = L_front + lambda_c*L_contras + lambda_cls*L_cls."""
    return front + w.lambda_contrastive * contrastive + w.lambda_cls * cls
