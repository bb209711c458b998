"""네트워크 구성 요소 테스트."""

import math

import pytest
import torch
import torch.nn as nn

from xspec_frontalizer.errors import NonFiniteError, ShapeMismatchError
from xspec_frontalizer.nets import (
    Critic,
    DomainClassifier,
    EqualizeFeatures,
    Generator,
    LatentFeatures,
    SelfAttention,
    critic_forward,
    decoder_forward,
    domain_classifier_forward,
    encoder_forward,
    equalize_features,
    gradient_reversal,
    self_attention,
)
from xspec_frontalizer.types import CriticConfig, EqualizationConfig, GeneratorConfig


class TestEqualizeFeatures:
    """feature equalization 테스트."""

    def test_zero_input_maps_to_zero(self):
        """0 입력은 0 출력."""
        out = equalize_features(torch.zeros(1, 4, 2, 2))
        assert torch.equal(out, torch.zeros(1, 4, 2, 2))

    def test_worked_example(self):
        """채널 벡터 (3, 4) → a / sqrt(12.5 + eps)."""
        a = torch.tensor([3.0, 4.0], dtype=torch.float64).view(1, 2, 1, 1)
        out = equalize_features(a, EqualizationConfig(eps=1e-8)).flatten()
        denom = math.sqrt(12.5 + 1e-8)
        assert out[0].item() == pytest.approx(3.0 / denom, abs=1e-12)
        assert out[1].item() == pytest.approx(4.0 / denom, abs=1e-12)
        assert out[0].item() == pytest.approx(0.848528, abs=1e-6)
        assert out[1].item() == pytest.approx(1.131371, abs=1e-6)

    def test_unit_rms_over_many_maps(self):
        """1000개 랜덤 feature map의 픽셀별 채널 RMS는 1."""
        a = torch.randn(1000, 8, 4, 4) * 5.0 + 0.5
        rms = equalize_features(a).pow(2).mean(dim=1).sqrt()
        assert torch.allclose(rms, torch.ones_like(rms), atol=1e-4)

    def test_idempotent(self):
        """두 번 적용해도 결과가 같다."""
        a = torch.randn(2, 16, 4, 4)
        once = equalize_features(a)
        assert torch.allclose(equalize_features(once), once, atol=1e-5)

    def test_shape_preserved(self):
        a = torch.randn(3, 5, 7, 2)
        assert equalize_features(a).shape == a.shape

    def test_non_finite_names_layer(self):
        """NaN 입력은 생성 레이어 이름과 함께 거부."""
        a = torch.randn(1, 4, 2, 2)
        a[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError, match="encoder.stage3"):
            equalize_features(a, source="encoder.stage3")

    def test_disabled_layer_is_identity(self):
        layer = EqualizeFeatures(enabled=False)
        a = torch.randn(2, 4, 3, 3)
        assert torch.equal(layer(a), a)


class TestGradientReversal:
    """gradient reversal 테스트."""

    def test_forward_is_identity(self):
        x = torch.randn(4, 8, 2, 2)
        assert torch.equal(gradient_reversal(x, 0.01), x)

    def test_scalar_chain(self):
        """f(x) = 3 * GRL(x), lambda=0.01 → 기울기 -0.03."""
        x = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
        (3.0 * gradient_reversal(x, 0.01)).backward()
        assert x.grad.item() == pytest.approx(-0.03, abs=1e-15)

    def test_sign_law_against_identity_graph(self):
        """GRL 경로 기울기 = -lambda * 항등 경로 기울기."""
        lin = nn.Linear(6, 3).double()
        head = nn.Linear(3, 1).double()
        x = torch.randn(5, 6, dtype=torch.float64)

        head(torch.tanh(lin(x))).sum().backward()
        plain = lin.weight.grad.clone()
        lin.weight.grad = None
        head(gradient_reversal(torch.tanh(lin(x)), 0.25)).sum().backward()
        assert torch.allclose(lin.weight.grad, -0.25 * plain, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_toy_encoder_matches_finite_differences(self, seed):
        """2-파라미터 인코더: autodiff 기울기 = -lambda * L_cls 유한 차분."""
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(8, dtype=torch.float64, generator=gen)
        k = (torch.rand(8, generator=gen) > 0.5).double()
        w, b = torch.randn(2, dtype=torch.float64, generator=gen)
        lambda_grl = 0.01

        def l_cls(theta: torch.Tensor, grl: bool) -> torch.Tensor:
            z = torch.tanh(theta[0] * x + theta[1])
            if grl:
                z = gradient_reversal(z, lambda_grl)
            p = torch.sigmoid(w * z + b)
            return -(k * torch.log(p) + (1 - k) * torch.log(1 - p)).mean()

        theta = torch.randn(2, dtype=torch.float64, generator=gen).requires_grad_(True)
        l_cls(theta, grl=True).backward()

        h = 1e-4
        fd = torch.zeros(2, dtype=torch.float64)
        with torch.no_grad():
            for i in range(2):
                step = torch.zeros(2, dtype=torch.float64)
                step[i] = h
                fd[i] = (l_cls(theta + step, False) - l_cls(theta - step, False)) / (2 * h)
        expected = -lambda_grl * fd
        rel = (theta.grad - expected).norm() / expected.norm()
        assert rel.item() < 1e-3


class TestSelfAttention:
    """self-attention 블록 테스트."""

    def test_zero_gamma_is_identity(self):
        block = SelfAttention(64)
        x = torch.randn(2, 64, 8, 8)
        assert block.gamma.item() == 0.0
        assert torch.equal(self_attention(x, block), x)

    def test_rows_sum_to_one(self):
        block = SelfAttention(16)
        attn = block.attention_map(torch.randn(3, 16, 4, 4))
        assert attn.shape == (3, 16, 16)
        assert torch.allclose(attn.sum(dim=-1), torch.ones(3, 16), atol=1e-5)

    def test_shape_preserved_with_nonzero_gamma(self):
        block = SelfAttention(64)
        with torch.no_grad():
            block.gamma.fill_(0.5)
        out = block(torch.randn(2, 64, 8, 8))
        assert out.shape == (2, 64, 8, 8)


class TestGenerator:
    """인코더/디코더 생성기 테스트."""

    def test_default_bottleneck_shape(self):
        """기본 5단계 설정: [8,3,128,128] → [8,512,4,4]."""
        generator = Generator()
        with torch.no_grad():
            latent = encoder_forward(torch.rand(8, 3, 128, 128), generator)
        assert latent.bottleneck.shape == (8, 512, 4, 4)
        assert len(latent.skips) == 5

    def test_multiscale_outputs_in_range(self, tiny_generator_config):
        generator = Generator(tiny_generator_config)
        with torch.no_grad():
            images = decoder_forward(generator.encode(torch.rand(2, 3, 128, 128)), generator)
        assert sorted(images) == [32, 64, 128]
        for size, img in images.items():
            assert img.shape == (2, 3, size, size)
            assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0

    def test_outputs_in_range_for_large_latent(self, tiny_generator_config):
        """임의의 유한 latent에 대해 출력은 [0,1]."""
        generator = Generator(tiny_generator_config)
        latent = generator.encode(torch.rand(1, 3, 128, 128))
        big = LatentFeatures(latent.bottleneck * 1e3, tuple(s * 1e3 for s in latent.skips))
        with torch.no_grad():
            for img in generator.decode(big).values():
                assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0

    def test_deterministic(self, tiny_generator_config):
        generator = Generator(tiny_generator_config)
        x = torch.rand(2, 3, 128, 128)
        with torch.no_grad():
            assert torch.equal(generator(x).image, generator(x).image)

    def test_nan_input_rejected(self, tiny_generator_config):
        generator = Generator(tiny_generator_config)
        x = torch.rand(1, 3, 128, 128)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError, match="encoder input"):
            generator(x)

    def test_wrong_resolution_rejected(self, tiny_generator_config):
        generator = Generator(tiny_generator_config)
        with pytest.raises(ShapeMismatchError):
            generator(torch.rand(1, 3, 64, 64))

    def test_skip_mismatch_names_stage(self, tiny_generator_config):
        generator = Generator(tiny_generator_config)
        latent = generator.encode(torch.rand(2, 3, 128, 128))
        skips = list(latent.skips)
        skips[3] = skips[3][:1]
        with pytest.raises(ShapeMismatchError, match="decoder stage 0"):
            generator.decode(LatentFeatures(latent.bottleneck, tuple(skips)))

    def test_attention_at_init_does_not_change_output(self, tiny_generator_config):
        """gamma=0이면 attention 유무와 관계없이 출력이 같다."""
        torch.manual_seed(3)
        with_attn = Generator(tiny_generator_config, self_attention=True)
        torch.manual_seed(3)
        without = Generator(tiny_generator_config, self_attention=False)
        x = torch.rand(2, 3, 128, 128)
        with torch.no_grad():
            a, b = with_attn(x).images, without(x).images
        for size in a:
            assert torch.equal(a[size], b[size])

    def test_batch_permutation_equivariance(self, tiny_generator_config):
        """배치 통계가 없으므로 순서를 바꾸면 출력도 같은 순서로 바뀐다."""
        generator = Generator(tiny_generator_config)
        x = torch.rand(4, 3, 128, 128)
        perm = torch.tensor([2, 0, 3, 1])
        with torch.no_grad():
            out = generator(x).image
            permuted = generator(x[perm]).image
        assert torch.allclose(out[perm], permuted, atol=1e-6)

    def test_no_batch_norm(self):
        generator = Generator()
        assert not any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in generator.modules())

    def test_invalid_geometry_rejected(self):
        with pytest.raises(ValueError):
            GeneratorConfig(image_size=64)


class TestDomainClassifier:
    """도메인 분류기 테스트."""

    def test_output_range_and_shape(self):
        classifier = DomainClassifier(512 * 4 * 4)
        p = domain_classifier_forward(torch.randn(8, 512 * 4 * 4) * 10, classifier)
        assert p.shape == (8,)
        assert bool((p > 0).all()) and bool((p < 1).all())

    def test_accepts_spatial_bottleneck(self):
        classifier = DomainClassifier(16 * 4 * 4)
        assert classifier(torch.randn(3, 16, 4, 4)).shape == (3,)

    def test_deterministic(self):
        classifier = DomainClassifier(32)
        z = torch.randn(4, 32)
        assert torch.equal(classifier(z), classifier(z))

    def test_forward_is_sigmoid_of_logits(self):
        classifier = DomainClassifier(32)
        z = torch.randn(4, 32)
        assert torch.allclose(classifier(z), torch.sigmoid(classifier.logits(z)), atol=1e-6)

    def test_logits_keep_gradient_when_saturated(self):
        classifier = DomainClassifier(32, equalization=False)
        with torch.no_grad():
            classifier.net[-1].bias.fill_(50.0)
        z = torch.randn(4, 32, requires_grad=True)
        assert bool((classifier(z) == classifier(z).max()).all())
        # 확률은 상한에 붙어 있어도 logit은 입력 기울기를 전달한다
        classifier.logits(z).sum().backward()
        assert bool((z.grad != 0).any())

    def test_dimension_mismatch(self):
        classifier = DomainClassifier(32)
        with pytest.raises(ShapeMismatchError):
            classifier(torch.randn(4, 31))


class TestCritic:
    """WGAN critic 테스트."""

    def test_scores_shape(self):
        critic = Critic()
        with torch.no_grad():
            scores = critic_forward(torch.rand(4, 3, 128, 128), critic)
        assert scores.shape == (4,)
        assert bool(torch.isfinite(scores).all())

    def test_wrong_resolution(self, tiny_critic_config):
        with pytest.raises(ShapeMismatchError):
            Critic(tiny_critic_config)(torch.rand(2, 3, 96, 96))

    def test_deterministic(self, tiny_critic_config):
        critic = Critic(tiny_critic_config)
        x = torch.rand(2, 3, 128, 128)
        assert torch.equal(critic(x), critic(x))

    def test_independent_instances(self, tiny_critic_config):
        """같은 구조의 두 판별기는 가중치를 공유하지 않는다."""
        d_g, d_l = Critic(tiny_critic_config), Critic(tiny_critic_config)
        assert all(a.data_ptr() != b.data_ptr() for a, b in zip(d_g.parameters(), d_l.parameters()))

    def test_gradient_matches_finite_differences(self):
        """8x8 테스트 critic의 입력 기울기 gradcheck."""
        critic = Critic(CriticConfig(image_size=8, channels=[2, 2])).double()
        img = torch.rand(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(critic, (img,), eps=1e-4, atol=1e-5, rtol=1e-3)
