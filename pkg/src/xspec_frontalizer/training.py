"""dual-path 학습 루프.

한 스텝은 판별기 단계(생성기 고정)와 생성기 단계(판별기 고정)로 나뉜다.
두 경로 x1, x2는 같은 Generator 객체를 통과하므로 파라미터 저장소는 하나뿐이다.
도메인 분류기는 GRL 뒤에 붙어 있어 한 번의 optimizer step으로 분류기는
L_cls를 줄이고 인코더는 -lambda_grl 배 뒤집힌 기울기를 받는다.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import structlog
import torch
import torch.nn as nn
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .checkpoint import build_generator, save_checkpoint
from .config import config as settings
from .config import resolve_device
from .data import FaceDataset, PairBatch, sample_dual_path_batch
from .embedders import build_embedder
from .errors import CheckpointError, NonFiniteError
from .losses import (
    FrontalizationTerms,
    contrastive_loss,
    critic_loss_terms,
    domain_classification_loss_from_logits,
    frontalization_total,
    generator_adversarial_terms,
    identity_loss,
    image_pyramid,
    multiscale_pixel_loss,
    total_objective,
    total_variation_loss,
)
from .nets import Critic, DomainClassifier, Generator, GeneratorOutput, gradient_reversal
from .types import LADDER_FLAGS, LossRecord, TrainConfig

logger = structlog.get_logger(__name__)


@dataclass
class TrainerState:
    """학습 상태. generator는 두 경로가 공유하는 유일한 생성기."""
    config: TrainConfig
    generator: Generator
    global_critic: Critic | None
    local_critic: Critic | None
    classifier: DomainClassifier | None
    embedder: nn.Module
    optimizers: dict[str, torch.optim.Optimizer]
    schedulers: dict[str, torch.optim.lr_scheduler.LRScheduler]
    rng: np.random.Generator
    gp_generator: torch.Generator
    step: int = 0
    device: str = "cpu"

    def path_generator(self, path: int) -> Generator:
        """dual-path의 각 경로가 쓰는 생성기 (두 경로 모두 같은 객체)."""
        if path not in (1, 2):
            raise ValueError(f"path must be 1 or 2, got {path}")
        return self.generator

    def critics(self) -> list[tuple[str, Critic]]:
        """활성화된 critic들의 (이름, 모듈)."""
        pairs = [("global_critic", self.global_critic), ("local_critic", self.local_critic)]
        return [(name, c) for name, c in pairs if c is not None]

    def state_dict(self) -> dict[str, Any]:
        """체크포인트에 담을 상태 사전."""
        state: dict[str, Any] = {
            "generator": self.generator.state_dict(),
            "optimizers": {k: v.state_dict() for k, v in self.optimizers.items()},
            "schedulers": {k: v.state_dict() for k, v in self.schedulers.items()},
            "gp_generator": self.gp_generator.get_state(),
        }
        for name, critic in self.critics():
            state[name] = critic.state_dict()
        if self.classifier is not None:
            state["classifier"] = self.classifier.state_dict()
        return state


def init_trainer(config: TrainConfig, device: str | None = None) -> TrainerState:
    """모든 네트워크와 optimizer를 시드 고정으로 초기화합니다."""
    device = device or resolve_device()
    torch.manual_seed(config.seed)
    flags = config.ablation

    generator = build_generator(config).to(device)
    classifier = None
    if flags.cls_loss:
        c, h, w = generator.latent_shape
        classifier = DomainClassifier(
            c * h * w,
            config.classifier,
            negative_slope=config.generator.negative_slope,
            eps=config.loss.eps,
            equalization=flags.equalization,
        ).to(device)
    global_critic = Critic(config.critic).to(device) if flags.adversarial else None
    local_critic = Critic(config.critic).to(device) if flags.local_critic else None
    embedder = build_embedder(config.embedder).to(device)

    def adam(params: list[nn.Parameter]) -> torch.optim.Adam:
        return torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas)

    gen_params = list(generator.parameters())
    if classifier is not None:
        gen_params += list(classifier.parameters())
    optimizers: dict[str, torch.optim.Optimizer] = {"generator": adam(gen_params)}
    for name, critic in (("global_critic", global_critic), ("local_critic", local_critic)):
        if critic is not None:
            optimizers[name] = adam(list(critic.parameters()))
    schedulers = {
        name: torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.lr_decay)
        for name, opt in optimizers.items()
    }

    state = TrainerState(
        config=config,
        generator=generator,
        global_critic=global_critic,
        local_critic=local_critic,
        classifier=classifier,
        embedder=embedder,
        optimizers=optimizers,
        schedulers=schedulers,
        rng=np.random.default_rng(config.seed),
        gp_generator=torch.Generator().manual_seed(config.seed),
        device=device,
    )
    logger.debug("Trainer initialized", seed=config.seed, device=device, optimizers=sorted(optimizers))
    return state


def _check_terms(terms: dict[str, torch.Tensor], step: int) -> None:
    for name, value in terms.items():
        if not bool(torch.isfinite(value).all()):
            logger.error("Non-finite loss term", term=name, step=step)
            raise NonFiniteError(f"non-finite loss term '{name}' at step {step}")


def dual_path_forward(state: TrainerState, batch: PairBatch) -> tuple[GeneratorOutput, GeneratorOutput]:
    """두 경로 입력을 공유 생성기에 통과시킵니다."""
    return state.path_generator(1)(batch.x1), state.path_generator(2)(batch.x2)


def critic_phase(state: TrainerState, batch: PairBatch) -> dict[str, float]:
    """D_g는 (y, y_hat), D_l은 (M*y, M*y_hat)로 갱신합니다. 생성기는 고정."""
    if not state.critics():
        return {"gp": 0.0, "critic": 0.0}

    with torch.no_grad():
        out1, out2 = dual_path_forward(state, batch)
    real = torch.cat([batch.y1, batch.y2])
    fake = torch.cat([out1.image, out2.image])
    mask = torch.cat([batch.m1, batch.m2])
    inputs = {
        "global_critic": (real, fake),
        "local_critic": (real * mask, fake * mask),
    }

    lambda_gp = state.config.loss.lambda_gp
    gp_total = critic_total = 0.0
    for _ in range(state.config.critic_steps):
        gp_total = critic_total = 0.0
        for name, critic in state.critics():
            real_in, fake_in = inputs[name]
            optimizer = state.optimizers[name]
            optimizer.zero_grad(set_to_none=True)
            terms = critic_loss_terms(critic, real_in, fake_in, state.gp_generator)
            loss = terms.total(lambda_gp)
            _check_terms({f"{name}.gp": terms.gp, f"{name}.loss": loss}, state.step)
            loss.backward()
            optimizer.step()
            gp_total += terms.gp.item()
            critic_total += loss.item()
    return {"gp": gp_total, "critic": critic_total}


def classification_term(
    state: TrainerState,
    bottlenecks: list[torch.Tensor],
    batch: PairBatch,
) -> torch.Tensor:
    """열화상 bottleneck과 정답 가시광 bottleneck에 대한 GRL 경유 도메인 분류 손실."""
    if state.classifier is None:
        raise ValueError("classifier is disabled in this configuration")
    visible = state.generator.encode(torch.cat([batch.y1, batch.y2])).bottleneck
    z = torch.cat([*bottlenecks, visible])
    logits = state.classifier.logits(gradient_reversal(z, state.config.loss.lambda_grl))
    return domain_classification_loss_from_logits(logits, batch.domain_labels)


def _frontalization_terms(
    state: TrainerState, out: GeneratorOutput, y: torch.Tensor, m: torch.Tensor
) -> dict[str, torch.Tensor]:
    flags = state.config.ablation
    zero = out.image.new_zeros(())
    if flags.multiscale_pixel:
        pixel = multiscale_pixel_loss(out.images, image_pyramid(y, out.images))
    else:
        pixel = multiscale_pixel_loss({y.shape[-1]: out.image}, {y.shape[-1]: y})
    identity = identity_loss(out.image, y, state.embedder) if flags.identity_loss else zero
    adv_g, adv_l = generator_adversarial_terms(state.global_critic, state.local_critic, out.image, m)
    tv = total_variation_loss(out.image) if flags.total_variation else zero
    return {"pixel": pixel, "id": identity, "adv_g": adv_g, "adv_l": adv_l, "tv": tv}


def generator_phase(state: TrainerState, batch: PairBatch) -> dict[str, float]:
    """전체 목적 함수로 생성기와 분류기를 한 번 갱신합니다. 판별기는 고정."""
    cfg = state.config
    w = cfg.loss
    for _, critic in state.critics():
        critic.requires_grad_(False)
    try:
        optimizer = state.optimizers["generator"]
        optimizer.zero_grad(set_to_none=True)
        out1, out2 = dual_path_forward(state, batch)

        per_path = [
            _frontalization_terms(state, out1, batch.y1, batch.m1),
            _frontalization_terms(state, out2, batch.y2, batch.m2),
        ]
        terms = {k: (per_path[0][k] + per_path[1][k]) / 2 for k in per_path[0]}
        adversarial = terms["adv_g"] + w.lambda_local * terms["adv_l"]
        front = frontalization_total(
            FrontalizationTerms(terms["pixel"], terms["id"], adversarial, terms["tv"]), w
        )

        zero = front.new_zeros(())
        z1, z2 = out1.latent.bottleneck, out2.latent.bottleneck
        terms["contrastive"] = (
            contrastive_loss(z1, z2, batch.labels, w.margin) if cfg.ablation.contrastive_loss else zero
        )
        terms["cls"] = classification_term(state, [z1, z2], batch) if state.classifier is not None else zero

        total = total_objective(front, terms["contrastive"], terms["cls"], w)
        assert isinstance(total, torch.Tensor)
        _check_terms({**terms, "total": total}, state.step)
        total.backward()
        optimizer.step()
    finally:
        for _, critic in state.critics():
            critic.requires_grad_(True)

    record = {k: v.item() for k, v in terms.items()}
    record["total"] = total.item()
    return record


def train_step(state: TrainerState, batch: PairBatch) -> tuple[TrainerState, LossRecord]:
    """판별기 단계 후 생성기 단계를 실행하고 손실 기록을 반환합니다."""
    batch = batch.to(state.device)
    critic_record = critic_phase(state, batch)
    generator_record = generator_phase(state, batch)
    for scheduler in state.schedulers.values():
        scheduler.step()
    state.step += 1
    return state, LossRecord(step=state.step, **critic_record, **generator_record)


@dataclass
class LossLog:
    """JSON-lines 손실 로그."""
    path: Path
    records: list[LossRecord] = field(default_factory=list)

    def reset(self) -> None:
        """로그 파일을 비웁니다."""
        self._write("w", "")

    def append(self, record: LossRecord) -> None:
        """레코드 한 줄을 추가합니다."""
        self._write("a", record.model_dump_json() + "\n")
        self.records.append(record)

    @retry(
        retry=retry_if_exception_type(OSError),
        stop=stop_after_attempt(settings.WRITE_RETRIES),
        wait=wait_exponential(multiplier=0.1, max=1),
        reraise=True,
    )
    def _write(self, mode: str, text: str) -> None:
        with open(self.path, mode, encoding="utf-8") as f:
            f.write(text)


def read_loss_log(path: Path) -> list[LossRecord]:
    """JSON-lines 손실 로그를 읽습니다."""
    with open(path, encoding="utf-8") as f:
        return [LossRecord.model_validate(json.loads(line)) for line in f if line.strip()]


def _save(state: TrainerState, ckpt_dir: Path) -> Path:
    return save_checkpoint(
        ckpt_dir / f"step_{state.step:06d}.ckpt",
        state.config,
        state.step,
        state.state_dict(),
        extra={"rng_state": state.rng.bit_generator.state},
    )


def train(config: TrainConfig, dataset: FaceDataset, run_dir: Path) -> tuple[Path, Path]:
    """config.total_steps 만큼 학습하고 (마지막 체크포인트, 손실 로그) 경로를 반환합니다."""
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error("Cannot create run directory", path=str(ckpt_dir), error=str(e))
        raise CheckpointError(f"cannot create {ckpt_dir}: {e}") from e

    state = init_trainer(config)
    log = LossLog(run_dir / "loss_log.jsonl")
    try:
        log.reset()
    except OSError as e:
        logger.error("Cannot write loss log", path=str(log.path), error=str(e))
        raise
    latest = _save(state, ckpt_dir)

    logger.info(
        "Training started",
        steps=config.total_steps,
        pairs_per_step=config.pairs_per_step,
        identities=len(dataset.trainable_identities),
    )
    for _ in range(config.total_steps):
        batch = sample_dual_path_batch(dataset, config.pairs_per_step, config.same_id_fraction, state.rng)
        state, record = train_step(state, batch)
        log.append(record)
        if state.step % config.log_every == 0:
            logger.info(
                "Training progress",
                step=state.step,
                total=round(record.total, 5),
                pixel=round(record.pixel, 5),
                critic=round(record.critic, 5),
            )
        if state.step % config.checkpoint_every == 0 or state.step == config.total_steps:
            latest = _save(state, ckpt_dir)

    logger.info("Training finished", step=state.step, checkpoint=str(latest), log=str(log.path))
    return latest, log.path


def ablation_ladder(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """baseline에서 구성 요소를 하나씩 누적해 켜는 8단 설정 목록."""
    flags = base.ablation.model_copy(update={name: False for name in LADDER_FLAGS})
    rungs = [("baseline", base.model_copy(update={"ablation": flags}, deep=True))]
    for name in LADDER_FLAGS:
        flags = flags.model_copy(update={name: True})
        rungs.append((f"+{name}", base.model_copy(update={"ablation": flags}, deep=True)))
    return rungs
