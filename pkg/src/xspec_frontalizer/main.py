"""xspec-frontalizer 명령행 진입점.

하위 명령: gen-data, train, evaluate, synthesize, ablate.
모든 실행은 출력 디렉터리에 resolved_config.json 스냅샷을 남긴다.
종료 코드: 0 성공, 2 사용법/설정 오류, 1 실행 실패.
"""

import argparse
import csv
import io
import json
import sys
from collections.abc import Sequence
from datetime import datetime
from pathlib import Path
from typing import Any

import structlog
import torch
from pydantic import ValidationError

from . import __version__
from .checkpoint import atomic_write_bytes, load_generator
from .config import config, configure_logging
from .data import FaceDataset, image_grid, load_image, load_manifest, save_image
from .embedders import build_embedder
from .errors import ConfigError, FrontalizerError
from .evaluation import (
    FRONTAL,
    PROFILE,
    build_protocol,
    generator_frontalizer,
    latent_separation,
    protocol_names,
    roc_metrics,
    score_pairs,
    write_report,
    write_roc_csv,
    write_scores_csv,
)
from .synthetic import generate_synthetic_dataset
from .training import ablation_ladder, train
from .types import TrainConfig, VerificationReport

logger = structlog.get_logger(__name__)

SUMMARY_COLUMNS = ["rung", "name", "status", "auc", "eer", "tar_at_far_1", "tar_at_far_5", "checkpoint", "error"]
SAMPLE_PROBES = 4


def parse_override(text: str) -> tuple[list[str], Any]:
    """'a.b=value' 를 (키 경로, 값)으로 나눕니다. 값은 JSON으로 해석하고 실패하면 문자열."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key.path=value, got '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_train_config(path: Path | None = None, overrides: Sequence[str] = ()) -> TrainConfig:
    """JSON 설정 파일과 dotted-key 오버라이드로 TrainConfig를 만듭니다."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")

    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{text}': '{key}' is not a section")
            node = child
        node[keys[-1]] = value

    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def make_run_dir(command: str, args: argparse.Namespace) -> Path:
    """--run-dir 또는 XSF_OUTPUT_ROOT 아래 새 실행 디렉터리."""
    if getattr(args, "run_dir", None):
        run_dir = Path(args.run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        run_dir = Path(args.output_root) / f"{command}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_snapshot(run_dir: Path, args: argparse.Namespace, train_config: TrainConfig | None = None) -> Path:
    """명령 재실행에 필요한 인자와 해석된 설정을 저장합니다."""
    arguments = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "handler" and not callable(v)
    }
    snapshot: dict[str, Any] = {"version": __version__, "command": args.command, "arguments": arguments}
    if train_config is not None:
        snapshot["train_config"] = train_config.model_dump(mode="json")
    text = json.dumps(snapshot, indent=2, sort_keys=True, default=str)
    return atomic_write_bytes(run_dir / "resolved_config.json", text.encode("utf-8"))


def _parse_poses(values: Sequence[str]) -> list[float]:
    poses: list[float] = []
    for value in values:
        for token in value.split(","):
            if token.strip():
                try:
                    poses.append(float(token))
                except ValueError as e:
                    raise ConfigError(f"invalid pose '{token}'") from e
    if not poses:
        raise ConfigError("at least one pose is required")
    return poses


def _split(dataset: FaceDataset, train_config: TrainConfig, split: str) -> list[str]:
    train_ids, test_ids = dataset.split_identities(train_config.train_fraction)
    return {"train": train_ids, "test": test_ids, "all": dataset.identities}[split]


def cmd_gen_data(args: argparse.Namespace) -> Path:
    """합성 데이터셋을 생성합니다."""
    poses = _parse_poses(args.poses)
    out_dir = Path(args.out) if args.out else make_run_dir("gen-data", args)
    manifest = generate_synthetic_dataset(
        args.identities, poses, out_dir, seed=args.seed, expression_fraction=args.expression_fraction
    )
    write_snapshot(out_dir, args)
    n_images = args.identities * (2 + len(poses))
    print(f"identities={args.identities} poses={len(poses)} images={n_images} manifest={manifest}")
    return manifest


def cmd_train(args: argparse.Namespace) -> tuple[Path, Path]:
    """학습용 identity 분할로 학습합니다."""
    overrides = list(args.override)
    if args.steps is not None:
        overrides.append(f"total_steps={args.steps}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    train_config = load_train_config(args.config, overrides)
    dataset = load_manifest(args.manifest)
    train_ids = _split(dataset, train_config, "train")

    run_dir = make_run_dir("train", args)
    write_snapshot(run_dir, args, train_config)
    checkpoint, log_path = train(train_config, dataset.subset(train_ids), run_dir)
    print(f"checkpoint={checkpoint} log={log_path}")
    return checkpoint, log_path


def _evaluate_protocols(
    dataset: FaceDataset,
    identities: list[str],
    protocols: list[str],
    embedder: torch.nn.Module,
    frontalize: Any,
    run_dir: Path,
) -> dict[str, VerificationReport]:
    reports: dict[str, VerificationReport] = {}
    for name in protocols:
        gallery, probe = build_protocol(dataset, identities, name)
        scored = score_pairs(gallery, probe, embedder, frontalize)
        report = roc_metrics(scored.scores, protocol=name)
        suffix = "" if name == PROFILE else f"_{name}"
        write_report(report, run_dir / f"report{suffix}.json")
        write_scores_csv(scored, run_dir / f"scores{suffix}.csv")
        write_roc_csv(report.roc, run_dir / f"roc{suffix}.csv")
        reports[name] = report
    return reports


def cmd_evaluate(args: argparse.Namespace) -> VerificationReport:
    """갤러리/프로브 검증 보고서를 만듭니다. --raw 는 정면화 없이 평가."""
    if args.raw == bool(args.checkpoint):
        raise ConfigError("evaluate needs exactly one of --checkpoint or --raw")

    generator = None
    if args.checkpoint:
        generator, train_config = load_generator(args.checkpoint)
        if args.config or args.override:
            logger.warning("Ignoring --config/--override, using the checkpoint's configuration")
    else:
        train_config = load_train_config(args.config, args.override)

    dataset = load_manifest(args.manifest)
    identities = _split(dataset, train_config, args.split)
    protocols = protocol_names(dataset) if args.protocol == "all" else [args.protocol]

    run_dir = make_run_dir("evaluate", args)
    write_snapshot(run_dir, args, train_config)
    embedder = build_embedder(train_config.embedder)
    frontalize = generator_frontalizer(generator) if generator is not None else None
    reports = _evaluate_protocols(dataset, identities, protocols, embedder, frontalize, run_dir)

    if generator is not None:
        separation = latent_separation(generator, dataset, identities)
        atomic_write_bytes(run_dir / "latent_separation.json", separation.model_dump_json(indent=2).encode("utf-8"))

    primary = reports[protocols[0]]
    summary = {name: {"auc": r.auc, "eer": r.eer, "tar_at_far_1": r.tar_at_far_1, "tar_at_far_5": r.tar_at_far_5}
               for name, r in reports.items()}
    print(json.dumps({"run_dir": str(run_dir), "reports": summary}, indent=2))
    return primary


def cmd_synthesize(args: argparse.Namespace) -> list[Path]:
    """체크포인트로 입력 이미지를 정면화하거나 포즈 스윕 그리드를 그립니다."""
    if not args.inputs and not args.pose_sweep:
        raise ConfigError("synthesize needs --inputs or --pose-sweep")
    generator, train_config = load_generator(args.checkpoint)
    run_dir = make_run_dir("synthesize", args)
    write_snapshot(run_dir, args, train_config)
    frontalize = generator_frontalizer(generator)
    written: list[Path] = []

    for path in args.inputs or []:
        x = load_image(Path(path))
        y_hat = frontalize(x[None])[0]
        if float(y_hat.min()) < 0.0 or float(y_hat.max()) > 1.0:
            logger.warning("Synthesized values outside [0, 1] were clipped", input=str(path))
        written.append(save_image(y_hat, run_dir / f"{Path(path).stem}_frontal.png"))

    if args.pose_sweep:
        if not args.manifest:
            raise ConfigError("--pose-sweep needs --manifest")
        dataset = load_manifest(args.manifest)
        identity = args.identity or _split(dataset, train_config, "test")[0]
        profiles = sorted(dataset.thermal_profiles(identity), key=lambda r: r.pose)
        if not profiles:
            raise ConfigError(f"identity {identity} has no profile images")
        inputs = torch.stack([dataset.image(r) for r in profiles])
        outputs = frontalize(inputs)
        reference = dataset.image(dataset.visible_frontal(identity))
        grid = image_grid([[*inputs, reference], [*outputs, reference]])
        written.append(save_image(grid, run_dir / f"pose_sweep_{identity}.png"))
        logger.info("Pose sweep rendered", identity=identity, poses=[r.pose for r in profiles])

    print(f"wrote {len(written)} image(s) to {run_dir}")
    return written


def _summary_csv(rows: list[dict[str, Any]]) -> bytes:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue().encode("utf-8")


def cmd_ablate(args: argparse.Namespace) -> Path:
    """누적 ablation ladder의 각 단계를 학습하고 평가합니다."""
    overrides = list(args.override)
    if args.steps is not None:
        overrides.append(f"total_steps={args.steps}")
    base = load_train_config(args.config, overrides)
    dataset = load_manifest(args.manifest)
    train_ids, test_ids = dataset.split_identities(base.train_fraction)
    train_set = dataset.subset(train_ids)
    embedder = build_embedder(base.embedder)

    run_dir = make_run_dir("ablate", args)
    write_snapshot(run_dir, args, base)
    gallery, probe = build_protocol(dataset, test_ids, PROFILE)
    sample_records = [dataset.thermal_profiles(i)[0] for i in test_ids[:SAMPLE_PROBES]]
    samples = torch.stack([dataset.image(r) for r in sample_records])

    rows: list[dict[str, Any]] = []
    columns: list[torch.Tensor] = []
    for index, (name, rung_config) in enumerate(ablation_ladder(base), start=1):
        rung_dir = run_dir / f"{index:02d}_{name.lstrip('+')}"
        row: dict[str, Any] = {"rung": index, "name": name}
        try:
            checkpoint, _ = train(rung_config, train_set, rung_dir)
            generator, _ = load_generator(checkpoint)
            frontalize = generator_frontalizer(generator)
            scored = score_pairs(gallery, probe, embedder, frontalize)
            report = roc_metrics(scored.scores, protocol=PROFILE)
            write_report(report, rung_dir / "report.json")
            columns.append(frontalize(samples))
            row.update(
                status="ok", auc=report.auc, eer=report.eer, tar_at_far_1=report.tar_at_far_1,
                tar_at_far_5=report.tar_at_far_5, checkpoint=str(checkpoint), error="",
            )
        except Exception as e:
            logger.exception("Ablation rung failed", rung=name, error=str(e))
            columns.append(torch.ones_like(samples))
            row.update(status="failed", error=str(e))
        rows.append(row)

    references = [dataset.image(dataset.visible_frontal(r.identity)) for r in sample_records]
    strip = [[samples[i], *(c[i] for c in columns), references[i]] for i in range(len(sample_records))]
    save_image(image_grid(strip), run_dir / "ablation_samples.png")
    summary = atomic_write_bytes(run_dir / "summary.csv", _summary_csv(rows))
    failed = sum(1 for r in rows if r["status"] != "ok")
    logger.info("Ablation finished", rungs=len(rows), failed=failed, summary=str(summary))
    print(f"summary={summary} rungs={len(rows)} failed={failed}")
    return summary


def build_parser() -> argparse.ArgumentParser:
    """서브커맨드 파서를 만듭니다."""
    parser = argparse.ArgumentParser(
        prog="xspec-frontalizer",
        description="Thermal-to-visible face frontalization toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="override LOG_LEVEL")
    parser.add_argument("--output-root", default=config.OUTPUT_ROOT, help="root for run directories")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="JSON file with TrainConfig fields")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. loss.lambda_id=0")

    p = sub.add_parser("gen-data", help="write a synthetic paired thermal/visible dataset")
    p.add_argument("--identities", type=int, default=16)
    p.add_argument("--poses", nargs="+", default=["-60,-30,30,60"], help="yaw angles, comma or space separated")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--expression-fraction", type=float, default=0.5, help="share of thermal images with an expression")
    p.add_argument("--out", type=Path, default=None, help="dataset directory (default: new run directory)")
    p.add_argument("--run-dir", type=Path, default=None)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train the frontalization model on the training split")
    p.add_argument("--manifest", type=Path, required=True)
    with_config(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--run-dir", type=Path, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="gallery/probe verification report")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--raw", action="store_true", help="score raw probes without frontalization")
    p.add_argument("--protocol", default=PROFILE, help=f"{PROFILE}, {FRONTAL}, poseN or all")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    with_config(p)
    p.add_argument("--run-dir", type=Path, default=None)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("synthesize", help="frontalize images or render a pose sweep")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--inputs", nargs="*", type=Path, default=None)
    p.add_argument("--pose-sweep", action="store_true")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--identity", default=None)
    p.add_argument("--run-dir", type=Path, default=None)
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("ablate", help="train and evaluate the cumulative ablation ladder")
    p.add_argument("--manifest", type=Path, required=True)
    with_config(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--run-dir", type=Path, default=None)
    p.set_defaults(handler=cmd_ablate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """메인 함수."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_level)
    try:
        args.handler(args)
        return 0
    except ConfigError as e:
        logger.error("Invalid arguments", command=args.command, error=str(e))
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1
    except (FrontalizerError, OSError) as e:
        logger.error("Command failed", command=args.command, error=str(e))
        print(f"{parser.prog} {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
