"""환경변수 기반 설정 관리."""

import logging
import logging.config
import os
from typing import Any

import structlog
import torch


class Config:
    """프로세스 설정 클래스."""

    # 출력 설정
    OUTPUT_ROOT: str = os.getenv("XSF_OUTPUT_ROOT", "runs")

    # 로깅 설정
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").upper()
    LOG_FORMAT: str = os.getenv("LOG_FORMAT", "console").lower()

    # 연산 설정
    DEVICE: str = os.getenv("XSF_DEVICE", "cpu")
    NUM_THREADS: int = int(os.getenv("XSF_NUM_THREADS", "0"))

    # 파일 쓰기 재시도
    WRITE_RETRIES: int = int(os.getenv("XSF_WRITE_RETRIES", "3"))

    @classmethod
    def get_log_config(cls) -> dict[str, Any]:
        """로깅 설정을 반환합니다."""
        renderer: Any
        if cls.LOG_FORMAT == "json":
            renderer = structlog.processors.JSONRenderer()
        else:
            renderer = structlog.dev.ConsoleRenderer(colors=False)
        return {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "structured": {
                    "()": structlog.stdlib.ProcessorFormatter,
                    "processor": renderer,
                    "foreign_pre_chain": [
                        structlog.stdlib.add_log_level,
                        structlog.processors.TimeStamper(fmt="iso"),
                    ],
                },
            },
            "handlers": {
                "default": {
                    "formatter": "structured",
                    "class": "logging.StreamHandler",
                    # stdout은 CLI 요약 출력용
                    "stream": "ext://sys.stderr",
                },
            },
            "root": {
                "level": cls.LOG_LEVEL,
                "handlers": ["default"],
            },
            "loggers": {
                "PIL": {
                    "level": "WARNING",
                    "handlers": ["default"],
                    "propagate": False,
                },
            },
        }


def configure_logging(level: str | None = None) -> None:
    """structlog과 표준 logging을 설정합니다."""
    log_config = Config.get_log_config()
    if level:
        log_config["root"]["level"] = level.upper()
    logging.config.dictConfig(log_config)
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def resolve_device() -> str:
    """연산 디바이스를 반환하고 스레드 수를 적용합니다."""
    if Config.NUM_THREADS > 0:
        torch.set_num_threads(Config.NUM_THREADS)
    return Config.DEVICE


# 글로벌 설정 인스턴스
config = Config()
