"""패키지 공통 예외 정의."""


class FrontalizerError(Exception):
    """모든 패키지 예외의 기반 클래스."""


class ShapeMismatchError(FrontalizerError, ValueError):
    """텐서 크기 또는 해상도가 맞지 않음."""


class NonFiniteError(FrontalizerError, ValueError):
    """NaN 또는 Inf 값이 발견됨."""


class NonDifferentiableCriticError(FrontalizerError):
    """판별기 출력이 입력에 대해 미분 불가능함."""


class LandmarkError(FrontalizerError, ValueError):
    """랜드마크가 유효하지 않음."""


class ManifestError(FrontalizerError):
    """매니페스트 파싱 또는 검증 실패."""


class PreprocessError(FrontalizerError):
    """이미지 디코딩 실패."""


class CheckpointError(FrontalizerError):
    """체크포인트 읽기/쓰기 실패."""


class ConfigError(FrontalizerError, ValueError):
    """설정 값 또는 오버라이드 키가 유효하지 않음."""


class ProtocolError(FrontalizerError):
    """갤러리/프로브 검증 프로토콜 위반."""


class InvalidProbabilityError(FrontalizerError, ValueError):
    """확률 값이 (0, 1) 범위를 벗어남."""
