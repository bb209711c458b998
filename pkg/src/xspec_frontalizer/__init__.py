"""Cross-spectrum face frontalization 패키지."""

__version__ = "0.1.0"
__description__ = "열화상 측면 얼굴에서 가시광 정면 얼굴을 합성하는 도메인 불변 GAN"
