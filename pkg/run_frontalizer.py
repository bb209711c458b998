#!/usr/bin/env python3
"""
xspec-frontalizer 실행 스크립트

설치 없이 소스 트리에서 바로 실행하기 위한 엔트리 포인트입니다.

사용법:
    python run_frontalizer.py gen-data --identities 16 --poses=-60,-30,30,60
    python run_frontalizer.py train --manifest runs/gen-data-.../manifest.csv --steps 500
    python run_frontalizer.py evaluate --manifest ... --checkpoint ... --protocol all
"""

import os
import sys

# 현재 디렉토리를 Python 경로에 추가
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))

if __name__ == "__main__":
    try:
        from xspec_frontalizer.main import main
    except ImportError as e:
        print(f"Import 오류: {e}")
        print("의존성을 설치했는지 확인해주세요:")
        print("uv pip install -r requirements.txt")
        sys.exit(1)
    sys.exit(main())
