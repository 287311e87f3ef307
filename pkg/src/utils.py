import logging
import os

from dotenv import load_dotenv

from .trace import DEFAULT_TRACE_CAP

DEFAULT_LOG_LEVEL = "WARNING"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def load_env() -> None:
    """.env 파일이 있으면 환경변수로 로드 (이미 설정된 값은 유지)"""
    load_dotenv(override=False)


def get_int_env(name: str, default: int, minimum: int = 1) -> int:
    """정수 환경변수 조회"""
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{name} 환경변수는 정수여야 함: {raw!r}") from None
    if value < minimum:
        raise ValueError(f"{name} 환경변수는 {minimum} 이상이어야 함: {value}")
    return value


def get_workers() -> int:
    return get_int_env("DOMO_WORKERS", 1)


def get_trace_cap() -> int:
    return get_int_env("DOMO_TRACE_CAP", DEFAULT_TRACE_CAP)


def get_log_level() -> str:
    level = os.getenv("DOMO_LOG_LEVEL", DEFAULT_LOG_LEVEL).strip().upper()
    # getLevelNamesMapping은 3.11+; 3.10에서는 동일한 내부 매핑 사용
    names = logging.getLevelNamesMapping() if hasattr(logging, "getLevelNamesMapping") else logging._nameToLevel
    if level not in names:
        raise ValueError(f"DOMO_LOG_LEVEL 환경변수 값이 잘못됨: {level}")
    return level


def setup_logging() -> None:
    """DOMO_LOG_LEVEL 기준 루트 로거 설정"""
    logging.basicConfig(level=get_log_level(), format=LOG_FORMAT)
