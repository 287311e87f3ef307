import hashlib

import numpy as np


def purpose_tag(purpose: str) -> int:
    """용도 문자열을 64비트 정수 태그로 변환"""
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """(seed, 용도, 키) 조합별 독립 난수 스트림 생성

    같은 입력이면 실행 순서와 무관하게 항상 같은 난수열을 돌려준다.

    Args:
        seed: 실험 시드 (0 이상)
        purpose: 스트림 용도 (예: "batch", "partition")
        keys: 추가 키 (client id, round 등)
    """
    entropy = [int(seed), purpose_tag(purpose), *(int(k) for k in keys)]
    if any(value < 0 for value in entropy):
        raise ValueError(f"시드와 키는 0 이상이어야 함: seed={seed}, keys={keys}")
    return np.random.default_rng(np.random.SeedSequence(entropy))
