import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"DOMOTRC1"
FORMAT_VERSION = 1
DEFAULT_TRACE_CAP = 100_000_000
ARRAY_ORDER = ("x_local", "m_local", "grads", "x_bar", "x_server", "m_server")


class TraceFormatError(ValueError):
    """trace 파일 형식 오류"""


class TraceTooLargeError(ValueError):
    """R·P·K·d가 상한 초과"""


@dataclass(eq=False)
class Trace:
    """실행 기록

    x_local, m_local: (R, P+1, S, d), p=0은 pre-fusion 적용 후 모델과 시작 버퍼
    grads:            (R, P, S, d), 단계 p에서 실제로 사용한 gradient
    x_bar:            (R, P+1, d), 참여 클라이언트 평균 모델
    x_server:         (R+1, d), 서버 모델 x_r
    m_server:         (R+1, d), 서버 모멘텀 m_r
    participants:     (R, S), 라운드별 참여 클라이언트 id (오름차순)
    """

    config: Any
    num_clients: int
    seed: int
    batch_size: Optional[int]
    participants: np.ndarray
    x_local: np.ndarray
    m_local: np.ndarray
    grads: np.ndarray
    x_bar: np.ndarray
    x_server: np.ndarray
    m_server: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return self.x_local.shape[0]

    @property
    def steps(self) -> int:
        return self.grads.shape[1]

    @property
    def num_participants(self) -> int:
        return self.x_local.shape[2]

    @property
    def dim(self) -> int:
        return self.x_local.shape[3]

    @property
    def full_participation(self) -> bool:
        return self.num_participants == self.num_clients


def check_trace_size(rounds: int, steps: int, num_clients: int, dim: int, cap: int = DEFAULT_TRACE_CAP) -> None:
    values = rounds * steps * num_clients * dim
    if values > cap:
        raise TraceTooLargeError(f"trace 크기 R·P·K·d={values}가 상한 {cap} 초과")


class TraceRecorder:
    """라운드 실행 중 trace 배열 채우기"""

    def __init__(
        self, rounds: int, steps: int, participants: int, num_clients: int, dim: int, cap: int = DEFAULT_TRACE_CAP
    ):
        check_trace_size(rounds, steps, num_clients, dim, cap)
        self.num_clients = num_clients
        self.participants = np.zeros((rounds, participants), dtype=np.int64)
        self.x_local = np.zeros((rounds, steps + 1, participants, dim))
        self.m_local = np.zeros((rounds, steps + 1, participants, dim))
        self.grads = np.zeros((rounds, steps, participants, dim))
        self.x_server = np.zeros((rounds + 1, dim))
        self.m_server = np.zeros((rounds + 1, dim))

    def record_participants(self, round_index: int, clients) -> None:
        self.participants[round_index] = clients

    def record_step(
        self, round_index: int, slot: int, step: int, x: np.ndarray, m: np.ndarray, grad: Optional[np.ndarray] = None
    ) -> None:
        """단계 step 직후 상태 기록 (grad는 step−1 단계에서 사용한 gradient)"""
        self.x_local[round_index, step, slot] = x
        self.m_local[round_index, step, slot] = m
        if grad is not None:
            self.grads[round_index, step - 1, slot] = grad

    def record_server(self, round_index: int, x: np.ndarray, m: np.ndarray) -> None:
        self.x_server[round_index] = x
        self.m_server[round_index] = m

    def finalize(self, config, seed: int, batch_size: Optional[int]) -> Trace:
        return Trace(
            config=config,
            num_clients=self.num_clients,
            seed=seed,
            batch_size=batch_size,
            participants=self.participants,
            x_local=self.x_local,
            m_local=self.m_local,
            grads=self.grads,
            x_bar=self.x_local.mean(axis=2),
            x_server=self.x_server,
            m_server=self.m_server,
        )


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_trace(trace: Trace, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    """trace를 바이너리 + JSON 사이드카로 저장

    바이너리: MAGIC(8B), int64 (R, P, S, K, d), participants(int64),
    이후 float64 배열을 ARRAY_ORDER 순서대로 행 우선 저장 (모두 little-endian).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = np.array(
        [trace.rounds, trace.steps, trace.num_participants, trace.num_clients, trace.dim], dtype="<i8"
    )
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(dims.tobytes())
        f.write(np.ascontiguousarray(trace.participants, dtype="<i8").tobytes())
        for name in ARRAY_ORDER:
            f.write(np.ascontiguousarray(getattr(trace, name), dtype="<f8").tobytes())

    config = trace.config.model_dump() if hasattr(trace.config, "model_dump") else trace.config
    sidecar = {
        "format_version": FORMAT_VERSION,
        "dims": {"R": trace.rounds, "P": trace.steps, "S": trace.num_participants, "K": trace.num_clients,
                 "d": trace.dim},
        "arrays": list(ARRAY_ORDER),
        "config": config,
        "seed": trace.seed,
        "batch_size": trace.batch_size,
        "meta": {**trace.meta, **(meta or {})},
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, ensure_ascii=False)
    logger.info("trace 저장: %s", path)
    return path


def load_trace(path: Union[str, Path], config_loader=None) -> Tuple[Trace, Dict[str, Any]]:
    """저장된 trace 로드

    Args:
        path: 바이너리 파일 경로
        config_loader: 사이드카의 config dict를 설정 객체로 바꾸는 함수 (기본: MethodConfig)
    """
    path = Path(path)
    try:
        with open(sidecar_path(path), encoding="utf-8") as f:
            sidecar = json.load(f)
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise TraceFormatError(f"trace 파일 없음: {e.filename}") from None

    if raw[: len(MAGIC)] != MAGIC:
        raise TraceFormatError("trace 매직 바이트 불일치")
    offset = len(MAGIC)
    rounds, steps, participants, num_clients, dim = (int(v) for v in np.frombuffer(raw, "<i8", 5, offset))
    offset += 5 * 8

    shapes = {
        "x_local": (rounds, steps + 1, participants, dim),
        "m_local": (rounds, steps + 1, participants, dim),
        "grads": (rounds, steps, participants, dim),
        "x_bar": (rounds, steps + 1, dim),
        "x_server": (rounds + 1, dim),
        "m_server": (rounds + 1, dim),
    }
    expected = offset + 8 * rounds * participants + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != expected:
        raise TraceFormatError(f"trace 파일 크기 {len(raw)} != 예상 크기 {expected}")

    ids = np.frombuffer(raw, "<i8", rounds * participants, offset).reshape(rounds, participants).astype(np.int64)
    offset += 8 * rounds * participants
    arrays = {}
    for name in ARRAY_ORDER:
        count = int(np.prod(shapes[name]))
        arrays[name] = np.frombuffer(raw, "<f8", count, offset).reshape(shapes[name]).astype(np.float64)
        offset += 8 * count

    if config_loader is None:
        from .fedopt import MethodConfig

        config_loader = MethodConfig.model_validate
    config = config_loader(sidecar["config"])
    trace = Trace(
        config=config,
        num_clients=num_clients,
        seed=int(sidecar["seed"]),
        batch_size=sidecar["batch_size"],
        participants=ids,
        meta=sidecar.get("meta", {}),
        **arrays,
    )
    return trace, trace.meta
