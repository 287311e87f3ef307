import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .objectives import ClientObjective, NonFiniteError, accuracy, global_grad, global_loss, stochastic_grad
from .partition import sample_batch
from .rng import stream
from .trace import DEFAULT_TRACE_CAP, Trace, TraceRecorder

logger = logging.getLogger(__name__)

DEFAULT_MU_S = 0.9
DEFAULT_MU_L = 0.6
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.9
DEFAULT_ETA = 0.01

# 방법별 고정 상수 (override 불가)
METHOD_TABLE: Dict[str, Dict] = {
    "fedavg": {"mu_s": 0.0, "mu_l": 0.0, "boundary": "reset", "fusion": "none"},
    "fedavgsm": {"mu_l": 0.0, "boundary": "reset", "fusion": "none"},
    "fedavglm": {"mu_s": 0.0, "boundary": "average", "fusion": "none"},
    "fedavglm-z": {"mu_s": 0.0, "boundary": "reset", "fusion": "none"},
    "fedavgslm": {"boundary": "average", "fusion": "none"},
    "fedavgslm-z": {"boundary": "reset", "fusion": "none"},
    "domo": {"boundary": "reset", "fusion": "pre"},
    "domo-s": {"boundary": "reset", "fusion": "intra"},
}
METHOD_NAMES = tuple(METHOD_TABLE)

HISTORY_COLUMNS = ["round", "loss", "grad_norm_sq", "divergence", "comm_floats"]
TEST_COLUMN = "test_accuracy"


class MethodConfigError(ValueError):
    """방법 설정 오류"""


class DivergenceError(RuntimeError):
    """학습 중 NaN/Inf 발생 (round, step, client 위치 포함)"""

    def __init__(self, round_index: int, step: Optional[int] = None, client: Optional[int] = None):
        where = f"round={round_index}"
        if step is not None:
            where += f", step={step}"
        if client is not None:
            where += f", client={client}"
        super().__init__(f"발산 감지 ({where})")
        self.round = round_index
        self.step = step
        self.client = client


class MethodConfig(BaseModel):
    """(μ_s, μ_l, 경계 규칙, fusion 방식, α, β, η, P, S) 설정"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "custom"
    mu_s: float = Field(DEFAULT_MU_S, ge=0.0, lt=1.0)
    mu_l: float = Field(DEFAULT_MU_L, ge=0.0, lt=1.0)
    boundary: Literal["reset", "average"] = "reset"
    fusion: Literal["none", "pre", "intra"] = "none"
    alpha: float = Field(DEFAULT_ALPHA, gt=0.0)
    beta: float = Field(DEFAULT_BETA, ge=0.0)
    eta: float = Field(DEFAULT_ETA, gt=0.0)
    P: int = Field(1, ge=1)
    participation: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _fusion_needs_server_momentum(self):
        if self.fusion != "none" and self.mu_s <= 0.0:
            raise ValueError(f"fusion={self.fusion}에는 mu_s > 0 필요")
        return self

    def participants_per_round(self, num_clients: int) -> int:
        """라운드당 참여 클라이언트 수 S (K 대비 검증 포함)"""
        selected = self.participation or num_clients
        if selected > num_clients:
            raise MethodConfigError(f"participation {selected} > 클라이언트 수 {num_clients}")
        if self.boundary == "average" and selected < num_clients:
            raise MethodConfigError("boundary=average는 부분 참여(S < K)와 함께 쓸 수 없음")
        return selected

    @property
    def floats_per_participant(self) -> int:
        """참여자 1명당 라운드 통신량 (d 단위, 상향+하향)"""
        return 4 if self.boundary == "average" else 2


def method_from_name(name: str, **overrides) -> MethodConfig:
    """방법 이름으로 MethodConfig 생성

    고정되지 않은 상수(μ_s, μ_l, α, β, η, P, participation)만 override할 수 있다.
    """
    key = name.lower()
    if key not in METHOD_TABLE:
        raise MethodConfigError(f"알 수 없는 방법: {name} (가능: {', '.join(METHOD_NAMES)})")
    pinned = METHOD_TABLE[key]
    clash = sorted(set(overrides) & (set(pinned) | {"name"}))
    if clash:
        raise MethodConfigError(f"{key}에서 고정된 상수는 바꿀 수 없음: {clash}")
    values = {"name": key, "beta": DEFAULT_BETA if pinned["fusion"] != "none" else 0.0}
    values.update(overrides)
    values.update(pinned)
    return MethodConfig(**values)


def steps_from_epochs(epochs: float, shard_size: int, batch_size: Optional[int]) -> int:
    """로컬 epoch E를 로컬 단계 수 P = ceil(E·|shard|/b)로 변환"""
    if epochs <= 0:
        raise MethodConfigError(f"epoch는 양수여야 함: {epochs}")
    if batch_size is None:
        return max(1, math.ceil(epochs))
    return max(1, math.ceil(epochs * shard_size / batch_size))


def infer_server_momentum(x_prev, x_cur, alpha: float, eta: float, P: int) -> np.ndarray:
    """직전/현재 서버 모델로 서버 모멘텀 복원: m_r = (x_{r−1} − x_r)/(αηP)"""
    if alpha <= 0 or eta <= 0 or P <= 0:
        raise MethodConfigError(f"alpha, eta, P는 양수여야 함: {alpha}, {eta}, {P}")
    diff = np.asarray(x_prev, dtype=np.float64) - np.asarray(x_cur, dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise NonFiniteError("서버 모델에 NaN/Inf 포함")
    return diff / (alpha * eta * P)


@dataclass
class ServerState:
    """서버 상태 (x_r, x_{r−1}, m_r, round)

    boundary=average이면 직전 라운드 로컬 버퍼 평균도 함께 보관한다.
    """

    x_cur: np.ndarray
    x_prev: np.ndarray
    m_server: np.ndarray
    round: int = 0
    local_momentum: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, x0) -> "ServerState":
        x = np.array(x0, dtype=np.float64, copy=True)
        return cls(x_cur=x, x_prev=x.copy(), m_server=np.zeros_like(x), round=0)

    def to_dict(self) -> Dict:
        return {
            "round": self.round,
            "x_cur": self.x_cur.tolist(),
            "x_prev": self.x_prev.tolist(),
            "m_server": self.m_server.tolist(),
            "local_momentum": None if self.local_momentum is None else self.local_momentum.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ServerState":
        local = data.get("local_momentum")
        return cls(
            x_cur=np.array(data["x_cur"], dtype=np.float64),
            x_prev=np.array(data["x_prev"], dtype=np.float64),
            m_server=np.array(data["m_server"], dtype=np.float64),
            round=int(data["round"]),
            local_momentum=None if local is None else np.array(local, dtype=np.float64),
        )


@dataclass
class ClientState:
    client_id: int
    x_local: np.ndarray
    m_local: np.ndarray


@dataclass
class RoundResult:
    """라운드 결과: 참여자별 d^{(k)}_r, 최종 로컬 모델/버퍼, 통신량"""

    d: Dict[int, np.ndarray]
    participants: List[int]
    floats_sent_up: int
    floats_sent_down: int
    final_models: Dict[int, np.ndarray] = field(default_factory=dict)
    final_momenta: Dict[int, np.ndarray] = field(default_factory=dict)


def local_round(
    client: ClientState,
    obj: ClientObjective,
    cfg: MethodConfig,
    m_server: np.ndarray,
    rng: np.random.Generator,
    shard=None,
    batch_size: Optional[int] = 32,
    round_index: int = 0,
    recorder: Optional[TraceRecorder] = None,
    slot: int = 0,
) -> Tuple[np.ndarray, ClientState]:
    """클라이언트 로컬 학습 P단계

    fusion 변위(ηβP·m_r 또는 단계별 ηβ·m_r)는 모델에만 적용되고
    로컬 버퍼와 d에는 들어가지 않는다.

    Args:
        client: 수신 모델과 시작 버퍼
        obj: 클라이언트 목적함수
        cfg: 방법 설정
        m_server: 클라이언트가 복원한 서버 모멘텀 m_r
        rng: 배치 샘플링 스트림
        shard: 목적함수 샘플 인덱스 (기본: 전체)
        batch_size: 미니배치 크기 (None이면 전체 배치)
        round_index: 라운드 번호 (오류 위치/trace 기록용)
        recorder: trace 기록기
        slot: trace 안의 참여자 위치
    """
    steps = cfg.P
    x = np.array(client.x_local, dtype=np.float64, copy=True)
    m = np.array(client.m_local, dtype=np.float64, copy=True)
    shard = np.arange(obj.num_samples) if shard is None else np.asarray(shard, dtype=np.int64)
    total = np.zeros_like(x)

    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.fusion == "pre":
            x = x - (cfg.eta * cfg.beta * steps) * m_server
            if not np.all(np.isfinite(x)):
                raise DivergenceError(round_index, 0, client.client_id)
        if recorder is not None:
            recorder.record_step(round_index, slot, 0, x, m)

        for p in range(steps):
            batch = shard if batch_size is None else sample_batch(shard, batch_size, rng)
            try:
                grad = stochastic_grad(obj, x, batch)
            except NonFiniteError as e:
                raise DivergenceError(round_index, p, client.client_id) from e
            m = cfg.mu_l * m + grad
            x = x - cfg.eta * m
            if cfg.fusion == "intra":
                x = x - (cfg.eta * cfg.beta) * m_server
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(m))):
                raise DivergenceError(round_index, p, client.client_id)
            total = total + m
            if recorder is not None:
                recorder.record_step(round_index, slot, p + 1, x, m, grad)

    return total / steps, ClientState(client.client_id, x, m)


def server_round(server: ServerState, results: RoundResult, cfg: MethodConfig) -> ServerState:
    """서버 집계: m_{r+1} = μ_s·m_r + mean(d), x_{r+1} = x_r − αηP·m_{r+1}

    참여자 합은 client id 오름차순으로 왼쪽부터 더한다.
    """
    ids = sorted(results.d)
    if not ids:
        raise MethodConfigError("참여 클라이언트가 없음")
    if cfg.boundary == "average":
        missing = [k for k in ids if k not in results.final_momenta]
        if missing:
            raise MethodConfigError(f"boundary=average에 필요한 최종 로컬 버퍼 없음: client {missing}")
    total = np.zeros_like(server.x_cur)
    for k in ids:
        total = total + results.d[k]
    m_next = cfg.mu_s * server.m_server + total / len(ids)
    x_next = server.x_cur - (cfg.alpha * cfg.eta * cfg.P) * m_next
    if not (np.all(np.isfinite(x_next)) and np.all(np.isfinite(m_next))):
        raise DivergenceError(server.round)

    local_momentum = None
    if cfg.boundary == "average":
        buffers = np.zeros_like(server.x_cur)
        for k in ids:
            buffers = buffers + results.final_momenta[k]
        local_momentum = buffers / len(ids)

    return ServerState(
        x_cur=x_next,
        x_prev=server.x_cur.copy(),
        m_server=m_next,
        round=server.round + 1,
        local_momentum=local_momentum,
    )


def sample_participants(num_clients: int, num_selected: int, round_index: int, seed: int) -> List[int]:
    """라운드별 참여 클라이언트 균등 비복원 추출 ((seed, round)마다 결정적)"""
    if not 1 <= num_selected <= num_clients:
        raise MethodConfigError(f"참여 수 S={num_selected}는 1 이상 K={num_clients} 이하여야 함")
    if num_selected == num_clients:
        return list(range(num_clients))
    rng = stream(seed, "participants", round_index)
    return sorted(int(k) for k in rng.choice(num_clients, size=num_selected, replace=False))


@dataclass
class Experiment:
    """단일 (방법, 시드) 실행 설정

    test_set이 (features, labels)이면 매 라운드 서버 모델 x_{r+1}의 정확도를
    history의 test_accuracy 열에 기록한다 (logistic/mlp2만).
    """

    objectives: Sequence[ClientObjective]
    config: MethodConfig
    rounds: int
    seed: int = 0
    batch_size: Optional[int] = 32
    x0: Optional[np.ndarray] = None
    shards: Optional[Sequence[np.ndarray]] = None
    record_trace: bool = False
    trace_cap: int = DEFAULT_TRACE_CAP
    workers: int = 1
    test_set: Optional[Tuple[np.ndarray, np.ndarray]] = None


@dataclass
class RunResult:
    final_model: np.ndarray
    history: pd.DataFrame
    server_state: ServerState
    trace: Optional[Trace] = None


def run(experiment: Experiment, resume_from: Optional[ServerState] = None, stop_after: Optional[int] = None) -> RunResult:
    """R 라운드 실행

    Args:
        experiment: 실행 설정
        resume_from: 이 서버 상태에서 이어서 실행 (클라이언트는 상태 없이 재구성)
        stop_after: 이 라운드 수에서 멈춤 (기본: experiment.rounds)
    """
    cfg = experiment.config
    objectives = list(experiment.objectives)
    if not objectives:
        raise MethodConfigError("클라이언트 목적함수가 없음")
    if experiment.rounds < 1:
        raise MethodConfigError(f"rounds는 1 이상이어야 함: {experiment.rounds}")
    dims = {obj.dim for obj in objectives}
    if len(dims) != 1:
        raise MethodConfigError(f"클라이언트 파라미터 차원이 다름: {dims}")
    dim = dims.pop()
    if experiment.test_set is not None and objectives[0].kind not in ("logistic", "mlp2"):
        raise MethodConfigError(f"test_set은 분류 목적함수에만 쓸 수 있음: {objectives[0].kind}")
    num_clients = len(objectives)
    selected = cfg.participants_per_round(num_clients)
    shards = experiment.shards or [np.arange(obj.num_samples) for obj in objectives]

    x0 = np.zeros(dim) if experiment.x0 is None else np.asarray(experiment.x0, dtype=np.float64)
    state = ServerState.initial(x0) if resume_from is None else resume_from
    end = experiment.rounds if stop_after is None else min(experiment.rounds, stop_after)

    recorder = None
    if experiment.record_trace:
        if resume_from is not None or end != experiment.rounds:
            raise MethodConfigError("trace 기록은 0라운드부터 끝까지 실행할 때만 가능")
        recorder = TraceRecorder(experiment.rounds, cfg.P, selected, num_clients, dim, experiment.trace_cap)
        recorder.record_server(0, state.x_cur, state.m_server)

    per_round = selected * dim * cfg.floats_per_participant
    comm = state.round * per_round
    rows = []
    logger.info("실행 시작: %s, seed=%d, K=%d, S=%d, R=%d", cfg.name, experiment.seed, num_clients, selected, end)

    pool = ThreadPoolExecutor(max_workers=experiment.workers) if experiment.workers > 1 else None
    try:
        for r in range(state.round, end):
            participants = sample_participants(num_clients, selected, r, experiment.seed)
            m_r = infer_server_momentum(state.x_prev, state.x_cur, cfg.alpha, cfg.eta, cfg.P)
            if cfg.boundary == "average" and state.local_momentum is not None:
                start_m = state.local_momentum
            else:
                start_m = np.zeros(dim)
            if recorder is not None:
                recorder.record_participants(r, participants)

            def train(item, r=r, m_r=m_r, start_m=start_m, x_r=state.x_cur):
                slot, k = item
                client = ClientState(k, x_r.copy(), start_m.copy())
                return local_round(
                    client, objectives[k], cfg, m_r, stream(experiment.seed, "batch", k, r),
                    shard=shards[k], batch_size=experiment.batch_size, round_index=r,
                    recorder=recorder, slot=slot,
                )

            items = list(enumerate(participants))
            outputs = list(pool.map(train, items)) if pool is not None else [train(item) for item in items]

            half = selected * dim * cfg.floats_per_participant // 2
            result = RoundResult(
                d={k: out[0] for k, out in zip(participants, outputs)},
                participants=participants,
                floats_sent_up=half,
                floats_sent_down=half,
                final_models={k: out[1].x_local for k, out in zip(participants, outputs)},
                final_momenta={k: out[1].m_local for k, out in zip(participants, outputs)},
            )
            state = server_round(state, result, cfg)
            if recorder is not None:
                recorder.record_server(r + 1, state.x_cur, state.m_server)

            finals = np.stack([result.final_models[k] for k in participants])
            x_bar = finals.mean(axis=0)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    grad = global_grad(objectives, x_bar)
                    current_loss = global_loss(objectives, x_bar)
            except NonFiniteError as e:
                raise DivergenceError(r) from e
            comm += per_round
            rows.append(
                {
                    "round": r,
                    "loss": current_loss,
                    "grad_norm_sq": float(grad @ grad),
                    "divergence": float(np.mean(np.sum((finals - x_bar) ** 2, axis=1))),
                    "comm_floats": comm,
                }
            )
            if experiment.test_set is not None:
                rows[-1][TEST_COLUMN] = accuracy(objectives[0], state.x_cur, *experiment.test_set)
            logger.debug("%s round %d: loss=%.6g", cfg.name, r, rows[-1]["loss"])
    finally:
        if pool is not None:
            pool.shutdown()

    trace = recorder.finalize(cfg, experiment.seed, experiment.batch_size) if recorder is not None else None
    columns = HISTORY_COLUMNS + ([TEST_COLUMN] if experiment.test_set is not None else [])
    return RunResult(
        final_model=state.x_cur.copy(),
        history=pd.DataFrame(rows, columns=columns),
        server_state=state,
        trace=trace,
    )
