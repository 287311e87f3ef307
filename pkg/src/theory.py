import logging
from dataclasses import replace
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .fedopt import METHOD_TABLE, MethodConfig, MethodConfigError
from .objectives import ClientObjective, ProblemConstants, global_grad, global_loss
from .trace import Trace

logger = logging.getLogger(__name__)

STEP_TOL = 1e-10
STITCH_TOL = 1e-12
COEF_TOL = 1e-12

Status = Literal["pass", "fail", "not-applicable"]


class TraceIncompleteError(ValueError):
    """trace 배열이 비어 있거나 NaN/Inf 포함"""


class CheckResult(BaseModel):
    """검증 하나의 결과"""

    name: str
    status: Status
    residual: Optional[float] = None
    lhs: Optional[float] = None
    rhs: Optional[float] = None
    rhs_exact: Optional[float] = None
    slack: Optional[float] = None
    tolerance: Optional[float] = None
    failing_preconditions: List[str] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)


class RatioStudy(BaseModel):
    mu_s: float
    mu_l: float
    P: int
    alpha: float
    H_fused: float
    H_local_momentum: float
    ratio: float
    claimed: float
    consistent_with_claim: bool
    rhs_fused: Optional[float] = None
    rhs_local_momentum: Optional[float] = None


class TheoryReport(BaseModel):
    """이론 검증 보고서 (JSON 필드 이름 고정)"""

    method: str
    num_traces: int
    lemma1_max_residual: Optional[float] = None
    stitching_max_residual: Optional[float] = None
    lemma2_closed_form_max_residual: Optional[float] = None
    lemma2_main_text_residual: Optional[float] = None
    inconsistency_lhs: Optional[float] = None
    inconsistency_rhs: Optional[float] = None
    inconsistency_rhs_exact: Optional[float] = None
    divergence_lhs: Optional[float] = None
    divergence_rhs: Optional[float] = None
    theorem1_lhs: Optional[float] = None
    theorem1_rhs: Optional[float] = None
    precondition_flags: Dict[str, bool] = Field(default_factory=dict)
    constants: Dict[str, Any] = Field(default_factory=dict)
    checks: List[CheckResult] = Field(default_factory=list)


# --- 보조 수열 -----------------------------------------------------------------


def _check_complete(trace: Trace) -> None:
    if trace.rounds < 1 or trace.steps < 1 or trace.num_participants < 1:
        raise TraceIncompleteError(f"빈 trace: R={trace.rounds}, P={trace.steps}, S={trace.num_participants}")
    for name in ("x_local", "m_local", "grads", "x_bar", "x_server", "m_server"):
        if not np.all(np.isfinite(getattr(trace, name))):
            raise TraceIncompleteError(f"trace.{name}에 NaN/Inf 포함")
    if trace.x_server.shape[0] != trace.rounds + 1:
        raise TraceIncompleteError("서버 모델 기록 수가 R+1이 아님")


def _config(trace: Trace) -> MethodConfig:
    cfg = trace.config
    return cfg if isinstance(cfg, MethodConfig) else MethodConfig.model_validate(cfg)


def _coefficients(cfg: MethodConfig, participants: int) -> Tuple[float, float]:
    """(c, κ): ŷ 갱신 계수 αη/((1−μ_s)S)와 z 보정 계수 μ_l·c/(1−μ_l)"""
    c = cfg.alpha * cfg.eta / ((1.0 - cfg.mu_s) * participants)
    return c, cfg.mu_l * c / (1.0 - cfg.mu_l)


def _fusion_matches(cfg: MethodConfig) -> bool:
    """pre-fusion이고 β = μ_s·α/(1−μ_s)"""
    if cfg.fusion != "pre":
        return False
    target = cfg.mu_s * cfg.alpha / (1.0 - cfg.mu_s)
    return abs(cfg.beta - target) <= COEF_TOL * max(1.0, abs(target))


def _fusion_steps(cfg: MethodConfig) -> np.ndarray:
    """단계 p(0..P)까지 누적된 fusion 변위 계수 D(p) (η·m_r 단위)"""
    p = np.arange(cfg.P + 1, dtype=np.float64)
    if cfg.fusion == "pre":
        return np.full(cfg.P + 1, cfg.beta * cfg.P)
    if cfg.fusion == "intra":
        return cfg.beta * p
    return np.zeros(cfg.P + 1)


def reconstruct_z(trace: Trace) -> Tuple[np.ndarray, np.ndarray]:
    """기록된 버퍼로 보조 수열 ŷ, z 복원

    ŷ_{r,p} = x_0 − c·Σ(지금까지 쓰인 버퍼 합), z_{r,p} = ŷ_{r,p} − κ·M_{r,p}
    (M_{r,p}는 참여 클라이언트 버퍼 합). 경계에서는 ŷ_{r+1,0} = ŷ_{r,P}.

    Returns:
        (z, ŷ), 각각 (R, P+1, d)
    """
    _check_complete(trace)
    cfg = _config(trace)
    c, kappa = _coefficients(cfg, trace.num_participants)
    rounds, steps, dim = trace.rounds, trace.steps, trace.dim

    buffers = trace.m_local.sum(axis=2)
    increments = (c * buffers[:, 1:, :]).reshape(rounds * steps, dim)
    yhat = np.empty((rounds, steps + 1, dim))
    yhat[:, 1:, :] = (trace.x_server[0] - np.cumsum(increments, axis=0)).reshape(rounds, steps, dim)
    yhat[0, 0] = trace.x_server[0]
    yhat[1:, 0] = yhat[:-1, steps]
    return yhat - kappa * buffers, yhat


def _state_scale(trace: Trace) -> float:
    return 1.0 + float(np.max(np.linalg.norm(trace.x_bar, axis=-1)))


# --- 보조 수열 갱신 규칙 ---------------------------------------------------------


def lemma1_in_scope(cfg: MethodConfig) -> bool:
    return _fusion_matches(cfg) or cfg.mu_s == 0.0 or cfg.mu_l == 0.0


def check_lemma1(trace: Trace, tol: Optional[float] = None) -> CheckResult:
    """z_{r,p+1} = z_{r,p} − αη/((1−μ_l)(1−μ_s)S)·Σ_k g 잔차 최댓값

    tol 기본값은 1e−10·(1 + 최대 gradient 노름).
    """
    cfg = _config(trace)
    if not lemma1_in_scope(cfg):
        return CheckResult(
            name="lemma1",
            status="not-applicable",
            failing_preconditions=["fusion_coefficient"],
            notes=[f"{cfg.name}: fusion={cfg.fusion}, β={cfg.beta}는 적용 범위 밖"],
        )
    z, _ = reconstruct_z(trace)
    c, _ = _coefficients(cfg, trace.num_participants)
    step = c / (1.0 - cfg.mu_l)
    grads = trace.grads.sum(axis=2)
    residual = float(np.max(np.linalg.norm(z[:, 1:] - z[:, :-1] + step * grads, axis=-1)))
    if tol is None:
        tol = STEP_TOL * (1.0 + float(np.max(np.linalg.norm(trace.grads, axis=-1))))
    return CheckResult(name="lemma1", status="pass" if residual <= tol else "fail", residual=residual, tolerance=tol)


def check_stitching(trace: Trace, tol: Optional[float] = None) -> CheckResult:
    """라운드 경계 z_{r,P} = z_{r+1,0}

    reset 경계에서는 두 값이 κ‖M_{r,P}‖만큼 어긋난다 (측정값을 그대로 보고).
    """
    z, _ = reconstruct_z(trace)
    cfg = _config(trace)
    tol = STITCH_TOL * _state_scale(trace) if tol is None else tol
    if trace.rounds < 2:
        return CheckResult(name="stitching", status="pass", residual=0.0, tolerance=tol, notes=["경계 없음 (R=1)"])
    gaps = np.linalg.norm(z[:-1, -1] - z[1:, 0], axis=-1)
    residual = float(np.max(gaps))
    notes = []
    if cfg.boundary == "reset" and cfg.mu_l > 0.0:
        _, kappa = _coefficients(cfg, trace.num_participants)
        predicted = kappa * float(np.max(np.linalg.norm(trace.m_local[:-1, -1].sum(axis=1), axis=-1)))
        notes.append(f"reset 경계 예측 간격 κ·max‖M_(r,P)‖ = {predicted:.6g}")
    return CheckResult(
        name="stitching", status="pass" if residual <= tol else "fail", residual=residual, tolerance=tol, notes=notes
    )


def _lemma2_prediction(trace: Trace, kappa: float) -> np.ndarray:
    """z − x̄ 폐형식: (1−a)(η/S)Σ_{q≤p}M_q − κM_p + η(D(p) − αPμ_s/(1−μ_s))·m_r"""
    cfg = _config(trace)
    a = cfg.alpha / (1.0 - cfg.mu_s)
    buffers = trace.m_local.sum(axis=2)
    partial = np.zeros_like(buffers)
    partial[:, 1:] = np.cumsum(buffers[:, 1:], axis=1)
    shift = _fusion_steps(cfg) - cfg.alpha * cfg.P * cfg.mu_s / (1.0 - cfg.mu_s)
    server = trace.m_server[:-1, None, :] * (cfg.eta * shift)[None, :, None]
    return (1.0 - a) * (cfg.eta / trace.num_participants) * partial - kappa * buffers + server


def lemma2_gap(trace: Trace) -> np.ndarray:
    """측정된 z − x̄, (R, P+1, d)"""
    z, _ = reconstruct_z(trace)
    return z - trace.x_bar


def lemma2_residuals(trace: Trace) -> Tuple[float, float]:
    """(부록 계수 잔차, 본문 계수 μ_lη/((1−μ_l)S) 잔차)"""
    cfg = _config(trace)
    gap = lemma2_gap(trace)
    _, kappa = _coefficients(cfg, trace.num_participants)
    main_text = cfg.mu_l * cfg.eta / ((1.0 - cfg.mu_l) * trace.num_participants)
    return tuple(
        float(np.max(np.linalg.norm(gap - _lemma2_prediction(trace, coef), axis=-1))) for coef in (kappa, main_text)
    )


def check_lemma2_closed_form(trace: Trace, tol: Optional[float] = None) -> CheckResult:
    """측정된 z − x̄와 폐형식 비교

    두 번째 항 계수는 μ_l·αη/((1−μ_l)(1−μ_s)S)를 쓰고,
    μ_lη/((1−μ_l)S)를 쓴 잔차는 notes에 함께 적는다.
    """
    cfg = _config(trace)
    residual, alternate = lemma2_residuals(trace)
    tol = STEP_TOL * _state_scale(trace) if tol is None else tol
    notes = [f"main_text_residual={alternate!r}"]
    if cfg.fusion == "none" and cfg.mu_s > 0.0:
        notes.append("fusion 없음: m_r 항 −(μ_s/(1−μ_s))αηP·m_r 포함 (z − x̄ 방향 기준 부호)")
    elif cfg.fusion != "none" and not _fusion_matches(cfg):
        notes.append("β ≠ μ_sα/(1−μ_s): 일반 fusion 변위 D(p)로 비교")
    return CheckResult(
        name="lemma2_closed_form",
        status="pass" if residual <= tol else "fail",
        residual=residual,
        tolerance=tol,
        notes=notes,
    )


# --- 불일치 상한 -------------------------------------------------------------------


def inconsistency_h(mu_s: float, mu_l: float, alpha: float, P: int) -> Tuple[np.ndarray, bool]:
    """상한식의 h_p (p=0..P−1)와 그 상한이 증명된 경우인지 여부

    α/(1−μ_s) = 1이면 h = μ_l/(1−μ_l) (증명된 상수),
    아니면 h_p = α/(1−μ_s)·(1+μ_l−μ_l^p)/(1−μ_l) − 1.
    """
    a = alpha / (1.0 - mu_s)
    p = np.arange(P, dtype=np.float64)
    if abs(a - 1.0) <= COEF_TOL:
        return np.full(P, mu_l / (1.0 - mu_l)), True
    return a * (1.0 + mu_l - mu_l**p) / (1.0 - mu_l) - 1.0, False


def inconsistency_weight(h: np.ndarray, mu_l: float) -> float:
    """Σ_p h_p²μ_l^p/(1−μ_l^P)"""
    P = h.shape[0]
    powers = mu_l ** np.arange(P, dtype=np.float64)
    return float(np.sum(h**2 * powers) / (1.0 - mu_l**P))


def _exact_rhs(trace: Trace, a: float) -> float:
    """z − x̄ = Σ_t c_t·Ḡ_t 의 정확한 계수로 만든 Cauchy–Schwarz 상한"""
    cfg = _config(trace)
    mu, eta = cfg.mu_l, cfg.eta
    steps = trace.steps
    norms = np.sum(trace.grads.mean(axis=2) ** 2, axis=-1).reshape(-1)
    carry = cfg.boundary == "average"
    total = 0.0
    for r in range(trace.rounds):
        for p in range(steps):
            n = r * steps + p
            t = np.arange(0 if carry else r * steps, n)
            if t.size == 0:
                continue
            j = (n - t).astype(np.float64)
            in_round = t >= r * steps
            with np.errstate(divide="ignore", invalid="ignore"):
                earlier = (1.0 - a) * mu ** (j - p) * (1.0 - mu**p) - a * mu**j
            coef = np.abs(eta * np.where(in_round, (1.0 - a) - mu**j, earlier) / (1.0 - mu))
            total += float(coef.sum() * (coef * norms[t]).sum())
    return total


def check_inconsistency_bound(trace: Trace) -> CheckResult:
    """ΣΣ‖z − x̄‖² ≤ (η²/(1−μ_l))·Σ_p h²μ_l^p/(1−μ_l^P)·ΣΣ‖Ḡ‖²

    전제: α ≥ (1−μ_s)(1−μ_l), 그리고 β = μ_sα/(1−μ_s) (pre-fusion) 또는 μ_s = 0 (fusion 없음).
    rhs_exact는 정확한 단계별 계수로 만든 항상 성립하는 상한이다.
    판정은 α = 1−μ_s이면 rhs, 아니면 rhs_exact 기준이다 (rhs 초과 여부는 notes에 기록).
    """
    cfg = _config(trace)
    failing = []
    if cfg.alpha < (1.0 - cfg.mu_s) * (1.0 - cfg.mu_l) * (1.0 - COEF_TOL):
        failing.append("alpha_lower_bound")
    if not (_fusion_matches(cfg) or (cfg.fusion == "none" and cfg.mu_s == 0.0)):
        failing.append("fusion_coefficient")
    if failing:
        return CheckResult(name="inconsistency_bound", status="not-applicable", failing_preconditions=failing)

    gap = lemma2_gap(trace)[:, :-1]
    lhs = float(np.sum(gap**2))
    h, rigorous = inconsistency_h(cfg.mu_s, cfg.mu_l, cfg.alpha, cfg.P)
    grad_total = float(np.sum(trace.grads.mean(axis=2) ** 2))
    rhs = cfg.eta**2 / (1.0 - cfg.mu_l) * inconsistency_weight(h, cfg.mu_l) * grad_total
    rhs_exact = _exact_rhs(trace, cfg.alpha / (1.0 - cfg.mu_s))

    floor = trace.rounds * trace.steps * (STEP_TOL * _state_scale(trace)) ** 2
    bound = rhs if rigorous else rhs_exact
    notes = []
    if not rigorous:
        notes.append("α ≠ 1−μ_s: 상한식 rhs는 증명되지 않은 형태, rhs_exact로 판정")
        if lhs > rhs + floor:
            notes.append(f"rhs 초과: lhs={lhs:.6g} > rhs={rhs:.6g}")
    if lhs > bound + floor:
        logger.warning("불일치 상한 위반 (%s): lhs=%.6g > %.6g", cfg.name, lhs, bound)
    return CheckResult(
        name="inconsistency_bound",
        status="pass" if lhs <= bound + floor else "fail",
        lhs=lhs,
        rhs=rhs,
        rhs_exact=rhs_exact,
        slack=bound / lhs if lhs > 0 else None,
        tolerance=floor,
        notes=notes,
    )


def inconsistency_coefficients(mu_s: float, mu_l: float, alpha: float, P: int) -> pd.DataFrame:
    """h₁(p), h₂(p, i)의 정의식 값과 단순화식 값 비교표

    정의식: αμ_l/((1−μ_s)(1−μ_l)) − (1 − α/(1−μ_s))·Σ_{j=1..i} μ_l^{1−j}  (h₁은 i=p)
    단순화식: a(1+μ_l−μ_l^i)/(1−μ_l) − (1−μ_l^i)/(1−μ_l)
    """
    a = alpha / (1.0 - mu_s)
    rows = []

    def both(i: int) -> Tuple[float, float]:
        with np.errstate(divide="ignore"):
            powers = np.float64(mu_l) ** (1.0 - np.arange(1, i + 1))
        defined = a * mu_l / (1.0 - mu_l) - (1.0 - a) * float(np.sum(powers))
        simplified = a * (1.0 + mu_l - mu_l**i) / (1.0 - mu_l) - (1.0 - mu_l**i) / (1.0 - mu_l)
        return defined, simplified

    for p in range(P):
        defined, simplified = both(p)
        rows.append({"coefficient": "h1", "p": p, "i": p, "definition": defined, "simplified": simplified})
        for i in range(1, p + 1):
            defined, simplified = both(i)
            rows.append({"coefficient": "h2", "p": p, "i": i, "definition": defined, "simplified": simplified})

    table = pd.DataFrame(rows, columns=["coefficient", "p", "i", "definition", "simplified"])
    table["discrepancy"] = (table["definition"] - table["simplified"]).abs()
    return table


def inconsistency_ratio_study(mu_s: float, mu_l: float, P: int, trace: Optional[Trace] = None) -> RatioStudy:
    """α=(1−μ_s)(1−μ_l) fusion 상한과 로컬 모멘텀만 쓴 상한(α=1, μ_s=0)의 비율

    같은 gradient 기록이면 두 rhs의 비율은 h 가중치 비율과 같다.
    """
    if not 0.0 < mu_l < 1.0:
        raise MethodConfigError(f"mu_l은 (0, 1) 범위여야 함: {mu_l}")
    alpha = (1.0 - mu_s) * (1.0 - mu_l)
    fused = inconsistency_weight(inconsistency_h(mu_s, mu_l, alpha, P)[0], mu_l)
    baseline = inconsistency_weight(inconsistency_h(0.0, mu_l, 1.0, P)[0], mu_l)
    ratio = fused / baseline
    claimed = (1.0 - mu_l) ** 2

    rhs_fused = rhs_baseline = None
    if trace is not None:
        cfg = _config(trace)
        scale = cfg.eta**2 / (1.0 - mu_l) * float(np.sum(trace.grads.mean(axis=2) ** 2))
        rhs_fused, rhs_baseline = scale * fused, scale * baseline
    return RatioStudy(
        mu_s=mu_s,
        mu_l=mu_l,
        P=P,
        alpha=alpha,
        H_fused=fused,
        H_local_momentum=baseline,
        ratio=ratio,
        claimed=claimed,
        consistent_with_claim=ratio <= claimed,
        rhs_fused=rhs_fused,
        rhs_local_momentum=rhs_baseline,
    )


# --- 발산 상한 ---------------------------------------------------------------------


def client_divergence(trace: Trace) -> np.ndarray:
    """(R, P) 배열: 단계 p=0..P−1의 (1/S)Σ_k‖x̄ − x^{(k)}‖²"""
    diff = trace.x_bar[:, :-1, None, :] - trace.x_local[:, :-1]
    return np.mean(np.sum(diff**2, axis=-1), axis=-1)


def _same_config(traces: Sequence[Trace]) -> MethodConfig:
    if not traces:
        raise TraceIncompleteError("trace 목록이 비어 있음")
    cfg = _config(traces[0])
    shapes = {t.x_local.shape for t in traces}
    if len(shapes) != 1 or any(_config(t) != cfg for t in traces):
        raise TraceIncompleteError("trace들의 설정/크기가 다름")
    return cfg


def _step_condition(cfg: MethodConfig, L: float) -> bool:
    return 6.0 * cfg.eta * L * cfg.P <= 1.0 - cfg.mu_l


def divergence_rhs(cfg: MethodConfig, constants: ProblemConstants, full_participation: bool = True) -> float:
    scale = cfg.eta**2 / (1.0 - cfg.mu_l) ** 2
    if full_participation:
        return scale * (3.0 * cfg.P * constants.sigma2 + 9.0 * cfg.P**2 * constants.G2)
    return scale * (3.0 * cfg.P**2 * constants.sigma2 + 36.0 * cfg.P**2 * constants.G2)


def check_divergence_bound(traces: Sequence[Trace], constants: ProblemConstants) -> CheckResult:
    """시드 평균 (1/(SRP))ΣΣΣ‖x̄ − x^{(k)}‖² ≤ 3η²Pσ²/(1−μ_l)² + 9η²P²G²/(1−μ_l)²

    부분 참여면 3η²P²σ²/(1−μ_l)² + 36η²P²G²/(1−μ_l)².
    """
    cfg = _same_config(traces)
    if not _step_condition(cfg, constants.L):
        return CheckResult(name="divergence_bound", status="not-applicable", failing_preconditions=["step_count"])
    lhs = float(np.mean([client_divergence(t).mean() for t in traces]))
    full = traces[0].full_participation
    rhs = divergence_rhs(cfg, constants, full)
    notes = [] if constants.exact else ["L, σ², G²는 경험적 추정치"]
    if not full:
        notes.append("부분 참여 상한 사용")
    return CheckResult(
        name="divergence_bound",
        status="pass" if lhs <= rhs else "fail",
        lhs=lhs,
        rhs=rhs,
        slack=rhs / lhs if lhs > 0 else None,
        notes=notes,
    )


# --- 수렴 정리 ---------------------------------------------------------------------


def theorem1_terms(
    cfg: MethodConfig, constants: ProblemConstants, num_clients: int, rounds: int, f_gap: float
) -> Dict[str, float]:
    """수렴 상한의 항별 값

    variance 항은 1/K에 비례하고 local_variance 항은 K와 무관하다.
    """
    eta, L, P, mu = cfg.eta, constants.L, cfg.P, cfg.mu_l
    noise = eta * L * constants.sigma2 / (1.0 - mu)
    terms = {
        "optimization": 2.0 * (1.0 - mu) * f_gap / (eta * rounds * P),
        "heterogeneity": 9.0 * eta**2 * L**2 * P**2 * constants.G2 / (1.0 - mu) ** 2,
        "variance": noise * (1.0 + 2.0 * mu**2 * eta * L / (1.0 - mu) ** 4) / num_clients,
        "local_variance": noise * 3.0 * eta * L * P / (2.0 * (1.0 - mu)),
    }
    terms["total"] = sum(terms.values())
    return terms


def theorem1_flags(cfg: MethodConfig, constants: ProblemConstants, full_participation: bool) -> Dict[str, bool]:
    eta, L, mu = cfg.eta, constants.L, cfg.mu_l
    fused = cfg.fusion == "pre" and abs(cfg.alpha - (1.0 - cfg.mu_s)) <= COEF_TOL and abs(
        cfg.beta - cfg.mu_s
    ) <= COEF_TOL
    plain = cfg.fusion == "none" and cfg.mu_s == 0.0 and abs(cfg.alpha - 1.0) <= COEF_TOL
    return {
        "theorem1_momentum": fused or plain,
        "step_count": _step_condition(cfg, L),
        "descent_condition": 1.0 - 2.0 * eta * L - 4.0 * mu**2 * eta**2 * L**2 / (1.0 - mu) ** 4 >= 0.0,
        "full_participation": full_participation,
        "f_star_known": constants.f_star is not None,
    }


def gradient_norms(trace: Trace, problem: Sequence[ClientObjective]) -> np.ndarray:
    """(R, P) 배열: ‖∇f(x̄_{r,p})‖², p=0..P−1"""
    out = np.empty((trace.rounds, trace.steps))
    for r in range(trace.rounds):
        for p in range(trace.steps):
            grad = global_grad(problem, trace.x_bar[r, p])
            out[r, p] = grad @ grad
    return out


def check_theorem1(
    traces: Sequence[Trace], problem: Sequence[ClientObjective], constants: ProblemConstants
) -> CheckResult:
    """(1/RP)ΣΣ E‖∇f(x̄_{r,p})‖² ≤ 수렴 상한 (기댓값은 시드 평균)"""
    cfg = _same_config(traces)
    trace = traces[0]
    flags = theorem1_flags(cfg, constants, trace.full_participation)
    failing = [name for name, ok in flags.items() if not ok]
    if failing:
        logger.info("Theorem 1 적용 불가 (%s): %s", cfg.name, failing)
        return CheckResult(name="theorem1", status="not-applicable", failing_preconditions=failing)

    lhs = float(np.mean([gradient_norms(t, problem).mean() for t in traces]))
    f_gap = float(np.mean([global_loss(problem, t.x_server[0]) for t in traces])) - constants.f_star
    terms = theorem1_terms(cfg, constants, trace.num_clients, trace.rounds, f_gap)
    rhs = terms["total"]
    notes = [f"{name}={value!r}" for name, value in terms.items() if name != "total"]
    return CheckResult(
        name="theorem1",
        status="pass" if lhs <= rhs else "fail",
        lhs=lhs,
        rhs=rhs,
        slack=rhs / lhs if lhs > 0 else None,
        notes=notes,
    )


# --- 기타 ----------------------------------------------------------------------------


def comm_cost(method: str, d: int, R: int, K: int, S: Optional[int] = None) -> int:
    """총 통신량 (float 개수): 라운드·참여자마다 하향 d + 상향 d, 버퍼 평균 방법은 2배"""
    key = method.lower()
    if key not in METHOD_TABLE:
        raise MethodConfigError(f"알 수 없는 방법: {method}")
    selected = K if S is None else S
    if not 1 <= selected <= K:
        raise MethodConfigError(f"참여 수 S={selected}는 1 이상 K={K} 이하여야 함")
    average = METHOD_TABLE[key]["boundary"] == "average"
    if average and selected < K:
        raise MethodConfigError("boundary=average는 부분 참여와 함께 쓸 수 없음")
    return 2 * d * R * selected * (2 if average else 1)


def replay_with_frozen_gradients(trace: Trace, beta: float) -> Trace:
    """기록된 버퍼를 그대로 두고 fusion 계수만 β로 바꿔 로컬 모델 재구성"""
    _check_complete(trace)
    cfg = _config(trace).model_copy(update={"beta": beta})
    displacement = cfg.eta * _fusion_steps(cfg)
    moved = np.zeros_like(trace.x_local)
    moved[:, 1:] = np.cumsum(trace.m_local[:, 1:], axis=1)
    x_local = (
        trace.x_server[:-1, None, None, :]
        - displacement[None, :, None, None] * trace.m_server[:-1, None, None, :]
        - cfg.eta * moved
    )
    return replace(trace, config=cfg, x_local=x_local, x_bar=x_local.mean(axis=2))


def trajectory_points(traces: Sequence[Trace], limit: int = 50) -> List[np.ndarray]:
    """상수 평가용 궤적 점 (초기 모델 + x̄_{r,p}를 고르게 최대 limit개)"""
    stacked = np.concatenate([t.x_bar.reshape(-1, t.dim) for t in traces], axis=0)
    picks = np.unique(np.linspace(0, stacked.shape[0] - 1, max(1, limit - 1)).astype(np.int64))
    return [traces[0].x_server[0].copy(), *(stacked[i] for i in picks)]


def build_report(
    traces: Sequence[Trace], problem: Sequence[ClientObjective], constants: ProblemConstants
) -> TheoryReport:
    """trace 묶음(같은 설정, 시드만 다름)에 대한 전체 검증"""
    cfg = _same_config(traces)

    def worst(results: List[CheckResult]) -> CheckResult:
        applicable = [res for res in results if res.status != "not-applicable"]
        if not applicable:
            return results[0]
        return max(applicable, key=lambda res: res.residual)

    lemma1 = worst([check_lemma1(t) for t in traces])
    stitching = worst([check_stitching(t) for t in traces])
    lemma2 = worst([check_lemma2_closed_form(t) for t in traces])
    alternate = max(lemma2_residuals(t)[1] for t in traces)

    bounds = [check_inconsistency_bound(t) for t in traces]
    if bounds[0].status == "not-applicable":
        inconsistency = bounds[0]
    else:
        lhs = float(np.mean([b.lhs for b in bounds]))
        rhs = float(np.mean([b.rhs for b in bounds]))
        rhs_exact = float(np.mean([b.rhs_exact for b in bounds]))
        rigorous = inconsistency_h(cfg.mu_s, cfg.mu_l, cfg.alpha, cfg.P)[1]
        bound = rhs if rigorous else rhs_exact
        failed = any(b.status == "fail" for b in bounds)
        notes = [f"{len(bounds)}개 trace 평균, 개별 판정 모두 사용"]
        if not rigorous:
            exceeded = sum(any(n.startswith("rhs 초과") for n in b.notes) for b in bounds)
            notes.insert(0, bounds[0].notes[0])
            notes.append(f"rhs 초과 trace {exceeded}/{len(bounds)}개")
        inconsistency = bounds[0].model_copy(
            update={
                "status": "fail" if failed else "pass",
                "lhs": lhs,
                "rhs": rhs,
                "rhs_exact": rhs_exact,
                "slack": bound / lhs if lhs > 0 else None,
                "notes": notes,
            }
        )

    divergence = check_divergence_bound(traces, constants)
    theorem = check_theorem1(traces, problem, constants)

    flags = theorem1_flags(cfg, constants, traces[0].full_participation)
    flags["lemma1_scope"] = lemma1_in_scope(cfg)
    flags["fusion_coefficient"] = _fusion_matches(cfg)
    flags["alpha_lower_bound"] = cfg.alpha >= (1.0 - cfg.mu_s) * (1.0 - cfg.mu_l) * (1.0 - COEF_TOL)

    checks = [lemma1, stitching, lemma2, inconsistency, divergence, theorem]
    for check in checks:
        if check.status == "not-applicable":
            logger.warning("%s 적용 불가: %s", check.name, check.failing_preconditions)
        elif check.status == "fail":
            logger.warning("%s 실패: %s", check.name, check.model_dump(exclude={"notes"}))

    return TheoryReport(
        method=cfg.name,
        num_traces=len(traces),
        lemma1_max_residual=lemma1.residual,
        stitching_max_residual=stitching.residual,
        lemma2_closed_form_max_residual=lemma2.residual,
        lemma2_main_text_residual=alternate,
        inconsistency_lhs=inconsistency.lhs,
        inconsistency_rhs=inconsistency.rhs,
        inconsistency_rhs_exact=inconsistency.rhs_exact,
        divergence_lhs=divergence.lhs,
        divergence_rhs=divergence.rhs,
        theorem1_lhs=theorem.lhs,
        theorem1_rhs=theorem.rhs,
        precondition_flags=flags,
        constants=constants.to_dict(),
        checks=checks,
    )
