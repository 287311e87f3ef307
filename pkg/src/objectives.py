import logging
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .rng import stream

logger = logging.getLogger(__name__)

OBJECTIVE_KINDS = ("quadratic", "least-squares", "logistic", "mlp2")
EXACT_KINDS = ("quadratic", "least-squares")


class ObjectiveError(ValueError):
    """목적함수 구성/입력 오류"""


class NonFiniteError(ObjectiveError):
    """NaN/Inf 발생"""


class PowerIterationError(RuntimeError):
    """거듭제곱법 미수렴"""


def _readonly(values, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what}에 NaN/Inf 포함")


@dataclass(frozen=True, eq=False)
class ClientObjective:
    """클라이언트 한 곳의 유한합 목적함수

    샘플별 손실 (regularization 항 제외):
        quadratic:     ½xᵀAx − b_iᵀx + c_i   (features=b_i, targets=c_i, curvature=A)
        least-squares: ½(a_iᵀx − y_i)²        (features=a_i, targets=y_i)
        logistic:      softmax 교차 엔트로피   (x = W(C×f) 행 우선, bias(C) 순서)
        mlp2:          tanh 은닉층 1개         (x = W1(h×f), b1(h), W2(C×h), b2(C) 순서)

    생성 후에는 배열이 읽기 전용이므로 여러 워커가 동시에 읽어도 안전하다.
    """

    kind: str
    features: np.ndarray
    targets: np.ndarray
    regularization: float = 0.0
    curvature: Optional[np.ndarray] = None
    num_classes: int = 0
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ObjectiveError(f"지원하지 않는 목적함수 종류: {self.kind}")

        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ObjectiveError(f"features는 (샘플 수 ≥ 1, 차원 ≥ 1) 행렬이어야 함: {features.shape}")
        _check_finite(features, "features")
        n = features.shape[0]

        label_kind = self.kind in ("logistic", "mlp2")
        targets = np.asarray(self.targets, dtype=np.int64 if label_kind else np.float64).reshape(-1)
        if targets.shape[0] != n:
            raise ObjectiveError(f"targets 길이 {targets.shape[0]} != 샘플 수 {n}")
        if not label_kind:
            _check_finite(targets, "targets")
        if self.regularization < 0:
            raise ObjectiveError(f"regularization은 0 이상이어야 함: {self.regularization}")

        curvature = None
        if self.kind == "quadratic":
            if self.curvature is None:
                raise ObjectiveError("quadratic 목적함수에는 curvature 행렬 필요")
            curvature = np.asarray(self.curvature, dtype=np.float64)
            d = features.shape[1]
            if curvature.shape != (d, d):
                raise ObjectiveError(f"curvature 크기 {curvature.shape} != ({d}, {d})")
            if not np.allclose(curvature, curvature.T, rtol=0.0, atol=1e-12):
                raise ObjectiveError("curvature 행렬은 대칭이어야 함")
            _check_finite(curvature, "curvature")
            curvature = _readonly(curvature)

        if label_kind:
            if self.num_classes < 2:
                raise ObjectiveError(f"{self.kind}에는 num_classes ≥ 2 필요")
            if targets.min() < 0 or targets.max() >= self.num_classes:
                raise ObjectiveError(f"라벨은 [0, {self.num_classes}) 범위여야 함")
        if self.kind == "mlp2" and self.hidden < 1:
            raise ObjectiveError("mlp2에는 hidden ≥ 1 필요")

        object.__setattr__(self, "features", _readonly(features))
        object.__setattr__(self, "targets", _readonly(targets, dtype=targets.dtype))
        object.__setattr__(self, "curvature", curvature)
        object.__setattr__(self, "regularization", float(self.regularization))

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        """파라미터 벡터 차원 d"""
        f, c, h = self.feature_dim, self.num_classes, self.hidden
        if self.kind in EXACT_KINDS:
            return f
        if self.kind == "logistic":
            return c * (f + 1)
        return h * f + h + c * h + c


def _as_vector(obj: ClientObjective, x) -> np.ndarray:
    vector = np.asarray(x, dtype=np.float64)
    if vector.shape != (obj.dim,):
        raise ObjectiveError(f"파라미터 차원 {vector.shape} != ({obj.dim},)")
    _check_finite(vector, "파라미터")
    return vector


def _as_batch(obj: ClientObjective, batch) -> np.ndarray:
    indices = np.asarray(batch, dtype=np.int64).reshape(-1)
    if indices.size == 0:
        raise ObjectiveError("빈 배치")
    if indices.min() < 0 or indices.max() >= obj.num_samples:
        raise ObjectiveError(f"배치 인덱스 범위 초과: [0, {obj.num_samples}) 밖의 값 포함")
    return indices


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    top = logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits - top).sum(axis=1)) + top[:, 0]
    return log_norm - logits[np.arange(len(labels)), labels]


def unpack_mlp2(obj: ClientObjective, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """mlp2 파라미터 분해: W1(h×f), b1(h), W2(C×h), b2(C)"""
    f, h, c = obj.feature_dim, obj.hidden, obj.num_classes
    sizes = np.cumsum([h * f, h, c * h])
    w1 = x[: sizes[0]].reshape(h, f)
    b1 = x[sizes[0] : sizes[1]]
    w2 = x[sizes[1] : sizes[2]].reshape(c, h)
    b2 = x[sizes[2] :]
    return w1, b1, w2, b2


def _logits(obj: ClientObjective, x: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """logistic/mlp2 출력층 logits (샘플 수 × C)"""
    if obj.kind == "logistic":
        c, f = obj.num_classes, obj.feature_dim
        return feats @ x[: c * f].reshape(c, f).T + x[c * f :]
    w1, b1, w2, b2 = unpack_mlp2(obj, x)
    return np.tanh(feats @ w1.T + b1) @ w2.T + b2


def _per_sample_losses(obj: ClientObjective, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    feats = obj.features[idx]
    targets = obj.targets[idx]
    if obj.kind == "quadratic":
        return 0.5 * x @ obj.curvature @ x - feats @ x + targets
    if obj.kind == "least-squares":
        return 0.5 * (feats @ x - targets) ** 2
    return _cross_entropy(_logits(obj, x, feats), targets)


def per_sample_grads(obj: ClientObjective, x, batch) -> np.ndarray:
    """배치의 샘플별 gradient 행렬 (len(batch), d), regularization 제외"""
    x = _as_vector(obj, x)
    idx = _as_batch(obj, batch)
    feats = obj.features[idx]
    targets = obj.targets[idx]
    n = len(idx)

    if obj.kind == "quadratic":
        return (obj.curvature @ x)[None, :] - feats
    if obj.kind == "least-squares":
        residual = feats @ x - targets
        return feats * residual[:, None]

    onehot = np.zeros((n, obj.num_classes))
    onehot[np.arange(n), targets] = 1.0

    if obj.kind == "logistic":
        delta = _softmax(_logits(obj, x, feats)) - onehot
        grad_w = delta[:, :, None] * feats[:, None, :]
        return np.concatenate([grad_w.reshape(n, -1), delta], axis=1)

    w1, b1, w2, b2 = unpack_mlp2(obj, x)
    hidden = np.tanh(feats @ w1.T + b1)
    delta2 = _softmax(hidden @ w2.T + b2) - onehot
    grad_w2 = delta2[:, :, None] * hidden[:, None, :]
    delta1 = (delta2 @ w2) * (1.0 - hidden**2)
    grad_w1 = delta1[:, :, None] * feats[:, None, :]
    return np.concatenate([grad_w1.reshape(n, -1), delta1, grad_w2.reshape(n, -1), delta2], axis=1)


def stochastic_grad(obj: ClientObjective, x, batch) -> np.ndarray:
    """미니배치 확률적 gradient (샘플별 gradient 평균 + L2 항)"""
    x = _as_vector(obj, x)
    grad = per_sample_grads(obj, x, batch).mean(axis=0)
    if obj.regularization:
        grad = grad + obj.regularization * x
    _check_finite(grad, "stochastic gradient")
    return grad


def full_grad(obj: ClientObjective, x) -> np.ndarray:
    """전체 샘플 gradient"""
    return stochastic_grad(obj, x, np.arange(obj.num_samples))


def loss(obj: ClientObjective, x, batch=None) -> float:
    """배치(기본: 전체) 평균 손실 + L2 항"""
    x = _as_vector(obj, x)
    idx = np.arange(obj.num_samples) if batch is None else _as_batch(obj, batch)
    value = float(_per_sample_losses(obj, x, idx).mean())
    if obj.regularization:
        value += 0.5 * obj.regularization * float(x @ x)
    if not np.isfinite(value):
        raise NonFiniteError("손실값이 유한하지 않음")
    return value


def global_loss(problem: Sequence[ClientObjective], x) -> float:
    """전역 목적함수 f(x) = (1/K)Σ f^{(k)}(x)"""
    return float(np.mean([loss(obj, x) for obj in problem]))


def global_grad(problem: Sequence[ClientObjective], x) -> np.ndarray:
    """전역 gradient ∇f(x)"""
    return np.mean(np.stack([full_grad(obj, x) for obj in problem]), axis=0)


def predict(obj: ClientObjective, x, features) -> np.ndarray:
    """분류 모델(logistic/mlp2)의 예측 라벨 (argmax, 동점이면 작은 라벨)

    obj는 모델 구조(C, f, h)만 제공하고 features는 임의의 샘플이어도 된다.
    """
    if obj.kind not in ("logistic", "mlp2"):
        raise ObjectiveError(f"{obj.kind}는 분류 모델이 아님")
    x = _as_vector(obj, x)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != obj.feature_dim:
        raise ObjectiveError(f"features 크기 {feats.shape} != (n, {obj.feature_dim})")
    return np.argmax(_logits(obj, x, feats), axis=1)


def accuracy(obj: ClientObjective, x, features, labels) -> float:
    """예측 정확도 (0~1)"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ObjectiveError("빈 평가 집합")
    predicted = predict(obj, x, features)
    if predicted.shape != labels.shape:
        raise ObjectiveError(f"labels 길이 {labels.size} != 샘플 수 {predicted.size}")
    return float(np.mean(predicted == labels))


def finite_difference_grad(fun: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """중앙 차분 gradient"""
    x = np.asarray(x, dtype=np.float64)
    half = h / 2.0
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = half
        grad[i] = (fun(x + step) - fun(x - step)) / h
    return grad


def gradient_check(obj: ClientObjective, x, h: float = 1e-6) -> float:
    """해석적 gradient와 중앙 차분 gradient의 상대 오차"""
    analytic = full_grad(obj, x)
    numeric = finite_difference_grad(lambda z: loss(obj, z), x, h)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@dataclass(frozen=True)
class ProblemConstants:
    """분석 상수 L, σ², G², f_*

    exact=False이면 평가점 집합 위의 경험적 추정치이다.
    """

    L: float
    sigma2: float
    G2: float
    f_star: Optional[float] = None
    exact: bool = True
    batch_size: Optional[int] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def hessian(obj: ClientObjective) -> np.ndarray:
    """quadratic / least-squares 목적함수의 (상수) Hessian"""
    if obj.kind == "quadratic":
        matrix = np.array(obj.curvature)
    elif obj.kind == "least-squares":
        matrix = obj.features.T @ obj.features / obj.num_samples
    else:
        raise ObjectiveError(f"{obj.kind}에는 상수 Hessian이 없음")
    return matrix + obj.regularization * np.eye(obj.dim)


def power_iteration(matrix: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """대칭 행렬의 스펙트럼 반경 (잔차 ‖Hv − λv‖ ≤ tol·|λ| 에서 종료)"""
    d = matrix.shape[0]
    vector = stream(0, "power-iteration", d).standard_normal(d)
    vector /= np.linalg.norm(vector)
    for _ in range(max_iter):
        image = matrix @ vector
        value = float(vector @ image)
        if np.linalg.norm(image - value * vector) <= tol * abs(value):
            return abs(value)
        norm = np.linalg.norm(image)
        if norm == 0.0:
            return 0.0
        vector = image / norm
    raise PowerIterationError(f"거듭제곱법이 {max_iter}회 안에 수렴하지 않음")


def _linear_term(obj: ClientObjective) -> np.ndarray:
    if obj.kind == "quadratic":
        return obj.features.mean(axis=0)
    return obj.features.T @ obj.targets / obj.num_samples


def _exact_minimum(problem: Sequence[ClientObjective], global_hessian: np.ndarray) -> Optional[float]:
    """정규방정식 풀이로 f_* 계산, 하한이 없으면 None"""
    rhs = np.mean(np.stack([_linear_term(obj) for obj in problem]), axis=0)
    scale = max(1.0, float(np.max(np.abs(global_hessian))))
    if np.linalg.eigvalsh(global_hessian).min() < -1e-10 * scale:
        logger.warning("전역 Hessian이 양의 준정부호가 아님: f_star 생략")
        return None
    solution = np.linalg.lstsq(global_hessian, rhs, rcond=None)[0]
    if np.linalg.norm(global_hessian @ solution - rhs) > 1e-8 * (1.0 + np.linalg.norm(rhs)):
        logger.warning("정규방정식이 불능: f_star 생략")
        return None
    return global_loss(problem, solution)


def sample_variance(obj: ClientObjective, x) -> float:
    """단일 샘플 gradient의 정확한 분산 E‖∇F(x,ξ) − ∇f(x)‖²"""
    grads = per_sample_grads(obj, x, np.arange(obj.num_samples))
    return float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))


def heterogeneity(problem: Sequence[ClientObjective], x) -> float:
    """(1/K)Σ‖∇f^{(k)}(x) − ∇f(x)‖²"""
    grads = np.stack([full_grad(obj, x) for obj in problem])
    return float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))


def _secant_smoothness(
    problem: Sequence[ClientObjective], points: List[np.ndarray], directions: int = 3, step: float = 1e-3
) -> float:
    """평가점 주변 할선 기울기로 L 추정"""
    rng = stream(0, "constants")
    estimate = 0.0
    d = problem[0].dim
    for x in points:
        for obj in problem:
            base = full_grad(obj, x)
            for _ in range(directions):
                direction = rng.standard_normal(d)
                direction *= step / np.linalg.norm(direction)
                ratio = np.linalg.norm(full_grad(obj, x + direction) - base) / step
                estimate = max(estimate, float(ratio))
    return estimate


def constants(
    problem: Sequence[ClientObjective],
    points: Optional[Sequence] = None,
    batch_size: Optional[int] = 32,
    tol: float = 1e-10,
    max_power_iter: int = 100_000,
    max_secant_points: int = 20,
) -> ProblemConstants:
    """문제 상수 계산

    Args:
        problem: 클라이언트 목적함수 목록
        points: σ², G² 평가점 집합 (기본: 원점 하나)
        batch_size: 미니배치 크기 (None이면 전체 배치, σ²=0)
        tol: 거듭제곱법 상대 잔차 허용치
        max_power_iter: 거듭제곱법 최대 반복 수
        max_secant_points: 경험적 L 추정에 쓰는 평가점 상한
    """
    if not problem:
        raise ObjectiveError("빈 문제")
    kinds = {obj.kind for obj in problem}
    dims = {obj.dim for obj in problem}
    if len(kinds) != 1 or len(dims) != 1:
        raise ObjectiveError(f"모든 클라이언트의 종류/차원이 같아야 함: {kinds}, {dims}")
    kind, d = kinds.pop(), dims.pop()

    if points is None:
        points = [np.zeros(d)]
    points = [_as_vector(problem[0], point) for point in points]
    if not points:
        raise ObjectiveError("평가점 집합이 비어 있음")

    if kind in EXACT_KINDS:
        local = [hessian(obj) for obj in problem]
        global_hessian = np.mean(np.stack(local), axis=0)
        smoothness = max(power_iteration(h, tol, max_power_iter) for h in [global_hessian, *local])
        f_star = _exact_minimum(problem, global_hessian)
        exact = True
    else:
        smoothness = _secant_smoothness(problem, points[:max_secant_points])
        f_star = None
        exact = False
        logger.info("%s 목적함수: L, σ², G²는 경험적 추정치", kind)

    if batch_size is None:
        sigma2 = 0.0
    else:
        sigma2 = max(sample_variance(obj, x) for x in points for obj in problem) / batch_size
    g2 = max(heterogeneity(problem, x) for x in points)

    return ProblemConstants(
        L=smoothness, sigma2=sigma2, G2=g2, f_star=f_star, exact=exact, batch_size=batch_size
    )


def _random_spd(rng: np.random.Generator, dim: int, low: float, high: float) -> np.ndarray:
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigenvalues = rng.uniform(low, high, dim)
    matrix = (basis * eigenvalues) @ basis.T
    return (matrix + matrix.T) / 2.0


def make_quadratic_problem(
    num_clients: int,
    dim: int,
    samples_per_client: int = 32,
    heterogeneity: float = 1.0,
    noise: float = 0.0,
    curvature_range: Tuple[float, float] = (0.5, 2.0),
    shared_curvature: bool = False,
    regularization: float = 0.0,
    seed: int = 0,
) -> List[ClientObjective]:
    """이질적인 2차 목적함수 문제 생성

    클라이언트 k의 최적점은 공통 중심 + heterogeneity·N(0, I),
    샘플별 선형항은 A_k·x*_k + noise·N(0, I).
    """
    if num_clients < 1 or dim < 1 or samples_per_client < 1:
        raise ObjectiveError("num_clients, dim, samples_per_client는 1 이상이어야 함")
    if heterogeneity < 0 or noise < 0:
        raise ObjectiveError("heterogeneity, noise는 0 이상이어야 함")
    low, high = curvature_range
    rng = stream(seed, "problem")
    shared = _random_spd(rng, dim, low, high) if shared_curvature else None
    center = rng.standard_normal(dim)

    problem = []
    for _ in range(num_clients):
        curvature = shared if shared is not None else _random_spd(rng, dim, low, high)
        optimum = center + heterogeneity * rng.standard_normal(dim)
        linear = curvature @ optimum + noise * rng.standard_normal((samples_per_client, dim))
        problem.append(
            ClientObjective(
                kind="quadratic",
                features=linear,
                targets=np.zeros(samples_per_client),
                regularization=regularization,
                curvature=curvature,
            )
        )
    return problem


def build_objectives(
    dataset,
    partition,
    kind: str,
    regularization: float = 0.0,
    hidden: int = 16,
    curvature: float = 1.0,
) -> List[ClientObjective]:
    """분할된 데이터셋으로 클라이언트별 목적함수 생성

    least-squares는 라벨을 실수 타깃으로, quadratic은 특징 벡터를 선형항으로 사용한다.
    """
    problem = []
    for shard in partition.shards:
        feats = dataset.features[shard]
        labels = dataset.labels[shard]
        if kind == "quadratic":
            obj = ClientObjective(
                kind, feats, np.zeros(len(shard)), regularization, curvature=curvature * np.eye(feats.shape[1])
            )
        elif kind == "least-squares":
            obj = ClientObjective(kind, feats, labels.astype(np.float64), regularization)
        else:
            obj = ClientObjective(
                kind, feats, labels, regularization, num_classes=dataset.num_classes, hidden=hidden
            )
        problem.append(obj)
    return problem
