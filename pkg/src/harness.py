import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .fedopt import (
    METHOD_TABLE,
    TEST_COLUMN,
    DivergenceError,
    Experiment,
    MethodConfig,
    MethodConfigError,
    method_from_name,
    run,
    steps_from_epochs,
)
from .objectives import (
    ClientObjective,
    ObjectiveError,
    build_objectives,
    constants,
    make_quadratic_problem,
)
from .partition import Dataset, Partition, load_csv, make_synthetic, partition_similarity, split_holdout
from .rng import stream
from .theory import TheoryReport, build_report, trajectory_points
from .trace import DEFAULT_TRACE_CAP, Trace, TraceTooLargeError, save_trace

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "seed", "round", "loss", "grad_norm_sq", "divergence", "comm_floats"]
SUMMARY_METRICS = ["loss", "grad_norm_sq", "divergence"]
EXPECTED_ORDER = ("domo", "fedavgslm-z", "fedavgsm", "fedavg")
RESERVED_OVERRIDES = {"name", "P", "participation"}
# sweep 가능한 항목: 방법 하이퍼파라미터는 overrides로, 나머지는 실험 설정 최상위로 들어간다
METHOD_SWEEP_KEYS = ("mu_s", "mu_l", "alpha", "beta", "eta")
SPEC_SWEEP_KEYS = ("E", "P", "s")
INIT_SCALE = 0.1


class ConfigError(ValueError):
    """실험 설정 오류 (location: 문제가 된 키 경로)"""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


class EmitError(RuntimeError):
    """결과 파일 출력 실패"""


class ProblemSpec(BaseModel):
    """목적함수와 데이터 출처

    source: synthetic (가우시안 군집), csv (`label,feat...` 파일), quadratic (생성된 2차 문제)
    test_fraction > 0이면 클래스별로 그 비율만큼을 held-out 평가용으로 떼어 낸다.
    """

    model_config = ConfigDict(extra="forbid")

    kind: Literal["quadratic", "least-squares", "logistic", "mlp2"] = "least-squares"
    source: Literal["synthetic", "csv", "quadratic"] = "synthetic"
    path: Optional[str] = None
    num_classes: int = Field(4, ge=1)
    per_class: int = Field(64, ge=1)
    dim: int = Field(10, ge=1)
    class_separation: float = Field(3.0, ge=0.0)
    noise: float = Field(1.0, ge=0.0)
    regularization: float = Field(0.0, ge=0.0)
    hidden: int = Field(16, ge=1)
    curvature: float = Field(1.0, gt=0.0)
    samples_per_client: int = Field(32, ge=1)
    heterogeneity: float = Field(1.0, ge=0.0)
    curvature_range: Tuple[float, float] = (0.5, 2.0)
    shared_curvature: bool = False
    data_seed: Optional[int] = Field(None, ge=0)
    test_fraction: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_source(self):
        if self.source == "csv" and not self.path:
            raise ValueError("source=csv에는 path 필요")
        if self.source == "quadratic" and self.kind != "quadratic":
            raise ValueError("source=quadratic은 kind=quadratic과 함께 써야 함")
        if self.test_fraction > 0 and self.kind not in ("logistic", "mlp2"):
            raise ValueError("test_fraction은 logistic/mlp2에서만 쓸 수 있음")
        return self


class OutputSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    csv: Optional[str] = None
    summary: Optional[str] = None
    trace_dir: Optional[str] = None


class ExperimentSpec(BaseModel):
    """실험 설정 (JSON 스키마)

    seed 하나만 주면 seeds=[seed]로 바뀐다. E와 P 중 하나만 줄 수 있고
    둘 다 없으면 E=1이다. overrides는 방법 이름 또는 "all"을 키로 쓴다.
    sweep은 항목별 값 목록이고, 모든 조합(곱집합)마다 같은 실험을 반복한다.
    """

    model_config = ConfigDict(extra="forbid")

    problem: ProblemSpec = Field(default_factory=ProblemSpec)
    K: int = Field(16, ge=1)
    s: float = Field(0.1, ge=0.0, le=1.0)
    partition_seed: Optional[int] = Field(None, ge=0)
    methods: List[str] = Field(min_length=1)
    overrides: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    R: int = Field(ge=1)
    E: Optional[float] = Field(None, gt=0.0)
    P: Optional[int] = Field(None, ge=1)
    b: Optional[int] = Field(32, ge=1)
    participation: Optional[int] = Field(None, ge=1)
    seeds: List[int] = Field(min_length=1)
    trace: bool = False
    theory: bool = False
    max_eval_points: int = Field(50, ge=1)
    trace_cap: Optional[int] = Field(None, ge=1)
    workers: Optional[int] = Field(None, ge=1)
    outputs: OutputSpec = Field(default_factory=OutputSpec)
    sweep: Dict[str, List[float]] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _seed_alias(cls, data):
        if isinstance(data, dict) and "seed" in data:
            data = dict(data)
            seed = data.pop("seed")
            if "seeds" in data:
                raise ValueError("seed와 seeds를 함께 줄 수 없음")
            data["seeds"] = seed if isinstance(seed, list) else [seed]
        return data

    @property
    def fixed_problem(self) -> bool:
        """모든 시드가 같은 데이터/분할을 쓰는지"""
        if self.problem.source == "quadratic":
            return self.problem.data_seed is not None
        return self.problem.data_seed is not None and self.partition_seed is not None


def _validate_spec(spec: ExperimentSpec) -> ExperimentSpec:
    if spec.E is not None and spec.P is not None:
        raise ConfigError("E", "E와 P는 함께 줄 수 없음")
    for i, name in enumerate(spec.methods):
        if name.lower() not in METHOD_TABLE:
            raise ConfigError(f"methods.{i}", f"알 수 없는 방법: {name}")
    if len({name.lower() for name in spec.methods}) != len(spec.methods):
        raise ConfigError("methods", "중복된 방법 이름")
    if any(seed < 0 for seed in spec.seeds):
        raise ConfigError("seeds", "시드는 0 이상이어야 함")
    if len(set(spec.seeds)) != len(spec.seeds):
        raise ConfigError("seeds", "중복된 시드")
    if spec.participation is not None and spec.participation > spec.K:
        raise ConfigError("participation", f"participation {spec.participation} > K {spec.K}")
    if spec.theory and len(spec.seeds) > 1 and not spec.fixed_problem:
        raise ConfigError("theory", "시드 앙상블 검증에는 problem.data_seed (와 partition_seed) 고정 필요")

    methods = [name.lower() for name in spec.methods]
    for key, values in spec.overrides.items():
        if key != "all" and key not in methods:
            raise ConfigError(f"overrides.{key}", "methods에 없는 방법")
        for name in values:
            if name in RESERVED_OVERRIDES:
                raise ConfigError(f"overrides.{key}.{name}", "override할 수 없는 항목")
    for name in methods:
        try:
            resolve_method(spec, name, 1).participants_per_round(spec.K)
        except MethodConfigError as e:
            raise ConfigError(f"overrides.{name}", str(e)) from None
        except ValidationError as e:
            first = e.errors()[0]
            key = name if name in spec.overrides else "all"
            loc = ".".join(str(part) for part in first["loc"])
            raise ConfigError(f"overrides.{key}.{loc}" if loc else f"overrides.{key}", first["msg"]) from None

    if spec.sweep:
        if spec.trace or spec.theory:
            raise ConfigError("sweep", "sweep은 trace/theory와 함께 쓸 수 없음")
        for key, values in spec.sweep.items():
            if key not in METHOD_SWEEP_KEYS + SPEC_SWEEP_KEYS:
                raise ConfigError(f"sweep.{key}", f"sweep할 수 없는 항목 (가능: {METHOD_SWEEP_KEYS + SPEC_SWEEP_KEYS})")
            if not values:
                raise ConfigError(f"sweep.{key}", "값 목록이 비어 있음")
            if len(set(values)) != len(values):
                raise ConfigError(f"sweep.{key}", "중복된 값")
        if "E" in spec.sweep and "P" in spec.sweep:
            raise ConfigError("sweep", "E와 P는 함께 sweep할 수 없음")
        if any(value != int(value) for value in spec.sweep.get("P", [])):
            raise ConfigError("sweep.P", "P는 정수여야 함")
        expand_sweep(spec)
    return spec


def spec_from_dict(data: Dict[str, Any]) -> ExperimentSpec:
    try:
        spec = ExperimentSpec.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(location, first["msg"]) from None
    return _validate_spec(spec)


def parse_config(path: Union[str, Path]) -> ExperimentSpec:
    """JSON 설정 파일 로드 및 검증"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("", f"설정 파일을 읽을 수 없음: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"JSON 파싱 실패 ({e.lineno}번째 줄): {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("", "최상위 값은 JSON 객체여야 함")
    return spec_from_dict(data)


def resolve_method(spec: ExperimentSpec, name: str, P: int) -> MethodConfig:
    """방법별 설정: 기본값 ← overrides["all"] (고정 상수 제외) ← overrides[name]"""
    key = name.lower()
    pinned = METHOD_TABLE[key]
    values = {k: v for k, v in spec.overrides.get("all", {}).items() if k not in pinned}
    values.update(spec.overrides.get(key, {}))
    return method_from_name(key, P=P, participation=spec.participation, **values)


def expand_sweep(spec: ExperimentSpec) -> List[Tuple[Dict[str, float], ExperimentSpec]]:
    """sweep 곱집합을 (조합, 개별 실험 설정) 목록으로 펼침

    방법 하이퍼파라미터는 그 방법에 고정되지 않은 경우에만 overrides[방법]에 덮어쓴다
    (fusion=none 방법에는 beta를 넣지 않는다). E/P를 sweep하면 다른 쪽은 지운다.
    """
    if not spec.sweep:
        return [({}, spec)]
    keys = list(spec.sweep)
    methods = [name.lower() for name in spec.methods]
    variants = []
    for values in itertools.product(*(spec.sweep[key] for key in keys)):
        point = dict(zip(keys, values))
        data = spec.model_dump(mode="json", exclude={"sweep"})
        for key, value in point.items():
            if key in SPEC_SWEEP_KEYS:
                data[key] = int(value) if key == "P" else value
                if key in ("E", "P"):
                    data["P" if key == "E" else "E"] = None
                continue
            for name in methods:
                pinned = METHOD_TABLE[name]
                if key in pinned or (key == "beta" and pinned["fusion"] == "none"):
                    continue
                data["overrides"].setdefault(name, {})[key] = value
        try:
            variants.append((point, spec_from_dict(data)))
        except ConfigError as e:
            raise ConfigError("sweep", f"{point}: {e}") from None
    return variants


@dataclass
class Problem:
    """한 시드의 클라이언트 목적함수 (데이터셋/분할/held-out 집합은 있을 때만)"""

    objectives: List[ClientObjective]
    x0: np.ndarray
    steps: int
    dataset: Optional[Dataset] = None
    partition: Optional[Partition] = None
    test_set: Optional[Dataset] = None


def load_dataset(spec: ExperimentSpec, seed: int) -> Tuple[Dataset, Optional[Dataset]]:
    """시드별 (학습, held-out) 데이터셋 (test_fraction = 0이면 held-out은 None)"""
    problem = spec.problem
    data_seed = seed if problem.data_seed is None else problem.data_seed
    if problem.source == "csv":
        dataset = load_csv(problem.path)
    else:
        dataset = make_synthetic(
            problem.num_classes, problem.per_class, problem.dim, problem.class_separation, problem.noise, data_seed
        )
    if problem.test_fraction > 0:
        return split_holdout(dataset, problem.test_fraction, data_seed)
    return dataset, None


def build_dataset(spec: ExperimentSpec, seed: int) -> Tuple[Dataset, Partition]:
    """학습 데이터셋과 그 분할"""
    dataset, _ = load_dataset(spec, seed)
    return dataset, _partition(spec, dataset, seed)


def _partition(spec: ExperimentSpec, dataset: Dataset, seed: int) -> Partition:
    partition_seed = seed if spec.partition_seed is None else spec.partition_seed
    return partition_similarity(dataset, spec.K, spec.s, partition_seed)


def build_problem(spec: ExperimentSpec, seed: int) -> Problem:
    """시드별 문제 구성 (같은 시드면 모든 방법이 같은 문제를 공유)"""
    cfg = spec.problem
    dataset = partition = test_set = None
    if cfg.source == "quadratic":
        objectives = make_quadratic_problem(
            spec.K,
            cfg.dim,
            cfg.samples_per_client,
            cfg.heterogeneity,
            cfg.noise,
            cfg.curvature_range,
            cfg.shared_curvature,
            cfg.regularization,
            seed=seed if cfg.data_seed is None else cfg.data_seed,
        )
    else:
        dataset, test_set = load_dataset(spec, seed)
        partition = _partition(spec, dataset, seed)
        objectives = build_objectives(dataset, partition, cfg.kind, cfg.regularization, cfg.hidden, cfg.curvature)

    if spec.P is not None:
        steps = spec.P
    else:
        largest = max(obj.num_samples for obj in objectives)
        steps = steps_from_epochs(spec.E if spec.E is not None else 1.0, largest, spec.b)

    dim = objectives[0].dim
    if cfg.kind == "mlp2":
        x0 = INIT_SCALE * stream(seed, "init").standard_normal(dim)
    else:
        x0 = np.zeros(dim)
    return Problem(
        objectives=objectives, x0=x0, steps=steps, dataset=dataset, partition=partition, test_set=test_set
    )


@dataclass
class CellResult:
    method: str
    seed: int
    history: Optional[pd.DataFrame] = None
    trace: Optional[Trace] = None
    error: Optional[str] = None


@dataclass
class Metrics:
    """라운드별 기록 (CSV_COLUMNS [+ test_accuracy])과 실패한 (방법, 시드) 칸"""

    rows: pd.DataFrame
    failed: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.rows.empty

    @property
    def columns(self) -> List[str]:
        """CSV 열 (held-out 평가가 있으면 test_accuracy 추가)"""
        return CSV_COLUMNS + ([TEST_COLUMN] if TEST_COLUMN in self.rows.columns else [])

    def final(self) -> pd.DataFrame:
        """(방법, 시드)별 마지막 라운드 값"""
        last = self.rows.groupby(["method", "seed"], sort=False)["round"].transform("max")
        return self.rows[self.rows["round"] == last].reset_index(drop=True)

    def summary(self) -> pd.DataFrame:
        """방법별 최종값 평균 ± 표준편차 (n−1 분모)"""
        final = self.final()
        grouped = final.groupby("method", sort=False)
        names = SUMMARY_METRICS + ([TEST_COLUMN] if TEST_COLUMN in final.columns else [])
        table = grouped[names].agg(["mean", "std"])
        table.columns = [f"{metric}_{stat}" for metric, stat in table.columns]
        table["runs"] = grouped.size()
        table["comm_floats"] = grouped["comm_floats"].max()
        return table.reset_index()


@dataclass
class CompareResult:
    metrics: Metrics
    reports: Dict[str, TheoryReport] = field(default_factory=dict)
    traces: Dict[Tuple[str, int], Trace] = field(default_factory=dict)


def _run_cell(spec: ExperimentSpec, method: str, seed: int, problem: Problem, record_trace: bool) -> CellResult:
    cfg = resolve_method(spec, method, problem.steps)
    experiment = Experiment(
        objectives=problem.objectives,
        config=cfg,
        rounds=spec.R,
        seed=seed,
        batch_size=spec.b,
        x0=problem.x0,
        record_trace=record_trace,
        trace_cap=spec.trace_cap or DEFAULT_TRACE_CAP,
        test_set=None if problem.test_set is None else (problem.test_set.features, problem.test_set.labels),
    )
    try:
        result = run(experiment)
    except (DivergenceError, ObjectiveError, TraceTooLargeError) as e:
        logger.warning("실행 실패 (%s, seed=%d): %s", method, seed, e)
        return CellResult(method, seed, error=str(e))
    history = result.history.copy()
    history.insert(0, "seed", seed)
    history.insert(0, "method", method)
    return CellResult(method, seed, history=history, trace=result.trace)


def compare(spec: ExperimentSpec, workers: int = 1) -> CompareResult:
    """모든 (방법, 시드) 조합 실행

    결과 조립 순서는 작업자 수와 무관하게 (methods 순서, seeds 순서)로 고정된다.
    """
    if spec.sweep:
        raise ConfigError("sweep", "sweep 설정은 run_sweep (sweep 명령)으로 실행")
    methods = [name.lower() for name in spec.methods]
    problems = {seed: build_problem(spec, seed) for seed in spec.seeds}
    record_trace = spec.trace or spec.theory
    cells = [(method, seed) for method in methods for seed in spec.seeds]
    logger.info("비교 시작: %d개 방법 × %d개 시드, workers=%d", len(methods), len(spec.seeds), workers)

    def work(cell):
        method, seed = cell
        return _run_cell(spec, method, seed, problems[seed], record_trace)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(cell) for cell in cells]

    frames = [res.history for res in results if res.history is not None]
    columns = CSV_COLUMNS + ([TEST_COLUMN] if spec.problem.test_fraction > 0 else [])
    rows = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
    failed = [{"method": res.method, "seed": res.seed, "error": res.error} for res in results if res.error]
    traces = {(res.method, res.seed): res.trace for res in results if res.trace is not None}

    if spec.trace and spec.outputs.trace_dir:
        for (method, seed), trace in traces.items():
            meta = {"spec": spec.model_dump(mode="json"), "method": method, "seed": seed}
            save_trace(trace, Path(spec.outputs.trace_dir) / f"{method}_seed{seed}.trace", meta)

    reports = {}
    if spec.theory:
        for method in methods:
            group = [traces[(method, seed)] for seed in spec.seeds if (method, seed) in traces]
            if group:
                reports[method] = theory_report(spec, group, problems[spec.seeds[0]].objectives)
    return CompareResult(metrics=Metrics(rows=rows[columns], failed=failed), reports=reports, traces=traces)


def theory_report(
    spec: ExperimentSpec, traces: Sequence[Trace], objectives: Sequence[ClientObjective]
) -> TheoryReport:
    """궤적 위에서 상수를 구한 뒤 이론 검증"""
    points = trajectory_points(traces, spec.max_eval_points)
    found = constants(objectives, points=points, batch_size=spec.b)
    return build_report(traces, objectives, found)


class MethodSummary(BaseModel):
    method: str
    runs: int
    loss_mean: Optional[float] = None
    loss_std: Optional[float] = None
    grad_norm_sq_mean: Optional[float] = None
    grad_norm_sq_std: Optional[float] = None
    divergence_mean: Optional[float] = None
    divergence_std: Optional[float] = None
    test_accuracy_mean: Optional[float] = None
    test_accuracy_std: Optional[float] = None
    comm_floats: int


class Summary(BaseModel):
    """JSON 요약 출력"""

    config: Optional[Dict[str, Any]] = None
    methods: List[MethodSummary]
    failed: List[Dict[str, Any]] = Field(default_factory=list)
    reports: Dict[str, TheoryReport] = Field(default_factory=dict)


def _finite_or_none(value) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


def build_summary(
    metrics: Metrics, reports: Optional[Dict[str, TheoryReport]] = None, spec: Optional[ExperimentSpec] = None
) -> Summary:
    methods = []
    for row in metrics.summary().to_dict(orient="records"):
        stats = {key: _finite_or_none(row[key]) for key in row if key.endswith(("_mean", "_std"))}
        methods.append(
            MethodSummary(method=row["method"], runs=int(row["runs"]), comm_floats=int(row["comm_floats"]), **stats)
        )
    return Summary(
        config=spec.model_dump(mode="json") if spec is not None else None,
        methods=methods,
        failed=metrics.failed,
        reports=reports or {},
    )


def emit(
    metrics: Metrics,
    reports: Optional[Dict[str, TheoryReport]],
    format: Literal["csv", "json"],
    path: Union[str, Path],
    spec: Optional[ExperimentSpec] = None,
) -> Path:
    """metrics를 CSV (라운드별 행) 또는 JSON 요약으로 저장"""
    if metrics.empty:
        raise EmitError("출력할 metrics가 없음")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if format == "csv":
            metrics.rows[metrics.columns].to_csv(path, index=False, float_format="%.17g")
        elif format == "json":
            path.write_text(build_summary(metrics, reports, spec).model_dump_json(indent=2), encoding="utf-8")
        else:
            raise EmitError(f"지원하지 않는 형식: {format}")
    except OSError as e:
        raise EmitError(f"파일을 쓸 수 없음: {path} ({e})") from None
    logger.info("결과 저장: %s", path)
    return path


@dataclass
class SweepResult:
    """sweep 조합별 최종 라운드 기록 (앞쪽 열이 sweep 항목)"""

    keys: List[str]
    final: pd.DataFrame
    failed: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.final.empty

    def summary(self) -> pd.DataFrame:
        """(조합, 방법)별 최종값 평균 ± 표준편차"""
        names = SUMMARY_METRICS + ([TEST_COLUMN] if TEST_COLUMN in self.final.columns else [])
        grouped = self.final.groupby(self.keys + ["method"], sort=False)
        table = grouped[names].agg(["mean", "std"])
        table.columns = [f"{metric}_{stat}" for metric, stat in table.columns]
        table["runs"] = grouped.size()
        return table.reset_index()


class SweepSummary(BaseModel):
    """sweep JSON 요약 출력"""

    config: Optional[Dict[str, Any]] = None
    keys: List[str]
    points: List[Dict[str, Any]]
    failed: List[Dict[str, Any]] = Field(default_factory=list)


def run_sweep(spec: ExperimentSpec, workers: int = 1) -> SweepResult:
    """sweep 곱집합의 조합마다 compare 실행 (조합은 sweep 선언 순서의 사전식 순서)"""
    variants = expand_sweep(spec)
    keys = list(spec.sweep)
    logger.info("sweep 시작: %d개 조합 (%s)", len(variants), ", ".join(keys) or "-")
    frames, failed = [], []
    for point, variant in variants:
        metrics = compare(variant, workers=workers).metrics
        final = metrics.final()[metrics.columns]
        for i, key in enumerate(keys):
            final.insert(i, key, point[key])
        frames.append(final)
        failed.extend({**point, **cell} for cell in metrics.failed)
        logger.info("sweep %s: 실패 %d칸", point, len(metrics.failed))
    return SweepResult(keys=keys, final=pd.concat(frames, ignore_index=True), failed=failed)


def emit_sweep(
    result: SweepResult, format: Literal["csv", "json"], path: Union[str, Path], spec: Optional[ExperimentSpec] = None
) -> Path:
    """sweep 결과를 CSV ((조합, 방법, 시드)별 최종 행) 또는 JSON 요약으로 저장"""
    if result.empty:
        raise EmitError("출력할 sweep 결과가 없음")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if format == "csv":
            result.final.to_csv(path, index=False, float_format="%.17g")
        elif format == "json":
            points = [
                {key: _finite_or_none(value) if isinstance(value, float) else value for key, value in row.items()}
                for row in result.summary().to_dict(orient="records")
            ]
            summary = SweepSummary(
                config=spec.model_dump(mode="json") if spec is not None else None,
                keys=result.keys,
                points=points,
                failed=result.failed,
            )
            path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
        else:
            raise EmitError(f"지원하지 않는 형식: {format}")
    except OSError as e:
        raise EmitError(f"파일을 쓸 수 없음: {path} ({e})") from None
    logger.info("sweep 결과 저장: %s", path)
    return path


def ordering_report(
    metrics: Metrics, order: Sequence[str] = EXPECTED_ORDER, metric: str = "grad_norm_sq"
) -> pd.DataFrame:
    """시드별로 최종 metric이 order 순서대로 나오는지 판정

    test_accuracy는 크거나 같게, 나머지는 작거나 같게 나와야 순서대로 본다.
    """
    final = metrics.final()
    if metric not in final.columns:
        raise ConfigError("metric", f"기록에 없는 metric: {metric}")
    table = final.pivot(index="seed", columns="method", values=metric)
    present = [name for name in order if name in table.columns]
    if len(present) < 2:
        raise ConfigError("methods", f"순서 비교에는 {list(order)} 중 2개 이상 필요")
    table = table[present]
    values = table.to_numpy(dtype=np.float64)
    higher_is_better = metric == TEST_COLUMN
    if higher_is_better:
        table["ordered"] = np.all(values[:, :-1] >= values[:, 1:], axis=1)
    else:
        table["ordered"] = np.all(values[:, :-1] <= values[:, 1:], axis=1)
    table = table.reset_index()
    sign = " ≥ " if higher_is_better else " ≤ "
    for seed in table.loc[~table["ordered"], "seed"]:
        logger.warning("seed=%d: %s 기대 순서 %s와 다름", seed, metric, sign.join(present))
    return table
