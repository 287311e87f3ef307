"""Command-line entry point: run, compare, sweep, verify, partition-stats"""

import argparse
import logging
import sys
from typing import List, Optional

from .harness import (
    ConfigError,
    EmitError,
    ExperimentSpec,
    build_dataset,
    build_problem,
    compare,
    emit,
    emit_sweep,
    parse_config,
    run_sweep,
    spec_from_dict,
    theory_report,
)
from .objectives import ObjectiveError
from .partition import DatasetFormatError, PartitionError, partition_stats
from .trace import TraceFormatError, load_trace
from .utils import get_trace_cap, get_workers, load_env, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="연합 최적화 모멘텀 시뮬레이터")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="단일 방법 실행")
    run_p.add_argument("--config", required=True, help="실험 설정 JSON 경로")
    run_p.add_argument("--method", required=True, help="방법 이름 (예: domo)")
    run_p.add_argument("--seed", type=int, help="시드 (설정 파일의 seeds 대신 사용)")

    cmp_p = sub.add_parser("compare", help="방법 × 시드 전체 실행")
    cmp_p.add_argument("--config", required=True, help="실험 설정 JSON 경로")
    cmp_p.add_argument("--workers", type=int, help="병렬 작업자 수 (기본: DOMO_WORKERS)")

    sw_p = sub.add_parser("sweep", help="하이퍼파라미터 조합 (설정 파일의 sweep) 전체 실행")
    sw_p.add_argument("--config", required=True, help="실험 설정 JSON 경로")
    sw_p.add_argument("--workers", type=int, help="병렬 작업자 수 (기본: DOMO_WORKERS)")

    for p in (run_p, cmp_p, sw_p):
        p.add_argument("--out", help="결과 파일 경로 (기본: 설정 파일의 outputs)")
        p.add_argument("--format", choices=["csv", "json"], default="csv", help="출력 형식")
    for p in (run_p, cmp_p):
        p.add_argument("--trace", help="trace 저장 디렉터리")

    ver_p = sub.add_parser("verify", help="저장된 trace 이론 검증")
    ver_p.add_argument("traces", nargs="+", help="trace 파일 경로 (같은 설정의 시드 앙상블)")
    ver_p.add_argument("--out", help="보고서 JSON 경로 (기본: 표준 출력)")
    ver_p.add_argument("--strict", action="store_true", help="상한 위반 시 종료 코드 1")

    st_p = sub.add_parser("partition-stats", help="shard 라벨 분포 출력")
    st_p.add_argument("--config", required=True, help="실험 설정 JSON 경로")
    st_p.add_argument("--seed", type=int, help="분할 시드")
    st_p.add_argument("--out", help="CSV 저장 경로")
    return parser


def _load_spec(args, method: Optional[str] = None) -> ExperimentSpec:
    spec = parse_config(args.config)
    data = spec.model_dump(mode="json")
    if method is not None:
        key = method.lower()
        data["methods"] = [key]
        data["overrides"] = {k: v for k, v in data["overrides"].items() if k in ("all", key)}
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
    if getattr(args, "trace", None):
        data["trace"] = True
        data["outputs"]["trace_dir"] = args.trace
    if data["trace_cap"] is None:
        data["trace_cap"] = get_trace_cap()
    return spec_from_dict(data)


def _run_grid(args, spec: ExperimentSpec, workers: int) -> int:
    result = compare(spec, workers=workers)
    metrics = result.metrics
    if metrics.empty:
        print("❌ 모든 실행이 실패함")
        for cell in metrics.failed:
            print(f"  - {cell['method']} seed={cell['seed']}: {cell['error']}")
        return EXIT_FAILED

    out = args.out or (spec.outputs.csv if args.format == "csv" else spec.outputs.summary)
    if out:
        emit(metrics, result.reports, args.format, out, spec)
        print(f"✅ 결과 저장: {out}")
    else:
        print(metrics.summary().to_string(index=False))
    if args.format == "csv" and spec.outputs.summary and not args.out:
        emit(metrics, result.reports, "json", spec.outputs.summary, spec)
    for cell in metrics.failed:
        print(f"⚠️ 실패: {cell['method']} seed={cell['seed']}: {cell['error']}")
    return EXIT_FAILED if metrics.failed else EXIT_OK


def cmd_run(args) -> int:
    return _run_grid(args, _load_spec(args, method=args.method), workers=1)


def cmd_compare(args) -> int:
    spec = _load_spec(args)
    workers = args.workers or spec.workers or get_workers()
    return _run_grid(args, spec, workers)


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    if not spec.sweep:
        raise ConfigError("sweep", "설정 파일에 sweep 항목이 없음")
    workers = args.workers or spec.workers or get_workers()
    result = run_sweep(spec, workers=workers)
    if result.empty:
        print("❌ 모든 실행이 실패함")
        return EXIT_FAILED

    out = args.out or (spec.outputs.csv if args.format == "csv" else spec.outputs.summary)
    if out:
        emit_sweep(result, args.format, out, spec)
        print(f"✅ sweep 결과 저장: {out}")
    else:
        print(result.summary().to_string(index=False))
    if args.format == "csv" and spec.outputs.summary and not args.out:
        emit_sweep(result, "json", spec.outputs.summary, spec)
    for cell in result.failed:
        point = ", ".join(f"{key}={cell[key]}" for key in result.keys)
        print(f"⚠️ 실패: [{point}] {cell['method']} seed={cell['seed']}: {cell['error']}")
    return EXIT_FAILED if result.failed else EXIT_OK


def cmd_verify(args) -> int:
    traces = []
    specs = []
    for path in args.traces:
        trace, meta = load_trace(path)
        if "spec" not in meta:
            raise ConfigError("meta.spec", f"trace 사이드카에 실험 설정이 없음: {path}")
        traces.append(trace)
        specs.append(meta["spec"])
    settings = [{key: value for key, value in s.items() if key != "outputs"} for s in specs]
    if any(other != settings[0] for other in settings[1:]):
        raise ConfigError("traces", "실험 설정이 서로 다른 trace는 함께 검증할 수 없음")
    spec = spec_from_dict(specs[0])
    seeds = sorted({trace.seed for trace in traces})
    if len(seeds) > 1 and not spec.fixed_problem:
        raise ConfigError("traces", f"시드 {seeds}의 문제가 서로 다름 (problem.data_seed와 partition_seed 고정 필요)")
    problem = build_problem(spec, traces[0].seed)
    report = theory_report(spec, traces, problem.objectives)

    text = report.model_dump_json(indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"✅ 보고서 저장: {args.out}")
    else:
        print(text)

    failed = [check.name for check in report.checks if check.status == "fail"]
    if failed:
        print(f"⚠️ 상한/항등식 위반: {', '.join(failed)}")
    return EXIT_FAILED if (args.strict and failed) else EXIT_OK


def cmd_partition_stats(args) -> int:
    spec = _load_spec(args)
    if spec.problem.source == "quadratic":
        raise ConfigError("problem.source", "quadratic 문제에는 라벨 분할이 없음")
    dataset, partition = build_dataset(spec, spec.seeds[0])
    table = partition_stats(dataset, partition)
    if args.out:
        table.to_csv(args.out, index=False)
        print(f"✅ 분할 통계 저장: {args.out}")
    else:
        print(table.to_string(index=False))
    print(f"partition digest: {partition.digest()}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "partition-stats": cmd_partition_stats,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_env()
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError, PartitionError, TraceFormatError, EmitError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ObjectiveError, ValueError, OSError) as e:
        print(f"❌ 입력 오류: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
