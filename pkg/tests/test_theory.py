from dataclasses import replace

import numpy as np
import pytest

from src.fedopt import Experiment, MethodConfig, method_from_name, run
from src.objectives import ClientObjective, ProblemConstants, constants, make_quadratic_problem
from src.rng import stream
from src.theory import (
    TheoryReport,
    TraceIncompleteError,
    inconsistency_coefficients,
    build_report,
    check_divergence_bound,
    check_inconsistency_bound,
    check_lemma1,
    check_lemma2_closed_form,
    check_stitching,
    check_theorem1,
    client_divergence,
    comm_cost,
    inconsistency_h,
    inconsistency_ratio_study,
    lemma1_in_scope,
    lemma2_gap,
    lemma2_residuals,
    reconstruct_z,
    replay_with_frozen_gradients,
    theorem1_terms,
    trajectory_points,
)


def _trace(problem, name, rounds=4, seed=0, batch_size=4, x0=None, **overrides):
    overrides.setdefault("eta", 0.05)
    overrides.setdefault("P", 3)
    cfg = method_from_name(name, **overrides)
    experiment = Experiment(problem, cfg, rounds=rounds, seed=seed, batch_size=batch_size, x0=x0, record_trace=True)
    return run(experiment).trace


@pytest.fixture
def problem():
    return make_quadratic_problem(3, 4, samples_per_client=16, heterogeneity=1.0, noise=0.5, seed=0)


@pytest.fixture
def matched(problem):
    """β = μ_sα/(1−μ_s)인 DOMO"""
    return _trace(problem, "domo", alpha=0.1, beta=0.9)


class TestReconstruction:
    """보조 수열 복원 테스트"""

    def test_starts_at_initial_model(self, matched):
        z, yhat = reconstruct_z(matched)
        assert np.array_equal(z[0, 0], matched.x_server[0])
        assert np.array_equal(yhat[0, 0], matched.x_server[0])

    def test_increments(self, matched):
        _, yhat = reconstruct_z(matched)
        cfg = matched.config
        c = cfg.alpha * cfg.eta / ((1.0 - cfg.mu_s) * matched.num_participants)
        buffers = matched.m_local.sum(axis=2)
        assert np.allclose(yhat[:, 1:] - yhat[:, :-1], -c * buffers[:, 1:], rtol=0, atol=1e-12)
        assert np.array_equal(yhat[1:, 0], yhat[:-1, -1])

    def test_non_finite_rejected(self, matched):
        matched.grads[1, 0, 0, 0] = np.nan
        with pytest.raises(TraceIncompleteError):
            reconstruct_z(matched)

    def test_scalar_two_round_replay(self):
        """1차원 두 클라이언트, 두 라운드: 스칼라 루프로 다시 계산한 z와 비교

        z_{r,p} = ŷ_{r,p}/(1−μ_l) − μ_l/(1−μ_l)·ŷ_{r,p−1} 형태로 계산한다.
        """
        curvature, linear = [1.0, 2.0], [1.0, -0.5]
        problem = [
            ClientObjective("quadratic", [[b]], [0.0], curvature=[[a]]) for a, b in zip(curvature, linear)
        ]
        mu, alpha, eta, steps, x0 = 0.5, 0.5, 0.1, 2, 1.0
        beta = mu * alpha / (1.0 - mu)
        trace = _trace(
            problem, "domo", rounds=2, batch_size=None, x0=np.array([x0]),
            mu_s=mu, mu_l=mu, alpha=alpha, beta=beta, eta=eta, P=steps,
        )

        x_server, m_server = x0, 0.0
        buffers = []
        for _ in range(2):
            totals, sums = [], [0.0] * (steps + 1)
            for a, b in zip(curvature, linear):
                x = x_server - eta * beta * steps * m_server
                m = total = 0.0
                for p in range(steps):
                    m = mu * m + (a * x - b)
                    x -= eta * m
                    total += m
                    sums[p + 1] += m
                totals.append(total / steps)
            buffers.append(sums)
            m_server = mu * m_server + sum(totals) / 2
            x_server -= alpha * eta * steps * m_server

        c = alpha * eta / ((1.0 - mu) * 2)
        yhat, expected = x0, []
        for sums in buffers:
            row, previous = [], yhat
            for p in range(steps + 1):
                yhat -= c * sums[p]
                row.append(yhat / (1.0 - mu) - mu / (1.0 - mu) * previous)
                previous = yhat
            expected.append(row)

        z, _ = reconstruct_z(trace)
        assert np.allclose(z[:, :, 0], expected, rtol=0, atol=1e-12)
        assert trace.x_server[-1, 0] == pytest.approx(x_server, abs=1e-12)


class TestLemma1:
    """z 갱신 규칙 테스트"""

    def test_matched_fusion_passes(self, matched):
        result = check_lemma1(matched)
        assert result.status == "pass"
        assert result.residual <= result.tolerance

    @pytest.mark.parametrize("name", ["fedavg", "fedavglm-z", "fedavgsm", "fedavglm"])
    def test_in_scope_methods(self, problem, name):
        result = check_lemma1(_trace(problem, name))
        assert result.status == "pass"
        assert result.residual < 1e-12

    def test_out_of_scope(self, problem):
        assert not lemma1_in_scope(method_from_name("fedavgslm-z"))
        assert not lemma1_in_scope(method_from_name("domo"))
        result = check_lemma1(_trace(problem, "fedavgslm-z"))
        assert result.status == "not-applicable"
        assert result.failing_preconditions == ["fusion_coefficient"]

    def test_randomized_suite(self):
        rng = stream(1, "test-lemma1")
        problem = make_quadratic_problem(3, 3, samples_per_client=8, noise=0.5, seed=5)
        for i in range(50):
            mu_s = float(rng.uniform(0.1, 0.95))
            alpha = float(rng.uniform(0.05, 1.0))
            cfg = MethodConfig(
                name=f"suite-{i}",
                mu_s=mu_s,
                mu_l=float(rng.uniform(0.0, 0.95)),
                alpha=alpha,
                beta=mu_s * alpha / (1.0 - mu_s),
                boundary="average" if i % 2 else "reset",
                fusion="pre",
                eta=float(rng.uniform(0.001, 0.02)),
                P=int(rng.integers(1, 5)),
            )
            trace = run(Experiment(problem, cfg, rounds=3, seed=i, batch_size=2, record_trace=True)).trace
            result = check_lemma1(trace)
            assert result.status == "pass", cfg

    def test_fault_injection(self, matched):
        matched.grads[2, 1, 0, 3] += 1e-3
        result = check_lemma1(matched)
        assert result.status == "fail"
        assert result.residual >= 1e-5


class TestStitching:
    """라운드 경계 연결 테스트"""

    def test_average_boundary_stitches(self, problem):
        assert check_stitching(_trace(problem, "fedavglm")).status == "pass"

    def test_reset_gap_matches_prediction(self, matched):
        result = check_stitching(matched)
        cfg = matched.config
        kappa = cfg.mu_l * cfg.alpha * cfg.eta / ((1.0 - cfg.mu_s) * (1.0 - cfg.mu_l) * matched.num_participants)
        predicted = kappa * np.max(np.linalg.norm(matched.m_local[:-1, -1].sum(axis=1), axis=-1))
        assert result.status == "fail"
        assert result.residual == pytest.approx(predicted, rel=1e-9)
        assert any("κ" in note for note in result.notes)

    def test_reset_without_local_momentum(self, problem):
        assert check_stitching(_trace(problem, "fedavgsm")).status == "pass"

    def test_single_round(self, problem):
        result = check_stitching(_trace(problem, "domo", rounds=1))
        assert result.status == "pass" and result.residual == 0.0


class TestLemma2:
    """z − x̄ 폐형식 테스트"""

    @pytest.mark.parametrize(
        "name, overrides",
        [
            ("domo", {"alpha": 0.1, "beta": 0.9}),
            ("domo", {}),
            ("domo-s", {}),
            ("fedavgslm-z", {}),
            ("fedavglm", {"alpha": 0.7}),
            ("fedavg", {}),
        ],
    )
    def test_closed_form(self, problem, name, overrides):
        result = check_lemma2_closed_form(_trace(problem, name, **overrides))
        assert result.status == "pass", result

    def test_partial_participation(self):
        problem = make_quadratic_problem(5, 3, samples_per_client=8, noise=0.3, seed=4)
        result = check_lemma2_closed_form(_trace(problem, "domo", rounds=6, participation=2))
        assert result.status == "pass"

    def test_first_step_without_fusion(self, problem):
        """fusion 없음, p=0: ‖z − x̄‖ = αηPμ_s/(1−μ_s)·‖m_r‖"""
        trace = _trace(problem, "fedavgslm-z")
        cfg = trace.config
        gap = np.linalg.norm(lemma2_gap(trace)[:, 0], axis=-1)
        scale = cfg.alpha * cfg.eta * cfg.P * cfg.mu_s / (1.0 - cfg.mu_s)
        expected = scale * np.linalg.norm(trace.m_server[:-1], axis=-1)
        assert np.allclose(gap, expected, rtol=1e-8, atol=1e-12)

    def test_vanishes_without_local_momentum(self, problem):
        trace = _trace(problem, "domo", alpha=0.1, beta=0.9, mu_l=0.0)
        assert np.max(np.abs(lemma2_gap(trace))) < 1e-10

    def test_main_text_coefficient_reported(self, matched):
        notes = check_lemma2_closed_form(matched).notes
        assert notes[0].startswith("main_text_residual=")

    @pytest.mark.parametrize(
        "name, overrides",
        [
            ("domo", {"mu_s": 0.5, "alpha": 0.5, "beta": 0.5, "mu_l": 0.6}),
            ("domo", {"mu_s": 0.9, "alpha": 0.1, "beta": 0.9, "mu_l": 0.3}),
            ("fedavglm-z", {"alpha": 1.0, "mu_l": 0.6}),
        ],
    )
    def test_coefficients_agree_when_alpha_is_one_minus_mu_s(self, problem, name, overrides):
        trace = _trace(problem, name, **overrides)
        residual, alternate = lemma2_residuals(trace)
        assert residual <= 1e-10
        assert alternate == pytest.approx(residual, abs=1e-12)

    def test_coefficients_differ_otherwise(self, problem):
        trace = _trace(problem, "domo", mu_s=0.9, alpha=0.05, beta=0.45)
        residual, alternate = lemma2_residuals(trace)
        assert residual <= 1e-10
        assert alternate > 1e3 * max(residual, 1e-14)


class TestInconsistency:
    """불일치 상한 테스트"""

    def test_local_momentum_only(self, problem):
        result = check_inconsistency_bound(_trace(problem, "fedavglm-z", rounds=6))
        assert result.status == "pass"
        assert result.lhs <= result.rhs_exact + result.tolerance
        assert result.notes == []

    def test_preconditions(self, problem):
        result = check_inconsistency_bound(_trace(problem, "domo"))
        assert result.status == "not-applicable"
        assert "fusion_coefficient" in result.failing_preconditions
        result = check_inconsistency_bound(_trace(problem, "domo", alpha=0.01, beta=0.09, mu_l=0.5))
        assert "alpha_lower_bound" in result.failing_preconditions

    def test_unit_scale_coefficients(self):
        h, rigorous = inconsistency_h(0.9, 0.6, 0.1, 4)
        assert rigorous
        assert np.allclose(h, 1.5)
        table = inconsistency_coefficients(0.9, 0.6, 0.1, 4)
        assert np.allclose(table["definition"], 1.5)
        assert table["discrepancy"].max() < 1e-12

    def test_simplified_form_discrepancy(self):
        table = inconsistency_coefficients(0.0, 0.5, 0.5, 3)
        assert set(table["coefficient"]) == {"h1", "h2"}
        assert table["discrepancy"].max() > 0.5
        first = table[(table["coefficient"] == "h2") & (table["i"] == 1)]
        assert np.allclose(first["discrepancy"], 0.0)

    def test_randomized_configs(self):
        rng = stream(0, "test-inconsistency")
        problem = make_quadratic_problem(2, 3, samples_per_client=8, noise=0.5, seed=11)
        for _ in range(50):
            mu_l = float(rng.uniform(0.0, 0.9))
            steps = int(rng.integers(1, 5))
            scale = 1.0 if rng.random() < 0.3 else float(rng.uniform(1.0 - mu_l, 1.5))
            if rng.random() < 0.5:
                mu_s = float(rng.uniform(0.1, 0.9))
                alpha = (1.0 - mu_s) * scale
                overrides = {"mu_s": mu_s, "alpha": alpha, "beta": mu_s * alpha / (1.0 - mu_s)}
                name = "domo"
            else:
                overrides = {"alpha": scale}
                name = "fedavglm-z" if rng.random() < 0.5 else "fedavglm"
            trace = _trace(problem, name, rounds=3, eta=0.02, P=steps, mu_l=mu_l, **overrides)
            result = check_inconsistency_bound(trace)
            assert result.status == "pass", overrides
            assert result.lhs <= result.rhs_exact + result.tolerance, overrides
            if not inconsistency_h(trace.config.mu_s, mu_l, trace.config.alpha, steps)[1]:
                exceeded = result.lhs > result.rhs + result.tolerance
                assert exceeded == any(note.startswith("rhs 초과") for note in result.notes), overrides

    def test_verdict_follows_rigorous_bound(self, problem):
        """α ≠ 1−μ_s이면 rhs_exact로 판정하고 그 사실을 notes에 남김"""
        trace = _trace(problem, "domo", mu_s=0.5, alpha=0.75, beta=0.75, mu_l=0.6, eta=0.02, rounds=3)
        result = check_inconsistency_bound(trace)
        assert not inconsistency_h(0.5, 0.6, 0.75, 3)[1]
        assert result.status == "pass"
        assert result.slack == pytest.approx(result.rhs_exact / result.lhs)
        assert "rhs_exact로 판정" in result.notes[0]

        tight = replace(trace, grads=np.zeros_like(trace.grads))
        failed = check_inconsistency_bound(tight)
        assert failed.rhs_exact == 0.0 and failed.rhs == 0.0
        assert failed.lhs > failed.tolerance
        assert failed.status == "fail"

    def test_reset_boundary_within_average_bound(self, problem):
        """reset 경계 실행의 lhs도 buffer 평균 경계에서 유도한 rhs 안에 들어감 (시드 앙상블)"""
        overrides = {"mu_s": 0.5, "alpha": 0.5, "beta": 0.5, "mu_l": 0.6, "eta": 0.02}
        results = []
        for seed in range(10):
            trace = _trace(problem, "domo", rounds=5, seed=seed, **overrides)
            assert trace.config.boundary == "reset"
            results.append(check_inconsistency_bound(trace))
        assert all(result.status == "pass" for result in results)
        assert all(result.lhs <= result.rhs for result in results)
        assert np.mean([r.lhs for r in results]) <= np.mean([r.rhs for r in results])

        averaged = check_inconsistency_bound(_trace(problem, "fedavglm", rounds=5, mu_l=0.6, eta=0.02))
        assert averaged.status == "pass"
        assert averaged.notes == []

    def test_ratio_study(self):
        study = inconsistency_ratio_study(0.9, 0.9, 5)
        assert study.alpha == pytest.approx(0.01)
        assert study.ratio == pytest.approx(2.31856e-4, rel=1e-3)
        assert study.claimed == pytest.approx(0.01)
        assert study.consistent_with_claim

    def test_ratio_study_with_trace(self, problem):
        trace = _trace(problem, "fedavglm-z", mu_l=0.6)
        study = inconsistency_ratio_study(0.9, 0.6, 3, trace)
        assert study.rhs_fused / study.rhs_local_momentum == pytest.approx(study.ratio)


class TestDivergence:
    """클라이언트 발산 상한 테스트"""

    def test_identical_clients(self):
        obj = make_quadratic_problem(1, 3, noise=0.5, seed=2)[0]
        trace = _trace([obj, obj], "domo", batch_size=None)
        assert np.all(client_divergence(trace) == 0.0)

    def test_bound_holds(self, problem):
        traces = [_trace(problem, "domo", eta=0.01, rounds=5, seed=s) for s in range(3)]
        found = constants(problem, points=trajectory_points(traces), batch_size=4)
        result = check_divergence_bound(traces, found)
        assert result.status == "pass"
        assert 0.0 < result.lhs <= result.rhs

    def test_full_batch_heterogeneous_ensemble(self):
        """σ² = 0: 서로 다른 2차 문제 20개에서 lhs ≤ 9η²P²G²/(1−μ_l)²"""
        mu_l, steps = 0.5, 4
        for seed in range(20):
            problem = make_quadratic_problem(4, 3, samples_per_client=8, heterogeneity=1.0, noise=0.5, seed=seed)
            eta = 0.5 * (1.0 - mu_l) / (6.0 * constants(problem).L * steps)
            trace = _trace(
                problem, "domo", rounds=6, seed=seed, batch_size=None,
                mu_l=mu_l, alpha=0.1, beta=0.9, eta=eta, P=steps,
            )
            found = constants(problem, points=trajectory_points([trace]), batch_size=None)
            assert found.sigma2 == 0.0
            result = check_divergence_bound([trace], found)
            assert result.status == "pass", seed
            assert result.rhs == pytest.approx(9.0 * eta**2 * steps**2 * found.G2 / (1.0 - mu_l) ** 2)
            assert result.lhs > 0.0

    def test_grows_with_local_steps(self, problem):
        short = _trace(problem, "fedavglm-z", eta=0.01, P=2, batch_size=None)
        long = _trace(problem, "fedavglm-z", eta=0.01, P=4, batch_size=None)
        assert client_divergence(long).mean() > client_divergence(short).mean()

    def test_step_condition(self, matched):
        loose = ProblemConstants(L=100.0, sigma2=1.0, G2=1.0)
        result = check_divergence_bound([matched], loose)
        assert result.status == "not-applicable"
        assert result.failing_preconditions == ["step_count"]

    def test_mismatched_traces(self, problem, matched):
        with pytest.raises(TraceIncompleteError):
            check_divergence_bound([matched, _trace(problem, "fedavg")], ProblemConstants(1.0, 0.0, 0.0))


class TestTheorem1:
    """수렴 상한 테스트"""

    @pytest.fixture
    def two_point(self):
        return [
            ClientObjective("quadratic", [[1.0]], [0.5], curvature=[[1.0]]),
            ClientObjective("quadratic", [[-1.0]], [0.5], curvature=[[1.0]]),
        ]

    def test_largest_admissible_step(self, two_point):
        trace = _trace(two_point, "fedavg", rounds=30, batch_size=None, x0=np.array([3.0]), eta=1.0 / 6.0, P=1)
        found = constants(two_point, points=trajectory_points([trace]), batch_size=None)
        result = check_theorem1([trace], two_point, found)
        assert result.status == "pass"
        assert result.lhs <= result.rhs

    def test_step_too_large(self, two_point):
        trace = _trace(two_point, "fedavg", rounds=5, batch_size=None, x0=np.array([3.0]), eta=0.5, P=1)
        found = constants(two_point, batch_size=None)
        result = check_theorem1([trace], two_point, found)
        assert result.status == "not-applicable"
        assert "step_count" in result.failing_preconditions

    def test_seed_ensemble(self):
        problem = make_quadratic_problem(4, 5, samples_per_client=16, noise=0.5, seed=0)
        L = constants(problem).L
        eta = 0.5 * 0.5 / (6.0 * L * 3)
        traces = [
            _trace(problem, "domo", rounds=60, seed=s, mu_l=0.5, alpha=0.1, beta=0.9, eta=eta, P=3)
            for s in range(8)
        ]
        found = constants(problem, points=trajectory_points(traces), batch_size=4)
        result = check_theorem1(traces, problem, found)
        assert result.status == "pass", result
        assert len(result.notes) == 4

    def test_desk_scale_ensemble(self):
        """d=10, K=8, P=5, R=200, 시드 20개"""
        problem = make_quadratic_problem(8, 10, samples_per_client=32, heterogeneity=1.0, noise=1.0, seed=0)
        traces = [
            _trace(problem, "domo", rounds=200, seed=s, mu_s=0.9, mu_l=0.5, alpha=0.1, beta=0.9, eta=0.005, P=5)
            for s in range(20)
        ]
        found = constants(problem, points=trajectory_points(traces), batch_size=4)
        result = check_theorem1(traces, problem, found)
        assert result.status == "pass", result
        assert result.slack >= 1.0

    def test_fusion_must_match(self, matched):
        found = ProblemConstants(L=1.0, sigma2=0.0, G2=0.0, f_star=0.0)
        result = check_theorem1([matched], [], found)
        assert "theorem1_momentum" not in result.failing_preconditions
        other = check_theorem1([replace(matched, config=method_from_name("domo"))], [], found)
        assert "theorem1_momentum" in other.failing_preconditions

    def test_variance_term_scales_with_clients(self):
        cfg = method_from_name("domo", alpha=0.1, beta=0.9, eta=0.01, P=4)
        found = ProblemConstants(L=2.0, sigma2=3.0, G2=1.0, f_star=0.0)
        few = theorem1_terms(cfg, found, 4, 100, 1.0)
        many = theorem1_terms(cfg, found, 16, 100, 1.0)
        assert few["variance"] / many["variance"] == pytest.approx(4.0)
        assert few["local_variance"] == many["local_variance"]
        assert few["total"] == pytest.approx(sum(v for k, v in few.items() if k != "total"))


class TestMisc:
    def test_comm_cost(self):
        assert comm_cost("domo", 10, 100, 4) == 8000
        assert comm_cost("fedavgslm", 10, 100, 4) == 16000
        assert comm_cost("FedAvgSM", 10, 100, 4) == 8000
        assert comm_cost("domo", 10, 100, 4, S=2) == 4000

    def test_comm_cost_errors(self):
        with pytest.raises(ValueError):
            comm_cost("fedavglm", 10, 100, 4, S=2)
        with pytest.raises(ValueError):
            comm_cost("scaffold", 10, 100, 4)

    def test_replay_reproduces_trace(self, matched):
        replayed = replay_with_frozen_gradients(matched, matched.config.beta)
        assert np.allclose(replayed.x_local, matched.x_local, rtol=0, atol=1e-10)

    def test_replay_keeps_divergence(self, matched):
        replayed = replay_with_frozen_gradients(matched, 0.0)
        assert replayed.config.beta == 0.0
        assert np.allclose(client_divergence(replayed), client_divergence(matched), rtol=1e-9, atol=1e-14)

    def test_trajectory_points(self, matched):
        points = trajectory_points([matched], limit=5)
        assert len(points) <= 5
        assert np.array_equal(points[0], matched.x_server[0])

    def test_build_report(self, problem):
        traces = [_trace(problem, "domo", alpha=0.1, beta=0.9, eta=0.01, seed=s) for s in range(2)]
        found = constants(problem, points=trajectory_points(traces), batch_size=4)
        report = build_report(traces, problem, found)
        assert isinstance(report, TheoryReport)
        assert report.num_traces == 2
        assert report.method == "domo"
        assert [c.name for c in report.checks] == [
            "lemma1", "stitching", "lemma2_closed_form", "inconsistency_bound", "divergence_bound", "theorem1"
        ]
        assert report.precondition_flags["fusion_coefficient"]
        dumped = report.model_dump()
        for key in ("lemma1_max_residual", "inconsistency_rhs_exact", "theorem1_rhs", "constants"):
            assert key in dumped


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
