import itertools

import numpy as np
import pytest

from src.objectives import (
    ClientObjective,
    NonFiniteError,
    ObjectiveError,
    accuracy,
    constants,
    finite_difference_grad,
    full_grad,
    global_grad,
    global_loss,
    gradient_check,
    hessian,
    loss,
    make_quadratic_problem,
    power_iteration,
    predict,
    stochastic_grad,
)
from src.rng import stream


@pytest.fixture
def rng():
    return stream(0, "test-objectives")


@pytest.fixture
def two_point_problem():
    """f^{(k)}(x) = ½(x ∓ 1)²"""
    return [
        ClientObjective("quadratic", [[1.0]], [0.5], curvature=[[1.0]]),
        ClientObjective("quadratic", [[-1.0]], [0.5], curvature=[[1.0]]),
    ]


def _labelled(rng, kind, n=12, f=3, c=3, hidden=0, reg=0.0):
    feats = rng.standard_normal((n, f))
    labels = rng.integers(0, c, n)
    return ClientObjective(kind, feats, labels, reg, num_classes=c, hidden=hidden)


class TestClientObjective:
    """목적함수 구성/검증 테스트"""

    def test_dims(self, rng):
        assert _labelled(rng, "logistic", f=3, c=4).dim == 4 * (3 + 1)
        assert _labelled(rng, "mlp2", f=3, c=4, hidden=5).dim == 5 * 3 + 5 + 4 * 5 + 4
        ls = ClientObjective("least-squares", rng.standard_normal((6, 2)), rng.standard_normal(6))
        assert ls.dim == 2

    def test_readonly(self, rng):
        obj = ClientObjective("least-squares", rng.standard_normal((6, 2)), rng.standard_normal(6))
        with pytest.raises(ValueError):
            obj.features[0, 0] = 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": "svm", "features": [[1.0]], "targets": [0.0]},
            {"kind": "quadratic", "features": [[1.0]], "targets": [0.0]},
            {"kind": "least-squares", "features": [[np.nan]], "targets": [0.0]},
            {"kind": "least-squares", "features": [[1.0], [2.0]], "targets": [0.0]},
            {"kind": "logistic", "features": [[1.0]], "targets": [5], "num_classes": 2},
            {"kind": "least-squares", "features": [[1.0]], "targets": [0.0], "regularization": -1.0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ObjectiveError):
            ClientObjective(**kwargs)

    def test_non_finite_parameters(self, rng):
        obj = ClientObjective("least-squares", rng.standard_normal((6, 2)), rng.standard_normal(6))
        with pytest.raises(NonFiniteError):
            stochastic_grad(obj, [np.inf, 0.0], [0, 1])

    def test_bad_batch(self, rng):
        obj = ClientObjective("least-squares", rng.standard_normal((6, 2)), rng.standard_normal(6))
        with pytest.raises(ObjectiveError):
            stochastic_grad(obj, np.zeros(2), [6])
        with pytest.raises(ObjectiveError):
            stochastic_grad(obj, np.zeros(2), [])


class TestGradients:
    """해석적 gradient 테스트"""

    @pytest.mark.parametrize("kind, hidden", [("logistic", 0), ("mlp2", 4)])
    def test_classification_gradient_check(self, rng, kind, hidden):
        obj = _labelled(rng, kind, hidden=hidden, reg=0.01)
        x = 0.3 * rng.standard_normal(obj.dim)
        assert gradient_check(obj, x) < 1e-6

    def test_least_squares_gradient_check(self, rng):
        obj = ClientObjective("least-squares", rng.standard_normal((10, 4)), rng.standard_normal(10), 0.1)
        assert gradient_check(obj, rng.standard_normal(4)) < 1e-7

    def test_quadratic_gradient(self, two_point_problem):
        assert full_grad(two_point_problem[0], [3.0])[0] == pytest.approx(2.0)
        assert loss(two_point_problem[1], [1.0]) == pytest.approx(2.0)

    def test_stochastic_grad_is_batch_mean(self, rng):
        obj = ClientObjective("least-squares", rng.standard_normal((8, 3)), rng.standard_normal(8))
        x = rng.standard_normal(3)
        batch = [1, 1, 5]
        expected = np.mean([stochastic_grad(obj, x, [i]) for i in batch], axis=0)
        assert np.allclose(stochastic_grad(obj, x, batch), expected, rtol=0, atol=1e-14)

    def test_finite_difference(self):
        grad = finite_difference_grad(lambda z: float(np.sum(z**3)), np.array([1.0, 2.0]))
        assert grad == pytest.approx([3.0, 12.0], rel=1e-6)

    def test_global(self, two_point_problem):
        assert global_loss(two_point_problem, [0.0]) == pytest.approx(0.5)
        assert global_grad(two_point_problem, [2.0])[0] == pytest.approx(2.0)

    @pytest.mark.parametrize("kind", ["quadratic", "least-squares"])
    def test_exact_kinds_at_random_points(self, rng, kind):
        if kind == "quadratic":
            obj = make_quadratic_problem(1, 5, noise=0.5, regularization=0.05, seed=7)[0]
        else:
            obj = ClientObjective(kind, rng.standard_normal((15, 5)), rng.standard_normal(15), 0.05)
        for _ in range(10):
            assert gradient_check(obj, rng.standard_normal(5), h=1e-4) <= 1e-9

    @pytest.mark.parametrize("kind, hidden", [("logistic", 0), ("mlp2", 3)])
    def test_classifiers_at_random_points(self, rng, kind, hidden):
        obj = _labelled(rng, kind, hidden=hidden, reg=0.01)
        for _ in range(10):
            assert gradient_check(obj, 0.5 * rng.standard_normal(obj.dim), h=1e-4) <= 1e-5

    @pytest.mark.parametrize("kind", ["least-squares", "logistic"])
    def test_batch_average_is_unbiased(self, rng, kind):
        """크기 b 복원 추출 배치 전체를 열거한 평균 = 전체 gradient"""
        if kind == "least-squares":
            obj = ClientObjective(kind, rng.standard_normal((4, 3)), rng.standard_normal(4), 0.1)
        else:
            obj = _labelled(rng, kind, n=4, reg=0.1)
        x = rng.standard_normal(obj.dim)
        batches = list(itertools.product(range(obj.num_samples), repeat=3))
        mean = np.mean([stochastic_grad(obj, x, list(batch)) for batch in batches], axis=0)
        assert np.allclose(mean, full_grad(obj, x), rtol=0, atol=1e-12)


class TestPredict:
    """분류 예측/정확도 테스트"""

    @pytest.fixture
    def logistic(self):
        return ClientObjective("logistic", [[0.0]], [0], num_classes=2)

    def test_hand_weights(self, logistic):
        x = np.array([1.0, -1.0, 0.0, 0.0])
        assert predict(logistic, x, [[2.0], [-3.0], [0.0]]).tolist() == [0, 1, 0]
        assert accuracy(logistic, x, [[2.0], [-3.0]], [0, 0]) == pytest.approx(0.5)
        assert accuracy(logistic, x, [[2.0], [-3.0]], [0, 1]) == 1.0

    def test_bias_only(self, logistic):
        x = np.array([0.0, 0.0, -1.0, 1.0])
        assert predict(logistic, x, [[5.0], [-5.0]]).tolist() == [1, 1]

    def test_mlp2_labels(self, rng):
        obj = _labelled(rng, "mlp2", f=3, c=4, hidden=5)
        labels = predict(obj, rng.standard_normal(obj.dim), rng.standard_normal((7, 3)))
        assert labels.shape == (7,)
        assert labels.min() >= 0 and labels.max() < 4

    def test_errors(self, rng, logistic, two_point_problem):
        with pytest.raises(ObjectiveError):
            predict(two_point_problem[0], [0.0], [[1.0]])
        with pytest.raises(ObjectiveError):
            predict(logistic, np.zeros(4), [[1.0, 2.0]])
        with pytest.raises(ObjectiveError):
            accuracy(logistic, np.zeros(4), np.zeros((0, 1)), [])
        with pytest.raises(ObjectiveError):
            accuracy(logistic, np.zeros(4), [[1.0], [2.0]], [0])


class TestConstants:
    """L, σ², G², f_* 계산 테스트"""

    def test_two_point_example(self, two_point_problem):
        """½(x∓1)² 두 클라이언트: L=1, G²(0)=1, f_*=0.5, 전체 배치면 σ²=0"""
        found = constants(two_point_problem, points=[np.zeros(1)], batch_size=None)
        assert found.L == pytest.approx(1.0, rel=1e-10)
        assert found.G2 == pytest.approx(1.0)
        assert found.f_star == pytest.approx(0.5)
        assert found.sigma2 == 0.0
        assert found.exact

    def test_exact_smoothness_matches_eigenvalues(self):
        problem = make_quadratic_problem(4, 6, seed=3)
        expected = max(np.linalg.eigvalsh(hessian(obj)).max() for obj in problem)
        assert constants(problem).L == pytest.approx(expected, rel=1e-8)

    @pytest.mark.parametrize("seed", range(8))
    def test_least_squares_smoothness_matches_eigenvalues(self, seed):
        gen = stream(seed, "test-smoothness")
        problem = [
            ClientObjective("least-squares", gen.standard_normal((12, 8)), gen.standard_normal(12), 0.01)
            for _ in range(8)
        ]
        local = [hessian(obj) for obj in problem]
        matrices = [np.mean(np.stack(local), axis=0), *local]
        expected = max(np.linalg.eigvalsh(matrix).max() for matrix in matrices)
        assert constants(problem).L == pytest.approx(expected, rel=1e-8)

    def test_gradients_are_lipschitz(self, rng):
        problem = make_quadratic_problem(4, 5, heterogeneity=2.0, seed=11)
        smoothness = constants(problem).L
        for _ in range(100):
            x, y = 3.0 * rng.standard_normal(5), 3.0 * rng.standard_normal(5)
            bound = smoothness * np.linalg.norm(x - y) * (1.0 + 1e-9)
            assert np.linalg.norm(global_grad(problem, x) - global_grad(problem, y)) <= bound
            for obj in problem:
                assert np.linalg.norm(full_grad(obj, x) - full_grad(obj, y)) <= bound

    def test_sigma_scales_with_batch(self):
        problem = make_quadratic_problem(3, 4, noise=1.0, seed=1)
        one = constants(problem, batch_size=1).sigma2
        assert constants(problem, batch_size=4).sigma2 == pytest.approx(one / 4)

    def test_empirical_for_logistic(self, rng):
        problem = [_labelled(rng, "logistic") for _ in range(2)]
        found = constants(problem, points=[np.zeros(problem[0].dim)])
        assert not found.exact
        assert found.f_star is None
        assert found.L > 0

    def test_mixed_kinds_rejected(self, rng, two_point_problem):
        with pytest.raises(ObjectiveError):
            constants([two_point_problem[0], _labelled(rng, "logistic")])

    def test_power_iteration(self):
        assert power_iteration(np.diag([1.0, -3.0, 2.0])) == pytest.approx(3.0, rel=1e-8)
        assert power_iteration(np.zeros((2, 2))) == 0.0


class TestQuadraticProblem:
    """생성된 2차 문제 테스트"""

    def test_deterministic(self):
        a = make_quadratic_problem(3, 4, seed=5)
        b = make_quadratic_problem(3, 4, seed=5)
        assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))

    def test_homogeneous(self):
        problem = make_quadratic_problem(3, 4, heterogeneity=0.0, noise=0.0, shared_curvature=True, seed=2)
        found = constants(problem, points=[np.ones(4)], batch_size=4)
        assert found.G2 == pytest.approx(0.0, abs=1e-20)
        assert found.sigma2 == pytest.approx(0.0, abs=1e-20)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
