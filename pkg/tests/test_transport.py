import itertools
import math

import numpy as np
import pytest

from pshape.autodiff import Tape
from pshape.exceptions import (
    ConfigurationError,
    EmptySetError,
    SolverCapError,
    UnequalCardinalityError,
)
from pshape.transport import (
    TransportSettings,
    cost_matrix,
    emd,
    emd_approx,
    emd_exact,
    emd_gradient,
    epsilon_schedule,
    solve,
    solver_name,
    transport_loss,
)
from pshape.types import Assignment, TransportPlan
from tests import random_cloud


def brute_force(c: np.ndarray) -> float:
    n = len(c)
    perms = itertools.permutations(range(n))
    costs = (math.fsum(c[i, p[i]] for i in range(n)) for p in perms)
    return min(costs)


def grid_cloud(n: int) -> np.ndarray:
    return np.array([[float(i), 0.0, 0.0] for i in range(n)])


class TestCostMatrix:
    def test_singlePointL1(self):
        actual = cost_matrix([[0, 0, 0]], [[1, 2, 3]], "l1")
        np.testing.assert_array_equal(actual, [[6]])

    def test_identicalClouds_zeroDiagonal(self):
        cloud = random_cloud(0)
        np.testing.assert_array_equal(np.diag(cost_matrix(cloud, cloud)), np.zeros(8))

    def test_twoPointL1(self):
        a = [[0, 0, 0], [1, 0, 0]]
        b = [[0, 1, 0], [1, 1, 0]]
        np.testing.assert_array_equal(cost_matrix(a, b, "l1"), [[1, 2], [2, 1]])

    def test_l2(self):
        actual = cost_matrix([[0, 0, 0]], [[3, 4, 0]], "l2")
        np.testing.assert_array_equal(actual, [[5]])

    def test_unequalSizes_raisesUnequalCardinalityError(self):
        with pytest.raises(UnequalCardinalityError):
            cost_matrix(random_cloud(0, 3), random_cloud(1, 4))

    def test_empty_raisesEmptySetError(self):
        with pytest.raises(EmptySetError):
            cost_matrix(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_unknownNorm_raisesConfigurationError(self):
        with pytest.raises(ConfigurationError):
            cost_matrix(random_cloud(0), random_cloud(1), "linf")


class TestEmdExact:
    def test_handExample(self):
        actual = emd_exact(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert list(actual.mapping) == [0, 1]
        assert actual.cost == 2

    def test_zeroMatrix(self):
        assert emd_exact(np.zeros((6, 6))).cost == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_fivePoints_matchesBruteForce(self, seed):
        c = np.random.default_rng(seed).uniform(0, 1, (5, 5))
        assert emd_exact(c).cost == brute_force(c)

    def test_randomClouds_matchBruteForce(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            a, b = rng.uniform(-1, 1, (n, 3)), rng.uniform(-1, 1, (n, 3))
            c = cost_matrix(a, b)
            assert abs(emd_exact(c).cost - brute_force(c)) <= 1e-9

    def test_aboveCap_raisesSolverCapError(self):
        with pytest.raises(SolverCapError):
            emd_exact(np.zeros((5, 5)), cap=4)


class TestEmdApprox:
    def test_singlePoint_exactEntry(self):
        actual = emd_approx(np.array([[0.37]]))
        assert actual.cost == 0.37
        assert actual.converged

    def test_identicalClouds_nearZero(self):
        cloud = grid_cloud(6)
        assert emd_approx(cost_matrix(cloud, cloud)).cost < 1e-6

    def test_couplingIsFeasible(self):
        rng = np.random.default_rng(5)
        c = cost_matrix(rng.uniform(-1, 1, (10, 3)), rng.uniform(-1, 1, (10, 3)))
        coupling = emd_approx(c).coupling
        np.testing.assert_allclose(coupling.sum(axis=1), np.ones(10), atol=1e-12)
        np.testing.assert_allclose(coupling.sum(axis=0), np.ones(10), atol=1e-12)
        assert np.all(coupling >= 0)

    def test_boundedByExact(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            c = cost_matrix(rng.uniform(-1, 1, (16, 3)), rng.uniform(-1, 1, (16, 3)))
            exact = emd_exact(c).cost
            approx = emd_approx(c, epsilon=0.01).cost
            assert exact - 1e-9 <= approx <= exact * 1.05

    def test_iterationLimit_reportsNotConverged(self):
        rng = np.random.default_rng(8)
        c = cost_matrix(rng.uniform(-1, 1, (12, 3)), rng.uniform(-1, 1, (12, 3)))
        actual = emd_approx(c, epsilon=0.001, max_iters=2)
        assert not actual.converged
        assert actual.iterations == 2
        assert actual.cost >= emd_exact(c).cost - 1e-9

    def test_nonPositiveEpsilon_raisesConfigurationError(self):
        with pytest.raises(ConfigurationError):
            emd_approx(np.zeros((2, 2)), epsilon=0)

    def test_roundedCouplingHasNoNegativeEntries(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            c = cost_matrix(rng.uniform(-1, 1, (10, 3)), rng.uniform(-1, 1, (10, 3)))
            assert emd_approx(c, max_iters=50).coupling.min() >= 0

    def test_epsilonSchedule_halvesDownToTarget(self):
        c = np.array([[0.0, 0.4], [0.4, 0.0]])
        assert epsilon_schedule(c, 0.05) == [0.4, 0.2, 0.1, 0.05]
        assert epsilon_schedule(np.zeros((2, 2)), 0.01) == [0.01]

    def test_separatedMatching_convergesWithDefaults(self):
        a = grid_cloud(10)
        b = (a + [0.0, 0.1, 0.0])[np.random.default_rng(3).permutation(10)]
        actual = emd_approx(cost_matrix(a, b))
        assert actual.converged
        assert actual.cost == pytest.approx(1.0, abs=1e-6)


class TestEmdGradient:
    def test_signOfDifference(self):
        a, b = np.array([[1.0, 0, 0]]), np.zeros((1, 3))
        grad_a, grad_b = emd_gradient(a, b, emd_exact(cost_matrix(a, b)))
        np.testing.assert_array_equal(grad_a, [[1, 0, 0]])
        np.testing.assert_array_equal(grad_b, [[-1, 0, 0]])

    def test_identicalClouds_zeroGradient(self):
        cloud = random_cloud(3)
        grad_a, _ = emd_gradient(cloud, cloud, emd_exact(cost_matrix(cloud, cloud)))
        np.testing.assert_array_equal(grad_a, np.zeros_like(cloud))

    @pytest.mark.parametrize("norm", ["l1", "l2"])
    def test_directionalDerivative_matchesReSolvedCost(self, norm):
        rng = np.random.default_rng(11)
        a, b = rng.uniform(-1, 1, (6, 3)), rng.uniform(-1, 1, (6, 3))
        direction = rng.standard_normal(a.shape)
        h = 1e-7
        analytic, _ = emd_gradient(a, b, emd_exact(cost_matrix(a, b, norm)), norm)
        upper = emd_exact(cost_matrix(a + h * direction, b, norm)).cost
        lower = emd_exact(cost_matrix(a - h * direction, b, norm)).cost
        numeric = (upper - lower) / (2 * h)
        assert abs(numeric - np.sum(analytic * direction)) < 1e-5

    def test_couplingGradient_equalsAssignmentGradient(self):
        a, b = random_cloud(1, 4), random_cloud(2, 4)
        assignment = emd_exact(cost_matrix(a, b))
        coupling = np.zeros((4, 4))
        coupling[np.arange(4), assignment.mapping] = 1.0
        plan = TransportPlan(coupling, assignment.cost, True, 0)
        pairs = zip(emd_gradient(a, b, assignment), emd_gradient(a, b, plan))
        for expected, actual in pairs:
            np.testing.assert_allclose(actual, expected)


class TestSolve:
    def test_auto_usesExactUnderCap(self):
        transport = solve(random_cloud(0), random_cloud(1), TransportSettings())
        assert isinstance(transport, Assignment)
        assert solver_name(transport) == "exact"

    def test_auto_fallsBackAboveCap(self, caplog):
        settings = TransportSettings(exact_cap=4)
        transport = solve(random_cloud(0), random_cloud(1), settings)
        assert solver_name(transport) == "approx"
        assert "exceed the exact solver cap" in caplog.text

    def test_exactAboveCap_raisesSolverCapError(self):
        with pytest.raises(SolverCapError):
            settings = TransportSettings(solver="exact", exact_cap=4)
            solve(random_cloud(0), random_cloud(1), settings)

    def test_unknownSolver_raisesConfigurationError(self):
        with pytest.raises(ConfigurationError):
            solve(random_cloud(0), random_cloud(1), TransportSettings(solver="greedy"))

    def test_emdIsMeanCost(self):
        a, b = random_cloud(0), random_cloud(1)
        assert emd(a, b) == emd_exact(cost_matrix(a, b)).cost / 8

    def test_permutingEitherCloud_sameCost(self):
        a, b = random_cloud(0), random_cloud(1)
        expected = emd(a, b)
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert emd(a[rng.permutation(8)], b[rng.permutation(8)]) == expected


class TestTransportLoss:
    def test_valueIsMeanCost(self):
        a, b = random_cloud(0), random_cloud(1)
        loss = transport_loss(Tape().constant(a), b)
        assert loss.item() == emd(a, b)

    def test_gradientsOfBothInputs(self):
        a, b = random_cloud(0), random_cloud(1)
        tape = Tape()
        a_t, b_t = tape.constant(a), tape.constant(b)
        grads = tape.backward(transport_loss(a_t, b_t))
        expected_a, expected_b = emd_gradient(a, b, emd_exact(cost_matrix(a, b)))
        np.testing.assert_allclose(grads.of(a_t), expected_a / 8)
        np.testing.assert_allclose(grads.of(b_t), expected_b / 8)


class TestEmdProperties:
    @pytest.mark.parametrize("norm", ["l1", "l2"])
    def test_symmetric(self, norm):
        rng = np.random.default_rng(21)
        settings = TransportSettings(norm=norm, solver="exact")
        for _ in range(30):
            a, b = rng.uniform(-1, 1, (8, 3)), rng.uniform(-1, 1, (8, 3))
            assert emd(a, b, settings) == pytest.approx(emd(b, a, settings), abs=1e-12)

    @pytest.mark.parametrize("norm", ["l1", "l2"])
    def test_triangleInequality(self, norm):
        rng = np.random.default_rng(22)
        settings = TransportSettings(norm=norm, solver="exact")
        for _ in range(30):
            x, y, z = (rng.uniform(-1, 1, (8, 3)) for _ in range(3))
            through = emd(x, y, settings) + emd(y, z, settings)
            assert emd(x, z, settings) <= through + 1e-12

    def test_permutedCopy_zeroDistance(self):
        rng = np.random.default_rng(23)
        settings = TransportSettings(solver="exact")
        for _ in range(30):
            x = rng.uniform(-1, 1, (8, 3))
            assert emd(x, x[rng.permutation(8)], settings) == 0.0

    def test_distinctClouds_positiveDistance(self):
        x = random_cloud(0)
        assert emd(x, x + [0.0, 0.0, 1e-3]) > 0
