import numpy as np
import pytest

from dspg.errors import InvalidAgentError, InvalidDimensionError, UnsupportedOperationError
from dspg.objective import (
    ObjectiveSet,
    QuadraticObjectives,
    analytic_gradient,
    evaluate,
    make_objective,
    make_quadratic_set,
    make_quartic_1d,
)


def test_d1_quadratic_is_positive_scalar():
    spec = make_quadratic_set(1, 7)
    (a,) = spec.matrices
    assert a.shape == (1, 1) and a[0, 0] > 0
    obj = spec.objective_set()
    assert evaluate(obj, 0, [0.0]) == 0.0
    assert evaluate(obj, 0, [2.0]) == pytest.approx(4 * a[0, 0])


def test_d2_seed42_matrices_are_symmetric_pd():
    spec = make_quadratic_set(2, 42)
    assert len(spec.matrices) == 2
    for A in spec.matrices:
        assert np.allclose(A, A.T, atol=1e-12)
        assert np.linalg.eigvalsh(A).min() > 0


def test_d4_origin_is_common_minimiser():
    obj = make_quadratic_set(4, 3).objective_set()
    for i in range(4):
        assert evaluate(obj, i, np.zeros(4)) == 0.0
        assert np.array_equal(analytic_gradient(obj, i, np.zeros(4)), np.zeros(4))


def test_zero_dimension_rejected():
    with pytest.raises(InvalidDimensionError):
        make_quadratic_set(0, 1)


def test_generation_is_deterministic():
    a, b = make_quadratic_set(5, 99), make_quadratic_set(5, 99)
    for x, y in zip(a.matrices, b.matrices):
        assert np.array_equal(x, y)
    assert not np.array_equal(make_quadratic_set(5, 98).matrices[0], a.matrices[0])


def test_evaluate_examples(identity2):
    assert evaluate(identity2, 0, [1.0, 2.0]) == 5.0
    obj = QuadraticObjectives([[[2.0, 1.0], [1.0, 2.0]], np.eye(2)])
    assert evaluate(obj, 0, [1.0, 1.0]) == 6.0


def test_gradient_examples(identity2):
    assert np.array_equal(analytic_gradient(identity2, 0, [1.0, 2.0]), [2.0, 4.0])
    obj = QuadraticObjectives([[[2.0, 1.0], [1.0, 2.0]], np.eye(2)])
    assert np.array_equal(analytic_gradient(obj, 0, [1.0, 1.0]), [6.0, 6.0])


def test_bad_agent_index(identity2):
    with pytest.raises(InvalidAgentError):
        evaluate(identity2, 2, [0.0, 0.0])
    with pytest.raises(InvalidAgentError):
        evaluate(identity2, -1, [0.0, 0.0])


def test_missing_gradient_oracle():
    obj = ObjectiveSet([lambda x: 1.0])
    assert not obj.has_gradient(0)
    with pytest.raises(UnsupportedOperationError):
        analytic_gradient(obj, 0, [0.0])


def test_wrong_point_shape(identity2):
    with pytest.raises(InvalidDimensionError):
        evaluate(identity2, 0, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("x, f, g", [(0.0, 0.0, 0.0), (1.0, 1.0, 4.0), (2.0, 16.0, 32.0)])
def test_quartic_examples(x, f, g):
    obj = make_quartic_1d()
    assert evaluate(obj, 0, [x]) == f
    assert analytic_gradient(obj, 0, [x])[0] == g


@pytest.mark.parametrize("d, seed", [(2, 0), (4, 1), (10, 2)])
def test_positive_away_from_origin(d, seed):
    obj = make_quadratic_set(d, seed).objective_set()
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((100, d))
    for i in range(d):
        assert np.all(obj.evaluate_agent(i, pts) > 0)


@pytest.mark.parametrize("d, seed", [(2, 0), (4, 1), (10, 2)])
def test_gradient_matches_central_differences(d, seed):
    obj = make_quadratic_set(d, seed).objective_set()
    rng = np.random.default_rng(100 + seed)
    h = 1e-5
    for x in rng.uniform(-2, 2, (100, d)):
        for i in range(d):
            fd = np.array(
                [(obj.evaluate(i, x + h * e) - obj.evaluate(i, x - h * e)) / (2 * h) for e in np.eye(d)]
            )
            g = obj.analytic_gradient(i, x)
            assert np.allclose(g, fd, rtol=1e-6, atol=1e-6 * np.abs(g).max())


def test_quartic_gradient_matches_central_differences():
    obj = make_quartic_1d()
    h = 1e-5
    for x in np.linspace(-3, 3, 100):
        fd = (obj.evaluate(0, [x + h]) - obj.evaluate(0, [x - h])) / (2 * h)
        g = obj.analytic_gradient(0, [x])[0]
        assert fd == pytest.approx(g, rel=1e-6, abs=1e-8)


def test_evaluate_is_bitwise_repeatable(quad4):
    x = np.array([0.3, -1.7, 2.2, 0.01])
    assert evaluate(quad4, 2, x) == evaluate(quad4, 2, x)


def test_batched_paths_match_single_point(quad4):
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(7, 4, 4))
    rows = quad4.evaluate_rows(pts)
    for t in range(7):
        for i in range(4):
            assert rows[t, i] == quad4.evaluate(i, pts[t, i])
    stack = rng.normal(size=(6, 4))
    assert np.array_equal(quad4.evaluate_agent(1, stack), [quad4.evaluate(1, p) for p in stack])


def test_generic_set_batched_fallback():
    obj = ObjectiveSet([lambda x: x[0] * x[1], lambda x: x[0] + x[1]])
    pts = np.arange(8.0).reshape(2, 2, 2)
    assert np.array_equal(obj.evaluate_rows(pts), [[0.0, 5.0], [20.0, 13.0]])


def test_shifted_quadratic_minimiser():
    shift = np.array([1.0, -2.0, 0.5])
    obj = make_objective("quadratic-random", 3, seed=4, shift=shift)
    for i in range(3):
        assert obj.evaluate(i, shift) == 0.0
        assert np.allclose(obj.analytic_gradient(i, shift), 0.0)
    assert np.allclose(obj.summed_minimizer(), shift)


def test_per_agent_shifts_and_linear_solve():
    spec = make_quadratic_set(4, 2)
    shifts = np.random.default_rng(0).normal(size=(4, 4))
    obj = spec.objective_set(shift=shifts)
    x = obj.summed_minimizer()
    total_grad = sum(obj.analytic_gradient(i, x) for i in range(4))
    assert np.allclose(total_grad, 0.0, atol=1e-10)


def test_make_objective_rejects_unknown_kind():
    with pytest.raises(ValueError):
        make_objective("cubic", 2)
    with pytest.raises(InvalidDimensionError):
        make_objective("quartic-1d", 2)


def test_lipschitz_hint_validation():
    with pytest.raises(ValueError):
        ObjectiveSet([lambda x: 0.0], lipschitz_hint=-1.0)
    obj = make_quadratic_set(2, 0).objective_set().with_lipschitz(3.0)
    assert obj.lipschitz_hint == 3.0 and isinstance(obj, QuadraticObjectives)
