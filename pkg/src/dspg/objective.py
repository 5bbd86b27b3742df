"""Objective functions held by the agents.

Agent ``i`` owns ``F_i : R^d -> R`` and is responsible for coordinate ``i``.
Agents are 0-indexed throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidAgentError, InvalidDimensionError, UnsupportedOperationError

ScalarFn = Callable[[np.ndarray], float]
GradFn = Callable[[np.ndarray], np.ndarray]

PD_JITTER = 0.1


class ObjectiveSet:
    """The ``d`` locally held objectives, one per agent.

    Parameters
    ----------
    functions : sequence of callables
        ``functions[i](x)`` returns ``F_i(x)`` for a length-``d`` vector.
    gradients : sequence of callables or None, optional
        Analytic gradients, used only by tests and diagnostics. Individual
        entries may be ``None``.
    lipschitz_hint : float, optional
        A Lipschitz constant ``L`` valid for every ``F_i`` on the region of
        interest.
    """

    def __init__(
        self,
        functions: Sequence[ScalarFn],
        gradients: Sequence[GradFn | None] | None = None,
        lipschitz_hint: float | None = None,
    ):
        if len(functions) == 0:
            raise InvalidDimensionError("an objective set needs at least one agent")
        if gradients is not None and len(gradients) != len(functions):
            raise InvalidDimensionError(
                f"got {len(gradients)} gradient oracles for {len(functions)} functions"
            )
        if lipschitz_hint is not None and not lipschitz_hint >= 0:
            raise ValueError(f"lipschitz_hint must be nonnegative, got {lipschitz_hint}")
        self.functions = list(functions)
        self.gradients = list(gradients) if gradients is not None else [None] * len(functions)
        self.lipschitz_hint = lipschitz_hint

    @property
    def d(self) -> int:
        return len(self.functions)

    def _check_agent(self, i: int) -> None:
        if not 0 <= i < self.d:
            raise InvalidAgentError(f"agent index {i} out of range for d={self.d}")

    def _check_point(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise InvalidDimensionError(f"expected a point of shape ({self.d},), got {x.shape}")
        return x

    def evaluate(self, i: int, x) -> float:
        self._check_agent(i)
        return float(self.functions[i](self._check_point(x)))

    def has_gradient(self, i: int) -> bool:
        self._check_agent(i)
        return self.gradients[i] is not None

    def analytic_gradient(self, i: int, x) -> np.ndarray:
        self._check_agent(i)
        grad = self.gradients[i]
        if grad is None:
            raise UnsupportedOperationError(f"no gradient oracle for agent {i}")
        return np.asarray(grad(self._check_point(x)), dtype=float)

    def evaluate_rows(self, points: np.ndarray) -> np.ndarray:
        """Evaluate ``F_i`` at ``points[..., i, :]`` for every agent ``i``.

        ``points`` has shape ``(..., d, d)``; the result has shape ``(..., d)``.
        Subclasses override this with a vectorised kernel.
        """
        points = np.asarray(points, dtype=float)
        out = np.empty(points.shape[:-1])
        for idx in np.ndindex(*points.shape[:-2]):
            for i in range(self.d):
                out[idx + (i,)] = self.functions[i](points[idx + (i,)])
        return out

    def evaluate_agent(self, i: int, points: np.ndarray) -> np.ndarray:
        """Evaluate ``F_i`` on a stack of points of shape ``(..., d)``."""
        self._check_agent(i)
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, self.d)
        out = np.array([self.functions[i](p) for p in flat], dtype=float)
        return out.reshape(points.shape[:-1])

    def with_lipschitz(self, lipschitz: float) -> "ObjectiveSet":
        return ObjectiveSet(self.functions, self.gradients, lipschitz)


class QuadraticObjectives(ObjectiveSet):
    """``F_i(x) = (x - s_i)^T A_i (x - s_i)`` with a vectorised evaluator.

    The single-point and batched paths use the same reduction order, so a
    batched simulation reproduces a point-by-point one bit for bit.
    """

    def __init__(self, matrices, shifts=None, lipschitz_hint: float | None = None):
        A = np.array(matrices, dtype=float)
        if A.ndim != 3 or A.shape[0] != A.shape[1] or A.shape[1] != A.shape[2]:
            raise InvalidDimensionError(f"expected d matrices of shape (d, d), got {A.shape}")
        d = A.shape[0]
        if d == 0:
            raise InvalidDimensionError("d must be at least 1")
        if shifts is None:
            S = np.zeros((d, d))
        else:
            S = np.array(shifts, dtype=float)
            if S.shape == (d,):
                S = np.tile(S, (d, 1))
            if S.shape != (d, d):
                raise InvalidDimensionError(f"shift must have shape ({d},) or ({d}, {d})")
        self.matrices = A
        self.shifts = S
        super().__init__(
            [self._make_fn(i) for i in range(d)],
            [self._make_grad(i) for i in range(d)],
            lipschitz_hint,
        )

    def _make_fn(self, i):
        A, s = self.matrices[i], self.shifts[i]

        def f(x):
            y = x - s
            Ay = np.matmul(A, y[:, None])[:, 0]
            return np.matmul(Ay[None, :], y[:, None])[0, 0]

        return f

    def _make_grad(self, i):
        A, s = self.matrices[i], self.shifts[i]
        return lambda x: (A + A.T) @ (x - s)

    @staticmethod
    def _forms(A, y):
        Ay = np.matmul(A, y[..., None])
        return np.matmul(np.swapaxes(Ay, -1, -2), y[..., None])[..., 0, 0]

    def evaluate_rows(self, points):
        return self._forms(self.matrices, np.asarray(points, dtype=float) - self.shifts)

    def evaluate_agent(self, i, points):
        self._check_agent(i)
        return self._forms(self.matrices[i], np.asarray(points, dtype=float) - self.shifts[i])

    def with_lipschitz(self, lipschitz):
        return QuadraticObjectives(self.matrices, self.shifts, lipschitz)

    def gradient_bound(self, radius: float) -> float:
        """Largest ``||grad F_i(x)||`` over ``||x|| <= radius`` and all agents."""
        sym = self.matrices + np.transpose(self.matrices, (0, 2, 1))
        norms = np.linalg.norm(sym, ord=2, axis=(1, 2))
        return float(np.max(norms * (radius + np.linalg.norm(self.shifts, axis=1))))

    def coordinate_jacobian(self) -> np.ndarray:
        """Jacobian of ``x -> (dF_1/dx(1), ..., dF_d/dx(d))``.

        Row ``i`` is row ``i`` of ``A_i + A_i^T``. The common minimiser is a
        stable equilibrium of the descent flow iff every eigenvalue of this
        matrix has positive real part.
        """
        sym = self.matrices + np.transpose(self.matrices, (0, 2, 1))
        return np.array([sym[i, i] for i in range(self.d)])

    def summed_hessian(self) -> np.ndarray:
        """Hessian of ``sum_i F_i``; used by the consensus solver checks."""
        return (self.matrices + np.transpose(self.matrices, (0, 2, 1))).sum(0)

    def summed_minimizer(self) -> np.ndarray:
        """Solve ``sum_i (A_i + A_i^T)(x - s_i) = 0`` directly."""
        sym = self.matrices + np.transpose(self.matrices, (0, 2, 1))
        rhs = np.einsum("ikl,il->k", sym, self.shifts)
        return np.linalg.solve(sym.sum(0), rhs)


@dataclass
class QuadraticSpec:
    matrices: list[np.ndarray]
    generation_seed: int
    shift: np.ndarray | None = field(default=None)

    @property
    def d(self) -> int:
        return len(self.matrices)

    def objective_set(self, shift=None, lipschitz_hint=None) -> QuadraticObjectives:
        if shift is None:
            shift = self.shift
        return QuadraticObjectives(self.matrices, shift, lipschitz_hint)


def random_pd_matrix(rng: np.random.Generator, d: int, jitter: float = PD_JITTER) -> np.ndarray:
    M = rng.standard_normal((d, d))
    A = M.T @ M + jitter * np.eye(d)
    return 0.5 * (A + A.T)


def make_quadratic_set(d: int, seed: int) -> QuadraticSpec:
    """Draw ``d`` random positive definite ``d x d`` matrices.

    Each matrix is ``M^T M + 0.1 I`` with standard normal ``M``, drawn in
    agent order from ``numpy.random.default_rng(seed)``.
    """
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise InvalidDimensionError(f"d must be a positive integer, got {d!r}")
    rng = np.random.default_rng(seed)
    return QuadraticSpec([random_pd_matrix(rng, int(d)) for _ in range(d)], int(seed))


def make_quartic_1d() -> ObjectiveSet:
    """Single agent objective ``x**4``.

    Its central difference is ``4x^3 + 4x c^2``, so the estimator bias is
    known in closed form.
    """
    return ObjectiveSet([lambda x: x[0] ** 4], [lambda x: np.array([4.0 * x[0] ** 3])])


def make_objective(kind: str, d: int, seed: int = 0, shift=None) -> ObjectiveSet:
    if kind == "quadratic-random":
        return make_quadratic_set(d, seed).objective_set(shift)
    if kind == "quartic-1d":
        if d != 1:
            raise InvalidDimensionError("quartic-1d is a single-agent objective (d = 1)")
        return make_quartic_1d()
    raise ValueError(f"unknown objective kind {kind!r}")


def evaluate(obj: ObjectiveSet, i: int, x) -> float:
    return obj.evaluate(i, x)


def analytic_gradient(obj: ObjectiveSet, i: int, x) -> np.ndarray:
    return obj.analytic_gradient(i, x)
