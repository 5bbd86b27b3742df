"""Simultaneous-perturbation gradient estimators and their exact moments."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    EnumerationLimitError,
    InvalidDimensionError,
    NumericalOverflowError,
    UnsupportedOperationError,
)
from .objective import ObjectiveSet

MAX_ENUMERATION_DIM = 20
_ENUM_CHUNK = 1 << 15


def signs_from_uniforms(u) -> np.ndarray:
    """Map U(0, 1) draws to symmetric Bernoulli signs (``u < 0.5 -> -1``)."""
    return (np.asarray(u) >= 0.5) * 2.0 - 1.0


def sample_perturbation(rng: np.random.Generator, d: int) -> np.ndarray:
    """Draw a perturbation in ``{-1, +1}^d``; consumes exactly ``d`` doubles from ``rng``."""
    if d < 1:
        raise InvalidDimensionError(f"d must be at least 1, got {d}")
    return signs_from_uniforms(rng.random(d))


def check_perturbation(delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if delta.ndim != 1 or not np.all(np.abs(delta) == 1.0):
        raise ValueError(f"perturbation entries must be exactly -1 or +1, got {delta}")
    return delta


def all_sign_patterns(d: int) -> np.ndarray:
    """All ``2^d`` sign vectors as a ``(2^d, d)`` array."""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=d)))


def _check_c(c) -> float:
    c = float(c)
    if not c > 0 or not np.isfinite(c):
        raise ValueError(f"sensitivity parameter c must be positive and finite, got {c}")
    return c


def dspg_estimate(obj: ObjectiveSet, i: int, view, delta, c: float) -> float:
    """Two-point estimate of ``dF_i/dx(i)`` at the (possibly stale) ``view``.

    Returns ``[F_i(view + c delta) - F_i(view - c delta)] / (2 c delta(i))``.
    """
    c = _check_c(c)
    view = np.asarray(view, dtype=float)
    delta = check_perturbation(delta)
    plus, minus = view + c * delta, view - c * delta
    fp = obj.evaluate(i, plus)
    if not np.isfinite(fp):
        raise NumericalOverflowError(f"F_{i} is not finite at the + point", plus)
    fm = obj.evaluate(i, minus)
    if not np.isfinite(fm):
        raise NumericalOverflowError(f"F_{i} is not finite at the - point", minus)
    return (fp - fm) / (2.0 * c * delta[i])


def spsa_classic_step(
    x,
    f: Callable[[np.ndarray], float],
    gamma_n: float,
    c_n: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One centralised SPSA update of the full vector with a shared perturbation."""
    if gamma_n < 0:
        raise ValueError(f"gamma_n must be nonnegative, got {gamma_n}")
    c_n = _check_c(c_n)
    x = np.asarray(x, dtype=float)
    delta = sample_perturbation(rng, x.size)
    plus, minus = x + c_n * delta, x - c_n * delta
    fp, fm = float(f(plus)), float(f(minus))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericalOverflowError("objective is not finite", plus if not np.isfinite(fp) else minus)
    return x - gamma_n * (fp - fm) / (2.0 * c_n * delta)


@dataclass
class EstimatorDiagnostics:
    """Moments of the agent-``i`` estimator at a fixed point.

    ``standard_error`` is set only for sampled diagnostics.
    """

    mean: float
    variance: float
    true_gradient: float
    bias: float
    standard_error: float | None = None
    samples: int | None = None


def _true_partial(obj: ObjectiveSet, i: int, x: np.ndarray) -> float:
    if not obj.has_gradient(i):
        raise UnsupportedOperationError(f"agent {i} has no gradient oracle")
    return float(obj.analytic_gradient(i, x)[i])


def _estimates(obj: ObjectiveSet, i: int, x: np.ndarray, deltas: np.ndarray, c: float) -> np.ndarray:
    fp = obj.evaluate_agent(i, x + c * deltas)
    fm = obj.evaluate_agent(i, x - c * deltas)
    bad = ~(np.isfinite(fp) & np.isfinite(fm))
    if bad.any():
        k = int(np.argmax(bad))
        raise NumericalOverflowError(f"F_{i} is not finite during enumeration", x + c * deltas[k])
    return (fp - fm) / (2.0 * c * deltas[:, i])


def enumerated_moments(obj: ObjectiveSet, i: int, x, c: float) -> tuple[float, float]:
    """Exact mean and variance of the estimator over all ``2^d`` sign patterns."""
    obj._check_agent(i)
    c = _check_c(c)
    x = obj._check_point(x)
    d = obj.d
    if d > MAX_ENUMERATION_DIM:
        raise EnumerationLimitError(f"enumeration needs d <= {MAX_ENUMERATION_DIM}, got d={d}")
    # Chan et al. pairwise merge keeps the variance accurate across chunks.
    count, mean, m2 = 0, 0.0, 0.0
    patterns = itertools.product((-1.0, 1.0), repeat=d)
    while True:
        chunk = np.array(list(itertools.islice(patterns, _ENUM_CHUNK)))
        if chunk.size == 0:
            break
        est = _estimates(obj, i, x, chunk, c)
        n_b, mean_b = est.size, float(est.mean())
        m2_b = float(((est - mean_b) ** 2).sum())
        delta = mean_b - mean
        total = count + n_b
        mean += delta * n_b / total
        m2 += m2_b + delta**2 * count * n_b / total
        count = total
    return mean, m2 / count


def enumerate_diagnostics(obj: ObjectiveSet, i: int, x, c: float) -> EstimatorDiagnostics:
    """Exact bias and variance of the agent-``i`` estimator at ``x``.

    Every perturbation pattern is equally likely, so summing over all of them
    gives the expectation exactly; no sampling is involved.
    """
    x = obj._check_point(x)
    true = _true_partial(obj, i, x)
    mean, var = enumerated_moments(obj, i, x, c)
    return EstimatorDiagnostics(mean=mean, variance=var, true_gradient=true, bias=mean - true)


def sampled_diagnostics(
    obj: ObjectiveSet, i: int, x, c: float, rng: np.random.Generator, samples: int = 10_000
) -> EstimatorDiagnostics:
    """Monte Carlo counterpart of :func:`enumerate_diagnostics` with a standard error."""
    obj._check_agent(i)
    c = _check_c(c)
    x = obj._check_point(x)
    deltas = signs_from_uniforms(rng.random((samples, obj.d)))
    est = _estimates(obj, i, x, deltas, c)
    mean = float(est.mean())
    var = float(est.var(ddof=1)) if samples > 1 else 0.0
    true = _true_partial(obj, i, x) if obj.has_gradient(i) else float("nan")
    return EstimatorDiagnostics(
        mean=mean,
        variance=var,
        true_gradient=true,
        bias=mean - true,
        standard_error=float(np.sqrt(var / samples)),
        samples=samples,
    )


def variance_bound(obj: ObjectiveSet, i: int, x) -> float:
    """Leading-order variance bound ``4 * sum_{j != i} (dF_i/dx(j))^2``."""
    g = obj.analytic_gradient(i, x)
    return 4.0 * float(np.sum(np.delete(g, i) ** 2))


def estimator_vector(obj: ObjectiveSet, x, deltas: np.ndarray, c) -> np.ndarray:
    """Stacked estimator ``ghat(x)``; agent ``i`` uses perturbation ``deltas[i]``."""
    c = np.broadcast_to(np.asarray(c, dtype=float), (obj.d,))
    return np.array([dspg_estimate(obj, i, x, deltas[i], c[i]) for i in range(obj.d)])


def estimator_lipschitz_bound(obj: ObjectiveSet, c: float) -> float:
    if obj.lipschitz_hint is None:
        raise UnsupportedOperationError("objective set carries no Lipschitz hint")
    return np.sqrt(obj.d) * obj.lipschitz_hint / _check_c(c)


def estimator_lipschitz_check(
    obj: ObjectiveSet,
    c: float,
    probes: int,
    rng: np.random.Generator | None = None,
    radius: float = 1.0,
) -> float:
    """Largest observed ``||ghat(x) - ghat(y)|| / ||x - y||`` over random pairs.

    Pairs are drawn uniformly from the box ``[-radius, radius]^d`` and share
    their perturbations, which is the setting of the Lipschitz bound
    ``sqrt(d) L / c`` (see :func:`estimator_lipschitz_bound`).
    """
    if obj.lipschitz_hint is None:
        raise UnsupportedOperationError("objective set carries no Lipschitz hint")
    rng = np.random.default_rng() if rng is None else rng
    worst = 0.0
    for _ in range(probes):
        x = rng.uniform(-radius, radius, obj.d)
        y = rng.uniform(-radius, radius, obj.d)
        deltas = signs_from_uniforms(rng.random((obj.d, obj.d)))
        dist = np.linalg.norm(x - y)
        if dist == 0:
            continue
        diff = estimator_vector(obj, x, deltas, c) - estimator_vector(obj, y, deltas, c)
        worst = max(worst, float(np.linalg.norm(diff) / dist))
    return worst
