"""Two-stage consensus variant for minimising a sum of private objectives.

Agent ``j`` holds ``f_j`` of the full vector and estimates every partial
derivative of ``f_j`` from a single pair of perturbed evaluations. Share
``i`` of that estimate is shipped to agent ``i``, which descends along the
sum of the newest shares it holds. Each tick runs:

1. exchange of coordinate estimates (as in plain DSPG),
2. the activation draw,
3. share computation by the active agents from their stale views,
4. exchange of shares over a second, independent set of erasure channels,
5. descent by the active agents.

Shares that have never arrived count as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EnumerationLimitError, NumericalOverflowError
from .estimator import (
    MAX_ENUMERATION_DIM,
    all_sign_patterns,
    check_perturbation,
    sample_perturbation,
    signs_from_uniforms,
)
from .network import ChannelConfig, NetworkState, records_from_mask
from .objective import ObjectiveSet
from .runtime import (
    DIVERGENCE_GUARD,
    ActivationPolicy,
    BatchResult,
    SimulationResult,
    StepSchedule,
    TraceRecorder,
    _per_agent,
    _per_trial,
    initial_points,
)
from .seeding import BlockStream, TrialStreams

SHARE_MODES = ("sampled", "mean")


@dataclass(frozen=True)
class GradShare:
    origin: int
    target_coord: int
    value: float
    origin_tick: int


@dataclass
class ConsensusMailbox:
    """Agent ``owner``'s newest share from every origin agent.

    ``origin_tick[j]`` is ``-1`` until a share from ``j`` has arrived; the
    matching entry of ``shares`` is then 0.
    """

    owner: int
    shares: np.ndarray
    origin_tick: np.ndarray

    @classmethod
    def empty(cls, owner: int, d: int) -> "ConsensusMailbox":
        return cls(owner, np.zeros(d), np.full(d, -1, dtype=np.int64))

    def receive(self, share: GradShare) -> bool:
        """Store ``share`` unless a newer one from the same origin is already held."""
        if share.target_coord != self.owner:
            raise ValueError(f"share for coordinate {share.target_coord} sent to agent {self.owner}")
        if share.origin_tick <= self.origin_tick[share.origin]:
            return False
        self.shares[share.origin] = share.value
        self.origin_tick[share.origin] = share.origin_tick
        return True

    def share_staleness(self, tick: int) -> np.ndarray:
        return np.where(self.origin_tick >= 0, tick - self.origin_tick, 0)


def compute_shares(
    obj: ObjectiveSet,
    j: int,
    view,
    c: float,
    rng: np.random.Generator | None = None,
    tick: int = 0,
    delta=None,
) -> list[GradShare]:
    """All ``d`` partial-derivative shares of ``f_j`` from one evaluation pair."""
    view = np.asarray(view, dtype=float)
    if not c > 0:
        raise ValueError(f"c must be positive, got {c}")
    delta = sample_perturbation(rng, obj.d) if delta is None else check_perturbation(delta)
    plus, minus = view + c * delta, view - c * delta
    fp = obj.evaluate(j, plus)
    fm = obj.evaluate(j, minus)
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericalOverflowError(f"f_{j} is not finite", plus if not np.isfinite(fp) else minus)
    values = (fp - fm) / (2.0 * c * delta)
    return [GradShare(j, i, float(values[i]), tick) for i in range(obj.d)]


def consensus_update(own_coord: float, mailbox: ConsensusMailbox, gamma: float) -> float:
    """New coordinate after a descent step along the sum of held shares."""
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    new = own_coord - gamma * float(mailbox.shares.sum())
    if not np.isfinite(new):
        raise NumericalOverflowError(f"agent {mailbox.owner} coordinate is not finite")
    return new


def mean_shares(obj: ObjectiveSet, views: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Expected shares over every sign pattern; ``(T, d)`` views per agent give ``(T, d, d)``."""
    d = obj.d
    if d > MAX_ENUMERATION_DIM:
        raise EnumerationLimitError(f"enumeration needs d <= {MAX_ENUMERATION_DIM}, got d={d}")
    patterns = all_sign_patterns(d)
    out = np.zeros(views.shape[:2] + (d,))
    for delta in patterns:
        shift = c[:, :, None] * delta
        diff = obj.evaluate_rows(views + shift) - obj.evaluate_rows(views - shift)
        out += diff[:, :, None] / (2.0 * c[:, :, None] * delta)
    return out / len(patterns)


def simulate_consensus_batch(
    obj: ObjectiveSet,
    seeds,
    c,
    p_success,
    schedule: StepSchedule,
    activation: ActivationPolicy = ActivationPolicy(),
    channels: ChannelConfig = ChannelConfig(),
    iterations: int = 0,
    x0=None,
    init_range=(-5.0, 5.0),
    stride: int = 1,
    record: bool = False,
    record_deliveries: bool = False,
    guard: float = DIVERGENCE_GUARD,
    shares: str = "sampled",
    chunk: int = 256,
) -> BatchResult:
    """Consensus counterpart of :func:`dspg.runtime.simulate_dspg_batch`.

    ``extras`` carries per-trial sums for the compound staleness
    ``tau_hat_ji + tau_kj``: ``compound_count``, ``compound_sum`` and
    ``compound_sumsq``. A pair contributes once ``i`` holds a share from
    ``j`` (``j != i``), for every ``k != j``.
    """
    if shares not in SHARE_MODES:
        raise ValueError(f"shares must be one of {SHARE_MODES}, got {shares!r}")
    seeds = [int(s) for s in seeds]
    T, d = len(seeds), obj.d
    c = _per_agent(c, T, d, "c")
    p = _per_trial(p_success, T)
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("p_success must lie in (0, 1]")
    streams = [TrialStreams(s, d) for s in seeds]
    x = initial_points(streams, d, x0, init_range)
    x_start = x.copy()
    coords = NetworkState(channels, x, p_success=p)
    # Payload per link: the share, then the sender's coordinate staleness at compute time.
    share_net = NetworkState(channels, p_success=p, initial=np.zeros((T, d, d, 1 + d)))
    delayed = channels.mode == "delayed-queue"
    per = (channels.draws_per_pair, d, d)
    coord_draws = BlockStream([[s.network] for s in streams], per, chunk)
    share_draws = BlockStream([[s.network_shares] for s in streams], per, chunk)
    pert_draws = BlockStream([s.perturbation for s in streams], (d,), chunk)
    act_draws = BlockStream([s.activation for s in streams], (), chunk) if activation.needs_draws else None

    last = np.zeros((T, d, d))  # last[t, j, i]: agent j's latest share for coordinate i
    last_tau = np.zeros((T, d, d))  # last_tau[t, j, k]: staleness of j's copy of x(k) then
    clock = np.zeros((T, d), dtype=np.int64)
    alive = np.ones(T, dtype=bool)
    status = ["ok"] * T
    offdiag = ~np.eye(d, dtype=bool)
    other_k = np.broadcast_to(offdiag[None, :, :], (d, d, d))  # [i, j, k] -> k != j
    pair_ok = offdiag[:, :, None] & other_k
    comp_n = np.zeros(T)
    comp_s = np.zeros(T)
    comp_s2 = np.zeros(T)
    recorder = TraceRecorder(T, iterations, stride, schedule.kind, compound=True) if record else None
    deliveries = [] if record_deliveries else None
    prev_active = None

    with np.errstate(all="ignore"):
        for n in range(iterations):
            u = coord_draws.at(n)[:, 0]
            senders = None if prev_active is None or activation.kind == "all-active" else prev_active
            got = coords.step(n, x, u[:, 0], u[:, 1] if delayed else None, senders)
            if deliveries is not None:
                deliveries.extend(records_from_mask(n, got[0]))

            active = activation.active(n, T, d, act_draws.at(n) if act_draws else None)
            active &= alive[:, None]
            views = coords.values
            tau = coords.staleness(n).astype(float)
            delta = signs_from_uniforms(pert_draws.at(n))
            if shares == "mean":
                fresh = mean_shares(obj, views, c)
            else:
                c_delta = c[:, :, None] * delta
                diff = obj.evaluate_rows(views + c_delta) - obj.evaluate_rows(views - c_delta)
                fresh = diff[:, :, None] / (2.0 * c[:, :, None] * delta)
            last = np.where(active[:, :, None], fresh, last)
            last_tau = np.where(active[:, :, None], tau, last_tau)

            payload = np.concatenate(
                [np.swapaxes(last, 1, 2)[..., None], np.broadcast_to(last_tau[:, None], (T, d, d, d))],
                axis=-1,
            )
            v = share_draws.at(n)[:, 0]
            share_net.step(n, payload, v[:, 0], v[:, 1] if delayed else None, active)
            held = share_net.values[..., 0]
            origin = share_net.origin
            received = (origin >= 0) & offdiag
            # Own shares never travel; until first computed they are zero as well.
            held = np.where(received | ~offdiag, held, 0.0)

            tau_hat = (n - origin).astype(float)
            compound = tau_hat[..., None] + share_net.values[..., 1:]
            mask = received[..., None] & pair_ok
            comp_n += mask.sum((1, 2, 3))
            comp_s += np.where(mask, compound, 0.0).sum((1, 2, 3))
            comp_s2 += np.where(mask, compound**2, 0.0).sum((1, 2, 3))

            gamma = schedule(clock)
            if recorder is not None and recorder.due(n):
                serr = np.linalg.norm(x[:, None, :] - views, axis=2)
                with np.errstate(invalid="ignore", divide="ignore"):
                    cmean = np.where(
                        mask.any((1, 2, 3)),
                        np.where(mask, compound, 0.0).sum((1, 2, 3)) / np.maximum(mask.sum((1, 2, 3)), 1),
                        0.0,
                    )

            x_new = np.where(active, x - gamma * held.sum(2), x)
            bad = alive & (~np.isfinite(x_new).all(1) | (np.abs(x_new) > guard).any(1))
            if bad.any():
                for t in np.nonzero(bad)[0]:
                    status[t] = "diverged"
                alive &= ~bad
            x = np.where(np.isfinite(x_new), x_new, x)
            clock += active
            prev_active = active
            if recorder is not None and recorder.due(n):
                recorder.add(n, x, serr, gamma, cmean)

    return BatchResult(
        seeds=seeds,
        x0=x_start,
        final=x,
        status=status,
        local_clock=clock,
        traces=recorder.traces(d) if recorder is not None else None,
        deliveries=deliveries,
        extras={"compound_count": comp_n, "compound_sum": comp_s, "compound_sumsq": comp_s2},
    )


@dataclass
class ConsensusResult(SimulationResult):
    compound_mean: float = float("nan")
    compound_second_moment: float = float("nan")


def compound_staleness_moments(p: float) -> tuple[float, float]:
    """Mean and second moment of the sum of two independent geometric staleness counts."""
    m1 = (1 - p) / p
    m2 = (1 - p) * (2 - p) / p**2
    return 2 * m1, 2 * m2 + 2 * m1**2


def run_consensus(config, trial: int = 0, c: float | None = None, p_c: float | None = None) -> ConsensusResult:
    """Run trial ``trial`` of a consensus experiment config for one ``(c, p_c)`` cell."""
    c = config.c[0] if c is None else c
    p_c = config.p_c[0] if p_c is None else p_c
    seed = config.trial_seed(trial, c, p_c)
    res = simulate_consensus_batch(
        config.objective_set(),
        [seed],
        c,
        p_c,
        config.step_schedule(),
        config.activation_policy(),
        config.channel_config(p_c),
        config.iterations,
        x0=config.init,
        init_range=(config.init_low, config.init_high),
        stride=config.subsample_stride,
        record=True,
        record_deliveries=config.verbose,
        guard=config.divergence_guard,
        shares=config.shares,
    )
    count = res.extras["compound_count"][0]
    mean = res.extras["compound_sum"][0] / count if count else float("nan")
    second = res.extras["compound_sumsq"][0] / count if count else float("nan")
    return ConsensusResult(
        trace=res.traces[0],
        final=res.final[0],
        status=res.status[0],
        seed=seed,
        x0=res.x0[0],
        local_clock=res.local_clock[0],
        deliveries=res.deliveries,
        compound_mean=float(mean),
        compound_second_moment=float(second),
    )
