"""Asynchronous DSPG agents and the tick-driven simulation loop.

Each tick of a trial runs, in order:

1. channel deliveries of the agents' current coordinates,
2. the activation draw deciding which agents update,
3. one local descent step per active agent, using its stale view of the
   other coordinates and a step size indexed by its own update count,
4. trace recording.

The loop is vectorised over a batch of independent trials. Every trial owns
its random streams (see :mod:`dspg.seeding`), so a trial produces the same
numbers whatever batch it runs in.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalOverflowError
from .estimator import dspg_estimate, sample_perturbation, signs_from_uniforms
from .network import ChannelConfig, DeliveryRecord, Mailbox, NetworkState, records_from_mask, stale_view
from .objective import ObjectiveSet
from .seeding import BlockStream, TrialStreams

DIVERGENCE_GUARD = 1e12
SCHEDULE_KINDS = ("constant", "diminishing", "hybrid")
ACTIVATION_KINDS = ("all-active", "bernoulli", "round-robin")


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes indexed by an agent's local update count.

    ``constant``
        ``gamma0`` forever.
    ``diminishing``
        ``a / (n + b)``.
    ``hybrid``
        ``gamma0`` while ``n < switch_tick``, then ``a / (n - switch_tick + b)``.
        With ``decay_origin="zero"`` the decay is ``a / (n + b)`` instead, so
        ``a=50, b=0, switch_tick=5000`` gives ``0.01 * 5000 / n``.
    """

    kind: str = "constant"
    gamma0: float = 0.001
    switch_tick: int = 0
    a: float = 1.0
    b: float = 1.0
    decay_origin: str = "switch"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.decay_origin not in ("switch", "zero"):
            raise ValueError(f"decay_origin must be 'switch' or 'zero', got {self.decay_origin!r}")
        if self.kind in ("constant", "hybrid") and not 0 < self.gamma0 <= 1:
            raise ValueError(f"gamma0 must lie in (0, 1], got {self.gamma0}")
        if self.kind in ("diminishing", "hybrid"):
            if not self.a > 0:
                raise ValueError(f"decay numerator a must be positive, got {self.a}")
            if self.switch_tick < 0:
                raise ValueError("switch_tick must be nonnegative")
            first = self.a / self._decay_index(self.switch_tick if self.kind == "hybrid" else 0)
            if not 0 < first <= 1:
                raise ValueError(f"first diminishing step {first} falls outside (0, 1]")

    def _decay_index(self, n):
        if self.kind == "hybrid" and self.decay_origin == "switch":
            return np.maximum(n - self.switch_tick, 0) + self.b
        return np.maximum(n, 0) + self.b

    def __call__(self, local_clock):
        n = np.asarray(local_clock)
        if self.kind == "constant":
            out = np.full(n.shape, float(self.gamma0))
        elif self.kind == "diminishing":
            out = self.a / self._decay_index(n)
        else:
            with np.errstate(divide="ignore"):
                out = np.where(n < self.switch_tick, self.gamma0, self.a / self._decay_index(n))
        return float(out) if out.ndim == 0 else out


def step_size(schedule: StepSchedule, local_clock: int) -> float:
    if local_clock < 0:
        raise ValueError("local_clock must be nonnegative")
    return float(schedule(local_clock))


@dataclass(frozen=True)
class ActivationPolicy:
    """Which agents update at a tick.

    ``bernoulli`` draws one uniform per agent per tick from the agent's own
    activation stream; the other kinds draw nothing.
    """

    kind: str = "all-active"
    p_active: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"activation kind must be one of {ACTIVATION_KINDS}, got {self.kind!r}")
        if not 0 < self.p_active <= 1:
            raise ValueError(f"p_active must lie in (0, 1], got {self.p_active}")

    @property
    def needs_draws(self) -> bool:
        return self.kind == "bernoulli"

    def active(self, tick: int, T: int, d: int, uniforms=None) -> np.ndarray:
        if self.kind == "all-active":
            return np.ones((T, d), dtype=bool)
        if self.kind == "bernoulli":
            return np.asarray(uniforms) < self.p_active
        return np.broadcast_to(np.arange(d) == tick % d, (T, d)).copy()


@dataclass
class AgentState:
    index: int
    mailbox: Mailbox
    own_coord: float
    rng: np.random.Generator
    c: float
    local_clock: int = 0


def agent_update(state: AgentState, obj: ObjectiveSet, gamma: float, delta=None) -> AgentState:
    """One local DSPG step for ``state.index``, in place.

    ``delta`` defaults to a fresh draw from the agent's stream. Raises
    :class:`NumericalOverflowError` if an objective value is not finite.
    """
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if delta is None:
        delta = sample_perturbation(state.rng, obj.d)
    view = stale_view(state.mailbox, state.own_coord)
    g = dspg_estimate(obj, state.index, view, delta, state.c)
    new = state.own_coord - gamma * g
    if not np.isfinite(new):
        raise NumericalOverflowError(f"agent {state.index} coordinate is not finite", view)
    state.own_coord = new
    state.local_clock += 1
    return state


@dataclass
class Trace:
    """Subsampled per-tick record of one trial.

    Row ``r`` describes tick ``ticks[r]``: coordinates and norm after the
    tick's updates, each agent's staleness error ``||x_n - view_i||`` measured
    before them, and the step size each agent's clock pointed at.
    """

    stride: int
    schedule_kind: str
    ticks: np.ndarray
    coords: np.ndarray
    norm: np.ndarray
    staleness_error: np.ndarray
    gamma: np.ndarray
    compound_staleness: np.ndarray | None = None

    def __len__(self):
        return len(self.ticks)

    def to_csv(self, path) -> None:
        header = ["tick", "norm", "staleness_err_mean", "gamma_agent_0"]
        if self.compound_staleness is not None:
            header.append("compound_staleness_mean")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in range(len(self.ticks)):
                row = [
                    int(self.ticks[r]),
                    repr(float(self.norm[r])),
                    repr(float(self.staleness_error[r].mean())),
                    repr(float(self.gamma[r, 0])),
                ]
                if self.compound_staleness is not None:
                    row.append(repr(float(self.compound_staleness[r])))
                w.writerow(row)


class TraceRecorder:
    """Collects trace rows for a batch; rows land every ``stride`` ticks plus the last."""

    def __init__(self, T: int, iterations: int, stride: int, schedule_kind: str, compound: bool = False):
        if stride < 1:
            raise ValueError("subsample_stride must be positive")
        self.T, self.N, self.stride = T, iterations, stride
        self.schedule_kind = schedule_kind
        self.compound = compound
        self.rows: list[tuple] = []

    def due(self, tick: int) -> bool:
        return tick % self.stride == 0 or tick == self.N - 1

    def add(self, tick, x, serr, gamma, compound=None):
        self.rows.append((tick, x.copy(), serr, np.array(gamma, dtype=float), compound))

    def traces(self, d: int) -> list[Trace]:
        R = len(self.rows)
        ticks = np.array([r[0] for r in self.rows], dtype=np.int64)
        coords = np.stack([r[1] for r in self.rows], 1) if R else np.empty((self.T, 0, d))
        serr = np.stack([r[2] for r in self.rows], 1) if R else np.empty((self.T, 0, d))
        gamma = np.stack([r[3] for r in self.rows], 1) if R else np.empty((self.T, 0, d))
        comp = None
        if self.compound:
            comp = np.stack([r[4] for r in self.rows], 1) if R else np.empty((self.T, 0))
        return [
            Trace(
                stride=self.stride,
                schedule_kind=self.schedule_kind,
                ticks=ticks,
                coords=coords[t],
                norm=np.linalg.norm(coords[t], axis=-1),
                staleness_error=serr[t],
                gamma=gamma[t],
                compound_staleness=None if comp is None else comp[t],
            )
            for t in range(self.T)
        ]


@dataclass
class BatchResult:
    seeds: list[int]
    x0: np.ndarray
    final: np.ndarray
    status: list[str]
    local_clock: np.ndarray
    traces: list[Trace] | None = None
    deliveries: list[DeliveryRecord] | None = None
    extras: dict = field(default_factory=dict)

    @property
    def final_norm(self) -> np.ndarray:
        return np.linalg.norm(self.final, axis=1)


def _per_agent(values, T: int, d: int, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        v = np.full((T, d), float(v))
    elif v.ndim == 1:
        if v.shape[0] != T:
            raise ValueError(f"1-D {name} must have one entry per trial")
        v = np.repeat(v[:, None], d, axis=1)
    v = np.broadcast_to(v, (T, d))
    if np.any(~(v > 0)):
        raise ValueError(f"{name} must be positive")
    return v


def _per_trial(values, T: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.broadcast_to(v if v.ndim else np.full(T, float(v)), (T,))


def initial_points(streams: list[TrialStreams], d: int, x0=None, init_range=(-5.0, 5.0)) -> np.ndarray:
    """Starting points: ``x0`` when given, else uniform on ``init_range^d`` per trial."""
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        return np.array(np.broadcast_to(x0, (len(streams), d)))
    low, high = init_range
    return np.array([s.init.uniform(low, high, d) for s in streams]).reshape(len(streams), d)


def simulate_dspg_batch(
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
    chunk: int = 256,
) -> BatchResult:
    """Run one DSPG trial per seed, vectorised across the batch.

    ``c`` is a scalar, one value per trial, or a ``(T, d)`` array of per-agent
    sensitivities. ``p_success`` is a scalar or one value per trial and
    overrides ``channels.p_success``. Trials whose coordinates leave
    ``[-guard, guard]`` or become non-finite are frozen and marked
    ``"diverged"``.
    """
    seeds = [int(s) for s in seeds]
    T, d = len(seeds), obj.d
    c = _per_agent(c, T, d, "c")
    p = _per_trial(p_success, T)
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("p_success must lie in (0, 1]")
    streams = [TrialStreams(s, d) for s in seeds]
    x = initial_points(streams, d, x0, init_range)
    x_start = x.copy()
    net = NetworkState(channels, x, p_success=p)
    delayed = channels.mode == "delayed-queue"
    net_draws = BlockStream([[s.network] for s in streams], (channels.draws_per_pair, d, d), chunk)
    pert_draws = BlockStream([s.perturbation for s in streams], (d,), chunk)
    act_draws = BlockStream([s.activation for s in streams], (), chunk) if activation.needs_draws else None

    clock = np.zeros((T, d), dtype=np.int64)
    alive = np.ones(T, dtype=bool)
    status = ["ok"] * T
    diag = np.arange(d)
    recorder = TraceRecorder(T, iterations, stride, schedule.kind) if record else None
    deliveries = [] if record_deliveries else None
    prev_active = None

    with np.errstate(all="ignore"):
        for n in range(iterations):
            u = net_draws.at(n)[:, 0]
            senders = None if prev_active is None or activation.kind == "all-active" else prev_active
            got = net.step(n, x, u[:, 0], u[:, 1] if delayed else None, senders)
            if deliveries is not None:
                deliveries.extend(records_from_mask(n, got[0]))

            active = activation.active(n, T, d, act_draws.at(n) if act_draws else None)
            active &= alive[:, None]
            views = net.values
            delta = signs_from_uniforms(pert_draws.at(n))
            c_delta = c[:, :, None] * delta
            fp = obj.evaluate_rows(views + c_delta)
            fm = obj.evaluate_rows(views - c_delta)
            g = (fp - fm) / (2.0 * c * delta[:, diag, diag])
            gamma = schedule(clock)
            if recorder is not None and recorder.due(n):
                serr = np.linalg.norm(x[:, None, :] - views, axis=2)

            x_new = np.where(active, x - gamma * g, x)
            bad = alive & (
                ~np.isfinite(x_new).all(1) | (np.abs(x_new) > guard).any(1)
            )
            if bad.any():
                for t in np.nonzero(bad)[0]:
                    status[t] = "diverged"
                alive &= ~bad
            x = np.where(np.isfinite(x_new), x_new, x)
            clock += active
            prev_active = active
            if recorder is not None and recorder.due(n):
                recorder.add(n, x, serr, gamma)

    return BatchResult(
        seeds=seeds,
        x0=x_start,
        final=x,
        status=status,
        local_clock=clock,
        traces=recorder.traces(d) if recorder is not None else None,
        deliveries=deliveries,
    )


@dataclass
class SimulationResult:
    trace: Trace
    final: np.ndarray
    status: str
    seed: int
    x0: np.ndarray
    local_clock: np.ndarray
    deliveries: list[DeliveryRecord] | None = None

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.final))


def run_simulation(config, trial: int = 0, c: float | None = None, p_c: float | None = None) -> SimulationResult:
    """Run trial ``trial`` of a DSPG experiment config for one ``(c, p_c)`` cell.

    The cell defaults to the first entries of ``config.c`` and ``config.p_c``.
    """
    c = config.c[0] if c is None else c
    p_c = config.p_c[0] if p_c is None else p_c
    seed = config.trial_seed(trial, c, p_c)
    res = simulate_dspg_batch(
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
    )
    return SimulationResult(
        trace=res.traces[0],
        final=res.final[0],
        status=res.status[0],
        seed=seed,
        x0=res.x0[0],
        local_clock=res.local_clock[0],
        deliveries=res.deliveries,
    )


@dataclass
class StalenessDecay:
    first_mean: float
    last_mean: float
    window: int
    premise_holds: bool
    note: str = ""

    @property
    def ratio(self) -> float:
        if self.first_mean == 0:
            return 0.0 if self.last_mean == 0 else float("inf")
        return self.last_mean / self.first_mean

    @property
    def decayed(self) -> bool | None:
        """``None`` when the schedule is constant and no decay is promised."""
        if not self.premise_holds:
            return None
        return self.last_mean < self.first_mean


def staleness_decay_report(trace: Trace, window: int = 1000) -> StalenessDecay:
    """Mean staleness error over the first and last ``window`` recorded ticks."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    per_tick = trace.staleness_error.mean(axis=1)
    w = min(window, len(per_tick))
    premise = trace.schedule_kind != "constant"
    note = "" if premise else "constant step size: delay errors are not expected to vanish"
    return StalenessDecay(
        first_mean=float(per_tick[:w].mean()),
        last_mean=float(per_tick[-w:].mean()),
        window=w,
        premise_holds=premise,
        note=note,
    )
