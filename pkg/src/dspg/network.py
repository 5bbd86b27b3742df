"""Unreliable wireless network between agents.

Every ordered pair of agents is joined by a unidirectional Bernoulli erasure
channel. Receivers keep only the newest value they have seen from each
sender, so a dropped message simply leaves the previous value in place.

Two implementations share the same random-draw layout so they can be checked
against each other:

* :func:`tick_deliveries` works on a list of :class:`Mailbox` objects, one
  loop iteration per ordered pair.
* :class:`NetworkState` keeps all mailboxes of a batch of independent trials
  in arrays and is what the simulators use.

Per tick both consume one ``(d, d)`` block of uniforms for the erasure draws
and, in ``delayed-queue`` mode, a second ``(d, d)`` block for the delays.
Entry ``[i, j]`` of a block belongs to the channel from ``j`` to ``i``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MODES = ("erasure-latest", "delayed-queue")


@dataclass(frozen=True)
class ChannelConfig:
    """Channel parameters shared by every link of one run.

    ``pair_p_success`` optionally overrides the delivery probability per
    ordered pair; entry ``[i, j]`` is the link from ``j`` to ``i``.
    """

    p_success: float = 1.0
    mode: str = "erasure-latest"
    max_queue_delay: int | None = None
    pair_p_success: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.p_success <= 1:
            raise ValueError(f"p_success must lie in (0, 1], got {self.p_success}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "delayed-queue":
            if self.max_queue_delay is None or int(self.max_queue_delay) < 1:
                raise ValueError("delayed-queue mode needs a positive max_queue_delay")
        elif self.max_queue_delay is not None:
            raise ValueError("max_queue_delay is only meaningful in delayed-queue mode")
        if self.pair_p_success is not None:
            p = np.asarray(self.pair_p_success, dtype=float)
            if p.ndim != 2 or p.shape[0] != p.shape[1]:
                raise ValueError("pair_p_success must be a square matrix")
            if np.any((p <= 0) | (p > 1)):
                raise ValueError("every pair_p_success entry must lie in (0, 1]")

    def success_matrix(self, d: int) -> np.ndarray:
        if self.pair_p_success is None:
            return np.full((d, d), float(self.p_success))
        p = np.asarray(self.pair_p_success, dtype=float)
        if p.shape != (d, d):
            raise ValueError(f"pair_p_success has shape {p.shape}, expected ({d}, {d})")
        return p

    @property
    def draws_per_pair(self) -> int:
        return 2 if self.mode == "delayed-queue" else 1


@dataclass
class Mailbox:
    """Agent ``owner``'s newest known copy of every coordinate.

    ``origin_tick[j]`` is the tick at which the stored value left agent
    ``j``; ``staleness[j]`` is its age at the last processed tick.
    """

    owner: int
    last_value: np.ndarray
    staleness: np.ndarray
    origin_tick: np.ndarray = field(default=None)

    def __post_init__(self):
        self.last_value = np.array(self.last_value, dtype=float)
        self.staleness = np.array(self.staleness, dtype=np.int64)
        if self.origin_tick is None:
            self.origin_tick = np.full(self.last_value.shape, -1, dtype=np.int64)
        else:
            self.origin_tick = np.array(self.origin_tick, dtype=np.int64)


@dataclass(frozen=True)
class DeliveryRecord:
    tick: int
    sender: int
    receiver: int
    delivered: bool


def new_mailboxes(x0) -> list[Mailbox]:
    """Mailboxes initialised with the starting point, treated as sent at tick -1."""
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    return [Mailbox(i, x0.copy(), np.zeros(d, dtype=np.int64)) for i in range(d)]


def tick_deliveries(
    channels: ChannelConfig,
    rng: np.random.Generator,
    publishers,
    mailboxes: Sequence[Mailbox],
    tick: int = 0,
    senders=None,
    in_flight: dict | None = None,
) -> tuple[list[Mailbox], list[DeliveryRecord]]:
    """Advance every channel by one tick, mutating and returning ``mailboxes``.

    ``publishers`` holds each agent's current coordinate. ``senders`` masks
    the agents that transmit this tick (all of them by default). In
    ``delayed-queue`` mode ``in_flight`` must be a dict that persists across
    calls; it maps ``(receiver, sender)`` to pending ``(arrival, origin,
    value)`` messages.
    """
    publishers = np.asarray(publishers, dtype=float)
    d = publishers.size
    if len(mailboxes) != d:
        raise ValueError(f"expected {d} mailboxes, got {len(mailboxes)}")
    p = channels.success_matrix(d)
    senders = np.ones(d, dtype=bool) if senders is None else np.asarray(senders, dtype=bool)
    u = rng.random((d, d))
    delayed = channels.mode == "delayed-queue"
    if delayed:
        if in_flight is None:
            raise ValueError("delayed-queue mode needs a persistent in_flight dict")
        du = rng.random((d, d))
        span = int(channels.max_queue_delay) + 1

    records = []
    for i, box in enumerate(mailboxes):
        for j in range(d):
            if j == i:
                continue
            sent = bool(senders[j] and u[i, j] < p[i, j])
            got = False
            if not delayed:
                if sent:
                    box.last_value[j] = publishers[j]
                    box.origin_tick[j] = tick
                    got = True
            else:
                queue = in_flight.setdefault((i, j), [])
                if sent:
                    queue.append((tick + int(du[i, j] * span), tick, publishers[j]))
                arrived = [m for m in queue if m[0] == tick]
                queue[:] = [m for m in queue if m[0] > tick]
                if arrived:
                    _, origin, value = max(arrived, key=lambda m: m[1])
                    if origin > box.origin_tick[j]:
                        box.last_value[j] = value
                        box.origin_tick[j] = origin
                        got = True
            records.append(DeliveryRecord(tick, j, i, got))
        box.last_value[i] = publishers[i]
        box.origin_tick[i] = tick
        box.staleness[:] = tick - box.origin_tick
    return list(mailboxes), records


def stale_view(mailbox: Mailbox, own_value: float) -> np.ndarray:
    view = mailbox.last_value.copy()
    view[mailbox.owner] = own_value
    return view


def staleness_error(true_x, view) -> float:
    true_x, view = np.asarray(true_x, dtype=float), np.asarray(view, dtype=float)
    if true_x.shape != view.shape:
        raise ValueError(f"shape mismatch {true_x.shape} vs {view.shape}")
    return float(np.linalg.norm(true_x - view))


class NetworkState:
    """Mailboxes of ``T`` independent trials held in arrays.

    ``values[t, i, j]`` is receiver ``i``'s copy of what sender ``j`` last
    published in trial ``t``. Payloads are scalars by default; pass
    ``initial`` with trailing dimensions to ship vectors instead.
    ``p_success`` may be a scalar, a per-trial vector or a ``(T, d, d)`` array.
    """

    def __init__(self, channels: ChannelConfig, x0=None, p_success=None, initial=None):
        if initial is None:
            x0 = np.atleast_2d(np.asarray(x0, dtype=float))
            initial = np.repeat(x0[:, None, :], x0.shape[1], axis=1)
        self.values = np.array(initial, dtype=float)
        T, d = self.values.shape[:2]
        self.channels = channels
        self.d = d
        self._extra = self.values.ndim - 3
        if p_success is None:
            p = channels.success_matrix(d)[None]
        else:
            p = np.asarray(p_success, dtype=float)
            if p.ndim == 1:
                p = p[:, None, None]
        self.p = np.broadcast_to(p, (T, d, d))
        self.origin = np.full((T, d, d), -1, dtype=np.int64)
        self._offdiag = ~np.eye(d, dtype=bool)
        self._diag = np.arange(d)
        if channels.mode == "delayed-queue":
            self.span = int(channels.max_queue_delay) + 1
            self.q_value = np.zeros((T, self.span) + self.values.shape[1:])
            self.q_origin = np.full((T, self.span, d, d), -1, dtype=np.int64)

    def _lift(self, mask):
        return mask.reshape(mask.shape + (1,) * self._extra)

    def step(self, tick: int, payload, uniforms, delay_uniforms=None, senders=None) -> np.ndarray:
        """Advance one tick; returns the ``(T, d, d)`` mask of accepted messages.

        ``payload`` is either ``(T, d)``, each sender broadcasting its own
        coordinate, or ``(T, d, d, ...)`` with ``payload[t, i, j]`` addressed
        from ``j`` to ``i``. The diagonal is always refreshed locally.
        """
        payload = np.asarray(payload, dtype=float)
        if payload.ndim == 2:
            payload = np.broadcast_to(payload[:, None, :], self.values.shape)
        sent = (uniforms < self.p) & self._offdiag
        if senders is not None:
            sent &= np.asarray(senders, dtype=bool)[:, None, :]
        if self.channels.mode == "erasure-latest":
            got = sent
            self.values = np.where(self._lift(got), payload, self.values)
            self.origin = np.where(got, tick, self.origin)
        else:
            t_idx, i_idx, j_idx = np.nonzero(sent)
            delay = (delay_uniforms[t_idx, i_idx, j_idx] * self.span).astype(np.int64)
            slot = (tick + delay) % self.span
            # A message sent now is newer than anything already queued for the same slot.
            self.q_value[t_idx, slot, i_idx, j_idx] = payload[t_idx, i_idx, j_idx]
            self.q_origin[t_idx, slot, i_idx, j_idx] = tick
            now = tick % self.span
            arriving_origin = self.q_origin[:, now]
            got = arriving_origin > self.origin
            self.values = np.where(self._lift(got), self.q_value[:, now], self.values)
            self.origin = np.where(got, arriving_origin, self.origin)
            self.q_origin[:, now] = -1
        self.values[:, self._diag, self._diag] = payload[:, self._diag, self._diag]
        self.origin[:, self._diag, self._diag] = tick
        return got

    def staleness(self, tick: int) -> np.ndarray:
        return tick - self.origin

    def mailboxes(self, tick: int, trial: int = 0) -> list[Mailbox]:
        return [
            Mailbox(i, self.values[trial, i], self.staleness(tick)[trial, i], self.origin[trial, i])
            for i in range(self.d)
        ]


def staleness_series(delivered: np.ndarray) -> np.ndarray:
    """Erasure-latest staleness for a whole run at once.

    ``delivered`` has shape ``(ticks, ...)``, true where a message got through
    at that tick. The result has the same shape and equals what
    :meth:`NetworkState.staleness` reports tick by tick when every agent
    transmits every tick. The starting values count as sent at tick ``-1``.
    """
    delivered = np.asarray(delivered, dtype=bool)
    ticks = np.arange(delivered.shape[0]).reshape((-1,) + (1,) * (delivered.ndim - 1))
    last = np.maximum.accumulate(np.where(delivered, ticks, -1), axis=0)
    return ticks - last


def records_from_mask(tick: int, got: np.ndarray) -> list[DeliveryRecord]:
    """Delivery records for one trial from a ``(d, d)`` acceptance mask."""
    d = got.shape[0]
    return [
        DeliveryRecord(tick, j, i, bool(got[i, j])) for i in range(d) for j in range(d) if i != j
    ]


def write_delivery_csv(path, records: Iterable[DeliveryRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tick", "from", "to", "delivered"])
        for r in records:
            w.writerow([r.tick, r.sender, r.receiver, int(r.delivered)])
