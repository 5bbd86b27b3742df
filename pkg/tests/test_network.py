import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dspg.network import (
    ChannelConfig,
    Mailbox,
    NetworkState,
    new_mailboxes,
    records_from_mask,
    stale_view,
    staleness_error,
    tick_deliveries,
    write_delivery_csv,
)
from dspg.seeding import BlockStream


def run_loop(channels, seed, d, ticks, senders_fn=None):
    """Reference per-pair loop; returns per-tick snapshots and delivery records."""
    rng = np.random.default_rng(seed)
    pub_rng = np.random.default_rng(seed + 1000)
    pubs = pub_rng.normal(size=(ticks + 1, d))
    boxes = new_mailboxes(pubs[0])
    in_flight = {} if channels.mode == "delayed-queue" else None
    snaps, records = [], []
    for n in range(ticks):
        senders = None if senders_fn is None else senders_fn(n)
        boxes, rec = tick_deliveries(channels, rng, pubs[n + 1], boxes, n, senders, in_flight)
        records.extend(rec)
        snaps.append(
            (
                np.array([b.last_value for b in boxes]),
                np.array([b.staleness for b in boxes]),
                np.array([b.origin_tick for b in boxes]),
            )
        )
    return pubs, snaps, records


def run_batched(channels, seed, d, ticks, senders_fn=None):
    rng = np.random.default_rng(seed)
    pubs = np.random.default_rng(seed + 1000).normal(size=(ticks + 1, d))
    net = NetworkState(channels, pubs[0][None])
    draws = BlockStream([[rng]], (channels.draws_per_pair, d, d), chunk=7)
    delayed = channels.mode == "delayed-queue"
    snaps, records = [], []
    for n in range(ticks):
        u = draws.at(n)[:, 0]
        senders = None if senders_fn is None else senders_fn(n)[None]
        got = net.step(n, pubs[n + 1][None], u[:, 0], u[:, 1] if delayed else None, senders)
        records.extend(records_from_mask(n, got[0]))
        snaps.append((net.values[0].copy(), net.staleness(n)[0].copy(), net.origin[0].copy()))
    return pubs, snaps, records


def test_perfect_channel_is_always_fresh():
    d = 4
    pubs, snaps, records = run_loop(ChannelConfig(1.0), 0, d, 50)
    for n, (vals, stale, _) in enumerate(snaps):
        assert np.array_equal(vals, np.tile(pubs[n + 1], (d, 1)))
        assert not stale.any()
    assert all(r.delivered for r in records)


def test_dead_channel_limit():
    d = 3
    pubs, snaps, _ = run_loop(ChannelConfig(1e-12), 1, d, 40)
    vals, stale, _ = snaps[-1]
    off = ~np.eye(d, dtype=bool)
    assert np.array_equal(vals[off], np.tile(pubs[0], (d, 1))[off])
    assert np.all(stale[off] == 40)
    assert np.all(np.diag(stale) == 0)


def test_one_record_per_ordered_pair_per_tick():
    _, _, records = run_loop(ChannelConfig(0.5), 2, 4, 10)
    assert len(records) == 10 * 12
    keys = {(r.tick, r.sender, r.receiver) for r in records}
    assert len(keys) == len(records)
    assert all(r.sender != r.receiver for r in records)


@pytest.mark.parametrize("p", [0.3, 0.5, 0.9])
def test_geometric_staleness_moments(p):
    from dspg.network import staleness_series

    d, ticks = 4, 100_000
    off = ~np.eye(d, dtype=bool)
    u = np.random.default_rng(int(p * 100)).random((ticks, d, d))
    tau = staleness_series((u < p) & off)[100:, off].astype(float)
    assert tau.mean() == pytest.approx((1 - p) / p, rel=0.05)
    assert (tau**2).mean() == pytest.approx((1 - p) * (2 - p) / p**2, rel=0.10)


def test_half_probability_mean_staleness_is_one():
    d, ticks = 2, 100_000
    net = NetworkState(ChannelConfig(0.5), np.zeros((1, d)))
    draws = BlockStream([[np.random.default_rng(5)]], (1, d, d), chunk=4096)
    total = 0
    for n in range(ticks):
        net.step(n, np.zeros((1, d)), draws.at(n)[:, 0, 0])
        total += net.staleness(n)[0, 0, 1]
    assert total / ticks == pytest.approx(1.0, abs=0.05)


def test_stale_view_examples():
    box = Mailbox(0, [3.0, 7.0], [0, 4])
    assert np.array_equal(stale_view(box, 1.5), [1.5, 7.0])
    fresh = Mailbox(1, [1.0, 2.0, 3.0], [0, 0, 0])
    assert np.array_equal(stale_view(fresh, 2.0), [1.0, 2.0, 3.0])


def test_view_after_perfect_tick_equals_publishers():
    boxes = new_mailboxes([0.0, 0.0, 0.0])
    pubs = np.array([1.0, 2.0, 3.0])
    tick_deliveries(ChannelConfig(1.0), np.random.default_rng(0), pubs, boxes, 0)
    for i, b in enumerate(boxes):
        assert np.array_equal(stale_view(b, pubs[i]), pubs)


@pytest.mark.parametrize("a, b, want", [([1.0, 2.0], [1.0, 2.0], 0.0), ([1, 0], [0, 0], 1.0), ([3, 4], [0, 0], 5.0)])
def test_staleness_error_examples(a, b, want):
    assert staleness_error(a, b) == want


def test_staleness_error_shape_check():
    with pytest.raises(ValueError):
        staleness_error([1.0], [1.0, 2.0])


def test_channel_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(0.0)
    with pytest.raises(ValueError):
        ChannelConfig(1.5)
    with pytest.raises(ValueError):
        ChannelConfig(0.5, mode="delayed-queue")
    with pytest.raises(ValueError):
        ChannelConfig(0.5, max_queue_delay=3)
    with pytest.raises(ValueError):
        ChannelConfig(0.5, mode="carrier-pigeon")
    with pytest.raises(ValueError):
        ChannelConfig(0.5, pair_p_success=np.zeros((2, 2)))
    assert ChannelConfig(0.5, mode="delayed-queue", max_queue_delay=3).draws_per_pair == 2


CHANNELS = [
    ChannelConfig(0.6),
    ChannelConfig(0.6, mode="delayed-queue", max_queue_delay=4),
    ChannelConfig(0.8, pair_p_success=np.array([[1, 0.2, 0.9], [0.5, 1, 0.1], [0.7, 0.3, 1]])),
]


@pytest.mark.parametrize("channels", CHANNELS)
@pytest.mark.parametrize("gated", [False, True])
def test_loop_and_batched_agree(channels, gated):
    d = 3
    senders_fn = (lambda n: np.array([n % 2 == 0, True, n % 3 != 0])) if gated else None
    _, loop_snaps, loop_rec = run_loop(channels, 11, d, 120, senders_fn)
    _, bat_snaps, bat_rec = run_batched(channels, 11, d, 120, senders_fn)
    assert loop_rec == bat_rec
    for a, b in zip(loop_snaps, bat_snaps):
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    p=st.floats(0.05, 1.0),
    delayed=st.booleans(),
    span=st.integers(1, 5),
)
def test_mailbox_invariants(seed, p, delayed, span):
    d, ticks = 3, 60
    channels = (
        ChannelConfig(p, mode="delayed-queue", max_queue_delay=span) if delayed else ChannelConfig(p)
    )
    pubs, snaps, _ = run_loop(channels, seed, d, ticks)
    prev_origin = np.full((d, d), -1)
    for n, (vals, stale, origin) in enumerate(snaps):
        # monotone: the stored origin tick never moves backwards
        assert np.all(origin >= prev_origin)
        prev_origin = origin
        assert np.all(np.diag(stale) == 0)
        assert np.all(stale == n - origin)
        # conservation: every stored value is what its sender published at its origin tick
        for i in range(d):
            for j in range(d):
                assert vals[i, j] == pubs[origin[i, j] + 1, j]
        if delayed:
            assert np.all(stale[~np.eye(d, dtype=bool)] >= 0)


def test_delivery_streams_are_deterministic():
    ch = ChannelConfig(0.4, mode="delayed-queue", max_queue_delay=2)
    assert run_loop(ch, 3, 4, 50)[2] == run_loop(ch, 3, 4, 50)[2]


def test_newer_message_never_replaced_by_older():
    ch = ChannelConfig(1.0, mode="delayed-queue", max_queue_delay=3)
    boxes = new_mailboxes([0.0, 0.0])
    in_flight = {}

    class Fixed:
        """Uniform source forcing a delay of 3 at tick 0 and 0 at tick 1."""

        def __init__(self):
            self.calls = 0

        def random(self, shape):
            self.calls += 1
            if self.calls == 2:
                return np.full(shape, 0.99)
            return np.zeros(shape)

    rng = Fixed()
    tick_deliveries(ch, rng, [1.0, 10.0], boxes, 0, in_flight=in_flight)
    tick_deliveries(ch, rng, [2.0, 20.0], boxes, 1, in_flight=in_flight)
    assert boxes[0].last_value[1] == 20.0
    for n in (2, 3):
        tick_deliveries(ch, rng, [0.0, 0.0], boxes, n, senders=[False, False], in_flight=in_flight)
    assert boxes[0].last_value[1] == 20.0 and boxes[0].origin_tick[1] == 1


def test_delivery_csv(tmp_path):
    _, _, records = run_loop(ChannelConfig(0.5), 0, 2, 2)
    path = tmp_path / "d.csv"
    write_delivery_csv(path, records)
    lines = path.read_text().splitlines()
    assert lines[0] == "tick,from,to,delivered"
    assert len(lines) == 1 + 4


def test_vector_payloads_batched():
    ch = ChannelConfig(0.5)
    net = NetworkState(ch, initial=np.zeros((2, 3, 3, 2)))
    rng = np.random.default_rng(0)
    payload = rng.normal(size=(2, 3, 3, 2))
    got = net.step(0, payload, rng.random((2, 3, 3)))
    assert np.array_equal(net.values[got], payload[got])
    assert not net.values[~got & ~np.eye(3, dtype=bool)].any()


@pytest.mark.parametrize("p", [0.2, 0.7, 1.0])
def test_vectorised_staleness_matches_tick_loop(p):
    from dspg.network import staleness_series

    d, ticks = 3, 500
    u = np.random.default_rng(4).random((ticks, d, d))
    net = NetworkState(ChannelConfig(p), np.zeros((1, d)))
    stepwise = np.empty((ticks, d, d), dtype=np.int64)
    for n in range(ticks):
        net.step(n, np.zeros((1, d)), u[n][None])
        stepwise[n] = net.staleness(n)[0]
    fast = staleness_series((u < p) & ~np.eye(d, dtype=bool))
    off = ~np.eye(d, dtype=bool)
    assert np.array_equal(fast[:, off], stepwise[:, off])
