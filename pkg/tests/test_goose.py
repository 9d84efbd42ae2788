"""GOOSE codec and sequencing state machine tests."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtbench._ber import Malformed
from emtbench.goose import (
    LADDER,
    GooseConfig,
    GoosePublisher,
    GooseSubscriber,
    goose_decode,
    goose_encode,
)


def test_encode_decode_roundtrip():
    cfg = GooseConfig(app_id=0x0102, conf_rev=3)
    frame = goose_encode(cfg, st_num=5, sq_num=2,
                         dataset=[True, False, True, True],
                         tal_ms=2000, t_seconds=12.375)
    parsed = goose_decode(frame)
    assert parsed.gocb_ref == cfg.gocb_ref
    assert parsed.go_id == cfg.go_id
    assert parsed.dataset_ref == cfg.dataset_ref
    assert parsed.st_num == 5
    assert parsed.sq_num == 2
    assert parsed.time_allowed_to_live_ms == 2000
    assert parsed.conf_rev == 3
    assert parsed.dataset == (True, False, True, True)
    assert parsed.t_seconds == pytest.approx(12.375, abs=1e-6)


@given(
    st.lists(st.booleans(), min_size=1, max_size=16),
    st.integers(1, 2**32 - 1),
    st.integers(0, 2**32 - 1),
    st.integers(0, 60000),
)
@settings(max_examples=100)
def test_roundtrip_property(dataset, st_num, sq_num, tal):
    cfg = GooseConfig()
    parsed = goose_decode(
        goose_encode(cfg, st_num, sq_num, dataset, tal, 1.0))
    assert parsed.dataset == tuple(dataset)
    assert parsed.st_num == st_num
    assert parsed.sq_num == sq_num
    assert parsed.time_allowed_to_live_ms == tal


@given(st.binary(min_size=0, max_size=160))
@settings(max_examples=300)
def test_decoder_never_overreads(data):
    try:
        goose_decode(data)
    except Malformed:
        pass


def test_trip_change_bumps_stnum_resets_sqnum():
    pub = GoosePublisher(GooseConfig(), dataset=[False, True, True, False])
    first = goose_decode(pub.publish_initial(0.0))
    assert (first.st_num, first.sq_num) == (1, 0)
    hb = goose_decode(pub.heartbeat_due(LADDER[0] + 1e-4))
    assert (hb.st_num, hb.sq_num) == (1, 1)
    change = goose_decode(
        pub.on_data_change([True, True, True, False], now=0.5))
    assert (change.st_num, change.sq_num) == (2, 0)


def test_retransmission_ladder_settles_at_tail():
    pub = GoosePublisher(GooseConfig(), dataset=[False] * 4)
    times = [0.0]
    pub.publish_initial(0.0)
    now = 0.0
    while now < 6.0:
        now += 0.0005
        if pub.heartbeat_due(now) is not None:
            times.append(now)
    gaps = [b - a for a, b in zip(times, times[1:])]
    for expected, got in zip(LADDER, gaps):
        assert got == pytest.approx(expected, rel=0.25)
    # after the ladder, stable-tail gaps of 1000 ms
    for gap in gaps[len(LADDER):]:
        assert gap == pytest.approx(1.0, rel=0.05)
    assert len(gaps) > len(LADDER) + 1


def test_tal_is_twice_next_interval():
    pub = GoosePublisher(GooseConfig(), dataset=[False] * 4)
    first = goose_decode(pub.publish_initial(0.0))
    assert first.time_allowed_to_live_ms == 8  # 2 x 4 ms
    now = 0.0
    last = first
    for _ in range(len(LADDER) + 3):
        while True:
            now += 0.0005
            frame = pub.heartbeat_due(now)
            if frame is not None:
                last = goose_decode(frame)
                break
    assert last.time_allowed_to_live_ms == 2000  # settled at 2 x 1000 ms


def test_subscriber_tracks_and_flags_missed_changes():
    cfg = GooseConfig()
    sub = GooseSubscriber()
    sub.receive(goose_encode(cfg, 1, 0, [False], 8, 0.0), now=0.0)
    # jump stNum by +2: one state change was never seen
    sub.receive(goose_encode(cfg, 3, 0, [True], 8, 0.1), now=0.1)
    assert sub.missed_changes == 1
    assert sub.dataset == (True,)


def test_subscriber_discards_out_of_order():
    cfg = GooseConfig()
    sub = GooseSubscriber()
    sub.receive(goose_encode(cfg, 4, 1, [True], 8, 0.0), now=0.0)
    result = sub.receive(goose_encode(cfg, 3, 9, [False], 8, 0.1), now=0.1)
    assert result is None
    assert sub.discarded == 1
    assert sub.dataset == (True,)
    # duplicate sqNum within the epoch is discarded too
    assert sub.receive(goose_encode(cfg, 4, 1, [False], 8, 0.2), 0.2) is None
    assert sub.discarded == 2


def test_staleness_after_tal():
    cfg = GooseConfig()
    sub = GooseSubscriber()
    sub.receive(goose_encode(cfg, 1, 0, [True], tal_ms=100, t_seconds=0.0),
                now=0.0)
    assert not sub.is_stale(now=0.05)
    assert sub.is_stale(now=0.101)


def test_publisher_sqnum_strictly_increasing_within_epoch():
    pub = GoosePublisher(GooseConfig(), dataset=[False] * 4)
    pub.publish_initial(0.0)
    seen = [(1, 0)]
    now = 0.0
    for _ in range(40):
        while True:
            now += 0.001
            frame = pub.heartbeat_due(now)
            if frame is not None:
                parsed = goose_decode(frame)
                seen.append((parsed.st_num, parsed.sq_num))
                break
    st_nums = {s for s, _ in seen}
    assert st_nums == {1}
    sq = [q for _, q in seen]
    assert sq == sorted(set(sq)) == list(range(len(seen)))
