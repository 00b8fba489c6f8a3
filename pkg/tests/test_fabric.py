"""Fabric semantics: regions, notification counters, virtual clock math,
channels, and determinism."""

import numpy as np
import pytest

from tilepic.core import ProtocolError
from tilepic.fabric import CostModel, RankFabric


def make_fabric(virtual=False, base=1.0, bandwidth=1e9, penalty=0.25):
    cost = CostModel(base_latency=base, bandwidth=bandwidth,
                     progression_penalty=penalty)
    return RankFabric(4, cost=cost, virtual_time=virtual)


class TestRegions:
    def test_register_full_neighborhood(self):
        fab = RankFabric(27)
        senders = [s for s in range(27) if s != 13]
        for s in senders:
            fab.register_region(13, s, 1024)
        assert fab.regions_for(13) == senders

    def test_zero_byte_request_holds_header(self):
        fab = RankFabric(2)
        handle = fab.register_region(0, 1, 0)
        assert handle.size >= 32

    def test_duplicate_rejected(self):
        fab = RankFabric(2)
        fab.register_region(0, 1, 64)
        with pytest.raises(ProtocolError):
            fab.register_region(0, 1, 64)

    def test_oversize_payload_rejected(self):
        fab = RankFabric(2)
        handle = fab.register_region(0, 1, 64)
        with pytest.raises(ProtocolError):
            fab.put_notify(1, handle, b"x" * 65)

    def test_wrong_sender_rejected(self):
        fab = RankFabric(3)
        handle = fab.register_region(0, 1, 64)
        with pytest.raises(ProtocolError):
            fab.put_notify(2, handle, b"abc")


class TestPutNotify:
    def test_empty_payload_still_counts(self):
        fab = make_fabric()
        handle = fab.register_region(0, 1, 64)
        fab.put_notify(1, handle, b"")
        assert fab.counter(0) == 1

    def test_payload_visible_after_counter(self):
        fab = make_fabric()
        handle = fab.register_region(0, 1, 64)
        blob = bytes(np.arange(48, dtype=np.uint8))
        fab.put_notify(1, handle, blob)
        assert fab.counter(0) == 1
        assert fab.read_region(handle) == blob

    def test_two_senders_interleave(self):
        fab = make_fabric()
        h1 = fab.register_region(0, 1, 64)
        h2 = fab.register_region(0, 2, 64)
        fab.put_notify(1, h1, b"from-1")
        fab.put_notify(2, h2, b"from-2")
        assert fab.counter(0) == 2
        assert fab.read_region(h1) == b"from-1"
        assert fab.read_region(h2) == b"from-2"

    def test_counter_monotone(self):
        fab = make_fabric()
        handle = fab.register_region(0, 1, 64)
        counts = []
        for epoch in range(3):
            fab.start_epoch(epoch)
            fab.put_notify(1, handle, b"x")
            counts.append(fab.counter(0))
        assert counts == sorted(counts) == [1, 2, 3]


class TestBatchPut:
    def test_batch_counts_per_receiver(self):
        fab = make_fabric()
        handles = [fab.register_region(r, 3, 64) for r in range(3)]
        fab.start_epoch(0)
        fab.batch_put(3, [(h, b"hi") for h in handles])
        for r in range(3):
            assert fab.counter(r) == 1

    def test_double_batch_in_epoch_rejected(self):
        fab = make_fabric()
        handle = fab.register_region(0, 1, 64)
        fab.start_epoch(5)
        fab.batch_put(1, [(handle, b"a")])
        with pytest.raises(ProtocolError):
            fab.batch_put(1, [(handle, b"b")])

    def test_new_epoch_allows_batch(self):
        fab = make_fabric()
        handle = fab.register_region(0, 1, 64)
        fab.start_epoch(0)
        fab.batch_put(1, [(handle, b"a")])
        fab.start_epoch(1)
        fab.batch_put(1, [(handle, b"b")])
        assert fab.counter(0) == 2


class TestWaitCounter:
    def test_wait_zero_when_landed(self):
        fab = make_fabric(virtual=True, base=0.5)
        handle = fab.register_region(0, 1, 64)
        fab.start_epoch(0)
        fab.clocks[1].now = 0.0
        fab.put_notify(1, handle, b"x")
        fab.clocks[0].now = 10.0  # receiver well past the completion
        assert fab.wait_counter(0, 1) == 0.0

    def test_wait_advances_clock(self):
        fab = make_fabric(virtual=True, base=5.0, bandwidth=1e12)
        handle = fab.register_region(0, 1, 64)
        fab.start_epoch(0)
        fab.clocks[1].now = 0.0
        fab.put_notify(1, handle, b"x")   # completes at t = 5 + eps
        fab.clocks[0].now = 3.0
        wait = fab.wait_counter(0, 1)
        assert wait == pytest.approx(2.0, abs=1e-9)
        assert fab.clocks[0].now == pytest.approx(5.0, abs=1e-9)

    def test_missing_sender_named(self):
        fab = make_fabric(virtual=True)
        h1 = fab.register_region(0, 1, 64)
        fab.register_region(0, 2, 64)
        fab.start_epoch(0)
        fab.put_notify(1, h1, b"x")
        with pytest.raises(ProtocolError, match=r"missing senders \[2\]"):
            fab.wait_counter(0, 2)


class TestChannels:
    def test_payload_identity(self):
        fab = make_fabric()
        fab.channel_send(1, 0, b"payload")
        assert fab.channel_recv(0, 1) == b"payload"

    def test_recv_without_send_deadlocks(self):
        fab = make_fabric()
        with pytest.raises(ProtocolError, match="deadlock"):
            fab.channel_recv(0, 1)

    def test_fifo_order(self):
        fab = make_fabric()
        fab.channel_send(1, 0, b"first")
        fab.channel_send(1, 0, b"second")
        assert fab.channel_recv(0, 1) == b"first"
        assert fab.channel_recv(0, 1) == b"second"

    def test_progression_penalty_exposed(self):
        # transfer progressed during receiver compute pays the penalty
        fab = make_fabric(virtual=True, base=4.0, bandwidth=1e12, penalty=0.5)
        fab.channel_send(1, 0, b"x", receiver_computing=True)
        wait, _ = fab.channel_wait_all(0, [1])
        assert wait == pytest.approx(6.0, rel=1e-9)
        fab2 = make_fabric(virtual=True, base=4.0, bandwidth=1e12, penalty=0.5)
        fab2.channel_send(1, 0, b"x", receiver_computing=False)
        wait2, _ = fab2.channel_wait_all(0, [1])
        assert wait2 == pytest.approx(4.0, rel=1e-9)


class TestDeterminism:
    def run_timeline(self):
        fab = make_fabric(virtual=True, base=0.125, bandwidth=1024.0)
        handles = {}
        for r in range(4):
            for s in range(4):
                if r != s:
                    handles[(r, s)] = fab.register_region(r, s, 4096)
        rng = np.random.default_rng(99)
        waits = []
        for epoch in range(5):
            fab.start_epoch(epoch)
            for s in range(4):
                fab.clocks[s].advance(0.5)
                entries = [(handles[(r, s)], bytes(rng.integers(0, 255, 128,
                                                                dtype=np.uint8)))
                           for r in range(4) if r != s]
                fab.batch_put(s, entries)
            for r in range(4):
                waits.append(fab.wait_counter(r, 3))
        return waits

    def test_identical_timelines(self):
        assert self.run_timeline() == self.run_timeline()


class TestTransfersPending:
    def test_in_flight_detection(self):
        fab = make_fabric(virtual=True, base=5.0, bandwidth=1e12)
        handle = fab.register_region(0, 1, 64)
        fab.start_epoch(0)
        fab.put_notify(1, handle, b"x")  # completes near t=5
        assert fab.transfers_pending(0, after=3.0)
        assert not fab.transfers_pending(0, after=6.0)
