"""Simulated multi-rank communication substrate.

Ranks are cooperatively scheduled workers inside one process. Regions are
pre-registered byte buffers writable only by their sender; a put makes the
payload visible and records a completion event on the receiver's counter.
With the virtual clock enabled, completions carry deterministic timestamps
from a scalar cost model (latency = base + bytes/bandwidth) and waiting
advances the receiver's clock; wall-clock mode leaves timing to the caller.

Counters are cumulative and never decrease; epochs partition events so a
step's frames can never satisfy another step's wait.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .core import ProtocolError

__all__ = [
    "CostModel",
    "VirtualClock",
    "RegionHandle",
    "RankFabric",
]

MIN_REGION_BYTES = 32  # room for one frame header


@dataclass(frozen=True)
class CostModel:
    """Scalar timing model for the virtual clock."""

    base_latency: float = 1.0e-4
    bandwidth: float = 1.0e9
    progression_penalty: float = 0.2
    contention_multiplier: float = 1.5
    interp_cost: float = 1.0e-3
    deposit_cost: float = 1.0e-3
    fieldsolve_cost: float = 1.0e-3
    scan_cost_per_particle: float = 1.0e-9

    def latency(self, nbytes: int) -> float:
        return self.base_latency + nbytes / self.bandwidth

    @classmethod
    def from_config(cls, config):
        return cls(base_latency=config.base_latency,
                   bandwidth=config.bandwidth,
                   progression_penalty=config.progression_penalty,
                   contention_multiplier=config.contention_multiplier,
                   interp_cost=config.interp_cost,
                   deposit_cost=config.deposit_cost,
                   fieldsolve_cost=config.fieldsolve_cost,
                   scan_cost_per_particle=config.scan_cost_per_particle)


@dataclass
class VirtualClock:
    """Per-rank simulated time; pending completions live on the fabric."""

    now: float = 0.0

    def advance(self, dt: float) -> float:
        self.now += dt
        return self.now

    def advance_to(self, t: float) -> float:
        if t > self.now:
            self.now = t
        return self.now


@dataclass(frozen=True)
class RegionHandle:
    receiver: int
    sender: int
    namespace: str
    size: int


@dataclass
class _Region:
    data: np.ndarray
    valid: int = 0


class RankFabric:
    """In-process rank fabric: registered put regions with notification
    counters, two-sided FIFO channels, and per-rank virtual clocks."""

    def __init__(self, n_ranks: int, cost: CostModel = None,
                 virtual_time: bool = False):
        self.n_ranks = n_ranks
        self.cost = cost or CostModel()
        self.virtual_time = virtual_time
        self.clocks = [VirtualClock() for _ in range(n_ranks)]
        self._regions: Dict[RegionHandle, _Region] = {}
        self._senders_to: Dict[Tuple[int, str], List[int]] = {}
        # events[(receiver, ns)] -> list of (completion time, sender)
        self._events: Dict[Tuple[int, str], List[Tuple[float, int]]] = {}
        self._counter: Dict[Tuple[int, str], int] = {}
        self._epoch: Dict[str, int] = {}
        self._batched: Dict[Tuple[int, str, int], bool] = {}
        self._channels: Dict[Tuple[int, int], List] = {}

    # -- region management -------------------------------------------------

    def register_region(self, receiver: int, sender: int, nbytes: int,
                        namespace: str = "particles") -> RegionHandle:
        """Pre-size a one-sided region; duplicate registration is an error."""
        size = max(int(nbytes), MIN_REGION_BYTES)
        handle = RegionHandle(receiver, sender, namespace, size)
        if handle in self._regions:
            raise ProtocolError(
                f"region ({receiver} <- {sender}, {namespace}) already registered")
        self._regions[handle] = _Region(np.zeros(size, np.uint8))
        self._senders_to.setdefault((receiver, namespace), []).append(sender)
        return handle

    def regions_for(self, receiver: int, namespace: str = "particles"):
        return sorted(self._senders_to.get((receiver, namespace), []))

    # -- epochs --------------------------------------------------------------

    def start_epoch(self, epoch: int, namespace: str = "particles") -> None:
        self._epoch[namespace] = epoch
        for key in list(self._events):
            if key[1] == namespace:
                self._events[key] = []

    def epoch(self, namespace: str = "particles") -> int:
        return self._epoch.get(namespace, 0)

    # -- one-sided puts ------------------------------------------------------

    def _deliver(self, sender: int, handle: RegionHandle, payload,
                 issue_time: float, penalty: float = 0.0) -> float:
        region = self._regions.get(handle)
        if region is None:
            raise ProtocolError(f"unregistered region {handle}")
        if handle.sender != sender:
            raise ProtocolError(f"rank {sender} cannot write {handle}")
        buf = np.frombuffer(bytes(payload), np.uint8)
        if buf.size > handle.size:
            raise ProtocolError(
                f"payload of {buf.size} bytes exceeds region size {handle.size}")
        region.data[:buf.size] = buf
        region.valid = buf.size
        completion = issue_time + self.cost.latency(buf.size) * (1.0 + penalty)
        key = (handle.receiver, handle.namespace)
        self._events.setdefault(key, []).append((completion, sender))
        self._counter[key] = self._counter.get(key, 0) + 1
        return completion

    def put_notify(self, sender: int, handle: RegionHandle, payload) -> float:
        """Write payload into the region; the notification counter increment
        becomes observable only after the payload bytes (release/acquire)."""
        return self._deliver(sender, handle, payload,
                             self.clocks[sender].now)

    def batch_put(self, sender: int, entries, namespace: str = "particles") -> float:
        """Submit all puts of one epoch in a single call after the compute
        region ends; a second batch in the same epoch is a protocol error."""
        ep = self.epoch(namespace)
        guard = (sender, namespace, ep)
        if self._batched.get(guard):
            raise ProtocolError(
                f"rank {sender} issued a second batch in epoch {ep}")
        self._batched[guard] = True
        t_issue = self.clocks[sender].now
        for handle, payload in entries:
            self._deliver(sender, handle, payload, t_issue)
        return t_issue

    def wait_counter(self, receiver: int, expected: int,
                     namespace: str = "particles") -> float:
        """Block until the epoch's counter reaches `expected`.

        Returns the exposed wait time (virtual mode); with cooperative
        scheduling a short counter means a sender never issued, which is
        reported as a named deadlock.
        """
        key = (receiver, namespace)
        events = self._events.get(key, [])
        if len(events) < expected:
            got = {s for _, s in events}
            missing = [s for s in self.regions_for(receiver, namespace)
                       if s not in got]
            raise ProtocolError(
                f"deadlock: rank {receiver} expected {expected} notifications "
                f"in epoch {self.epoch(namespace)}, missing senders {missing}")
        if not self.virtual_time or not events:
            return 0.0
        clock = self.clocks[receiver]
        t_done = max(t for t, _ in events)
        wait = max(0.0, t_done - clock.now)
        clock.advance_to(t_done)
        return wait

    def counter(self, receiver: int, namespace: str = "particles") -> int:
        """Cumulative notification count; never decreases."""
        return self._counter.get((receiver, namespace), 0)

    def transfers_pending(self, receiver: int, after: float,
                          namespace: str = "particles") -> bool:
        """Whether any of this epoch's deliveries completes later than
        `after` (frames still in flight on the virtual timeline)."""
        events = self._events.get((receiver, namespace), [])
        return any(t > after for t, _ in events)

    def read_region(self, handle: RegionHandle) -> bytes:
        region = self._regions.get(handle)
        if region is None:
            raise ProtocolError(f"unregistered region {handle}")
        return region.data[:region.valid].tobytes()

    # -- two-sided channels ---------------------------------------------------

    def channel_send(self, sender: int, receiver: int, payload,
                     receiver_computing: bool = False) -> None:
        """FIFO send; completion is delayed by the progression penalty when
        the receiver is inside a compute phase (no independent progress)."""
        penalty = (self.cost.progression_penalty if receiver_computing else 0.0)
        t = self.clocks[sender].now
        completion = t + self.cost.latency(len(bytes(payload))) * (1.0 + penalty)
        self._channels.setdefault((receiver, sender), []).append(
            (bytes(payload), completion))

    def channel_recv(self, receiver: int, sender: int) -> bytes:
        """Pop the next message; in a cooperatively scheduled world a receive
        with nothing pending can never be satisfied and is a deadlock."""
        queue = self._channels.get((receiver, sender))
        if not queue:
            raise ProtocolError(
                f"deadlock: rank {receiver} receive from {sender} "
                "with no pending send")
        payload, completion = queue.pop(0)
        if self.virtual_time:
            clock = self.clocks[receiver]
            clock.advance_to(completion)
        return payload

    def channel_wait_all(self, receiver: int, senders):
        """Receive one message from each sender.

        Returns (exposed wait time, [(sender, payload), ...]).
        """
        t0 = self.clocks[receiver].now
        payloads = [(s, self.channel_recv(receiver, s)) for s in senders]
        wait = self.clocks[receiver].now - t0 if self.virtual_time else 0.0
        return wait, payloads
