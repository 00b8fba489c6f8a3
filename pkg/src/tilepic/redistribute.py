"""Migrant frame packing, routing and the redistribution schedules.

Frames follow a linear [Header | Payload] layout, little endian:
    header  = {u32 source, u32 epoch, u64 count, u64 bytes, u64 reserved}
    payload = count x {u64 id, f64 x, y, z, ux, uy, uz, w}
A region may carry up to two frames back to back (the spill frame); anything
beyond that indicates a migration-envelope violation upstream.

Every rank sends exactly one (possibly header-only) put per neighbor per
step, so the expected notification count is static. The fused path fills
per-tile staging during the write-back; the bulk-synchronous path instead
pays a standalone end-of-step scan over all storage to find the leavers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .core import (
    ConfigurationError,
    Decomposition,
    GridGeometry,
    MigrationEnvelopeError,
    ParticleRecord,
    ProtocolError,
    cell_of,
)

__all__ = [
    "HEADER_DTYPE",
    "RECORD_DTYPE",
    "MigrantFrame",
    "CommVariant",
    "RankOutbox",
    "RedistributionTimings",
    "pack_record",
    "unpack_record",
    "pack_frame",
    "unpack_frames",
    "route_migrant",
    "scan_and_pack",
    "emit_frames",
    "converge",
    "unpack_merge",
    "run_redistribution",
]

HEADER_DTYPE = np.dtype([
    ("source", "<u4"), ("epoch", "<u4"), ("count", "<u8"),
    ("bytes", "<u8"), ("reserved", "<u8"),
])
RECORD_DTYPE = np.dtype([
    ("id", "<u8"), ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("ux", "<f8"), ("uy", "<f8"), ("uz", "<f8"), ("w", "<f8"),
])
HEADER_BYTES = HEADER_DTYPE.itemsize   # 32
RECORD_BYTES = RECORD_DTYPE.itemsize   # 64

MAX_FRAMES_PER_REGION = 2


@dataclass
class MigrantFrame:
    """One [Header | Payload] envelope of packed particle records."""

    source: int
    epoch: int
    records: np.ndarray  # RECORD_DTYPE array

    @property
    def count(self):
        return int(self.records.shape[0])


@dataclass(frozen=True)
class CommVariant:
    """Redistribution schedule: transport plus wait placement."""

    mode: str          # BSP | TWOSIDED | ONESIDED
    sync_point: str    # POST_DEPOSIT | POST_FIELDSOLVE (ignored for BSP)

    _CODES = {
        "C0": ("BSP", "POST_DEPOSIT"),
        "C1": ("TWOSIDED", "POST_DEPOSIT"),
        "C2": ("ONESIDED", "POST_DEPOSIT"),
        "C3": ("TWOSIDED", "POST_FIELDSOLVE"),
        "C4": ("ONESIDED", "POST_FIELDSOLVE"),
    }

    @classmethod
    def from_code(cls, code: str) -> "CommVariant":
        try:
            return cls(*cls._CODES[code.upper()])
        except KeyError:
            raise ConfigurationError(f"unknown comm variant {code!r}") from None

    @property
    def code(self):
        for code, spec in self._CODES.items():
            if (self.mode, self.sync_point) == spec:
                return code
        return f"{self.mode}/{self.sync_point}"

    @property
    def overlapped(self):
        return self.mode != "BSP"


def soa_to_records(ids, soa) -> np.ndarray:
    out = np.empty(len(ids), RECORD_DTYPE)
    out["id"] = np.asarray(ids, np.int64).view(np.uint64)
    for i, name in enumerate(("x", "y", "z", "ux", "uy", "uz", "w")):
        out[name] = soa[i]
    return out


def records_to_soa(records: np.ndarray):
    ids = records["id"].view(np.int64).copy()
    soa = np.empty((7, records.shape[0]))
    for i, name in enumerate(("x", "y", "z", "ux", "uy", "uz", "w")):
        soa[i] = records[name]
    return ids, soa


def pack_record(record: ParticleRecord) -> bytes:
    arr = np.empty(1, RECORD_DTYPE)
    arr[0] = (record.id, record.x, record.y, record.z,
              record.ux, record.uy, record.uz, record.w)
    return arr.tobytes()


def unpack_record(data: bytes) -> ParticleRecord:
    arr = np.frombuffer(data, RECORD_DTYPE, count=1)[0]
    return ParticleRecord(id=int(arr["id"]), x=float(arr["x"]),
                          y=float(arr["y"]), z=float(arr["z"]),
                          ux=float(arr["ux"]), uy=float(arr["uy"]),
                          uz=float(arr["uz"]), w=float(arr["w"]))


def pack_frame(frame: MigrantFrame) -> bytes:
    header = np.zeros(1, HEADER_DTYPE)
    header["source"] = frame.source
    header["epoch"] = frame.epoch
    header["count"] = frame.count
    header["bytes"] = frame.count * RECORD_BYTES
    return header.tobytes() + frame.records.tobytes()


def unpack_frames(data: bytes) -> List[MigrantFrame]:
    """Parse consecutive [Header | Payload] envelopes from a region."""
    frames = []
    off = 0
    while off + HEADER_BYTES <= len(data):
        header = np.frombuffer(data, HEADER_DTYPE, count=1, offset=off)[0]
        nbytes = int(header["bytes"])
        count = int(header["count"])
        if nbytes != count * RECORD_BYTES:
            raise ProtocolError(
                f"frame header inconsistent: {count} records vs {nbytes} bytes")
        off += HEADER_BYTES
        records = np.frombuffer(data, RECORD_DTYPE, count=count,
                                offset=off).copy()
        off += nbytes
        frames.append(MigrantFrame(source=int(header["source"]),
                                   epoch=int(header["epoch"]),
                                   records=records))
        if len(frames) > MAX_FRAMES_PER_REGION:
            raise ProtocolError("more than two frames in one region")
    return frames


@dataclass
class RedistributionTimings:
    t_pack: float = 0.0
    t_issue: float = 0.0
    t_wait: float = 0.0
    t_post_process: float = 0.0

    @property
    def total(self):
        return self.t_pack + self.t_issue + self.t_wait + self.t_post_process


class RankOutbox:
    """Per-rank migrant routing state for one step.

    Local movers go to the destination tile's inbox; remote movers go to the
    per-neighbor send frame. Entries are collected per source tile by the
    write-back (thread-private) and concatenated at emit.
    """

    def __init__(self, decomp: Decomposition, my_rank: int, geom: GridGeometry,
                 n_tiles: int):
        self.decomp = decomp
        self.my_rank = my_rank
        self.geom = geom
        self.neighbors = decomp.neighbors_of(my_rank)
        self.inbox: Dict[int, list] = {t: [] for t in range(n_tiles)}
        self.frames: Dict[int, list] = {nb: [] for nb in self.neighbors}
        self.n_local = 0
        self.n_remote = 0

    def clear(self):
        for t in self.inbox:
            self.inbox[t] = []
        for nb in self.frames:
            self.frames[nb] = []
        self.n_local = 0
        self.n_remote = 0

    def route_staged(self, stg_ids, stg_soa, stg_dest):
        """Partition one tile's staged movers: dest >= 0 is a tile on this
        rank, dest = -(rank+1) a neighbor rank."""
        dest = np.asarray(stg_dest)
        local = dest >= 0
        for t in np.unique(dest[local]):
            sel = dest == t
            self.inbox[int(t)].append((stg_ids[sel].copy(),
                                       stg_soa[:, sel].copy()))
            self.n_local += int(sel.sum())
        remote = ~local
        for code in np.unique(dest[remote]):
            nb = int(-code - 1)
            if nb not in self.frames:
                raise MigrationEnvelopeError(
                    f"rank {nb} is not a registered neighbor of {self.my_rank}")
            sel = dest == code
            self.frames[nb].append((stg_ids[sel].copy(), stg_soa[:, sel].copy()))
            self.n_remote += int(sel.sum())

    def route_record(self, record: ParticleRecord, dest_cell) -> None:
        """Single-record routing used by the standalone scan path."""
        owner = self.decomp.owner_of_cell(dest_cell.ijk)
        ids = np.array([record.id], np.int64)
        soa = np.array([[record.x], [record.y], [record.z],
                        [record.ux], [record.uy], [record.uz], [record.w]])
        if owner == self.my_rank:
            origin = self.decomp.rank_origin(self.my_rank)
            tpr = self.decomp.tiles_per_rank
            ts = self.geom.tile_shape
            rel = tuple(dest_cell.ijk[a] - origin[a] for a in range(3))
            tile = ((rel[2] // ts[2]) * tpr[1]
                    + rel[1] // ts[1]) * tpr[0] + rel[0] // ts[0]
            self.inbox[int(tile)].append((ids, soa))
            self.n_local += 1
        else:
            if owner not in self.frames:
                raise MigrationEnvelopeError(
                    f"rank {owner} is not a registered neighbor of {self.my_rank}")
            self.frames[owner].append((ids, soa))
            self.n_remote += 1

    def build_payloads(self, epoch: int,
                       frame_capacity: int = None) -> Dict[int, bytes]:
        """One frame per neighbor (header-only when empty), spilling into a
        second frame when the nominal capacity is exceeded; more than two
        frames' worth means the migration envelope was violated upstream."""
        payloads = {}
        for nb in self.neighbors:
            parts = self.frames[nb]
            if parts:
                ids = np.concatenate([p[0] for p in parts])
                soa = np.concatenate([p[1] for p in parts], axis=1)
                records = soa_to_records(ids, soa)
            else:
                records = np.empty(0, RECORD_DTYPE)
            if frame_capacity is not None and records.shape[0] > frame_capacity:
                if records.shape[0] > MAX_FRAMES_PER_REGION * frame_capacity:
                    raise ProtocolError(
                        f"epoch {epoch}: {records.shape[0]} migrants for rank "
                        f"{nb} exceed two frames of {frame_capacity}")
                payloads[nb] = (
                    pack_frame(MigrantFrame(self.my_rank, epoch,
                                            records[:frame_capacity]))
                    + pack_frame(MigrantFrame(self.my_rank, epoch,
                                              records[frame_capacity:])))
            else:
                payloads[nb] = pack_frame(
                    MigrantFrame(source=self.my_rank, epoch=epoch,
                                 records=records))
        return payloads


def route_migrant(outbox: RankOutbox, record: ParticleRecord,
                  dest_cell) -> None:
    """Append one migrating record to its local inbox or neighbor frame."""
    outbox.route_record(record, dest_cell)


def scan_and_pack(store, geom: GridGeometry, decomp: Decomposition,
                  my_rank: int, outbox: RankOutbox, buf=None) -> int:
    """Standalone end-of-step scan over all storage (the cost the fused
    write-back eliminates): find leave-flagged slots, recompute their
    destinations from the positions, and pack them."""
    b = store.cur if buf is None else buf
    scanned = 0
    origin = decomp.rank_origin(my_rank)
    tpr = decomp.tiles_per_rank
    ts = geom.tile_shape
    for t in range(store.n_tiles):
        off = int(store.tile_off[t])
        cap = int(store.tile_cap[t])
        po = int(store.ptr_ord[b, t])
        pd = int(store.ptr_dis[b, t])
        for lo, hi in ((off, off + po), (off + pd, off + cap)):
            scanned += hi - lo
            flags = store.leave[b, lo:hi]
            movers = np.flatnonzero(flags != 0)
            if movers.size == 0:
                continue
            ids = store.ids[b, lo:hi][movers]
            soa = store.soa[b, :, lo:hi][:, movers]
            dest = np.empty(movers.size, np.int64)
            for n in range(movers.size):
                cid = cell_of((soa[0, n], soa[1, n], soa[2, n]), geom)
                owner = decomp.owner_of_cell(cid.ijk)
                if owner == my_rank:
                    rel = tuple(cid.ijk[a] - origin[a] for a in range(3))
                    dest[n] = ((rel[2] // ts[2]) * tpr[1]
                               + rel[1] // ts[1]) * tpr[0] + rel[0] // ts[0]
                else:
                    dest[n] = -(owner + 1)
            outbox.route_staged(ids, soa, dest)
    return scanned


def emit_frames(rank: int, outbox: RankOutbox, fabric, variant: CommVariant,
                handles: Dict[int, object], epoch: int,
                deposit_pending: bool = True) -> float:
    """Send this epoch's frames per the variant's transport.

    ONESIDED submits one batched put; TWOSIDED sends FIFO messages whose
    progression is penalized while the receiver computes. Returns the issue
    cost charged to the virtual clock (zero: issue is asynchronous).
    """
    if handles:
        any_size = min(h.size for h in handles.values())
        frame_capacity = max(
            (any_size // MAX_FRAMES_PER_REGION - HEADER_BYTES) // RECORD_BYTES,
            0)
    else:
        frame_capacity = None
    payloads = outbox.build_payloads(epoch, frame_capacity=frame_capacity)
    for nb, payload in payloads.items():
        if len(payload) > handles[nb].size:
            raise ProtocolError(
                f"epoch {epoch}: frame for rank {nb} exceeds its region "
                f"({len(payload)} > {handles[nb].size} bytes)")
    if variant.mode == "TWOSIDED":
        for nb, payload in payloads.items():
            fabric.channel_send(rank, nb, payload,
                                receiver_computing=deposit_pending)
    else:
        fabric.batch_put(rank, [(handles[nb], payloads[nb])
                                for nb in outbox.neighbors])
    return 0.0


def converge(rank: int, fabric, variant: CommVariant, neighbors):
    """Wait for every neighbor's frame.

    Returns (exposed wait time, received payloads or None); the two-sided
    transport hands the payloads back with the receive, the one-sided one
    leaves them in the registered regions.
    """
    if variant.mode == "TWOSIDED":
        wait, payloads = fabric.channel_wait_all(rank, neighbors)
        return wait, [p for _, p in payloads]
    return fabric.wait_counter(rank, len(neighbors)), None


def collect_frames(rank: int, fabric, variant: CommVariant, neighbors,
                   handles: Dict[int, object], epoch: int,
                   received=None) -> List[MigrantFrame]:
    """Read and epoch-check every neighbor's frames after convergence."""
    frames = []
    if variant.mode == "TWOSIDED":
        blobs = received or []
    else:
        blobs = [fabric.read_region(handles[nb]) for nb in neighbors]
    for blob in blobs:
        for frame in unpack_frames(blob):
            if frame.epoch != epoch:
                raise ProtocolError(
                    f"epoch mismatch: frame from rank {frame.source} carries "
                    f"epoch {frame.epoch}, current epoch is {epoch}")
            frames.append(frame)
    return frames


def unpack_merge(store, geom: GridGeometry, decomp: Decomposition,
                 my_rank: int, frames: List[MigrantFrame],
                 inbox: Dict[int, list], deterministic: bool) -> int:
    """Append inbound records to the next buffer's disordered tails.

    Records are routed to tiles by their cell; with deterministic mode the
    merge is ordered by ascending particle id so arrival order never matters.
    Overflowing records spill to the per-tile overflow lists, forcing a
    regrow at the end of the step.
    """
    b = store.nxt
    origin = decomp.rank_origin(my_rank)
    tpr = decomp.tiles_per_rank
    ts = geom.tile_shape
    per_tile_ids = {t: [] for t in range(store.n_tiles)}
    per_tile_soa = {t: [] for t in range(store.n_tiles)}
    for frame in frames:
        if frame.count == 0:
            continue
        ids, soa = records_to_soa(frame.records)
        cells = np.empty((ids.size, 3), np.int64)
        for a, lo_a in enumerate(geom.prob_lo):
            t_ax = (soa[a] - lo_a) * (1.0 / geom.dx[a])
            cells[:, a] = np.floor(t_ax).astype(np.int64) % geom.n_cell[a]
        rel = cells - np.asarray(origin)
        tile = ((rel[:, 2] // ts[2]) * tpr[1]
                + rel[:, 1] // ts[1]) * tpr[0] + rel[:, 0] // ts[0]
        bad = ((rel < 0) | (rel >= np.asarray(decomp.cells_per_rank))).any(axis=1)
        if bad.any():
            raise ProtocolError(
                f"rank {my_rank} received particle "
                f"{int(ids[np.flatnonzero(bad)[0]])} it does not own")
        for t in np.unique(tile):
            sel = tile == t
            per_tile_ids[int(t)].append(ids[sel])
            per_tile_soa[int(t)].append(soa[:, sel])
    for t, parts in inbox.items():
        for ids, soa in parts:
            per_tile_ids[t].append(ids)
            per_tile_soa[t].append(soa)
    merged = 0
    for t in range(store.n_tiles):
        if not per_tile_ids[t]:
            continue
        ids = np.concatenate(per_tile_ids[t])
        soa = np.concatenate(per_tile_soa[t], axis=1)
        if deterministic:
            order = np.argsort(ids, kind="stable")
            ids = ids[order]
            soa = soa[:, order]
        off = int(store.tile_off[t])
        pd = int(store.ptr_dis[b, t])
        room = pd - int(store.ptr_ord[b, t])
        n_fit = min(ids.size, room)
        if n_fit > 0:
            store.ids[b, off + pd - n_fit:off + pd] = ids[:n_fit]
            store.soa[b, :, off + pd - n_fit:off + pd] = soa[:, :n_fit]
            store.leave[b, off + pd - n_fit:off + pd] = 0
            store.ptr_dis[b, t] = pd - n_fit
        if n_fit < ids.size:
            store.overflow[t].append((ids[n_fit:].copy(),
                                      soa[:, n_fit:].copy()))
        merged += ids.size
    return merged


def run_redistribution(rank, store, geom, decomp, outbox, fabric, variant,
                       handles, epoch, deterministic) -> RedistributionTimings:
    """Single-call bulk-synchronous redistribution: scan, pack, send, wait,
    unpack. The overlapped variants instead call the pieces from their
    schedule points."""
    import time
    timings = RedistributionTimings()
    t0 = time.perf_counter()
    scanned = scan_and_pack(store, geom, decomp, rank, outbox)
    timings.t_pack = time.perf_counter() - t0
    if fabric.virtual_time:
        timings.t_pack = fabric.cost.scan_cost_per_particle * scanned
        fabric.clocks[rank].advance(timings.t_pack)
    t0 = time.perf_counter()
    emit_frames(rank, outbox, fabric, variant, handles, epoch,
                deposit_pending=False)
    timings.t_issue = 0.0 if fabric.virtual_time else time.perf_counter() - t0
    return timings
