"""Dual-region particle containers and the stream-split write-back.

Each tile owns two equal structure-of-arrays buffers whose current/next roles
swap every step. The ordered region grows from slot 0 as per-cell segments
described by `meta`; the disordered region grows downward from the capacity
and holds this step's cell-changers. Retained intra-tile movers are absorbed
back into the ordered region by the next step's tail binning; tile-leaving
movers are flagged and truncated once their frames are out.

A TileStore concatenates the tiles of one rank into flat backing arrays so
the compiled per-tile drivers can run in parallel over disjoint slices;
ParticleTile is a view of one tile used by the unit-level operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _jit
from .core import (
    Decomposition,
    GridGeometry,
    LayoutContractError,
    MigrationEnvelopeError,
    inv_dx,
)

__all__ = [
    "SOA_FIELDS",
    "TileStore",
    "ParticleTile",
    "ClassMasks",
    "init_tile",
    "tail_bin",
    "classify",
    "compact_store",
    "append_disordered",
    "finalize_meta",
    "truncate_and_compact_tail",
    "swap_buffers",
]

SOA_FIELDS = ("x", "y", "z", "ux", "uy", "uz", "w")

MIN_TILE_CAPACITY = 32


def tile_capacity(n_particles, disorder_fraction):
    """Runtime upper-bound sizing heuristic for one tile's buffers."""
    return max(int(math.ceil(n_particles * (1.0 + disorder_fraction))),
               MIN_TILE_CAPACITY)


class TileStore:
    """Backing storage for all tiles of one rank (double buffered)."""

    def __init__(self, capacities, n_cells_tile, tile_cell0=None,
                 geom: GridGeometry = None):
        capacities = [int(c) for c in capacities]
        n_tiles = len(capacities)
        self.tile_cap = np.array(capacities, np.int64)
        self.tile_off = np.zeros(n_tiles, np.int64)
        np.cumsum(self.tile_cap[:-1], out=self.tile_off[1:])
        total = int(self.tile_cap.sum())
        self.total = total
        self.n_tiles = n_tiles
        self.n_cells_tile = n_cells_tile
        self.ids = np.zeros((2, total), np.int64)
        self.soa = np.zeros((2, 7, total))
        self.leave = np.zeros((2, total), np.int8)
        self.meta = np.zeros((2, n_tiles, n_cells_tile, 2), np.int64)
        self.ptr_ord = np.zeros((2, n_tiles), np.int64)
        self.ptr_dis = np.empty((2, n_tiles), np.int64)
        self.ptr_dis[0] = self.tile_cap
        self.ptr_dis[1] = self.tile_cap
        self.bin_start = np.zeros((n_tiles, n_cells_tile + 1), np.int64)
        self.bin_slots = np.zeros(total, np.int64)
        self.cur = 0
        self.pending_frames = np.zeros(n_tiles, bool)
        self.overflow = [[] for _ in range(n_tiles)]
        if tile_cell0 is None:
            tile_cell0 = np.zeros((n_tiles, 3), np.int64)
        self.tile_cell0 = np.asarray(tile_cell0, np.int64)
        self.geom = geom

    @property
    def nxt(self):
        return 1 - self.cur

    def tile(self, t):
        return ParticleTile(self, t)

    def occupancy(self, t, buf=None):
        b = self.cur if buf is None else buf
        return int(self.ptr_ord[b, t] + (self.tile_cap[t] - self.ptr_dis[b, t]))

    def n_particles(self, buf=None):
        b = self.cur if buf is None else buf
        return int(self.ptr_ord[b].sum()
                   + (self.tile_cap - self.ptr_dis[b]).sum())

    def regrow(self, new_caps) -> None:
        """Reallocate both buffers at the new per-tile capacities, keeping
        the current buffer's content and absorbing any overflow lists into
        the tails (appended below the retained entries, preserving order)."""
        b = self.cur
        old_off = self.tile_off
        old_cap = self.tile_cap
        new_cap = np.array([int(c) for c in new_caps], np.int64)
        new_off = np.zeros(self.n_tiles, np.int64)
        np.cumsum(new_cap[:-1], out=new_off[1:])
        total = int(new_cap.sum())
        ids = np.zeros((2, total), np.int64)
        soa = np.zeros((2, 7, total))
        leave = np.zeros((2, total), np.int8)
        ptr_ord = np.zeros((2, self.n_tiles), np.int64)
        ptr_dis = np.empty((2, self.n_tiles), np.int64)
        ptr_dis[0] = new_cap
        ptr_dis[1] = new_cap
        for t in range(self.n_tiles):
            oo = int(old_off[t])
            no = int(new_off[t])
            po = int(self.ptr_ord[b, t])
            pd = int(self.ptr_dis[b, t])
            tail = int(old_cap[t]) - pd
            ids[b, no:no + po] = self.ids[b, oo:oo + po]
            soa[b, :, no:no + po] = self.soa[b, :, oo:oo + po]
            nc = int(new_cap[t])
            if tail:
                ids[b, no + nc - tail:no + nc] = \
                    self.ids[b, oo + pd:oo + old_cap[t]]
                soa[b, :, no + nc - tail:no + nc] = \
                    self.soa[b, :, oo + pd:oo + old_cap[t]]
            spill = nc - tail
            for o_ids, o_soa in self.overflow[t]:
                k = len(o_ids)
                ids[b, no + spill - k:no + spill] = o_ids
                soa[b, :, no + spill - k:no + spill] = o_soa
                spill -= k
            ptr_ord[b, t] = po
            ptr_dis[b, t] = spill
            if spill < po:
                raise LayoutContractError("regrown tile still too small")
            self.overflow[t] = []
        self.ids = ids
        self.soa = soa
        self.leave = leave
        self.ptr_ord = ptr_ord
        self.ptr_dis = ptr_dis
        self.tile_off = new_off
        self.tile_cap = new_cap
        self.total = total
        self.bin_start = np.zeros((self.n_tiles, self.n_cells_tile + 1),
                                  np.int64)
        self.bin_slots = np.zeros(total, np.int64)


@dataclass
class ParticleTile:
    """View of one tile inside a TileStore."""

    store: TileStore
    t: int

    # -- region accessors (current buffer unless stated otherwise) --------

    def _slice(self):
        off = int(self.store.tile_off[self.t])
        return off, off + int(self.store.tile_cap[self.t])

    @property
    def capacity(self):
        return int(self.store.tile_cap[self.t])

    @property
    def home_tile(self):
        return tuple(self.store.tile_cell0[self.t])

    @property
    def ptr_ord(self):
        return int(self.store.ptr_ord[self.store.cur, self.t])

    @property
    def ptr_dis(self):
        return int(self.store.ptr_dis[self.store.cur, self.t])

    @property
    def meta(self):
        return self.store.meta[self.store.cur, self.t]

    @property
    def leaving_flags(self):
        lo, hi = self._slice()
        return self.store.leave[self.store.cur, lo:hi]

    def buf(self, which=None):
        """(ids, soa) views of a whole buffer: 'cur', 'next', 'a' or 'b'."""
        b = {None: self.store.cur, "cur": self.store.cur,
             "next": self.store.nxt, "a": 0, "b": 1}[which]
        lo, hi = self._slice()
        return self.store.ids[b, lo:hi], self.store.soa[b, :, lo:hi]

    @property
    def buf_a(self):
        return self.buf("a")

    @property
    def buf_b(self):
        return self.buf("b")

    def ordered_ids(self):
        ids, _ = self.buf()
        return ids[:self.ptr_ord]

    def tail_ids(self):
        ids, _ = self.buf()
        return ids[self.ptr_dis:]

    def occupancy(self):
        return self.store.occupancy(self.t)


def init_tile(n_cells, ppc, disorder_fraction=0.25,
              geom: GridGeometry = None, tile_cell0=None) -> ParticleTile:
    """Allocate one empty dual-region tile sized by the upper-bound
    heuristic: ceil(n_cells * ppc * (1 + disorder_fraction))."""
    if n_cells <= 0 or ppc < 0 or disorder_fraction < 0:
        raise LayoutContractError("sizes must be non-negative, cells positive")
    cap = int(math.ceil(n_cells * ppc * (1.0 + disorder_fraction)))
    cell0 = None if tile_cell0 is None else np.asarray([tile_cell0], np.int64)
    store = TileStore([max(cap, 0)], n_cells, tile_cell0=cell0, geom=geom)
    return store.tile(0)


def tail_bin(tile: ParticleTile):
    """Per-cell slot lists over the disordered region, in slot order.

    Returns the bin_to_ip lists and refreshes the store's CSR arrays used by
    the compiled drivers. Cost is proportional to the tail length only.
    """
    store = tile.store
    geom = store.geom
    if geom is None:
        raise LayoutContractError("tile has no geometry attached")
    idx = inv_dx(geom)
    err = np.zeros(store.n_tiles, np.int64)
    _jit.tail_bin_all(
        store.soa[store.cur], store.ptr_dis[store.cur],
        store.tile_off, store.tile_cap, store.tile_cell0,
        store.bin_start, store.bin_slots,
        geom.prob_lo[0], geom.prob_lo[1], geom.prob_lo[2],
        idx[0], idx[1], idx[2],
        geom.n_cell[0], geom.n_cell[1], geom.n_cell[2],
        geom.tile_shape[0], geom.tile_shape[1], geom.tile_shape[2], err)
    if err[tile.t]:
        raise LayoutContractError("tail particle outside its home tile")
    off = int(store.tile_off[tile.t])
    bins = []
    for c in range(store.n_cells_tile):
        s, e = store.bin_start[tile.t, c], store.bin_start[tile.t, c + 1]
        bins.append([int(v) for v in store.bin_slots[off + s:off + e]])
    return bins


@dataclass
class ClassMasks:
    """Write-back routing masks for one batch of pushed particles."""

    stay: np.ndarray
    move: np.ndarray
    remote: np.ndarray
    same_tile: np.ndarray   # moved cell but stays in this tile (retained)
    local: np.ndarray       # other tile on this rank

    @property
    def counts(self):
        return {"stay": int(self.stay.sum()),
                "same_tile": int(self.same_tile.sum()),
                "local": int(self.local.sum()),
                "remote": int(self.remote.sum())}


def classify(new_cells, home_cell, decomp: Decomposition, my_rank: int,
             my_tile_origin, geom: GridGeometry) -> ClassMasks:
    """Split a batch by destination: same cell, same tile, same rank, remote.

    Cells more than one cell away (periodic minimal image) violate the CFL
    migration envelope and raise.
    """
    cells = np.asarray(new_cells, np.int64).reshape(-1, 3)
    home = np.asarray(home_cell, np.int64)
    n_cell = np.asarray(geom.n_cell, np.int64)
    delta = (cells - home) % n_cell
    bad = (delta > 1) & (delta < n_cell - 1)
    if bad.any():
        lane = int(np.argwhere(bad.any(axis=1))[0][0])
        raise MigrationEnvelopeError(
            f"lane {lane} moved more than one cell: {tuple(cells[lane])} "
            f"from {tuple(home)}")
    stay = (delta == 0).all(axis=1)
    move = ~stay
    cpr = np.asarray(decomp.cells_per_rank, np.int64)
    owners = cells // cpr
    owner_id = (owners[:, 0] + decomp.ranks[0]
                * (owners[:, 1] + decomp.ranks[1] * owners[:, 2]))
    remote = move & (owner_id != my_rank)
    origin = np.asarray(my_tile_origin, np.int64)
    ts = np.asarray(geom.tile_shape, np.int64)
    rel = cells - origin
    in_tile = ((rel >= 0) & (rel < ts)).all(axis=1)
    same_tile = move & in_tile & ~remote
    local = move & ~in_tile & ~remote
    return ClassMasks(stay=stay, move=move, remote=remote,
                      same_tile=same_tile, local=local)


def compact_store(tile: ParticleTile, ids, soa, mask) -> int:
    """Write masked lanes densely at the next buffer's ordered cursor,
    preserving lane order; returns the advanced cursor."""
    store = tile.store
    b = store.nxt
    t = tile.t
    mask = np.asarray(mask, bool)
    n = int(mask.sum())
    po = int(store.ptr_ord[b, t])
    if po + n > int(store.ptr_dis[b, t]):
        raise LayoutContractError("ordered cursor would collide with the tail")
    off = int(store.tile_off[t])
    sel = np.flatnonzero(mask)
    store.ids[b, off + po:off + po + n] = np.asarray(ids)[sel]
    store.soa[b, :, off + po:off + po + n] = np.asarray(soa)[:, sel]
    store.leave[b, off + po:off + po + n] = 0
    store.ptr_ord[b, t] = po + n
    return po + n


def append_disordered(tile: ParticleTile, ids, soa, mask, leaving) -> int:
    """Write masked lanes densely downward from the next buffer's tail
    cursor, flagging leave-marked slots; returns the lowered cursor."""
    store = tile.store
    b = store.nxt
    t = tile.t
    mask = np.asarray(mask, bool)
    leaving = np.asarray(leaving)
    n = int(mask.sum())
    pd = int(store.ptr_dis[b, t])
    if pd - n < int(store.ptr_ord[b, t]):
        raise LayoutContractError("tail cursor would collide with the ordered region")
    off = int(store.tile_off[t])
    sel = np.flatnonzero(mask)
    store.ids[b, off + pd - n:off + pd] = np.asarray(ids)[sel]
    store.soa[b, :, off + pd - n:off + pd] = np.asarray(soa)[:, sel]
    store.leave[b, off + pd - n:off + pd] = leaving[sel]
    store.ptr_dis[b, t] = pd - n
    return pd - n


def finalize_meta(tile: ParticleTile, cell: int, start: int) -> None:
    """meta[cell] = (start, ptr_ord - start) on the next buffer."""
    store = tile.store
    b = store.nxt
    po = int(store.ptr_ord[b, tile.t])
    store.meta[b, tile.t, cell, 0] = start
    store.meta[b, tile.t, cell, 1] = po - start


def truncate_and_compact_tail(tile: ParticleTile, buf=None) -> None:
    """Drop leave-flagged tail slots, compacting retained entries toward the
    capacity end in stable slot order; clears the flags."""
    store = tile.store
    b = store.cur if buf is None else buf
    t = tile.t
    off = int(store.tile_off[t])
    cap = int(store.tile_cap[t])
    pd = int(store.ptr_dis[b, t])
    if pd == cap:
        return
    lo, hi = off + pd, off + cap
    keep = store.leave[b, lo:hi] == 0
    nk = int(keep.sum())
    if nk != cap - pd:
        sel = np.flatnonzero(keep)
        store.ids[b, hi - nk:hi] = store.ids[b, lo:hi][sel]
        store.soa[b, :, hi - nk:hi] = store.soa[b, :, lo:hi][:, sel]
    store.leave[b, lo:hi] = 0
    store.ptr_dis[b, t] = cap - nk


def swap_buffers(tile_or_store) -> None:
    """Exchange the current/next buffer roles; no data is copied."""
    store = tile_or_store.store if isinstance(tile_or_store, ParticleTile) else tile_or_store
    if store.pending_frames.any():
        raise LayoutContractError("swap with frames pending merge")
    store.cur = 1 - store.cur
