"""Time-step orchestration across the ablation matrix.

One step runs, per tile: tail binning (or index sort / physical reorder,
per the supply mode), batch assembly, interpolation, push, classification,
stream-split write-back with fused pre-packing; then frame emission, the
deposition phase with layout reuse, convergence at the variant's sync point,
the field solve, merge of inbound migrants, tail truncation, and the buffer
swap. Ranks are cooperatively scheduled: every rank finishes a sub-phase
before any rank starts the next, so a wait can never precede its sends and
determinism is structural rather than luck.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import _jit
from .core import (
    C_LIGHT,
    ConfigurationError,
    Decomposition,
    FieldSet,
    GridGeometry,
    LayoutContractError,
    MigrationEnvelopeError,
    NumericError,
    OwnershipError,
    SimulationConfig,
    allocate_fields,
    build_decomposition,
    build_geometry,
    inv_dx,
)
from .fabric import CostModel, RankFabric
from .layout import TileStore, swap_buffers, tile_capacity, truncate_and_compact_tail
from .metrics import (
    FLOPS_DEPOSIT_PER_PARTICLE,
    FLOPS_INTERP_PER_PARTICLE,
    ConservationSnapshot,
    StepMetrics,
    init_migration_slab,
    init_uniform_plasma,
)
from .redistribute import (
    HEADER_BYTES,
    RECORD_BYTES,
    CommVariant,
    RankOutbox,
    collect_frames,
    converge,
    emit_frames,
    scan_and_pack,
    unpack_merge,
)
from .solver import FieldExchange, advance_B_half, advance_E_full, cfl_dt, field_energy, halo_exchange_EB, reduce_J_guards

__all__ = [
    "VariantMatrix",
    "RankState",
    "World",
    "build_world",
    "step",
    "run",
    "RunReport",
    "index_sort_supply",
    "explicit_reorder",
    "valid_variants",
    "gather_particles",
    "state_checksum",
    "layout_violations",
    "tail_lengths",
    "conservation_snapshot",
]

INTERP_MODES = {
    "G0": "UNSORTED_SCALAR",
    "G2": "INDEX_SORTED_SCALAR",
    "G3": "EXPLICIT_REORDER_SCALAR",
    "G4": "SOW_SCALAR",
    "G5": "INDEX_SORTED_BATCHED",
    "G6": "EXPLICIT_REORDER_BATCHED",
    "G7": "SOW_BATCHED",
}
DEPOSIT_MODES = {
    "D0": "SCALAR_ATOMIC",
    "D1": "BATCHED_INDEX",
    "D2": "BATCHED_SOW_TAILBIN",
    "D3": "BATCHED_SOW_TAILSCALAR",
}
_DEPOSIT_JIT_MODE = {"D0": 0, "D3": 1, "D2": 2, "D1": 3}
_NAME_TO_CODE = {name: code for code, name in
                 list(INTERP_MODES.items()) + list(DEPOSIT_MODES.items())}


@dataclass(frozen=True)
class VariantMatrix:
    """Ablation selection: interpolation supply, deposit mode, and the
    communication schedule."""

    interp: str = "G7"
    deposit: str = "D3"
    comm: CommVariant = CommVariant.from_code("C2")

    @classmethod
    def from_codes(cls, interp="G7", deposit="D3", comm="C2") -> "VariantMatrix":
        interp = _NAME_TO_CODE.get(interp, interp).upper()
        deposit = _NAME_TO_CODE.get(deposit, deposit).upper()
        if interp not in INTERP_MODES:
            raise ConfigurationError(f"unknown interpolation variant {interp!r}")
        if deposit not in DEPOSIT_MODES:
            raise ConfigurationError(f"unknown deposit variant {deposit!r}")
        v = cls(interp=interp, deposit=deposit, comm=CommVariant.from_code(comm))
        v.validate()
        return v

    def validate(self):
        if self.deposit == "D1" and self.interp not in ("G2", "G5"):
            raise ConfigurationError(
                "D1 reuses the logical index and needs an index-sorted supply "
                "(G2 or G5)")
        if self.deposit in ("D2", "D3") and self.interp not in ("G4", "G7"):
            raise ConfigurationError(
                f"{self.deposit} reuses the sort-on-write layout and needs a "
                "SoW supply (G4 or G7)")

    @property
    def sow(self):
        return self.interp in ("G4", "G7")

    @property
    def index_sorted(self):
        return self.interp in ("G2", "G5")

    @property
    def reordered(self):
        return self.interp in ("G3", "G6")

    @property
    def batched_interp(self):
        return self.interp in ("G5", "G6", "G7")

    @property
    def batched_deposit(self):
        return self.deposit != "D0"

    @property
    def codes(self):
        return (self.interp, self.deposit, self.comm.code)


def valid_variants():
    """Every implemented (interp, deposit) pairing of the ablation grid."""
    out = []
    for gi in INTERP_MODES:
        for di in DEPOSIT_MODES:
            try:
                out.append(VariantMatrix.from_codes(gi, di, "C0"))
            except ConfigurationError:
                continue
    return out


@dataclass
class RankState:
    rank: int
    store: TileStore
    fields: FieldSet
    outbox: RankOutbox
    send_handles: Dict[int, object]
    recv_handles: Dict[int, object]
    tile_J: np.ndarray
    geo: tuple                    # scalar pack for the phase drivers
    # per-tile workspaces
    G: np.ndarray
    M: np.ndarray
    counts: np.ndarray
    err_code: np.ndarray
    err_id: np.ndarray
    # per-slot scratch (resized with the store)
    scratch: np.ndarray = None
    stg_soa: np.ndarray = None
    stg_ids: np.ndarray = None
    stg_dest: np.ndarray = None
    stg_n: np.ndarray = None
    order_idx: np.ndarray = None
    cell_key: np.ndarray = None
    n_cur: np.ndarray = None
    frames_in: Optional[list] = None

    def ensure_scratch(self):
        total = self.store.total
        if self.scratch is None or self.scratch.size != total:
            self.scratch = np.zeros(total, np.int64)
            self.stg_soa = np.zeros((7, total))
            self.stg_ids = np.zeros(total, np.int64)
            self.stg_dest = np.zeros(total, np.int64)
            self.order_idx = np.zeros(total, np.int64)
            self.cell_key = np.zeros(total, np.int64)
        if self.stg_n is None:
            self.stg_n = np.zeros(self.store.n_tiles, np.int64)
            self.n_cur = np.zeros(self.store.n_tiles, np.int64)


@dataclass
class World:
    config: SimulationConfig
    geom: GridGeometry
    decomp: Decomposition
    variant: VariantMatrix
    fabric: RankFabric
    exchange: FieldExchange
    dt: float
    ranks: List[RankState]
    epoch: int = 0
    halo_latency: float = 0.0
    n_global: int = 0

    @property
    def virtual(self):
        return self.config.virtual_time

    def all_fields(self):
        return [rs.fields for rs in self.ranks]


def _cell_keys(soa, lo, idx, n_cell):
    c0 = np.floor((soa[0] - lo[0]) * idx[0]).astype(np.int64) % n_cell[0]
    c1 = np.floor((soa[1] - lo[1]) * idx[1]).astype(np.int64) % n_cell[1]
    c2 = np.floor((soa[2] - lo[2]) * idx[2]).astype(np.int64) % n_cell[2]
    return c0 + n_cell[0] * (c1 + n_cell[1] * c2), (c0, c1, c2)


def _geo_pack(geom, decomp, rank, order):
    idx = inv_dx(geom)
    org = decomp.rank_origin(rank)
    nl = decomp.cells_per_rank
    lo = geom.prob_lo
    hi = geom.prob_hi
    ln = geom.extent
    ts = geom.tile_shape
    return (lo[0], lo[1], lo[2], hi[0], hi[1], hi[2], ln[0], ln[1], ln[2],
            idx[0], idx[1], idx[2],
            geom.n_cell[0], geom.n_cell[1], geom.n_cell[2],
            org[0], org[1], org[2], nl[0], nl[1], nl[2],
            geom.guard, order,
            ts[0], ts[1], ts[2],
            decomp.cells_per_rank[0], decomp.cells_per_rank[1],
            decomp.cells_per_rank[2],
            decomp.ranks[0], decomp.ranks[1], rank)


def build_world(config: SimulationConfig, variant: VariantMatrix = None) -> World:
    """Construct geometry, decomposition, fabric, tiles and initial particles."""
    geom = build_geometry(config)
    decomp = build_decomposition(config, geom)
    variant = variant or VariantMatrix.from_codes(config.interp, config.deposit,
                                                  config.comm)
    if (variant.batched_interp or variant.batched_deposit) and config.order % 2 == 0:
        raise ConfigurationError(
            "batched kernels need an odd shape order (whole cells must share "
            "a stencil anchor)")
    fabric = RankFabric(decomp.n_ranks, cost=CostModel.from_config(config),
                        virtual_time=config.virtual_time)
    exchange = FieldExchange(geom, decomp)
    dt = cfl_dt(geom, config.dt_safety)

    if config.workload == "uniform":
        ids, soa = init_uniform_plasma(config, geom)
    elif config.workload == "slab":
        ids, soa = init_migration_slab(config, geom)
    else:
        raise ConfigurationError(f"unknown workload {config.workload!r}")
    n_global = ids.size

    idx = inv_dx(geom)
    key, (c0, c1, c2) = _cell_keys(soa, geom.prob_lo, idx, geom.n_cell)
    cpr = decomp.cells_per_rank
    owner = (c0 // cpr[0] + decomp.ranks[0]
             * (c1 // cpr[1] + decomp.ranks[1] * (c2 // cpr[2])))
    ts = geom.tile_shape
    tpr = decomp.tiles_per_rank
    nc_tile = ts[0] * ts[1] * ts[2]

    region_cap = _region_records(config, decomp, n_global)
    ranks = []
    for r in range(decomp.n_ranks):
        org = decomp.rank_origin(r)
        sel = np.flatnonzero(owner == r)
        l0 = c0[sel] - org[0]
        l1 = c1[sel] - org[1]
        l2 = c2[sel] - org[2]
        tile = ((l2 // ts[2]) * tpr[1] + l1 // ts[1]) * tpr[0] + l0 // ts[0]
        cflat = ((l2 % ts[2]) * ts[1] + (l1 % ts[1])) * ts[0] + (l0 % ts[0])
        order = np.lexsort((ids[sel], cflat, tile))
        sel = sel[order]
        tile = tile[order]
        cflat = cflat[order]

        n_tiles = decomp.tiles_in_rank
        tile_counts = np.bincount(tile, minlength=n_tiles)
        caps = [tile_capacity(int(n), config.disorder_fraction)
                for n in tile_counts]
        cell0 = np.empty((n_tiles, 3), np.int64)
        for t in range(n_tiles):
            tc = (t % tpr[0], (t // tpr[0]) % tpr[1], t // (tpr[0] * tpr[1]))
            cell0[t] = [org[a] + tc[a] * ts[a] for a in range(3)]
        store = TileStore(caps, nc_tile, tile_cell0=cell0, geom=geom)
        b = store.cur
        tile_starts = np.zeros(n_tiles + 1, np.int64)
        np.cumsum(tile_counts, out=tile_starts[1:])
        for t in range(n_tiles):
            seg = slice(tile_starts[t], tile_starts[t + 1])
            n_t = tile_counts[t]
            off = int(store.tile_off[t])
            store.ids[b, off:off + n_t] = ids[sel[seg]]
            store.soa[b, :, off:off + n_t] = soa[:, sel[seg]]
            store.ptr_ord[b, t] = n_t
            counts_c = np.bincount(cflat[seg], minlength=nc_tile)
            starts_c = np.zeros(nc_tile, np.int64)
            np.cumsum(counts_c[:-1], out=starts_c[1:])
            store.meta[b, t, :, 0] = starts_c
            store.meta[b, t, :, 1] = counts_c

        fields = allocate_fields(geom, decomp.cells_per_rank)
        outbox = RankOutbox(decomp, r, geom, n_tiles)
        tz, ty, tx = (ts[2] + 2 * geom.guard, ts[1] + 2 * geom.guard,
                      ts[0] + 2 * geom.guard)
        K = (config.order + 1) ** 3
        rs = RankState(
            rank=r, store=store, fields=fields, outbox=outbox,
            send_handles={}, recv_handles={},
            tile_J=np.zeros((n_tiles, 3, tz, ty, tx)),
            geo=_geo_pack(geom, decomp, r, config.order),
            G=np.zeros((n_tiles, K, 8)),
            M=np.zeros((n_tiles, K, 8)),
            counts=np.zeros((n_tiles, 4), np.int64),
            err_code=np.zeros(n_tiles, np.int64),
            err_id=np.zeros(n_tiles, np.int64),
        )
        rs.ensure_scratch()
        ranks.append(rs)

    region_bytes = 2 * (HEADER_BYTES + region_cap * RECORD_BYTES)
    for r in range(decomp.n_ranks):
        for nb in decomp.neighbors_of(r):
            ranks[r].recv_handles[nb] = fabric.register_region(r, nb, region_bytes)
    for r in range(decomp.n_ranks):
        for nb in decomp.neighbors_of(r):
            ranks[r].send_handles[nb] = ranks[nb].recv_handles[r]

    world = World(config=config, geom=geom, decomp=decomp, variant=variant,
                  fabric=fabric, exchange=exchange, dt=dt, ranks=ranks,
                  n_global=n_global)
    world.halo_latency = fabric.cost.latency(exchange.halo_bytes() * 6)
    halo_exchange_EB(world.all_fields(), exchange)
    return world


def _region_records(config, decomp, n_global):
    """Per-neighbor frame capacity from the disorder sizing heuristic."""
    n_ranks = decomp.n_ranks
    if n_ranks == 1:
        return 256
    per_rank = n_global // n_ranks
    n_nb = max(len(decomp.neighbors_of(0)), 1)
    return max(256, int(np.ceil(per_rank * config.disorder_fraction / n_nb)))


# --- supply preparation -------------------------------------------------------

def index_sort_supply(store: TileStore, geom: GridGeometry, order_idx,
                      cell_key) -> None:
    """Per-tile stable permutation by cell, consumed by the gathers; records
    are not moved (G2/G5)."""
    b = store.cur
    idx = inv_dx(geom)
    for t in range(store.n_tiles):
        off = int(store.tile_off[t])
        n = int(store.ptr_ord[b, t])
        sl = slice(off, off + n)
        keys, _ = _cell_keys(store.soa[b, :, sl], geom.prob_lo, idx, geom.n_cell)
        cell_key[sl] = keys
        order_idx[sl] = np.argsort(keys, kind="stable")


def explicit_reorder(store: TileStore, geom: GridGeometry, order_idx,
                     cell_key) -> None:
    """Physically copy each tile into cell order before Phase 1 (G3/G6),
    rebuilding the per-cell segments; finishes with a buffer swap."""
    b = store.cur
    nb = store.nxt
    idx = inv_dx(geom)
    nc_tile = store.n_cells_tile
    ts = geom.tile_shape
    for t in range(store.n_tiles):
        off = int(store.tile_off[t])
        n = int(store.ptr_ord[b, t])
        sl = slice(off, off + n)
        keys, _ = _cell_keys(store.soa[b, :, sl], geom.prob_lo, idx, geom.n_cell)
        perm = np.argsort(keys, kind="stable")
        store.ids[nb, sl] = store.ids[b, sl][perm]
        store.soa[nb, :, sl] = store.soa[b, :, sl][:, perm]
        store.leave[nb, sl] = 0
        skeys = keys[perm]
        cell_key[sl] = skeys
        order_idx[sl] = np.arange(n)
        c0 = skeys % geom.n_cell[0] - store.tile_cell0[t, 0]
        c1 = (skeys // geom.n_cell[0]) % geom.n_cell[1] - store.tile_cell0[t, 1]
        c2 = skeys // (geom.n_cell[0] * geom.n_cell[1]) - store.tile_cell0[t, 2]
        cflat = (c2 * ts[1] + c1) * ts[0] + c0
        counts = np.bincount(cflat, minlength=nc_tile)
        starts = np.zeros(nc_tile, np.int64)
        np.cumsum(counts[:-1], out=starts[1:])
        store.meta[nb, t, :, 0] = starts
        store.meta[nb, t, :, 1] = counts
        store.ptr_ord[nb, t] = n
        store.ptr_dis[nb, t] = store.tile_cap[t]
    swap_buffers(store)


def _flat_keys(store, geom, order_idx, cell_key):
    """Identity traversal with fresh cell keys (G0 and the post-reorder
    supplies)."""
    b = store.cur
    idx = inv_dx(geom)
    for t in range(store.n_tiles):
        off = int(store.tile_off[t])
        n = int(store.ptr_ord[b, t])
        sl = slice(off, off + n)
        keys, _ = _cell_keys(store.soa[b, :, sl], geom.prob_lo, idx, geom.n_cell)
        cell_key[sl] = keys
        order_idx[sl] = np.arange(n)


# --- the step ------------------------------------------------------------------

_ERRORS = {
    _jit.ERR_ENVELOPE: (MigrationEnvelopeError, "particle moved more than one cell"),
    _jit.ERR_NONFINITE: (NumericError, "non-finite push result"),
    _jit.ERR_CURSOR: (LayoutContractError, "region cursors collided"),
    _jit.ERR_OWNERSHIP: (OwnershipError, "stencil outside guarded reach"),
    _jit.ERR_CONTRACT: (LayoutContractError, "layout contract violated"),
}


def _raise_tile_error(rs, phase):
    t = int(np.flatnonzero(rs.err_code)[0])
    code = int(rs.err_code[t])
    exc, msg = _ERRORS[code]
    pid = int(rs.err_id[t])
    raise exc(f"rank {rs.rank} tile {t} {phase}: {msg}"
              + (f" (particle id {pid})" if pid >= 0 else ""))


def step(world: World) -> List[StepMetrics]:
    """Advance every rank by one step; returns per-rank particle-phase
    metrics (times are virtual seconds in virtual-time mode)."""
    cfg = world.config
    var = world.variant
    fab = world.fabric
    cost = fab.cost
    virtual = world.virtual
    epoch = world.epoch
    fuse = var.comm.overlapped
    conservative = var.comm.sync_point == "POST_DEPOSIT"
    fab.start_epoch(epoch)
    out = [StepMetrics(step=epoch) for _ in world.ranks]
    efac = cfg.q * world.dt / (2.0 * cfg.m * C_LIGHT)
    bfac = cfg.q * world.dt / (2.0 * cfg.m)
    cdt = C_LIGHT * world.dt

    # Phase 1: supply preparation, interpolate + push, stream-split write-back
    for rs in world.ranks:
        m = out[rs.rank]
        store = rs.store
        b, nb = store.cur, store.nxt
        rs.ensure_scratch()
        m.n_particles = store.n_particles()
        m.flops_interp = m.n_particles * FLOPS_INTERP_PER_PARTICLE
        m.flops_deposit = m.n_particles * FLOPS_DEPOSIT_PER_PARTICLE
        rs.err_code[:] = 0
        rs.err_id[:] = -1

        t0 = time.perf_counter()
        if var.sow:
            _jit.tail_bin_all(
                store.soa[b], store.ptr_dis[b], store.tile_off, store.tile_cap,
                store.tile_cell0, store.bin_start, store.bin_slots,
                *rs.geo[0:3], *rs.geo[9:12], *rs.geo[12:15],
                *rs.geo[23:26], rs.err_code)
            if rs.err_code.any():
                _raise_tile_error(rs, "tail binning")
        elif var.index_sorted:
            index_sort_supply(store, world.geom, rs.order_idx, rs.cell_key)
        elif var.reordered:
            explicit_reorder(store, world.geom, rs.order_idx, rs.cell_key)
            b, nb = store.cur, store.nxt
        else:
            _flat_keys(store, world.geom, rs.order_idx, rs.cell_key)
        t_sort = time.perf_counter() - t0

        t0 = time.perf_counter()
        if var.sow:
            _jit.phase1_sow(
                store.ids[b], store.soa[b], store.meta[b],
                store.bin_start, store.bin_slots,
                store.ids[nb], store.soa[nb], store.meta[nb],
                store.ptr_ord[nb], store.ptr_dis[nb], store.leave[nb],
                store.tile_off, store.tile_cap, store.tile_cell0,
                rs.stg_soa, rs.stg_ids, rs.stg_dest, rs.stg_n, fuse,
                rs.fields.ex, rs.fields.ey, rs.fields.ez,
                rs.fields.bx, rs.fields.by, rs.fields.bz,
                *rs.geo, efac, bfac, cdt,
                rs.G, rs.counts, rs.err_code, rs.err_id,
                var.batched_interp)
        else:
            rs.n_cur[:] = store.ptr_ord[b]
            _jit.phase1_flat(
                store.ids[b], store.soa[b], rs.n_cur, rs.order_idx, rs.cell_key,
                store.ids[nb], store.soa[nb], store.leave[nb],
                store.tile_off,
                rs.stg_soa, rs.stg_ids, rs.stg_dest, rs.stg_n, fuse,
                rs.fields.ex, rs.fields.ey, rs.fields.ez,
                rs.fields.bx, rs.fields.by, rs.fields.bz,
                *rs.geo, efac, bfac, cdt,
                rs.G, rs.counts, rs.err_code, rs.err_id,
                var.batched_interp)
            store.ptr_ord[nb] = rs.n_cur
            store.ptr_dis[nb] = store.tile_cap
        if rs.err_code.any():
            _raise_tile_error(rs, "phase 1")
        t_kernel = time.perf_counter() - t0

        # fused pre-packing: staged movers routed as part of the write-back
        t0 = time.perf_counter()
        if fuse:
            for t in range(store.n_tiles):
                n_stg = int(rs.stg_n[t])
                if n_stg:
                    off = int(store.tile_off[t])
                    rs.outbox.route_staged(
                        rs.stg_ids[off:off + n_stg],
                        rs.stg_soa[:, off:off + n_stg],
                        rs.stg_dest[off:off + n_stg])
        t_route = time.perf_counter() - t0
        store.pending_frames[:] = True

        m.n_migrants_local = int(rs.counts[:, 2].sum())
        m.n_migrants_remote = int(rs.counts[:, 3].sum())
        if virtual:
            fab.clocks[rs.rank].advance(cost.interp_cost)
            m.t_interpolation = cost.interp_cost
            m.t_kernel += cost.interp_cost
        else:
            m.t_interpolation = t_sort + t_kernel + t_route
            m.t_sort += t_sort
            m.t_kernel += t_kernel
            m.t_reduce += t_route

    # frame emission: overlapped variants issue before Deposition begins
    if fuse:
        for rs in world.ranks:
            m = out[rs.rank]
            t0 = time.perf_counter()
            emit_frames(rs.rank, rs.outbox, fab, var.comm, rs.send_handles,
                        epoch, deposit_pending=True)
            m.t_issue += 0.0 if virtual else time.perf_counter() - t0

    # Phase 2: deposition with layout reuse
    for rs in world.ranks:
        m = out[rs.rank]
        store = rs.store
        nb = store.nxt
        t0 = time.perf_counter()
        rs.tile_J[:] = 0.0
        rs.fields.jx[:] = 0.0
        rs.fields.jy[:] = 0.0
        rs.fields.jz[:] = 0.0
        rs.err_code[:] = 0
        _jit.deposit_phase(
            store.ids[nb], store.soa[nb], store.meta[nb],
            store.ptr_ord[nb], store.ptr_dis[nb],
            store.tile_off, store.tile_cap, store.tile_cell0,
            rs.tile_J,
            *rs.geo[0:3], *rs.geo[9:12], *rs.geo[12:15], *rs.geo[23:26],
            world.geom.guard, cfg.order,
            cfg.q * C_LIGHT / world.geom.cell_volume,
            rs.M, rs.scratch, rs.err_code, rs.err_id,
            _DEPOSIT_JIT_MODE[var.deposit])
        if rs.err_code.any():
            _raise_tile_error(rs, "deposition")
        t_kernel = time.perf_counter() - t0

        t0 = time.perf_counter()
        _reduce_tile_J(rs, world)
        t_reduce = time.perf_counter() - t0
        if virtual:
            fab.clocks[rs.rank].advance(cost.deposit_cost)
            m.t_deposit = cost.deposit_cost
            m.t_kernel += cost.deposit_cost
        else:
            m.t_deposit = t_kernel + t_reduce
            m.t_kernel += t_kernel
            m.t_reduce += t_reduce

    # conservative sync: wait right after Deposition
    if fuse and conservative:
        _converge_all(world, out)

    # field solve (not part of the particle phase)
    reduce_J_guards(world.all_fields(), world.exchange)
    contended = []
    for rs in world.ranks:
        if virtual and fuse and var.comm.sync_point == "POST_FIELDSOLVE":
            contended.append(fab.transfers_pending(
                rs.rank, fab.clocks[rs.rank].now))
        else:
            contended.append(False)
    fields = world.all_fields()
    for rs in world.ranks:
        advance_B_half(rs.fields, world.geom, world.dt,
                       world.decomp.cells_per_rank)
    halo_exchange_EB(fields, world.exchange, components=("bx", "by", "bz"))
    for rs in world.ranks:
        advance_E_full(rs.fields, world.geom, world.dt,
                       world.decomp.cells_per_rank)
    halo_exchange_EB(fields, world.exchange, components=("ex", "ey", "ez"))
    for rs in world.ranks:
        advance_B_half(rs.fields, world.geom, world.dt,
                       world.decomp.cells_per_rank)
    halo_exchange_EB(fields, world.exchange, components=("bx", "by", "bz"))
    if virtual:
        for rs, cont in zip(world.ranks, contended):
            halo = 3.0 * world.halo_latency
            if cont:
                halo *= cost.contention_multiplier
            fab.clocks[rs.rank].advance(cost.fieldsolve_cost + halo)

    # aggressive sync, or the whole blocking redistribution for BSP
    if fuse and not conservative:
        _converge_all(world, out)
    if not fuse:
        for rs in world.ranks:
            m = out[rs.rank]
            t0 = time.perf_counter()
            scanned = scan_and_pack(rs.store, world.geom, world.decomp,
                                    rs.rank, rs.outbox, buf=rs.store.nxt)
            if virtual:
                m.t_pack = cost.scan_cost_per_particle * scanned
                fab.clocks[rs.rank].advance(m.t_pack)
            else:
                m.t_pack = time.perf_counter() - t0
            t0 = time.perf_counter()
            emit_frames(rs.rank, rs.outbox, fab, var.comm, rs.send_handles,
                        epoch, deposit_pending=False)
            m.t_issue += 0.0 if virtual else time.perf_counter() - t0
        _converge_all(world, out)

    # merge inbound, truncate leavers, reuse the layout by swapping
    for rs in world.ranks:
        m = out[rs.rank]
        store = rs.store
        t0 = time.perf_counter()
        unpack_merge(store, world.geom, world.decomp, rs.rank,
                     rs.frames_in or [], rs.outbox.inbox,
                     cfg.deterministic)
        if var.sow:
            for t in range(store.n_tiles):
                truncate_and_compact_tail(store.tile(t), buf=store.nxt)
        else:
            _finalize_flat(store)
        store.pending_frames[:] = False
        swap_buffers(store)
        if any(store.overflow):
            _regrow(rs, world)
        rs.outbox.clear()
        rs.frames_in = None
        t_post = time.perf_counter() - t0
        m.t_post_process = 0.0 if virtual else t_post
        m.t_redistribute = m.t_pack + m.t_issue + m.t_wait + m.t_post_process
        m.check_buckets()

    world.epoch += 1
    return out


def _converge_all(world: World, out: List[StepMetrics]) -> None:
    """Every rank waits for its neighbors' frames and collects them."""
    var = world.variant
    for rs in world.ranks:
        m = out[rs.rank]
        neighbors = world.decomp.neighbors_of(rs.rank)
        t0 = time.perf_counter()
        wait, received = converge(rs.rank, world.fabric, var.comm, neighbors)
        m.t_wait += wait if world.virtual else time.perf_counter() - t0
        rs.frames_in = collect_frames(rs.rank, world.fabric, var.comm,
                                      neighbors, rs.recv_handles,
                                      world.epoch, received=received)


def _reduce_tile_J(rs: RankState, world: World) -> None:
    """Add tile-local J blocks into the rank arrays at their offsets."""
    g = world.geom.guard
    ts = world.geom.tile_shape
    org = world.decomp.rank_origin(rs.rank)
    comps = (rs.fields.jx, rs.fields.jy, rs.fields.jz)
    for t in range(rs.store.n_tiles):
        t0 = rs.store.tile_cell0[t]
        zo = int(t0[2] - org[2])
        yo = int(t0[1] - org[1])
        xo = int(t0[0] - org[0])
        for ccc in range(3):
            comps[ccc][zo:zo + ts[2] + 2 * g,
                       yo:yo + ts[1] + 2 * g,
                       xo:xo + ts[0] + 2 * g] += rs.tile_J[t, ccc]


def _finalize_flat(store: TileStore) -> None:
    """Flat-supply epilogue: drop leave-flagged slots from the main region,
    then absorb merged arrivals so the next step sees one dense block."""
    b = store.nxt
    for t in range(store.n_tiles):
        off = int(store.tile_off[t])
        cap = int(store.tile_cap[t])
        po = int(store.ptr_ord[b, t])
        pd = int(store.ptr_dis[b, t])
        keep = np.flatnonzero(store.leave[b, off:off + po] == 0)
        nk = keep.size
        if nk != po:
            store.ids[b, off:off + nk] = store.ids[b, off:off + po][keep]
            store.soa[b, :, off:off + nk] = store.soa[b, :, off:off + po][:, keep]
        n_arr = cap - pd
        if n_arr:
            store.ids[b, off + nk:off + nk + n_arr] = \
                store.ids[b, off + pd:off + cap]
            store.soa[b, :, off + nk:off + nk + n_arr] = \
                store.soa[b, :, off + pd:off + cap]
        store.leave[b, off:off + cap] = 0
        store.ptr_ord[b, t] = nk + n_arr
        store.ptr_dis[b, t] = cap


def _regrow(rs: RankState, world: World) -> None:
    """Grow tiles whose merge spilled, re-applying the sizing heuristic."""
    store = rs.store
    frac = world.config.disorder_fraction
    new_caps = []
    for t in range(store.n_tiles):
        extra = sum(len(ids) for ids, _ in store.overflow[t])
        n_t = store.occupancy(t) + extra
        cap = int(store.tile_cap[t])
        new_caps.append(max(cap, tile_capacity(n_t, frac)))
    store.regrow(new_caps)
    if not world.variant.sow:
        # the slot-preserving supplies walk only the dense block, so spilled
        # records cannot stay in the tail the regrow rebuilt
        b = store.cur
        for t in range(store.n_tiles):
            off = int(store.tile_off[t])
            cap = int(store.tile_cap[t])
            po = int(store.ptr_ord[b, t])
            pd = int(store.ptr_dis[b, t])
            n_arr = cap - pd
            if n_arr:
                store.ids[b, off + po:off + po + n_arr] = \
                    store.ids[b, off + pd:off + cap].copy()
                store.soa[b, :, off + po:off + po + n_arr] = \
                    store.soa[b, :, off + pd:off + cap].copy()
                store.ptr_ord[b, t] = po + n_arr
                store.ptr_dis[b, t] = cap
    rs.ensure_scratch()


# --- run loop --------------------------------------------------------------------

@dataclass
class RunReport:
    world: World
    metrics: List[StepMetrics]              # merged over ranks, per step
    per_rank_metrics: List[List[StepMetrics]]
    snapshots: List[ConservationSnapshot] = field(default_factory=list)
    checksum: str = ""


def run(config: SimulationConfig, variant: VariantMatrix = None,
        record_conservation: bool = True) -> RunReport:
    """Initialize, run warm-up steps (excluded from metrics), then the
    measured steps; returns metrics, diagnostics and the final state."""
    world = build_world(config, variant)
    for _ in range(config.warmup):
        step(world)
    merged = []
    per_rank = []
    snapshots = []
    if record_conservation:
        snapshots.append(conservation_snapshot(world))
    for _ in range(config.steps):
        ms = step(world)
        per_rank.append(ms)
        merged.append(StepMetrics.merged(ms))
        if record_conservation:
            snapshots.append(conservation_snapshot(world))
    return RunReport(world=world, metrics=merged, per_rank_metrics=per_rank,
                     snapshots=snapshots, checksum=state_checksum(world))


# --- state access and audits -------------------------------------------------------

def gather_particles(world: World):
    """All particles in the world, sorted by id: (ids, soa)."""
    parts_i = []
    parts_s = []
    for rs in world.ranks:
        store = rs.store
        b = store.cur
        for t in range(store.n_tiles):
            off = int(store.tile_off[t])
            cap = int(store.tile_cap[t])
            po = int(store.ptr_ord[b, t])
            pd = int(store.ptr_dis[b, t])
            parts_i.append(store.ids[b, off:off + po])
            parts_s.append(store.soa[b, :, off:off + po])
            parts_i.append(store.ids[b, off + pd:off + cap])
            parts_s.append(store.soa[b, :, off + pd:off + cap])
            for ids_o, soa_o in store.overflow[t]:
                parts_i.append(ids_o)
                parts_s.append(soa_o)
    ids = np.concatenate(parts_i) if parts_i else np.empty(0, np.int64)
    soa = (np.concatenate(parts_s, axis=1) if parts_s
           else np.empty((7, 0)))
    order = np.argsort(ids, kind="stable")
    return ids[order], soa[:, order]


def gather_fields(world: World):
    """Assemble the global interior of every component from the rank pieces."""
    g = world.geom.guard
    nx, ny, nz = world.geom.n_cell
    nl = world.decomp.cells_per_rank
    out = {}
    for nm in ("ex", "ey", "ez", "bx", "by", "bz", "jx", "jy", "jz"):
        arr = np.zeros((nz, ny, nx))
        for rs in world.ranks:
            org = world.decomp.rank_origin(rs.rank)
            src = getattr(rs.fields, nm)[g:-g, g:-g, g:-g]
            arr[org[2]:org[2] + nl[2], org[1]:org[1] + nl[1],
                org[0]:org[0] + nl[0]] = src
        out[nm] = arr
    return out


def state_checksum(world: World) -> str:
    """Digest of the id-sorted particle state and the field interiors."""
    ids, soa = gather_particles(world)
    h = hashlib.sha256()
    h.update(ids.tobytes())
    h.update(np.ascontiguousarray(soa).tobytes())
    g = world.geom.guard
    for rs in world.ranks:
        for arr in rs.fields.all_components():
            h.update(np.ascontiguousarray(arr[g:-g, g:-g, g:-g]).tobytes())
    return h.hexdigest()


def layout_violations(world: World) -> int:
    """Sort-on-write invariant audit over every tile of every rank."""
    total = 0
    for rs in world.ranks:
        store = rs.store
        b = store.cur
        violations = np.zeros(store.n_tiles, np.int64)
        _jit.check_layout(
            store.ids[b], store.soa[b], store.meta[b],
            store.ptr_ord[b], store.ptr_dis[b], store.leave[b],
            store.tile_off, store.tile_cap, store.tile_cell0,
            *rs.geo[0:3], *rs.geo[9:12], *rs.geo[12:15], *rs.geo[23:26],
            violations)
        total += int(violations.sum())
    return total


def ownership_violations(world: World) -> int:
    """Particles stored on a rank that does not own their cell."""
    bad = 0
    idx = inv_dx(world.geom)
    cpr = world.decomp.cells_per_rank
    for rs in world.ranks:
        store = rs.store
        b = store.cur
        for t in range(store.n_tiles):
            off = int(store.tile_off[t])
            cap = int(store.tile_cap[t])
            po = int(store.ptr_ord[b, t])
            pd = int(store.ptr_dis[b, t])
            sel = np.r_[off:off + po, off + pd:off + cap]
            if sel.size == 0:
                continue
            soa = store.soa[b][:, sel]
            key, (c0, c1, c2) = _cell_keys(soa, world.geom.prob_lo, idx,
                                           world.geom.n_cell)
            owner = (c0 // cpr[0] + world.decomp.ranks[0]
                     * (c1 // cpr[1] + world.decomp.ranks[1] * (c2 // cpr[2])))
            bad += int((owner != rs.rank).sum())
    return bad


def multiset_conserved(world: World) -> bool:
    """Global particle-id multiset equals the initial arange."""
    chunks = []
    for rs in world.ranks:
        store = rs.store
        b = store.cur
        for t in range(store.n_tiles):
            off = int(store.tile_off[t])
            cap = int(store.tile_cap[t])
            po = int(store.ptr_ord[b, t])
            pd = int(store.ptr_dis[b, t])
            chunks.append(store.ids[b, off:off + po])
            chunks.append(store.ids[b, off + pd:off + cap])
            for ids_o, _ in store.overflow[t]:
                chunks.append(ids_o)
    ids = np.concatenate(chunks) if chunks else np.empty(0, np.int64)
    if ids.size != world.n_global:
        return False
    if ids.size and (ids.min() < 0 or ids.max() >= world.n_global):
        return False
    counts = np.bincount(ids, minlength=world.n_global)
    return bool((counts == 1).all())


def tail_lengths(world: World):
    out = []
    for rs in world.ranks:
        store = rs.store
        b = store.cur
        for t in range(store.n_tiles):
            out.append(int(store.tile_cap[t] - store.ptr_dis[b, t]))
    return out


def tail_exactly_movers(world: World) -> bool:
    """Every mover of the last step sits in exactly one disordered tail
    (or the overflow list): global tail occupancy equals the mover count."""
    movers = sum(int(rs.counts[:, 1:4].sum()) for rs in world.ranks)
    tails = sum(tail_lengths(world))
    spilled = sum(len(ids) for rs in world.ranks
                  for chunks in rs.store.overflow for ids, _ in chunks)
    return tails + spilled == movers


def audit_run(config: SimulationConfig, audit_every: int = 1) -> dict:
    """Run a configuration with the full layout/conservation audit after
    every step; returns violation counts (used by the acceptance suite and
    the verify command, possibly in worker processes)."""
    t0 = time.perf_counter()
    world = build_world(config)
    bad_layout = 0
    bad_ownership = 0
    bad_multiset = 0
    bad_tail = 0
    for s in range(config.steps):
        step(world)
        if s % audit_every:
            continue
        bad_layout += layout_violations(world)
        if not multiset_conserved(world):
            bad_multiset += 1
        bad_ownership += ownership_violations(world)
        if not tail_exactly_movers(world):
            bad_tail += 1
    return {
        "steps": config.steps,
        "n_particles": world.n_global,
        "layout": bad_layout,
        "multiset": bad_multiset,
        "ownership": bad_ownership,
        "tail_movers": bad_tail,
        "elapsed": time.perf_counter() - t0,
    }


def conservation_snapshot(world: World) -> ConservationSnapshot:
    ids, soa = gather_particles(world)
    cfg = world.config
    w = soa[6]
    u = soa[3:6]
    gamma = np.sqrt(1.0 + (u ** 2).sum(axis=0))
    charge = float(cfg.q * w.sum())
    momentum = tuple(float((w * u[a]).sum() * cfg.m * C_LIGHT)
                     for a in range(3))
    kinetic = float((w * (gamma - 1.0)).sum() * cfg.m * C_LIGHT ** 2)
    efield = sum(field_energy(rs.fields, world.geom,
                              world.decomp.cells_per_rank)
                 for rs in world.ranks)
    return ConservationSnapshot(charge=charge, momentum=momentum,
                                energy_kinetic=kinetic, energy_field=efield,
                                n_particles=int(ids.size))
