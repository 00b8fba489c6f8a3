"""Collocated-grid Maxwell field update with leapfrog time staggering.

All six components live on the same nodes (the batched gather requires one
stencil for the whole component set), so the curl uses plain centered
differences and the magnetic field advances in two half-steps bracketing the
electric update:

    B^(n+1/2) = B^n     - dt/2 curl E^n
    E^(n+1)   = E^n     + dt (c^2 curl B^(n+1/2) - J / eps0)
    B^(n+1)   = B^(n+1/2) - dt/2 curl E^(n+1)

Guard layers are filled by copy from the owning neighbor (halo exchange) and
deposition guards are folded back additively (guard reduction), both as
fixed-order per-axis passes that collect every slab before applying any, so
a rank that neighbors itself on a periodic axis behaves identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import C_LIGHT, EPS0, MU0, Decomposition, FieldSet, GridGeometry

__all__ = [
    "SolverState",
    "FieldExchange",
    "cfl_dt",
    "advance_B_half",
    "advance_E_full",
    "field_energy",
    "reduce_J_guards",
    "halo_exchange_EB",
]


@dataclass(frozen=True)
class SolverState:
    """Time step and constants for the field update."""

    dt: float
    c: float = C_LIGHT
    eps0: float = EPS0
    mu0: float = MU0


def cfl_dt(geom: GridGeometry, dt_safety: float) -> float:
    """dt = dt_safety / (c sqrt(sum 1/dx_a^2)); also bounds particle flight
    to under one cell per step."""
    s = math.sqrt(sum(1.0 / d ** 2 for d in geom.dx))
    return dt_safety / (C_LIGHT * s)


def _interior(geom: GridGeometry, shape):
    g = geom.guard
    return tuple(slice(g, g + shape[2 - i]) for i in range(3))


def _shifted(arr, geom, shape, domain_axis, delta):
    """Interior-sized view shifted by delta cells along one domain axis."""
    g = geom.guard
    idx = []
    for array_axis in range(3):
        n = shape[2 - array_axis]
        if array_axis == 2 - domain_axis:
            idx.append(slice(g + delta, g + n + delta))
        else:
            idx.append(slice(g, g + n))
    return arr[tuple(idx)]


def _ddx(arr, geom, shape, domain_axis):
    """Centered difference along a domain axis, evaluated on the interior."""
    inv_2h = 1.0 / (2.0 * geom.dx[domain_axis])
    return (_shifted(arr, geom, shape, domain_axis, +1)
            - _shifted(arr, geom, shape, domain_axis, -1)) * inv_2h


def advance_B_half(fields: FieldSet, geom: GridGeometry, dt: float,
                   shape=None) -> None:
    """B <- B - (dt/2) curl E on interior nodes; E guards must be current."""
    shape = shape or geom.n_cell
    I = _interior(geom, shape)
    half = 0.5 * dt
    curl_x = _ddx(fields.ez, geom, shape, 1) - _ddx(fields.ey, geom, shape, 2)
    curl_y = _ddx(fields.ex, geom, shape, 2) - _ddx(fields.ez, geom, shape, 0)
    curl_z = _ddx(fields.ey, geom, shape, 0) - _ddx(fields.ex, geom, shape, 1)
    fields.bx[I] -= half * curl_x
    fields.by[I] -= half * curl_y
    fields.bz[I] -= half * curl_z


def advance_E_full(fields: FieldSet, geom: GridGeometry, dt: float,
                   shape=None) -> None:
    """E <- E + dt (c^2 curl B - J/eps0); B guards and reduced J current."""
    shape = shape or geom.n_cell
    I = _interior(geom, shape)
    c2 = C_LIGHT * C_LIGHT
    curl_x = _ddx(fields.bz, geom, shape, 1) - _ddx(fields.by, geom, shape, 2)
    curl_y = _ddx(fields.bx, geom, shape, 2) - _ddx(fields.bz, geom, shape, 0)
    curl_z = _ddx(fields.by, geom, shape, 0) - _ddx(fields.bx, geom, shape, 1)
    fields.ex[I] += dt * (c2 * curl_x - fields.jx[I] / EPS0)
    fields.ey[I] += dt * (c2 * curl_y - fields.jy[I] / EPS0)
    fields.ez[I] += dt * (c2 * curl_z - fields.jz[I] / EPS0)


def field_energy(fields: FieldSet, geom: GridGeometry, shape=None) -> float:
    """Total electromagnetic energy over the interior nodes."""
    shape = shape or geom.n_cell
    I = _interior(geom, shape)
    e2 = fields.ex[I] ** 2 + fields.ey[I] ** 2 + fields.ez[I] ** 2
    b2 = fields.bx[I] ** 2 + fields.by[I] ** 2 + fields.bz[I] ** 2
    return float((0.5 * EPS0 * e2 + 0.5 * b2 / MU0).sum() * geom.cell_volume)


class FieldExchange:
    """Per-axis halo plan over the rank grid (x, then y, then z)."""

    def __init__(self, geom: GridGeometry, decomp: Decomposition):
        self.geom = geom
        self.decomp = decomp
        self.shape = decomp.cells_per_rank

    def _axis_pairs(self, domain_axis):
        """(rank, low neighbor, high neighbor) triples for one axis."""
        dec = self.decomp
        out = []
        for r in range(dec.n_ranks):
            rc = list(dec.rank_coords(r))
            lo = rc.copy()
            hi = rc.copy()
            lo[domain_axis] = (rc[domain_axis] - 1) % dec.ranks[domain_axis]
            hi[domain_axis] = (rc[domain_axis] + 1) % dec.ranks[domain_axis]
            out.append((r, dec.rank_id(tuple(lo)), dec.rank_id(tuple(hi))))
        return out

    def _slab(self, domain_axis, which):
        """Index tuple selecting a slab along one axis, full extent on the
        other axes (guards included so corners propagate across passes)."""
        g = self.geom.guard
        n = self.shape[domain_axis]
        aa = 2 - domain_axis
        cuts = {
            "guard_lo": slice(0, g),
            "guard_hi": slice(n + g, n + 2 * g),
            "int_lo": slice(g, 2 * g),
            "int_hi": slice(n, n + g),
        }
        idx = [slice(None)] * 3
        idx[aa] = cuts[which]
        return tuple(idx)

    def halo_bytes(self) -> int:
        """Bytes a rank exchanges per component per full halo fill."""
        total = 0
        g = self.geom.guard
        for a in range(3):
            ext = [self.shape[i] + 2 * g for i in range(3)]
            ext[a] = g
            total += 2 * ext[0] * ext[1] * ext[2] * 8
        return total

    def fill_guards(self, arrays) -> None:
        """Copy owner interiors into neighbor guards, one axis at a time."""
        for a in range(3):
            pairs = self._axis_pairs(a)
            lo_src = self._slab(a, "int_hi")
            hi_src = self._slab(a, "int_lo")
            lo_dst = self._slab(a, "guard_lo")
            hi_dst = self._slab(a, "guard_hi")
            moves = []
            for r, nb_lo, nb_hi in pairs:
                moves.append((arrays[r], lo_dst, arrays[nb_lo][lo_src].copy()))
                moves.append((arrays[r], hi_dst, arrays[nb_hi][hi_src].copy()))
            for arr, dst, data in moves:
                arr[dst] = data

    def reduce_guards(self, arrays) -> None:
        """Fold guard contributions additively into the owning neighbor's
        interior, then zero the guards; one axis at a time."""
        for a in range(3):
            pairs = self._axis_pairs(a)
            lo_src = self._slab(a, "guard_lo")
            hi_src = self._slab(a, "guard_hi")
            lo_dst = self._slab(a, "int_hi")
            hi_dst = self._slab(a, "int_lo")
            adds = []
            for r, nb_lo, nb_hi in pairs:
                adds.append((arrays[nb_lo], lo_dst, arrays[r][lo_src].copy()))
                adds.append((arrays[nb_hi], hi_dst, arrays[r][hi_src].copy()))
            for arr, dst, data in adds:
                arr[dst] += data
            for r, _, _ in pairs:
                arrays[r][lo_src] = 0.0
                arrays[r][hi_src] = 0.0


def reduce_J_guards(world_fields, exchange: FieldExchange) -> None:
    """Add every rank's guard-layer J into the owning interiors, then zero
    the guards."""
    for comp in ("jx", "jy", "jz"):
        exchange.reduce_guards([getattr(fs, comp) for fs in world_fields])


def halo_exchange_EB(world_fields, exchange: FieldExchange,
                     components=("ex", "ey", "ez", "bx", "by", "bz")) -> None:
    """Refresh E/B guard layers from the owning neighbors."""
    for comp in components:
        exchange.fill_guards([getattr(fs, comp) for fs in world_fields])
