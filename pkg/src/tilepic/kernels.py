"""Compute core: the emulated 8x8 outer-product accumulator, the scalar
reference gather, the cell-batched interpolation, the Boris pusher and the
scalar/batched current deposition.

Batched operations require all particles of a batch to share one stencil
anchor, which only odd shape orders guarantee for every particle in a cell.
All callers are tile-exclusive: one worker owns a tile's particles and its J
block at a time; E/B reads are shared read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _jit
from .core import (
    C_LIGHT,
    ConfigurationError,
    FieldSet,
    GridGeometry,
    LayoutContractError,
    NumericError,
    OwnershipError,
    cell_of,
    inv_dx,
)
from .shape import axis_weights, stencil_weights_3d

__all__ = [
    "TILE_N",
    "InterpBatch",
    "PushResult",
    "mopa_accumulate",
    "gather_scalar",
    "build_weight_matrix",
    "build_grid_field_matrix",
    "interpolate_batch",
    "boris_push",
    "deposit_scalar",
    "deposit_batch",
]

TILE_N = 8  # accumulator tile width; batch width in FP64


def mopa_accumulate(tile: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """tile += a (x) b, one multiply and one add per entry, in place."""
    tile += np.multiply.outer(a, b)
    return tile


@dataclass
class InterpBatch:
    """One cell's batch: weight matrix W (rows = particles, zero-padded),
    grid-field matrix G (rows = stencil nodes, columns Ex..Bz,0,0) and the
    8x8 result tile F."""

    n_valid: int
    cell: tuple
    anchor: tuple
    W: np.ndarray
    G: np.ndarray
    F: np.ndarray


@dataclass(frozen=True)
class PushResult:
    x_new: tuple
    u_new: tuple


def _geom_args(geom: GridGeometry):
    idx = inv_dx(geom)
    return (geom.prob_lo[0], geom.prob_lo[1], geom.prob_lo[2],
            idx[0], idx[1], idx[2],
            geom.n_cell[0], geom.n_cell[1], geom.n_cell[2],
            0, 0, 0,
            geom.n_cell[0], geom.n_cell[1], geom.n_cell[2],
            geom.guard, 0)


def gather_scalar(position, fields: FieldSet, geom: GridGeometry, order: int):
    """Fields at one position: triple (k, j, i) sum over (order+1)^3 nodes.

    Fields are whole-domain guarded arrays; guards must be current.
    """
    args = _geom_args(geom)
    out = _jit.gather_point(
        fields.ex, fields.ey, fields.ez, fields.bx, fields.by, fields.bz,
        float(position[0]), float(position[1]), float(position[2]),
        *args[:15], geom.guard, order)
    if not all(math.isfinite(v) for v in out):
        raise OwnershipError("stencil outside guarded reach")
    return (out[0], out[1], out[2]), (out[3], out[4], out[5])


def build_weight_matrix(positions, geom: GridGeometry, order: int) -> InterpBatch:
    """Stack up to 8 same-cell particles into the weight matrix.

    Row i holds particle i's flattened stencil weights relative to the shared
    anchor; rows past n_valid stay zero.
    """
    n = len(positions)
    if not 1 <= n <= TILE_N:
        raise LayoutContractError(f"batch must hold 1..{TILE_N} particles, got {n}")
    if order % 2 == 0:
        raise ConfigurationError("batched interpolation requires an odd shape order")
    cell = cell_of(positions[0], geom)
    K = (order + 1) ** 3
    W = np.zeros((TILE_N, K))
    anchor = None
    for i, pos in enumerate(positions):
        ci = cell_of(pos, geom)
        if ci.ijk != cell.ijk:
            raise LayoutContractError(
                f"mixed-cell batch: {ci.ijk} vs {cell.ijk}")
        wx = axis_weights(pos[0], 0, geom, order)
        wy = axis_weights(pos[1], 1, geom, order)
        wz = axis_weights(pos[2], 2, geom, order)
        st = stencil_weights_3d(wx, wy, wz)
        if anchor is None:
            anchor = st.anchor
        W[i, :] = st.w
    G = np.zeros((K, TILE_N))
    F = np.zeros((TILE_N, TILE_N))
    return InterpBatch(n_valid=n, cell=cell.ijk, anchor=anchor, W=W, G=G, F=F)


def build_grid_field_matrix(anchor, fields: FieldSet, geom: GridGeometry,
                            order: int) -> np.ndarray:
    """Grid-field matrix for a stencil anchor: row q = (Ex,Ey,Ez,Bx,By,Bz,0,0)
    at stencil node q, x-fastest node ordering."""
    width = order + 1
    g = geom.guard
    K = width ** 3
    G = np.zeros((K, TILE_N))
    idxs = []
    for a in range(3):
        base = anchor[a]
        if base < -g or base + order > geom.n_cell[a] + g - 1:
            raise OwnershipError(f"anchor {anchor} outside guarded arrays")
        idxs.append(base + g)
    xb, yb, zb = idxs
    comps = (fields.ex, fields.ey, fields.ez, fields.bx, fields.by, fields.bz)
    for d, arr in enumerate(comps):
        block = arr[zb:zb + width, yb:yb + width, xb:xb + width]
        G[:, d] = block.reshape(-1)
    return G


def interpolate_batch(batch: InterpBatch) -> np.ndarray:
    """F = sum_q W[:, q] (x) G[q, :] by K accumulator updates.

    Row i, columns 0..5 of the result hold (E_p, B_p) of particle i.
    """
    batch.F[:] = 0.0
    K = batch.W.shape[1]
    for q in range(K):
        mopa_accumulate(batch.F, batch.W[:, q], batch.G[q, :])
    return batch.F


def boris_push(x, u, e_p, b_p, q, m, dt, geom: GridGeometry = None) -> PushResult:
    """Standard half-kick / rotation / half-kick momentum update, then a
    position advance with the new velocity, wrapped on periodic axes."""
    efac = q * dt / (2.0 * m * C_LIGHT)
    bfac = q * dt / (2.0 * m)
    ux, uy, uz, inv_g = _jit._boris(
        float(u[0]), float(u[1]), float(u[2]),
        float(e_p[0]), float(e_p[1]), float(e_p[2]),
        float(b_p[0]), float(b_p[1]), float(b_p[2]),
        efac, bfac)
    cdt = C_LIGHT * dt
    pos = [x[0] + ux * inv_g * cdt,
           x[1] + uy * inv_g * cdt,
           x[2] + uz * inv_g * cdt]
    if geom is not None:
        for a in range(3):
            if geom.periodic[a]:
                pos[a] = _jit._wrap(pos[a], geom.prob_lo[a], geom.prob_hi[a],
                                    geom.prob_hi[a] - geom.prob_lo[a])
    for a in range(3):
        if not (math.isfinite(pos[a]) and math.isfinite((ux, uy, uz)[a])):
            raise NumericError("non-finite push result")
    return PushResult(x_new=tuple(pos), u_new=(ux, uy, uz))


def deposit_scalar(x_new, u_new, q, w, fields: FieldSet, geom: GridGeometry,
                   order: int) -> None:
    """Scalar current deposition: J += q w v S(x_new) / V_cell per node."""
    qc_over_v = q * C_LIGHT / geom.cell_volume
    args = _geom_args(geom)
    ok = _jit.deposit_point(
        fields.jx, fields.jy, fields.jz,
        float(x_new[0]), float(x_new[1]), float(x_new[2]),
        float(u_new[0]), float(u_new[1]), float(u_new[2]),
        float(w), qc_over_v,
        *args[:15], geom.guard, order)
    if not ok:
        raise OwnershipError("deposit stencil outside guarded reach")


def deposit_batch(xs, us, ws, q, fields: FieldSet, geom: GridGeometry,
                  order: int) -> None:
    """Cell-batched deposition of one contiguous segment.

    Per-particle current vectors (3 entries, zero-padded to the tile width)
    are accumulated as stencil-weight (x) current rank-1 updates into a KxN
    accumulator, 8 stencil rows per tile update, then scattered into J with
    one write pass for the whole cell.
    """
    n = len(ws)
    if n == 0:
        return
    if order % 2 == 0:
        raise ConfigurationError("batched deposition requires an odd shape order")
    cell = cell_of(xs[0], geom)
    width = order + 1
    K = width ** 3
    M = np.zeros((K, TILE_N))
    qc_over_v = q * C_LIGHT / geom.cell_volume
    anchor = None
    for p in range(n):
        ci = cell_of(xs[p], geom)
        if ci.ijk != cell.ijk:
            raise LayoutContractError(
                f"segment spans cells {cell.ijk} and {ci.ijk}")
        wx = axis_weights(xs[p][0], 0, geom, order)
        wy = axis_weights(xs[p][1], 1, geom, order)
        wz = axis_weights(xs[p][2], 2, geom, order)
        st = stencil_weights_3d(wx, wy, wz)
        if anchor is None:
            anchor = st.anchor
        ux, uy, uz = us[p]
        inv_g = 1.0 / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
        fac = qc_over_v * ws[p] * inv_g
        jp = np.zeros(TILE_N)
        jp[0] = fac * ux
        jp[1] = fac * uy
        jp[2] = fac * uz
        for chunk in range(0, K, TILE_N):
            mopa_accumulate(M[chunk:chunk + TILE_N], st.w[chunk:chunk + TILE_N], jp)
    g = geom.guard
    for a in range(3):
        if anchor[a] < -g or anchor[a] + order > geom.n_cell[a] + g - 1:
            raise OwnershipError(f"anchor {anchor} outside guarded arrays")
    xb, yb, zb = (anchor[0] + g, anchor[1] + g, anchor[2] + g)
    S = (slice(zb, zb + width), slice(yb, yb + width), slice(xb, xb + width))
    fields.jx[S] += M[:, 0].reshape(width, width, width)
    fields.jy[S] += M[:, 1].reshape(width, width, width)
    fields.jz[S] += M[:, 2].reshape(width, width, width)
