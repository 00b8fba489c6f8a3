"""Independent brute-force reference for one full step.

No tiles, no ordering, no batching: a flat particle list walked in id order,
a direct triple-sum gather and scalar deposition with modulo node indexing
on unguarded interiors, and the same field-solve module as the engine. The
only shared particle-side pieces are the shape-factor convention and the
solver; the gather/deposit/push loops are written from the update equations
directly, so agreement with the tiled engine is evidence, not tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import (
    C_LIGHT,
    ComparisonError,
    FieldSet,
    GridGeometry,
    SimulationConfig,
    allocate_fields,
    build_decomposition,
    build_geometry,
    inv_dx,
)
from .metrics import init_migration_slab, init_uniform_plasma
from .solver import FieldExchange, advance_B_half, advance_E_full, cfl_dt, halo_exchange_EB

__all__ = ["OracleState", "oracle_from_config", "reference_step",
           "compare_states", "CompareReport"]


@dataclass
class OracleState:
    ids: np.ndarray
    soa: np.ndarray          # (7, n): x y z ux uy uz w
    fields: FieldSet
    geom: GridGeometry
    config: SimulationConfig
    dt: float
    exchange: FieldExchange


@njit(cache=True)
def _cubic_w(xi, out):
    out[0] = (1.0 - xi) ** 3 / 6.0
    out[1] = (4.0 - 6.0 * xi * xi + 3.0 * xi ** 3) / 6.0
    out[2] = (1.0 + 3.0 * xi + 3.0 * xi * xi - 3.0 * xi ** 3) / 6.0
    out[3] = xi ** 3 / 6.0


@njit(cache=True)
def _order_w(xi, order, out):
    if order == 1:
        out[0] = 1.0 - xi
        out[1] = xi
    elif order == 2:
        out[0] = 0.5 * (1.0 - xi) ** 2
        out[1] = 0.5 + xi * (1.0 - xi)
        out[2] = 0.5 * xi * xi
    else:
        _cubic_w(xi, out)


@njit(cache=True)
def _gather_push_all(soa, ex, ey, ez, bx, by, bz,
                     lo0, lo1, lo2, hi0, hi1, hi2, len0, len1, len2,
                     idx0, idx1, idx2, n0, n1, n2, order,
                     efac, bfac, cdt):
    """Per particle, in storage (id) order: Eq.-style triple-sum gather on
    the start-of-step fields, momentum update, position advance with wrap."""
    n = soa.shape[1]
    width = order + 1
    half = (order - 1) // 2
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for p in range(n):
        tx = (soa[0, p] - lo0) * idx0
        ty = (soa[1, p] - lo1) * idx1
        tz = (soa[2, p] - lo2) * idx2
        if order == 2:
            ax = int(math.floor(tx + 0.5)) - 1
            ay = int(math.floor(ty + 0.5)) - 1
            az = int(math.floor(tz + 0.5)) - 1
            fx = tx - math.floor(tx + 0.5) + 0.5
            fy = ty - math.floor(ty + 0.5) + 0.5
            fz = tz - math.floor(tz + 0.5) + 0.5
        else:
            ax = int(math.floor(tx)) - half
            ay = int(math.floor(ty)) - half
            az = int(math.floor(tz)) - half
            fx = tx - math.floor(tx)
            fy = ty - math.floor(ty)
            fz = tz - math.floor(tz)
        _order_w(fx, order, wx)
        _order_w(fy, order, wy)
        _order_w(fz, order, wz)
        epx = 0.0
        epy = 0.0
        epz = 0.0
        bpx = 0.0
        bpy = 0.0
        bpz = 0.0
        for k in range(width):
            zi = (az + k) % n2
            for j in range(width):
                yi = (ay + j) % n1
                wzy = wz[k] * wy[j]
                for i in range(width):
                    xi = (ax + i) % n0
                    ww = wzy * wx[i]
                    epx += ww * ex[zi, yi, xi]
                    epy += ww * ey[zi, yi, xi]
                    epz += ww * ez[zi, yi, xi]
                    bpx += ww * bx[zi, yi, xi]
                    bpy += ww * by[zi, yi, xi]
                    bpz += ww * bz[zi, yi, xi]
        # half kick, rotation, half kick
        uxm = soa[3, p] + efac * epx
        uym = soa[4, p] + efac * epy
        uzm = soa[5, p] + efac * epz
        inv_g = 1.0 / math.sqrt(1.0 + uxm * uxm + uym * uym + uzm * uzm)
        t_x = bfac * inv_g * bpx
        t_y = bfac * inv_g * bpy
        t_z = bfac * inv_g * bpz
        upx = uxm + uym * t_z - uzm * t_y
        upy = uym + uzm * t_x - uxm * t_z
        upz = uzm + uxm * t_y - uym * t_x
        sfac = 2.0 / (1.0 + t_x * t_x + t_y * t_y + t_z * t_z)
        ux1 = uxm + (upy * t_z - upz * t_y) * sfac + efac * epx
        uy1 = uym + (upz * t_x - upx * t_z) * sfac + efac * epy
        uz1 = uzm + (upx * t_y - upy * t_x) * sfac + efac * epz
        inv_g1 = 1.0 / math.sqrt(1.0 + ux1 * ux1 + uy1 * uy1 + uz1 * uz1)
        soa[3, p] = ux1
        soa[4, p] = uy1
        soa[5, p] = uz1
        x = soa[0, p] + ux1 * inv_g1 * cdt
        y = soa[1, p] + uy1 * inv_g1 * cdt
        z = soa[2, p] + uz1 * inv_g1 * cdt
        if x < lo0:
            x += len0
        elif x >= hi0:
            x -= len0
        if x < lo0 or x >= hi0:
            x = lo0
        if y < lo1:
            y += len1
        elif y >= hi1:
            y -= len1
        if y < lo1 or y >= hi1:
            y = lo1
        if z < lo2:
            z += len2
        elif z >= hi2:
            z -= len2
        if z < lo2 or z >= hi2:
            z = lo2
        soa[0, p] = x
        soa[1, p] = y
        soa[2, p] = z


@njit(cache=True)
def _deposit_all(soa, jx, jy, jz,
                 lo0, lo1, lo2, idx0, idx1, idx2, n0, n1, n2, order,
                 qc_over_v):
    """Scalar direct deposition at the pushed positions, id order."""
    n = soa.shape[1]
    width = order + 1
    half = (order - 1) // 2
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for p in range(n):
        ux = soa[3, p]
        uy = soa[4, p]
        uz = soa[5, p]
        inv_g = 1.0 / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
        fac = qc_over_v * soa[6, p] * inv_g
        cjx = fac * ux
        cjy = fac * uy
        cjz = fac * uz
        tx = (soa[0, p] - lo0) * idx0
        ty = (soa[1, p] - lo1) * idx1
        tz = (soa[2, p] - lo2) * idx2
        if order == 2:
            ax = int(math.floor(tx + 0.5)) - 1
            ay = int(math.floor(ty + 0.5)) - 1
            az = int(math.floor(tz + 0.5)) - 1
            fx = tx - math.floor(tx + 0.5) + 0.5
            fy = ty - math.floor(ty + 0.5) + 0.5
            fz = tz - math.floor(tz + 0.5) + 0.5
        else:
            ax = int(math.floor(tx)) - half
            ay = int(math.floor(ty)) - half
            az = int(math.floor(tz)) - half
            fx = tx - math.floor(tx)
            fy = ty - math.floor(ty)
            fz = tz - math.floor(tz)
        _order_w(fx, order, wx)
        _order_w(fy, order, wy)
        _order_w(fz, order, wz)
        for k in range(width):
            zi = (az + k) % n2
            for j in range(width):
                yi = (ay + j) % n1
                wzy = wz[k] * wy[j]
                for i in range(width):
                    xi = (ax + i) % n0
                    ww = wzy * wx[i]
                    jx[zi, yi, xi] += ww * cjx
                    jy[zi, yi, xi] += ww * cjy
                    jz[zi, yi, xi] += ww * cjz


def oracle_from_config(config: SimulationConfig) -> OracleState:
    """Build the rank-free oracle over the same workload and seed."""
    geom = build_geometry(config)
    single = SimulationConfig(**{**config.__dict__, "ranks": (1, 1, 1)})
    decomp = build_decomposition(single, geom)
    if config.workload == "uniform":
        ids, soa = init_uniform_plasma(config, geom)
    else:
        ids, soa = init_migration_slab(config, geom)
    return OracleState(ids=ids, soa=soa.copy(),
                       fields=allocate_fields(geom), geom=geom, config=config,
                       dt=cfl_dt(geom, config.dt_safety),
                       exchange=FieldExchange(geom, decomp))


def reference_step(state: OracleState) -> OracleState:
    """One naive step: gather, push, deposit, field advance, in place."""
    geom = state.geom
    cfg = state.config
    g = geom.guard
    idx = inv_dx(geom)
    interior = tuple(slice(g, -g) for _ in range(3))
    efac = cfg.q * state.dt / (2.0 * cfg.m * C_LIGHT)
    bfac = cfg.q * state.dt / (2.0 * cfg.m)
    fs = state.fields
    _gather_push_all(
        state.soa,
        fs.ex[interior], fs.ey[interior], fs.ez[interior],
        fs.bx[interior], fs.by[interior], fs.bz[interior],
        geom.prob_lo[0], geom.prob_lo[1], geom.prob_lo[2],
        geom.prob_hi[0], geom.prob_hi[1], geom.prob_hi[2],
        geom.extent[0], geom.extent[1], geom.extent[2],
        idx[0], idx[1], idx[2],
        geom.n_cell[0], geom.n_cell[1], geom.n_cell[2], cfg.order,
        efac, bfac, C_LIGHT * state.dt)
    fs.jx[:] = 0.0
    fs.jy[:] = 0.0
    fs.jz[:] = 0.0
    _deposit_all(
        state.soa, fs.jx[interior], fs.jy[interior], fs.jz[interior],
        geom.prob_lo[0], geom.prob_lo[1], geom.prob_lo[2],
        idx[0], idx[1], idx[2],
        geom.n_cell[0], geom.n_cell[1], geom.n_cell[2], cfg.order,
        cfg.q * C_LIGHT / geom.cell_volume)
    world = [fs]
    advance_B_half(fs, geom, state.dt)
    halo_exchange_EB(world, state.exchange, components=("bx", "by", "bz"))
    advance_E_full(fs, geom, state.dt)
    halo_exchange_EB(world, state.exchange, components=("ex", "ey", "ez"))
    advance_B_half(fs, geom, state.dt)
    halo_exchange_EB(world, state.exchange, components=("bx", "by", "bz"))
    return state


@dataclass
class CompareReport:
    max_field_rel: float
    max_particle_rel: float
    worst_field: str
    worst_particle: int
    passed: bool


def compare_states(ids, soa, fields_by_rank, world_geom, state: OracleState,
                   tolerance: float) -> CompareReport:
    """Max relative errors of an engine state against the oracle state."""
    order_a = np.argsort(np.asarray(ids), kind="stable")
    order_b = np.argsort(state.ids, kind="stable")
    if not np.array_equal(np.asarray(ids)[order_a], state.ids[order_b]):
        raise ComparisonError("particle id sets differ")
    a = np.asarray(soa)[:, order_a]
    b = state.soa[:, order_b]
    scale = np.maximum(np.abs(b), 1e-30)
    per_particle = np.abs(a - b) / scale
    worst_flat = int(np.argmax(per_particle))
    worst_particle = int(state.ids[order_b][worst_flat % per_particle.shape[1]])
    max_particle = float(per_particle.max()) if per_particle.size else 0.0

    g = world_geom.guard
    max_field = 0.0
    worst_field = ""
    names = ("ex", "ey", "ez", "bx", "by", "bz", "jx", "jy", "jz")
    oracle_interior = {nm: getattr(state.fields, nm)[g:-g, g:-g, g:-g]
                       for nm in names}
    for nm in names:
        got = fields_by_rank[nm]
        want = oracle_interior[nm]
        denom = max(np.abs(want).max(), 1e-30)
        err = float(np.abs(got - want).max() / denom)
        if err > max_field:
            max_field = err
            worst_field = nm
    passed = max_field <= tolerance and max_particle <= tolerance
    return CompareReport(max_field_rel=max_field,
                         max_particle_rel=max_particle,
                         worst_field=worst_field,
                         worst_particle=worst_particle, passed=passed)
