"""Compiled inner loops shared by the kernels, layout and pipeline modules.

Everything here operates on plain ndarrays so the per-tile drivers can run
under prange with tiles writing disjoint slices. No fastmath anywhere: the
accumulator contract is one multiply followed by one add per entry, and the
equivalence suites rely on that rounding being reproducible.

Particle storage rows (axis 0 of the (7, capacity) SoA blocks):
    0..2 position x,y,z   3..5 momentum ux,uy,uz   6 weight
Field arrays are indexed [z, y, x] with guards included, so the x axis is
contiguous and stencil rows vectorize.
"""

import math

import numpy as np
from numba import njit, prange

# soa rows
X, Y, Z, UX, UY, UZ, W = 0, 1, 2, 3, 4, 5, 6

# leave flags
KIND_STAY = 0        # same cell, or intra-tile cell change (retained)
KIND_LOCAL = 1       # other tile, same rank
KIND_REMOTE = 2      # other rank

# error codes reported per tile
ERR_ENVELOPE = 1
ERR_NONFINITE = 2
ERR_CURSOR = 3
ERR_OWNERSHIP = 4
ERR_CONTRACT = 5

_BAD = -(1 << 40)    # sentinel for an out-of-reach stencil offset


@njit(cache=True, inline="always")
def _axis_w(xi, order, out):
    """B-spline basis values at fraction xi written into out[0:order+1]."""
    if order == 1:
        out[0] = 1.0 - xi
        out[1] = xi
    elif order == 2:
        out[0] = 0.5 * (1.0 - xi) ** 2
        out[1] = 0.5 + xi * (1.0 - xi)
        out[2] = 0.5 * xi * xi
    else:
        xi2 = xi * xi
        xi3 = xi2 * xi
        out[0] = (1.0 - 3.0 * xi + 3.0 * xi2 - xi3) / 6.0
        out[1] = (4.0 - 6.0 * xi2 + 3.0 * xi3) / 6.0
        out[2] = (1.0 + 3.0 * xi + 3.0 * xi2 - 3.0 * xi3) / 6.0
        out[3] = xi3 / 6.0


@njit(cache=True, inline="always")
def _anchor(t, order):
    """Stencil base index and fraction from a grid-scaled coordinate."""
    if order == 2:
        nearest = math.floor(t + 0.5)
        return int(nearest) - 1, t - nearest + 0.5
    base = math.floor(t)
    return int(base) - (order - 1) // 2, t - base


@njit(cache=True, inline="always")
def _local_base(i0, origin, n_glob, n_loc, g, order, periodic):
    """Owner-local offset of a stencil base, minimal-image wrapped.

    Returns a value in [-g, n_loc+g-1-order] such that the whole stencil
    fits in the guarded array, or the _BAD sentinel if out of reach.
    """
    off = i0 - origin
    if periodic:
        off = off % n_glob
        if -g <= off <= n_loc + g - 1 - order:
            return off
        off -= n_glob
    if -g <= off <= n_loc + g - 1 - order:
        return off
    return _BAD


@njit(cache=True, inline="always")
def _wrap(v, lo, hi, length):
    """Periodic wrap with a deterministic snap for the rounding edges."""
    if v < lo:
        v += length
    elif v >= hi:
        v -= length
    if v < lo or v >= hi:
        v = lo
    return v


@njit(cache=True, inline="always")
def _cell_index(t, n):
    """floor of a grid-scaled in-domain coordinate, clamped against the
    half-ulp rounding spill at the periodic seam (no integer division)."""
    c = int(math.floor(t))
    if c >= n:
        c -= n
    elif c < 0:
        c += n
    return c


@njit(cache=True, inline="always")
def _envelope_ok(d, n):
    """One-cell migration envelope with periodic wrap, comparisons only."""
    return (-1 <= d <= 1) or d == n - 1 or d == 1 - n


@njit(cache=True, inline="always")
def _boris(ux, uy, uz, epx, epy, epz, bpx, bpy, bpz, efac, bfac):
    """Half-kick, magnetic rotation with tangent correction, half-kick."""
    uxm = ux + efac * epx
    uym = uy + efac * epy
    uzm = uz + efac * epz
    inv_g = 1.0 / math.sqrt(1.0 + uxm * uxm + uym * uym + uzm * uzm)
    tx = bfac * inv_g * bpx
    ty = bfac * inv_g * bpy
    tz = bfac * inv_g * bpz
    upx = uxm + uym * tz - uzm * ty
    upy = uym + uzm * tx - uxm * tz
    upz = uzm + uxm * ty - uym * tx
    sfac = 2.0 / (1.0 + tx * tx + ty * ty + tz * tz)
    sx = sfac * tx
    sy = sfac * ty
    sz = sfac * tz
    uxp = uxm + upy * sz - upz * sy
    uyp = uym + upz * sx - upx * sz
    uzp = uzm + upx * sy - upy * sx
    ux1 = uxp + efac * epx
    uy1 = uyp + efac * epy
    uz1 = uzp + efac * epz
    inv_g1 = 1.0 / math.sqrt(1.0 + ux1 * ux1 + uy1 * uy1 + uz1 * uz1)
    return ux1, uy1, uz1, inv_g1


@njit(cache=True, inline="always")
def _gather_six(ex, ey, ez, bx, by, bz, xb, yb, zb, wx, wy, wz, width, g):
    """Scalar reference gather: fixed (k, j, i) sum over the stencil."""
    epx = 0.0
    epy = 0.0
    epz = 0.0
    bpx = 0.0
    bpy = 0.0
    bpz = 0.0
    for k in range(width):
        zi = zb + k + g
        for j in range(width):
            yi = yb + j + g
            wzy = wz[k] * wy[j]
            for i in range(width):
                xi = xb + i + g
                ww = wzy * wx[i]
                epx += ww * ex[zi, yi, xi]
                epy += ww * ey[zi, yi, xi]
                epz += ww * ez[zi, yi, xi]
                bpx += ww * bx[zi, yi, xi]
                bpy += ww * by[zi, yi, xi]
                bpz += ww * bz[zi, yi, xi]
    return epx, epy, epz, bpx, bpy, bpz


@njit(cache=True, inline="always")
def _deposit_one(jx, jy, jz, xb, yb, zb, wx, wy, wz, width, g, cjx, cjy, cjz):
    """Scalar current deposition onto the stencil around one particle."""
    for k in range(width):
        zi = zb + k + g
        for j in range(width):
            yi = yb + j + g
            wzy = wz[k] * wy[j]
            for i in range(width):
                xi = xb + i + g
                ww = wzy * wx[i]
                jx[zi, yi, xi] += ww * cjx
                jy[zi, yi, xi] += ww * cjy
                jz[zi, yi, xi] += ww * cjz


@njit(cache=True, inline="always")
def _fill_grid_matrix(G, ex, ey, ez, bx, by, bz, xb, yb, zb, width, g):
    """Grid-field matrix rows: (Ex,Ey,Ez,Bx,By,Bz,0,0) per stencil node."""
    q = 0
    for k in range(width):
        zi = zb + k + g
        for j in range(width):
            yi = yb + j + g
            for i in range(width):
                xi = xb + i + g
                G[q, 0] = ex[zi, yi, xi]
                G[q, 1] = ey[zi, yi, xi]
                G[q, 2] = ez[zi, yi, xi]
                G[q, 3] = bx[zi, yi, xi]
                G[q, 4] = by[zi, yi, xi]
                G[q, 5] = bz[zi, yi, xi]
                G[q, 6] = 0.0
                G[q, 7] = 0.0
                q += 1


@njit(cache=True, inline="always")
def _lane_gather(G, tx, ty, tz, order, wxa, wya, wza):
    """One row of the batch result: the particle's stencil weights are
    generated on the fly and accumulated against the prepacked grid-field
    matrix in ascending node order, entrywise identical to the rank-1 tile
    form (the two zero-padded columns are elided). The in-cell fraction
    comes from the coordinate itself, so a seam-clamped cell id still
    weights consistently with its wrapped stencil anchor."""
    _axis_w(tx - math.floor(tx), order, wxa)
    _axis_w(ty - math.floor(ty), order, wya)
    _axis_w(tz - math.floor(tz), order, wza)
    width = order + 1
    f0 = 0.0
    f1 = 0.0
    f2 = 0.0
    f3 = 0.0
    f4 = 0.0
    f5 = 0.0
    q = 0
    for k in range(width):
        wzk = wza[k]
        for j in range(width):
            wzy = wzk * wya[j]
            for i in range(width):
                wq = wzy * wxa[i]
                f0 += wq * G[q, 0]
                f1 += wq * G[q, 1]
                f2 += wq * G[q, 2]
                f3 += wq * G[q, 3]
                f4 += wq * G[q, 4]
                f5 += wq * G[q, 5]
                q += 1
    return f0, f1, f2, f3, f4, f5


@njit(cache=True)
def gather_point(ex, ey, ez, bx, by, bz, x, y, z,
                 lo0, lo1, lo2, idx0, idx1, idx2, nc0, nc1, nc2,
                 org0, org1, org2, nl0, nl1, nl2, g, order):
    """Reference gather at one position; returns the six field values or
    NaNs if the stencil leaves the guarded reach."""
    wxa = np.empty(4)
    wya = np.empty(4)
    wza = np.empty(4)
    xb0, xf = _anchor((x - lo0) * idx0, order)
    yb0, yf = _anchor((y - lo1) * idx1, order)
    zb0, zf = _anchor((z - lo2) * idx2, order)
    _axis_w(xf, order, wxa)
    _axis_w(yf, order, wya)
    _axis_w(zf, order, wza)
    xb = _local_base(xb0, org0, nc0, nl0, g, order, True)
    yb = _local_base(yb0, org1, nc1, nl1, g, order, True)
    zb = _local_base(zb0, org2, nc2, nl2, g, order, True)
    if xb == _BAD or yb == _BAD or zb == _BAD:
        nan = np.nan
        return nan, nan, nan, nan, nan, nan
    return _gather_six(ex, ey, ez, bx, by, bz, xb, yb, zb,
                       wxa, wya, wza, order + 1, g)


@njit(cache=True)
def deposit_point(jx, jy, jz, x, y, z, ux, uy, uz, w, qc_over_v,
                  lo0, lo1, lo2, idx0, idx1, idx2, nc0, nc1, nc2,
                  org0, org1, org2, nl0, nl1, nl2, g, order):
    """Reference scalar deposition of one particle; False if out of reach."""
    wxa = np.empty(4)
    wya = np.empty(4)
    wza = np.empty(4)
    inv_g1 = 1.0 / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
    fac = qc_over_v * w * inv_g1
    xb0, xf = _anchor((x - lo0) * idx0, order)
    yb0, yf = _anchor((y - lo1) * idx1, order)
    zb0, zf = _anchor((z - lo2) * idx2, order)
    _axis_w(xf, order, wxa)
    _axis_w(yf, order, wya)
    _axis_w(zf, order, wza)
    xb = _local_base(xb0, org0, nc0, nl0, g, order, True)
    yb = _local_base(yb0, org1, nc1, nl1, g, order, True)
    zb = _local_base(zb0, org2, nc2, nl2, g, order, True)
    if xb == _BAD or yb == _BAD or zb == _BAD:
        return False
    _deposit_one(jx, jy, jz, xb, yb, zb, wxa, wya, wza, order + 1, g,
                 fac * ux, fac * uy, fac * uz)
    return True


@njit(cache=True, parallel=True)
def phase1_sow(
    # current buffer
    cur_ids, cur_soa, cur_meta, bin_start, bin_slots,
    # next buffer
    nxt_ids, nxt_soa, nxt_meta, ptr_ord_nxt, ptr_dis_nxt, leave_nxt,
    # tile tables
    tile_off, tile_cap, tile_cell0,
    # staging for fused pre-packing
    stg_soa, stg_ids, stg_dest, stg_n, fuse,
    # fields (rank-local, guarded)
    ex, ey, ez, bx, by, bz,
    # geometry
    lo0, lo1, lo2, hi0, hi1, hi2, len0, len1, len2,
    idx0, idx1, idx2, nc0, nc1, nc2,
    org0, org1, org2, nl0, nl1, nl2, g, order,
    ts0, ts1, ts2, cpr0, cpr1, cpr2, r0, r1, my_rank,
    # physics
    efac, bfac, cdt,
    # per-tile workspaces and outputs
    G, counts, err_code, err_id,
    batched,
):
    """Interpolate + push + stream-split write-back over the dual regions.

    Ordered segments are consumed first, then the tail via bin_to_ip; stays
    compact upward into the next buffer's ordered region, movers append
    downward into its tail. Cell-leaving movers are flagged and, when `fuse`
    is set, copied out to the migration staging area as they are written.
    """
    n_tiles = tile_off.shape[0]
    width = order + 1
    K = width ** 3
    half = (order - 1) // 2
    nc_tile = ts0 * ts1 * ts2
    tpr0 = nl0 // ts0
    tpr1 = nl1 // ts1
    for t in prange(n_tiles):
        off = tile_off[t]
        cap = tile_cap[t]
        gt = G[t]
        po = 0
        pd = cap
        nstay = 0
        nintra = 0
        nlocal = 0
        nremote = 0
        nstg = 0
        wxa = np.empty(4)
        wya = np.empty(4)
        wza = np.empty(4)
        tc0 = tile_cell0[t, 0]
        tc1 = tile_cell0[t, 1]
        tc2 = tile_cell0[t, 2]
        failed = False
        for c in range(nc_tile):
            if failed:
                break
            seg_start = cur_meta[t, c, 0]
            seg_len = cur_meta[t, c, 1]
            bs = bin_start[t, c]
            be = bin_start[t, c + 1]
            total = seg_len + (be - bs)
            nxt_meta[t, c, 0] = po
            if total == 0:
                nxt_meta[t, c, 1] = 0
                continue
            ci = tc0 + (c % ts0)
            cj = tc1 + ((c // ts0) % ts1)
            ck = tc2 + (c // (ts0 * ts1))
            if batched:
                xb = _local_base(ci - half, org0, nc0, nl0, g, order, True)
                yb = _local_base(cj - half, org1, nc1, nl1, g, order, True)
                zb = _local_base(ck - half, org2, nc2, nl2, g, order, True)
                if xb == _BAD or yb == _BAD or zb == _BAD:
                    err_code[t] = ERR_OWNERSHIP
                    err_id[t] = -1
                    failed = True
                    break
                _fill_grid_matrix(gt, ex, ey, ez, bx, by, bz,
                                  xb, yb, zb, width, g)
            for pos in range(total):
                if pos < seg_len:
                    s = off + seg_start + pos
                else:
                    s = off + bin_slots[off + bs + (pos - seg_len)]
                px = cur_soa[X, s]
                py = cur_soa[Y, s]
                pz = cur_soa[Z, s]
                if batched:
                    tx = (px - lo0) * idx0
                    ty = (py - lo1) * idx1
                    tz = (pz - lo2) * idx2
                    epx, epy, epz, bpx, bpy, bpz = _lane_gather(
                        gt, tx, ty, tz, order, wxa, wya, wza)
                else:
                    tx = (px - lo0) * idx0
                    ty = (py - lo1) * idx1
                    tz = (pz - lo2) * idx2
                    xb0, xf = _anchor(tx, order)
                    yb0, yf = _anchor(ty, order)
                    zb0, zf = _anchor(tz, order)
                    _axis_w(xf, order, wxa)
                    _axis_w(yf, order, wya)
                    _axis_w(zf, order, wza)
                    xb = _local_base(xb0, org0, nc0, nl0, g, order, True)
                    yb = _local_base(yb0, org1, nc1, nl1, g, order, True)
                    zb = _local_base(zb0, org2, nc2, nl2, g, order, True)
                    if xb == _BAD or yb == _BAD or zb == _BAD:
                        err_code[t] = ERR_OWNERSHIP
                        err_id[t] = cur_ids[s]
                        failed = True
                        break
                    epx, epy, epz, bpx, bpy, bpz = _gather_six(
                        ex, ey, ez, bx, by, bz, xb, yb, zb,
                        wxa, wya, wza, width, g)
                ux1, uy1, uz1, inv_g1 = _boris(
                    cur_soa[UX, s], cur_soa[UY, s], cur_soa[UZ, s],
                    epx, epy, epz, bpx, bpy, bpz, efac, bfac)
                nx = _wrap(px + ux1 * inv_g1 * cdt, lo0, hi0, len0)
                ny = _wrap(py + uy1 * inv_g1 * cdt, lo1, hi1, len1)
                nz = _wrap(pz + uz1 * inv_g1 * cdt, lo2, hi2, len2)
                if not (math.isfinite(nx) and math.isfinite(ny)
                        and math.isfinite(nz) and math.isfinite(ux1)
                        and math.isfinite(uy1) and math.isfinite(uz1)):
                    err_code[t] = ERR_NONFINITE
                    err_id[t] = cur_ids[s]
                    failed = True
                    break
                c0 = _cell_index((nx - lo0) * idx0, nc0)
                c1 = _cell_index((ny - lo1) * idx1, nc1)
                c2 = _cell_index((nz - lo2) * idx2, nc2)
                if not (_envelope_ok(c0 - ci, nc0)
                        and _envelope_ok(c1 - cj, nc1)
                        and _envelope_ok(c2 - ck, nc2)):
                    err_code[t] = ERR_ENVELOPE
                    err_id[t] = cur_ids[s]
                    failed = True
                    break
                kind = KIND_STAY
                intra = False
                if c0 == ci and c1 == cj and c2 == ck:
                    dst = off + po
                    po += 1
                else:
                    owner = ((c0 // cpr0) + r0 * ((c1 // cpr1)
                             + r1 * (c2 // cpr2)))
                    pd -= 1
                    dst = off + pd
                    if owner == my_rank:
                        l0 = c0 - org0
                        l1 = c1 - org1
                        l2 = c2 - org2
                        dtile = ((l2 // ts2) * tpr1
                                 + (l1 // ts1)) * tpr0 + (l0 // ts0)
                        if dtile == t:
                            intra = True
                        else:
                            kind = KIND_LOCAL
                    else:
                        kind = KIND_REMOTE
                if po > pd:
                    err_code[t] = ERR_CURSOR
                    err_id[t] = cur_ids[s]
                    failed = True
                    break
                nxt_ids[dst] = cur_ids[s]
                nxt_soa[X, dst] = nx
                nxt_soa[Y, dst] = ny
                nxt_soa[Z, dst] = nz
                nxt_soa[UX, dst] = ux1
                nxt_soa[UY, dst] = uy1
                nxt_soa[UZ, dst] = uz1
                nxt_soa[W, dst] = cur_soa[W, s]
                leave_nxt[dst] = kind
                if kind == KIND_STAY:
                    if intra:
                        nintra += 1
                    else:
                        nstay += 1
                else:
                    if kind == KIND_LOCAL:
                        nlocal += 1
                    else:
                        nremote += 1
                    if fuse:
                        sdst = off + nstg
                        stg_ids[sdst] = cur_ids[s]
                        for f in range(7):
                            stg_soa[f, sdst] = nxt_soa[f, dst]
                        if kind == KIND_LOCAL:
                            l0 = c0 - org0
                            l1 = c1 - org1
                            l2 = c2 - org2
                            stg_dest[sdst] = ((l2 // ts2) * tpr1
                                              + (l1 // ts1)) * tpr0 + (l0 // ts0)
                        else:
                            owner = ((c0 // cpr0) + r0 * ((c1 // cpr1)
                                     + r1 * (c2 // cpr2)))
                            stg_dest[sdst] = -(owner + 1)
                        nstg += 1
                if failed:
                    break
            nxt_meta[t, c, 1] = po - nxt_meta[t, c, 0]
        ptr_ord_nxt[t] = po
        ptr_dis_nxt[t] = pd
        stg_n[t] = nstg
        counts[t, 0] = nstay
        counts[t, 1] = nintra
        counts[t, 2] = nlocal
        counts[t, 3] = nremote


@njit(cache=True, parallel=True)
def phase1_flat(
    cur_ids, cur_soa, n_cur, order_idx, cell_key,
    nxt_ids, nxt_soa, leave_nxt,
    tile_off,
    stg_soa, stg_ids, stg_dest, stg_n, fuse,
    ex, ey, ez, bx, by, bz,
    lo0, lo1, lo2, hi0, hi1, hi2, len0, len1, len2,
    idx0, idx1, idx2, nc0, nc1, nc2,
    org0, org1, org2, nl0, nl1, nl2, g, order,
    ts0, ts1, ts2, cpr0, cpr1, cpr2, r0, r1, my_rank,
    efac, bfac, cdt,
    G, counts, err_code, err_id,
    batched,
):
    """Slot-preserving interpolate + push for the unsorted / index-sorted
    supply modes: traversal follows order_idx, results land back in the
    source slot, and leavers are only flagged for the end-of-step pass."""
    n_tiles = tile_off.shape[0]
    width = order + 1
    K = width ** 3
    half = (order - 1) // 2
    tpr0 = nl0 // ts0
    tpr1 = nl1 // ts1
    for t in prange(n_tiles):
        off = tile_off[t]
        n = n_cur[t]
        gt = G[t]
        nstay = 0
        nintra = 0
        nlocal = 0
        nremote = 0
        nstg = 0
        wxa = np.empty(4)
        wya = np.empty(4)
        wza = np.empty(4)
        failed = False
        pos = 0
        while pos < n and not failed:
            # one run: consecutive traversal entries sharing a cell
            s0 = off + order_idx[off + pos]
            key = cell_key[s0]
            run_end = pos + 1
            if batched:
                while (run_end < n
                       and cell_key[off + order_idx[off + run_end]] == key):
                    run_end += 1
            ci = int(key % nc0)
            cj = int((key // nc0) % nc1)
            ck = int(key // (nc0 * nc1))
            if batched:
                xb = _local_base(ci - half, org0, nc0, nl0, g, order, True)
                yb = _local_base(cj - half, org1, nc1, nl1, g, order, True)
                zb = _local_base(ck - half, org2, nc2, nl2, g, order, True)
                if xb == _BAD or yb == _BAD or zb == _BAD:
                    err_code[t] = ERR_OWNERSHIP
                    err_id[t] = cur_ids[s0]
                    break
                _fill_grid_matrix(gt, ex, ey, ez, bx, by, bz,
                                  xb, yb, zb, width, g)
            for src_pos in range(pos, run_end):
                s = off + order_idx[off + src_pos]
                px = cur_soa[X, s]
                py = cur_soa[Y, s]
                pz = cur_soa[Z, s]
                if batched:
                    tx = (px - lo0) * idx0
                    ty = (py - lo1) * idx1
                    tz = (pz - lo2) * idx2
                    epx, epy, epz, bpx, bpy, bpz = _lane_gather(
                        gt, tx, ty, tz, order, wxa, wya, wza)
                else:
                    tx = (px - lo0) * idx0
                    ty = (py - lo1) * idx1
                    tz = (pz - lo2) * idx2
                    xb0, xf = _anchor(tx, order)
                    yb0, yf = _anchor(ty, order)
                    zb0, zf = _anchor(tz, order)
                    _axis_w(xf, order, wxa)
                    _axis_w(yf, order, wya)
                    _axis_w(zf, order, wza)
                    xb = _local_base(xb0, org0, nc0, nl0, g, order, True)
                    yb = _local_base(yb0, org1, nc1, nl1, g, order, True)
                    zb = _local_base(zb0, org2, nc2, nl2, g, order, True)
                    if xb == _BAD or yb == _BAD or zb == _BAD:
                        err_code[t] = ERR_OWNERSHIP
                        err_id[t] = cur_ids[s]
                        failed = True
                        break
                    epx, epy, epz, bpx, bpy, bpz = _gather_six(
                        ex, ey, ez, bx, by, bz, xb, yb, zb,
                        wxa, wya, wza, width, g)
                ux1, uy1, uz1, inv_g1 = _boris(
                    cur_soa[UX, s], cur_soa[UY, s], cur_soa[UZ, s],
                    epx, epy, epz, bpx, bpy, bpz, efac, bfac)
                nx = _wrap(px + ux1 * inv_g1 * cdt, lo0, hi0, len0)
                ny = _wrap(py + uy1 * inv_g1 * cdt, lo1, hi1, len1)
                nz = _wrap(pz + uz1 * inv_g1 * cdt, lo2, hi2, len2)
                if not (math.isfinite(nx) and math.isfinite(ny)
                        and math.isfinite(nz) and math.isfinite(ux1)
                        and math.isfinite(uy1) and math.isfinite(uz1)):
                    err_code[t] = ERR_NONFINITE
                    err_id[t] = cur_ids[s]
                    failed = True
                    break
                c0 = _cell_index((nx - lo0) * idx0, nc0)
                c1 = _cell_index((ny - lo1) * idx1, nc1)
                c2 = _cell_index((nz - lo2) * idx2, nc2)
                if not (_envelope_ok(c0 - ci, nc0)
                        and _envelope_ok(c1 - cj, nc1)
                        and _envelope_ok(c2 - ck, nc2)):
                    err_code[t] = ERR_ENVELOPE
                    err_id[t] = cur_ids[s]
                    failed = True
                    break
                l0 = c0 - org0
                l1 = c1 - org1
                l2 = c2 - org2
                if (0 <= l0 < nl0) and (0 <= l1 < nl1) and (0 <= l2 < nl2):
                    dtile = ((l2 // ts2) * tpr1
                             + (l1 // ts1)) * tpr0 + (l0 // ts0)
                    if dtile == t:
                        kind = KIND_STAY
                        if c0 == ci and c1 == cj and c2 == ck:
                            nstay += 1
                        else:
                            nintra += 1
                    else:
                        kind = KIND_LOCAL
                        nlocal += 1
                else:
                    kind = KIND_REMOTE
                    nremote += 1
                nxt_ids[s] = cur_ids[s]
                nxt_soa[X, s] = nx
                nxt_soa[Y, s] = ny
                nxt_soa[Z, s] = nz
                nxt_soa[UX, s] = ux1
                nxt_soa[UY, s] = uy1
                nxt_soa[UZ, s] = uz1
                nxt_soa[W, s] = cur_soa[W, s]
                leave_nxt[s] = kind
                if kind != KIND_STAY and fuse:
                    sdst = off + nstg
                    stg_ids[sdst] = cur_ids[s]
                    for f in range(7):
                        stg_soa[f, sdst] = nxt_soa[f, s]
                    if kind == KIND_LOCAL:
                        stg_dest[sdst] = ((l2 // ts2) * tpr1
                                          + (l1 // ts1)) * tpr0 + (l0 // ts0)
                    else:
                        owner = ((c0 // cpr0) + r0 * ((c1 // cpr1)
                                 + r1 * (c2 // cpr2)))
                        stg_dest[sdst] = -(owner + 1)
                    nstg += 1
                if failed:
                    break
            pos = run_end
        stg_n[t] = nstg
        counts[t, 0] = nstay
        counts[t, 1] = nintra
        counts[t, 2] = nlocal
        counts[t, 3] = nremote


@njit(cache=True, parallel=True)
def tail_bin_all(
    soa, ptr_dis, tile_off, tile_cap, tile_cell0,
    bin_start, bin_slots,
    lo0, lo1, lo2, idx0, idx1, idx2, nc0, nc1, nc2,
    ts0, ts1, ts2, err_code,
):
    """Counting sort of each tile's disordered tail into per-cell slot lists
    (tile-relative, ascending slot order). Cost is O(tail length)."""
    n_tiles = tile_off.shape[0]
    nc_tile = ts0 * ts1 * ts2
    for t in prange(n_tiles):
        off = tile_off[t]
        cap = tile_cap[t]
        pd = ptr_dis[t]
        count = np.zeros(nc_tile, np.int64)
        bad = False
        for s in range(pd, cap):
            a = off + s
            c0 = _cell_index((soa[X, a] - lo0) * idx0, nc0)
            c1 = _cell_index((soa[Y, a] - lo1) * idx1, nc1)
            c2 = _cell_index((soa[Z, a] - lo2) * idx2, nc2)
            li = c0 - tile_cell0[t, 0]
            lj = c1 - tile_cell0[t, 1]
            lk = c2 - tile_cell0[t, 2]
            if not (0 <= li < ts0 and 0 <= lj < ts1 and 0 <= lk < ts2):
                err_code[t] = ERR_CONTRACT
                bad = True
                break
            count[(lk * ts1 + lj) * ts0 + li] += 1
        if bad:
            continue
        acc = 0
        for c in range(nc_tile):
            bin_start[t, c] = acc
            acc += count[c]
        bin_start[t, nc_tile] = acc
        fill = np.zeros(nc_tile, np.int64)
        for s in range(pd, cap):
            a = off + s
            c0 = _cell_index((soa[X, a] - lo0) * idx0, nc0)
            c1 = _cell_index((soa[Y, a] - lo1) * idx1, nc1)
            c2 = _cell_index((soa[Z, a] - lo2) * idx2, nc2)
            li = c0 - tile_cell0[t, 0]
            lj = c1 - tile_cell0[t, 1]
            lk = c2 - tile_cell0[t, 2]
            c = (lk * ts1 + lj) * ts0 + li
            bin_slots[off + bin_start[t, c] + fill[c]] = s
            fill[c] += 1


@njit(cache=True)
def _deposit_segment_batched(
    jx, jy, jz, soa, slots, n_seg, ci, cj, ck,
    lo0, lo1, lo2, idx0, idx1, idx2,
    torg0, torg1, torg2, next0, next1, next2, nc0, nc1, nc2,
    g, order, M, qc_over_v, wxa, wya, wza,
):
    """Cell-batched deposition: accumulate stencil-weight (x) current rank-1
    updates into the KxD tile accumulator, then scatter it once."""
    width = order + 1
    K = width ** 3
    half = (order - 1) // 2
    xb = _local_base(ci - half, torg0, nc0, next0, g, order, True)
    yb = _local_base(cj - half, torg1, nc1, next1, g, order, True)
    zb = _local_base(ck - half, torg2, nc2, next2, g, order, True)
    if xb == _BAD or yb == _BAD or zb == _BAD:
        return False
    for q in range(K):
        for col in range(8):
            M[q, col] = 0.0
    for n in range(n_seg):
        s = slots[n]
        ux = soa[UX, s]
        uy = soa[UY, s]
        uz = soa[UZ, s]
        inv_g1 = 1.0 / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
        fac = qc_over_v * soa[W, s] * inv_g1
        j0 = fac * ux
        j1 = fac * uy
        j2 = fac * uz
        # in-cell fraction: equals t - cell for interior cells and stays
        # correct when the shared cell id is an unwrapped ghost index
        tx = (soa[X, s] - lo0) * idx0
        ty = (soa[Y, s] - lo1) * idx1
        tz = (soa[Z, s] - lo2) * idx2
        _axis_w(tx - math.floor(tx), order, wxa)
        _axis_w(ty - math.floor(ty), order, wya)
        _axis_w(tz - math.floor(tz), order, wza)
        q = 0
        for k in range(width):
            wzk = wza[k]
            for j in range(width):
                wzy = wzk * wya[j]
                for i in range(width):
                    wq = wzy * wxa[i]
                    M[q, 0] += wq * j0
                    M[q, 1] += wq * j1
                    M[q, 2] += wq * j2
                    q += 1
    q = 0
    for k in range(width):
        zi = zb + k + g
        for j in range(width):
            yi = yb + j + g
            for i in range(width):
                xi = xb + i + g
                jx[zi, yi, xi] += M[q, 0]
                jy[zi, yi, xi] += M[q, 1]
                jz[zi, yi, xi] += M[q, 2]
                q += 1
    return True


@njit(cache=True)
def _deposit_slot_scalar(
    jx, jy, jz, soa, s,
    lo0, lo1, lo2, idx0, idx1, idx2,
    torg0, torg1, torg2, next0, next1, next2, nc0, nc1, nc2,
    g, order, qc_over_v, wxa, wya, wza,
):
    width = order + 1
    ux = soa[UX, s]
    uy = soa[UY, s]
    uz = soa[UZ, s]
    inv_g1 = 1.0 / math.sqrt(1.0 + ux * ux + uy * uy + uz * uz)
    fac = qc_over_v * soa[W, s] * inv_g1
    tx = (soa[X, s] - lo0) * idx0
    ty = (soa[Y, s] - lo1) * idx1
    tz = (soa[Z, s] - lo2) * idx2
    xb0, xf = _anchor(tx, order)
    yb0, yf = _anchor(ty, order)
    zb0, zf = _anchor(tz, order)
    _axis_w(xf, order, wxa)
    _axis_w(yf, order, wya)
    _axis_w(zf, order, wza)
    xb = _local_base(xb0, torg0, nc0, next0, g, order, True)
    yb = _local_base(yb0, torg1, nc1, next1, g, order, True)
    zb = _local_base(zb0, torg2, nc2, next2, g, order, True)
    if xb == _BAD or yb == _BAD or zb == _BAD:
        return False
    _deposit_one(jx, jy, jz, xb, yb, zb, wxa, wya, wza, width, g,
                 fac * ux, fac * uy, fac * uz)
    return True


@njit(cache=True, parallel=True)
def deposit_phase(
    ids, soa, meta, ptr_ord, ptr_dis,
    tile_off, tile_cap, tile_cell0,
    tileJ,
    lo0, lo1, lo2, idx0, idx1, idx2, nc0, nc1, nc2,
    ts0, ts1, ts2, g, order, qc_over_v,
    M, scratch, err_code, err_id, mode,
):
    """Current deposition at the pushed positions into per-tile J blocks.

    mode 0: scalar over ordered region and tail (unsorted reference path)
    mode 1: cell-batched over meta segments, scalar fallback over the tail
    mode 2: cell-batched over meta segments, tail re-binned then batched
    mode 3: everything re-binned by destination cell, then batched
    Ghost cells one layer outside the tile are legal destinations; their
    contributions land in the tile guard block.
    """
    n_tiles = tile_off.shape[0]
    nc_tile = ts0 * ts1 * ts2
    ebins = (ts0 + 2) * (ts1 + 2) * (ts2 + 2)
    for t in prange(n_tiles):
        off = tile_off[t]
        cap = tile_cap[t]
        po = ptr_ord[t]
        pd = ptr_dis[t]
        jx = tileJ[t, 0]
        jy = tileJ[t, 1]
        jz = tileJ[t, 2]
        torg0 = tile_cell0[t, 0]
        torg1 = tile_cell0[t, 1]
        torg2 = tile_cell0[t, 2]
        wxa = np.empty(4)
        wya = np.empty(4)
        wza = np.empty(4)
        ok = True
        if mode == 0:
            for s in range(po):
                ok = _deposit_slot_scalar(
                    jx, jy, jz, soa, off + s, lo0, lo1, lo2, idx0, idx1, idx2,
                    torg0, torg1, torg2, ts0, ts1, ts2, nc0, nc1, nc2,
                    g, order, qc_over_v, wxa, wya, wza)
                if not ok:
                    err_code[t] = ERR_OWNERSHIP
                    err_id[t] = ids[off + s]
                    break
            if ok:
                for s in range(pd, cap):
                    ok = _deposit_slot_scalar(
                        jx, jy, jz, soa, off + s, lo0, lo1, lo2,
                        idx0, idx1, idx2,
                        torg0, torg1, torg2, ts0, ts1, ts2, nc0, nc1, nc2,
                        g, order, qc_over_v, wxa, wya, wza)
                    if not ok:
                        err_code[t] = ERR_OWNERSHIP
                        err_id[t] = ids[off + s]
                        break
        if mode == 1 or mode == 2:
            for c in range(nc_tile):
                n_seg = meta[t, c, 1]
                if n_seg == 0:
                    continue
                start = meta[t, c, 0]
                for n in range(n_seg):
                    scratch[off + n] = off + start + n
                ci = torg0 + (c % ts0)
                cj = torg1 + ((c // ts0) % ts1)
                ck = torg2 + (c // (ts0 * ts1))
                ok = _deposit_segment_batched(
                    jx, jy, jz, soa, scratch[off:off + n_seg], n_seg,
                    ci, cj, ck, lo0, lo1, lo2, idx0, idx1, idx2,
                    torg0, torg1, torg2, ts0, ts1, ts2, nc0, nc1, nc2,
                    g, order, M[t], qc_over_v, wxa, wya, wza)
                if not ok:
                    err_code[t] = ERR_OWNERSHIP
                    err_id[t] = -1
                    break
        if mode == 1 and ok:
            for s in range(pd, cap):
                ok = _deposit_slot_scalar(
                    jx, jy, jz, soa, off + s, lo0, lo1, lo2, idx0, idx1, idx2,
                    torg0, torg1, torg2, ts0, ts1, ts2, nc0, nc1, nc2,
                    g, order, qc_over_v, wxa, wya, wza)
                if not ok:
                    err_code[t] = ERR_OWNERSHIP
                    err_id[t] = ids[off + s]
                    break
        if (mode == 2 or mode == 3) and ok:
            # bin the remaining stream by destination cell over the
            # ghost-extended tile, then run the batched path per bin
            if mode == 2:
                rlo, rhi = pd, cap
            else:
                rlo, rhi = 0, po
            count = np.zeros(ebins, np.int64)
            keys = np.empty(cap, np.int64)
            for s in range(rlo, rhi):
                a = off + s
                c0 = _cell_index((soa[X, a] - lo0) * idx0, nc0)
                c1 = _cell_index((soa[Y, a] - lo1) * idx1, nc1)
                c2 = _cell_index((soa[Z, a] - lo2) * idx2, nc2)
                # minimal-image offset into the ghost-extended tile [-1, ts]
                li = (c0 - torg0) % nc0
                lj = (c1 - torg1) % nc1
                lk = (c2 - torg2) % nc2
                if li > ts0:
                    li -= nc0
                if lj > ts1:
                    lj -= nc1
                if lk > ts2:
                    lk -= nc2
                if li < -1 or lj < -1 or lk < -1:
                    err_code[t] = ERR_OWNERSHIP
                    err_id[t] = ids[a]
                    ok = False
                    break
                keys[s] = ((lk + 1) * (ts1 + 2) + (lj + 1)) * (ts0 + 2) + (li + 1)
                count[keys[s]] += 1
            if ok:
                estart = np.zeros(ebins + 1, np.int64)
                acc = 0
                for b in range(ebins):
                    estart[b] = acc
                    acc += count[b]
                estart[ebins] = acc
                fill = np.zeros(ebins, np.int64)
                for s in range(rlo, rhi):
                    b = keys[s]
                    scratch[off + estart[b] + fill[b]] = off + s
                    fill[b] += 1
                for b in range(ebins):
                    n_seg = estart[b + 1] - estart[b]
                    if n_seg == 0:
                        continue
                    li = b % (ts0 + 2)
                    lj = (b // (ts0 + 2)) % (ts1 + 2)
                    lk = b // ((ts0 + 2) * (ts1 + 2))
                    ci = torg0 + li - 1
                    cj = torg1 + lj - 1
                    ck = torg2 + lk - 1
                    ok = _deposit_segment_batched(
                        jx, jy, jz, soa,
                        scratch[off + estart[b]:off + estart[b + 1]], n_seg,
                        ci, cj, ck, lo0, lo1, lo2, idx0, idx1, idx2,
                        torg0, torg1, torg2, ts0, ts1, ts2, nc0, nc1, nc2,
                        g, order, M[t], qc_over_v, wxa, wya, wza)
                    if not ok:
                        err_code[t] = ERR_OWNERSHIP
                        err_id[t] = -1
                        break


@njit(cache=True, parallel=True)
def check_layout(
    ids, soa, meta, ptr_ord, ptr_dis, leave,
    tile_off, tile_cap, tile_cell0,
    lo0, lo1, lo2, idx0, idx1, idx2, nc0, nc1, nc2,
    ts0, ts1, ts2, violations,
):
    """Per-tile layout audit: meta segments gap-free and ascending over
    [0, ptr_ord), every ordered slot's cell matching its segment, every
    tail slot inside the tile, no leave flags left behind. A slot verified
    inside its tile is also owned by the tile's rank, so this doubles as
    the per-slot ownership audit."""
    n_tiles = tile_off.shape[0]
    nc_tile = ts0 * ts1 * ts2
    for t in prange(n_tiles):
        off = tile_off[t]
        bad = 0
        expect = 0
        for c in range(nc_tile):
            if meta[t, c, 0] != expect or meta[t, c, 1] < 0:
                bad += 1
            ci = tile_cell0[t, 0] + (c % ts0)
            cj = tile_cell0[t, 1] + ((c // ts0) % ts1)
            ck = tile_cell0[t, 2] + (c // (ts0 * ts1))
            for n in range(meta[t, c, 1]):
                a = off + meta[t, c, 0] + n
                c0 = _cell_index((soa[X, a] - lo0) * idx0, nc0)
                c1 = _cell_index((soa[Y, a] - lo1) * idx1, nc1)
                c2 = _cell_index((soa[Z, a] - lo2) * idx2, nc2)
                if c0 != ci or c1 != cj or c2 != ck:
                    bad += 1
                if leave[a] != 0:
                    bad += 1
            expect = meta[t, c, 0] + meta[t, c, 1]
        if expect != ptr_ord[t]:
            bad += 1
        if ptr_ord[t] > ptr_dis[t]:
            bad += 1
        for s in range(ptr_dis[t], tile_cap[t]):
            a = off + s
            if leave[a] != 0:
                bad += 1
            c0 = _cell_index((soa[X, a] - lo0) * idx0, nc0)
            c1 = _cell_index((soa[Y, a] - lo1) * idx1, nc1)
            c2 = _cell_index((soa[Z, a] - lo2) * idx2, nc2)
            li = c0 - tile_cell0[t, 0]
            lj = c1 - tile_cell0[t, 1]
            lk = c2 - tile_cell0[t, 2]
            if not (0 <= li < ts0 and 0 <= lj < ts1 and 0 <= lk < ts2):
                bad += 1
        violations[t] = bad
