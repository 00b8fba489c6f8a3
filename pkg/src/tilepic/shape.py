"""B-spline shape factors and stencil anchoring.

The same per-axis weights serve interpolation and deposition. Odd orders
anchor on the containing cell so every particle in a cell shares one stencil
anchor; order 2 anchors on the nearest node, which splits cells in half and
is therefore only usable on the scalar kernel paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, GridGeometry, NumericError

__all__ = [
    "AxisWeights",
    "StencilWeights",
    "anchor_and_fraction",
    "shape_weights",
    "stencil_weights_3d",
]


@dataclass(frozen=True)
class AxisWeights:
    """Per-axis stencil contribution: base node index, fractional offset in
    [0, 1), and order+1 weights summing to one."""

    i0: int
    xi: float
    w: np.ndarray


@dataclass(frozen=True)
class StencilWeights:
    """Flattened 3-D tensor-product weights; x varies fastest, matching the
    grid-field matrix node ordering."""

    anchor: tuple
    w: np.ndarray


def anchor_and_fraction(coord: float, axis: int, geom: GridGeometry, order: int):
    """Base node index and in-cell fraction for one axis.

    Odd orders: i0 = floor((coord-lo)/dx) - (order-1)/2, xi the fraction of
    the containing cell. Order 2: anchored one node below the nearest node,
    xi measured from the half-cell boundary. The anchor may index guard nodes.
    """
    if not math.isfinite(coord):
        raise NumericError(f"non-finite coordinate on axis {axis}")
    t = (coord - geom.prob_lo[axis]) / geom.dx[axis]
    if order in (1, 3):
        base = math.floor(t)
        return int(base) - (order - 1) // 2, t - base
    if order == 2:
        nearest = math.floor(t + 0.5)
        return int(nearest) - 1, t - nearest + 0.5
    raise ConfigurationError(f"unsupported shape order {order}")


def shape_weights(xi: float, order: int) -> np.ndarray:
    """B-spline basis values of the given order at fraction xi in [0, 1)."""
    if order == 1:
        return np.array([1.0 - xi, xi])
    if order == 2:
        return np.array([
            0.5 * (1.0 - xi) ** 2,
            0.5 + xi * (1.0 - xi),
            0.5 * xi * xi,
        ])
    if order == 3:
        xi2 = xi * xi
        xi3 = xi2 * xi
        return np.array([
            (1.0 - 3.0 * xi + 3.0 * xi2 - xi3) / 6.0,
            (4.0 - 6.0 * xi2 + 3.0 * xi3) / 6.0,
            (1.0 + 3.0 * xi + 3.0 * xi2 - 3.0 * xi3) / 6.0,
            xi3 / 6.0,
        ])
    raise ConfigurationError(f"unsupported shape order {order}")


def axis_weights(coord: float, axis: int, geom: GridGeometry, order: int) -> AxisWeights:
    i0, xi = anchor_and_fraction(coord, axis, geom, order)
    return AxisWeights(i0=i0, xi=xi, w=shape_weights(xi, order))


def stencil_weights_3d(wx: AxisWeights, wy: AxisWeights, wz: AxisWeights) -> StencilWeights:
    """Separable product of the three axis weights, flattened x-fastest."""
    if not (len(wx.w) == len(wy.w) == len(wz.w)):
        raise ConfigurationError("mismatched axis weight orders")
    width = len(wx.w)
    w = np.empty(width ** 3)
    q = 0
    for k in range(width):
        for j in range(width):
            wzy = wz.w[k] * wy.w[j]
            for i in range(width):
                w[q] = wzy * wx.w[i]
                q += 1
    return StencilWeights(anchor=(wx.i0, wy.i0, wz.i0), w=w)
