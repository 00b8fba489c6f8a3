"""Domain geometry, field storage, particle records and run configuration.

Everything here is plain value types: geometry and configuration are immutable
after construction and freely shareable between rank workers; a FieldSet is
owned by exactly one rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Tuple

import numpy as np
from scipy.constants import c as C_LIGHT, electron_mass, elementary_charge, epsilon_0, mu_0

__all__ = [
    "C_LIGHT",
    "EPS0",
    "MU0",
    "ConfigurationError",
    "NumericError",
    "OwnershipError",
    "LayoutContractError",
    "MigrationEnvelopeError",
    "ProtocolError",
    "UndefinedMetricError",
    "ComparisonError",
    "GridGeometry",
    "CellId",
    "FieldSet",
    "ParticleRecord",
    "SimulationConfig",
    "Decomposition",
    "build_geometry",
    "build_decomposition",
    "cell_of",
    "allocate_fields",
    "load_config",
    "parse_config",
    "format_config",
    "with_overrides",
]

EPS0 = epsilon_0
MU0 = mu_0

AXES = "xyz"


class ConfigurationError(ValueError):
    """Invalid or inconsistent run configuration."""


class NumericError(ArithmeticError):
    """Non-finite value produced or consumed; carries the particle id."""

    def __init__(self, message, particle_id=None):
        if particle_id is not None:
            message = f"{message} (particle id {particle_id})"
        super().__init__(message)
        self.particle_id = particle_id


class OwnershipError(RuntimeError):
    """A particle or stencil touched data outside its owner's reach."""


class LayoutContractError(RuntimeError):
    """A particle-layout invariant was violated by a caller."""


class MigrationEnvelopeError(RuntimeError):
    """A particle moved more than one cell in a single step."""


class ProtocolError(RuntimeError):
    """Fabric communication protocol misuse (epochs, sizes, duplicates)."""


class UndefinedMetricError(ZeroDivisionError):
    """A metric was requested with a zero denominator."""


class ComparisonError(ValueError):
    """State comparison requested over mismatched particle id sets."""


def _triple(value, kind=float):
    t = tuple(kind(v) for v in value)
    if len(t) != 3:
        raise ConfigurationError(f"expected a triple, got {value!r}")
    return t


@dataclass(frozen=True)
class GridGeometry:
    """Cartesian node-collocated grid with guard layers.

    All six E/B components and the three J components live on the same nodes,
    so a single stencil anchor serves every component. Node i on an axis sits
    at prob_lo + i*dx; on a periodic axis node n_cell wraps onto node 0.
    """

    n_cell: Tuple[int, int, int]
    prob_lo: Tuple[float, float, float]
    prob_hi: Tuple[float, float, float]
    dx: Tuple[float, float, float]
    periodic: Tuple[bool, bool, bool] = (True, True, True)
    guard: int = 3
    tile_shape: Tuple[int, int, int] = (8, 8, 8)

    @property
    def extent(self):
        return tuple(hi - lo for lo, hi in zip(self.prob_lo, self.prob_hi))

    @property
    def cell_volume(self):
        return self.dx[0] * self.dx[1] * self.dx[2]

    def guarded_shape(self, interior):
        """Array shape (z, y, x) for an interior (nx, ny, nz) plus guards."""
        g = self.guard
        return (interior[2] + 2 * g, interior[1] + 2 * g, interior[0] + 2 * g)


@dataclass(frozen=True)
class CellId:
    """Owning cell of a position: global (i, j, k) plus the x-fastest flat
    index of the cell within its tile."""

    ijk: Tuple[int, int, int]
    flat: int


@dataclass
class FieldSet:
    """Node-collocated E, B and J component arrays, guard layers included.

    Arrays are indexed [z, y, x] so the x axis is contiguous. J guard layers
    hold partial deposition sums until the guard reduction runs; after a halo
    exchange the E/B guards mirror the owning neighbor's interior.
    """

    ex: np.ndarray
    ey: np.ndarray
    ez: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    bz: np.ndarray
    jx: np.ndarray
    jy: np.ndarray
    jz: np.ndarray

    def e_components(self):
        return (self.ex, self.ey, self.ez)

    def b_components(self):
        return (self.bx, self.by, self.bz)

    def j_components(self):
        return (self.jx, self.jy, self.jz)

    def all_components(self):
        return (self.ex, self.ey, self.ez, self.bx, self.by, self.bz,
                self.jx, self.jy, self.jz)


@dataclass(frozen=True)
class ParticleRecord:
    """One macroparticle: unique id, position (m), normalized momentum
    u = gamma*v/c, and macroparticle weight (physical particles each)."""

    id: int
    x: float
    y: float
    z: float
    ux: float
    uy: float
    uz: float
    w: float


@dataclass
class SimulationConfig:
    """Flat run configuration; field names double as config-file keys."""

    # geometry
    n_cell: Tuple[int, int, int] = (32, 32, 32)
    prob_lo: Tuple[float, float, float] = (-2.0e-5, -2.0e-5, -2.0e-5)
    prob_hi: Tuple[float, float, float] = (2.0e-5, 2.0e-5, 2.0e-5)
    periodic: Tuple[bool, bool, bool] = (True, True, True)
    guard: int = 3
    tile_shape: Tuple[int, int, int] = (8, 8, 8)
    order: int = 3
    # species and loading
    ppc: int = 8
    u_th: float = 0.01
    drift: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    q: float = -elementary_charge
    m: float = electron_mass
    density: float = 1.0e25
    workload: str = "uniform"
    # stepping
    dt_safety: float = 0.7
    steps: int = 100
    warmup: int = 5
    seed: int = 1234
    ranks: Tuple[int, int, int] = (1, 1, 1)
    # variant selection
    interp: str = "G7"
    deposit: str = "D3"
    comm: str = "C2"
    deterministic: bool = True
    virtual_time: bool = False
    # layout sizing
    disorder_fraction: float = 0.25
    # virtual-clock cost model
    base_latency: float = 1.0e-4
    bandwidth: float = 1.0e9
    progression_penalty: float = 0.2
    contention_multiplier: float = 1.5
    interp_cost: float = 1.0e-3
    deposit_cost: float = 1.0e-3
    fieldsolve_cost: float = 1.0e-3
    scan_cost_per_particle: float = 1.0e-9
    # reporting
    cpp_frequency: float = 1.3e9

    def __post_init__(self):
        self.n_cell = _triple(self.n_cell, int)
        self.prob_lo = _triple(self.prob_lo)
        self.prob_hi = _triple(self.prob_hi)
        self.periodic = _triple(self.periodic, bool)
        self.tile_shape = _triple(self.tile_shape, int)
        self.drift = _triple(self.drift)
        self.ranks = _triple(self.ranks, int)


def build_geometry(config: SimulationConfig) -> GridGeometry:
    """Validate the configured domain and derive spacings and tiling."""
    for a in range(3):
        if config.n_cell[a] <= 0:
            raise ConfigurationError(f"n_cell must be positive on axis {AXES[a]}")
        if not config.prob_hi[a] > config.prob_lo[a]:
            raise ConfigurationError(f"domain bounds not ordered on axis {AXES[a]}")
        if config.tile_shape[a] <= 0:
            raise ConfigurationError(f"tile_shape must be positive on axis {AXES[a]}")
        if config.n_cell[a] % config.tile_shape[a] != 0:
            raise ConfigurationError(
                f"n_cell[{AXES[a]}]={config.n_cell[a]} is not divisible by "
                f"tile_shape[{AXES[a]}]={config.tile_shape[a]} (axis {a})")
    if config.order not in (1, 2, 3):
        raise ConfigurationError(f"unsupported shape order {config.order}")
    # Gather needs ceil((order+1)/2) guard nodes; depositing a particle that
    # just crossed the high rank face needs one more on that side.
    min_guard = (config.order + 3) // 2
    if config.guard < min_guard:
        raise ConfigurationError(
            f"guard={config.guard} too shallow for order {config.order}: "
            f"movers deposit up to {min_guard} nodes past the interior")
    if not all(config.periodic):
        raise ConfigurationError("only fully periodic domains are supported")
    dx = tuple((hi - lo) / n for lo, hi, n in
               zip(config.prob_lo, config.prob_hi, config.n_cell))
    return GridGeometry(
        n_cell=config.n_cell,
        prob_lo=config.prob_lo,
        prob_hi=config.prob_hi,
        dx=dx,
        periodic=config.periodic,
        guard=config.guard,
        tile_shape=config.tile_shape,
    )


@dataclass(frozen=True)
class Decomposition:
    """Static domain decomposition: which rank and tile own each cell.

    Ranks and tiles are flattened x-fastest, matching the cell flattening, so
    every index in meta tables and bin lists is reproducible from (i, j, k).
    """

    ranks: Tuple[int, int, int]
    cells_per_rank: Tuple[int, int, int]
    tiles_per_rank: Tuple[int, int, int]

    @property
    def n_ranks(self):
        return self.ranks[0] * self.ranks[1] * self.ranks[2]

    @property
    def tiles_in_rank(self):
        return self.tiles_per_rank[0] * self.tiles_per_rank[1] * self.tiles_per_rank[2]

    def rank_coords(self, rank: int):
        rx = rank % self.ranks[0]
        ry = (rank // self.ranks[0]) % self.ranks[1]
        rz = rank // (self.ranks[0] * self.ranks[1])
        return (rx, ry, rz)

    def rank_id(self, coords):
        return coords[0] + self.ranks[0] * (coords[1] + self.ranks[1] * coords[2])

    def rank_origin(self, rank: int):
        """Global cell index of the rank's low corner."""
        rc = self.rank_coords(rank)
        return tuple(rc[a] * self.cells_per_rank[a] for a in range(3))

    def owner_of_cell(self, cell):
        return self.rank_id(tuple(cell[a] // self.cells_per_rank[a] for a in range(3)))

    def neighbors_of(self, rank: int):
        """Distinct adjacent ranks (periodic wrap, up to 26), excluding self."""
        rc = self.rank_coords(rank)
        out = set()
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dx == dy == dz == 0:
                        continue
                    nb = tuple((rc[a] + d) % self.ranks[a]
                               for a, d in enumerate((dx, dy, dz)))
                    nb_id = self.rank_id(nb)
                    if nb_id != rank:
                        out.add(nb_id)
        return sorted(out)


def build_decomposition(config: SimulationConfig, geom: GridGeometry) -> Decomposition:
    for a in range(3):
        tiles_on_axis = geom.n_cell[a] // geom.tile_shape[a]
        if config.ranks[a] <= 0:
            raise ConfigurationError(f"ranks must be positive on axis {AXES[a]}")
        if tiles_on_axis % config.ranks[a] != 0:
            raise ConfigurationError(
                f"ranks[{AXES[a]}]={config.ranks[a]} does not divide the "
                f"{tiles_on_axis} tiles on axis {a}")
    cpr = tuple(geom.n_cell[a] // config.ranks[a] for a in range(3))
    tpr = tuple(cpr[a] // geom.tile_shape[a] for a in range(3))
    return Decomposition(ranks=config.ranks, cells_per_rank=cpr, tiles_per_rank=tpr)


def inv_dx(geom: GridGeometry):
    """Inverse spacings; multiplied, never divided, so every module computes
    grid-scaled coordinates with identical rounding."""
    return tuple(1.0 / d for d in geom.dx)


def cell_of(position, geom: GridGeometry, particle_id=None) -> CellId:
    """Owning cell of a position, wrapped on periodic axes.

    The flat index is x-fastest within the owning tile.
    """
    idx = inv_dx(geom)
    ijk = []
    for a in range(3):
        p = position[a]
        if not math.isfinite(p):
            raise NumericError(f"non-finite coordinate on axis {AXES[a]}", particle_id)
        t = (p - geom.prob_lo[a]) * idx[a]
        i = int(math.floor(t))
        if geom.periodic[a]:
            i %= geom.n_cell[a]
        elif not 0 <= i < geom.n_cell[a]:
            raise OwnershipError(
                f"position outside non-periodic domain on axis {AXES[a]}")
        ijk.append(i)
    ts = geom.tile_shape
    li = ijk[0] % ts[0]
    lj = ijk[1] % ts[1]
    lk = ijk[2] % ts[2]
    flat = (lk * ts[1] + lj) * ts[0] + li
    return CellId(ijk=(ijk[0], ijk[1], ijk[2]), flat=flat)


def allocate_fields(geom: GridGeometry, interior=None) -> FieldSet:
    """Zero-initialized component arrays with guard layers.

    `interior` is the per-rank interior (nx, ny, nz); defaults to the whole
    domain for single-rank and oracle use.
    """
    if interior is None:
        interior = geom.n_cell
    shape = geom.guarded_shape(interior)
    return FieldSet(*(np.zeros(shape) for _ in range(9)))


# --- config file round trip -------------------------------------------------
#
# Plain text, one `key = value` per line, '#' starts a comment. Triples are
# comma separated; booleans are true/false.

_CONFIG_FIELDS = {f.name: f for f in fields(SimulationConfig)}


def _parse_value(name, text):
    default = getattr(SimulationConfig(), name)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",")]
        elem = type(default[0])
        if elem is bool:
            return tuple(_parse_bool(p) for p in parts)
        return tuple(elem(p) for p in parts)
    if isinstance(default, bool):
        return _parse_bool(text)
    return type(default)(text)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def parse_config(text: str) -> SimulationConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, val.strip())
    return SimulationConfig(**values)


def load_config(path) -> SimulationConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: SimulationConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}"
             for f in fields(SimulationConfig)]
    return "\n".join(lines) + "\n"


def with_overrides(config: SimulationConfig, **overrides) -> SimulationConfig:
    return replace(config, **overrides)
