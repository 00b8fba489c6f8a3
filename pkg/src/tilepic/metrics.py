"""Per-step timing/counting records, throughput and overlap metrics,
conservation diagnostics, and the workload generators.

Times are virtual seconds when the virtual clock drives the run, otherwise
wall seconds; either way the sub-buckets sum to their parent bucket.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields
from typing import List

import numpy as np

from .core import ComparisonError, GridGeometry, SimulationConfig, UndefinedMetricError

__all__ = [
    "StepMetrics",
    "ConservationSnapshot",
    "ConservationReport",
    "pps_cpp",
    "overlap_ratio",
    "peak_efficiency",
    "fom_node",
    "conservation_report",
    "phase_space_error",
    "init_uniform_plasma",
    "init_migration_slab",
    "metrics_to_csv",
    "metrics_from_csv",
]

FLOPS_INTERP_PER_PARTICLE = 1636
FLOPS_DEPOSIT_PER_PARTICLE = 419


@dataclass
class StepMetrics:
    """One step's particle-phase timings and counters (one rank, or the sum
    over ranks after merging)."""

    step: int = 0
    t_interpolation: float = 0.0
    t_deposit: float = 0.0
    t_redistribute: float = 0.0
    # compute sub-buckets (interpolation + deposit)
    t_prep: float = 0.0
    t_sort: float = 0.0
    t_kernel: float = 0.0
    t_reduce: float = 0.0
    # communication sub-buckets
    t_pack: float = 0.0
    t_issue: float = 0.0
    t_wait: float = 0.0
    t_post_process: float = 0.0
    n_particles: int = 0
    n_migrants_local: int = 0
    n_migrants_remote: int = 0
    flops_interp: int = 0
    flops_deposit: int = 0

    @property
    def t_particle(self) -> float:
        return self.t_interpolation + self.t_deposit + self.t_redistribute

    def check_buckets(self, rel=1e-9):
        """Sub-buckets must account for their parents exactly once."""
        compute = self.t_prep + self.t_sort + self.t_kernel + self.t_reduce
        comm = self.t_pack + self.t_issue + self.t_wait + self.t_post_process
        parent = self.t_interpolation + self.t_deposit
        scale = max(abs(parent), abs(self.t_redistribute), 1e-30)
        if abs(compute - parent) > rel * scale + 1e-15:
            raise AssertionError(
                f"compute sub-buckets {compute} != {parent}")
        if abs(comm - self.t_redistribute) > rel * scale + 1e-15:
            raise AssertionError(
                f"comm sub-buckets {comm} != {self.t_redistribute}")

    @staticmethod
    def merged(parts: List["StepMetrics"]) -> "StepMetrics":
        """Sum per-rank records into one row (total seconds and counts)."""
        out = StepMetrics(step=parts[0].step)
        for name in _FLOAT_FIELDS:
            setattr(out, name, sum(getattr(p, name) for p in parts))
        for name in _INT_FIELDS:
            setattr(out, name, sum(getattr(p, name) for p in parts))
        return out


_FLOAT_FIELDS = [f.name for f in fields(StepMetrics)
                 if f.type == "float" and f.name != "step"]
_INT_FIELDS = [f.name for f in fields(StepMetrics)
               if f.type == "int" and f.name != "step"]
_ALL_FIELDS = [f.name for f in fields(StepMetrics)]


def pps_cpp(t_steps: float, n_total: int, frequency_hz: float = 1.3e9):
    """Particles per second and cycles per particle at a reference clock."""
    if t_steps <= 0.0:
        raise UndefinedMetricError("per-step time must be positive")
    pps = n_total / t_steps
    if pps <= 0.0:
        raise UndefinedMetricError("throughput is zero")
    return pps, frequency_hz / pps


def overlap_ratio(baseline, overlapped) -> float:
    """1 - (overlapped issue+wait) / (baseline issue+wait)."""
    denom = baseline[0] + baseline[1]
    if denom <= 0.0:
        raise UndefinedMetricError("baseline exposure is zero")
    return 1.0 - (overlapped[0] + overlapped[1]) / denom


def peak_efficiency(n_particles: int, t_steps: float, p_theoretical: float,
                    flops_interp: int = FLOPS_INTERP_PER_PARTICLE,
                    flops_deposit: int = FLOPS_DEPOSIT_PER_PARTICLE) -> float:
    """Percent of theoretical peak from standardized per-particle FLOPs."""
    return (n_particles * (flops_interp + flops_deposit)
            / (t_steps * p_theoretical)) * 100.0


def fom_node(n_cells: int, n_particles: int, t_steps: float, n_nodes: int,
             alpha: float = 0.1, beta: float = 0.9) -> float:
    """Weighted cells-plus-particles throughput per node per step."""
    return (alpha * n_cells + beta * n_particles) / (t_steps * n_nodes)


@dataclass(frozen=True)
class ConservationSnapshot:
    charge: float
    momentum: tuple
    energy_kinetic: float
    energy_field: float
    n_particles: int

    @property
    def energy(self):
        return self.energy_kinetic + self.energy_field


@dataclass
class ConservationReport:
    charge_error: np.ndarray
    energy_error: np.ndarray
    momentum_error: np.ndarray
    count_error: np.ndarray
    snapshots: List[ConservationSnapshot] = field(default_factory=list)

    def max_errors(self):
        return {"charge": float(np.abs(self.charge_error).max()),
                "energy": float(np.abs(self.energy_error).max()),
                "momentum": float(np.abs(self.momentum_error).max()),
                "count": float(np.abs(self.count_error).max())}

    def to_text(self):
        out = io.StringIO()
        out.write("step charge_err energy_err momentum_err count_err\n")
        for i in range(len(self.charge_error)):
            out.write(f"{i} {self.charge_error[i]:.17g} "
                      f"{self.energy_error[i]:.17g} "
                      f"{self.momentum_error[i]:.17g} "
                      f"{self.count_error[i]:.17g}\n")
        return out.getvalue()


def _rel(series, ref):
    scale = abs(ref) if ref != 0 else 1.0
    return (np.asarray(series) - ref) / scale


def conservation_report(snapshots: List[ConservationSnapshot]) -> ConservationReport:
    """Relative errors of the conserved reductions against step 0."""
    first = snapshots[0]
    charge = _rel([s.charge for s in snapshots], first.charge)
    energy = _rel([s.energy for s in snapshots], first.energy)
    p0 = np.array(first.momentum)
    pnorm0 = float(np.linalg.norm(p0))
    scale = pnorm0 if pnorm0 > 0 else 1.0
    momentum = np.array([np.linalg.norm(np.array(s.momentum) - p0) / scale
                         for s in snapshots])
    count = _rel([s.n_particles for s in snapshots], first.n_particles)
    return ConservationReport(charge_error=charge, energy_error=energy,
                              momentum_error=momentum, count_error=count,
                              snapshots=list(snapshots))


def phase_space_error(ids_ref, u_ref, ids_test, u_test):
    """(MSE, MAE) of one normalized-momentum component paired by id."""
    ids_ref = np.asarray(ids_ref)
    ids_test = np.asarray(ids_test)
    if ids_ref.shape != ids_test.shape:
        raise ComparisonError("particle id sets differ in size")
    ra = np.argsort(ids_ref, kind="stable")
    rb = np.argsort(ids_test, kind="stable")
    if not np.array_equal(ids_ref[ra], ids_test[rb]):
        raise ComparisonError("particle id sets differ")
    diff = np.asarray(u_ref)[ra] - np.asarray(u_test)[rb]
    return float(np.mean(diff ** 2)), float(np.mean(np.abs(diff)))


# --- workload generators -----------------------------------------------------
#
# Both generators draw from one global seeded stream in cell-major order, so
# the initial particle set is identical for every rank decomposition.

def _loading(config: SimulationConfig, geom: GridGeometry, cell_mask=None):
    nx, ny, nz = geom.n_cell
    cells = np.arange(nx * ny * nz, dtype=np.int64)
    if cell_mask is not None:
        cells = cells[cell_mask]
    n = cells.size * config.ppc
    rng = np.random.default_rng(config.seed)
    jitter = rng.random((3, n))
    u = rng.standard_normal((3, n)) * config.u_th
    ci = np.repeat(cells % nx, config.ppc)
    cj = np.repeat((cells // nx) % ny, config.ppc)
    ck = np.repeat(cells // (nx * ny), config.ppc)
    soa = np.empty((7, n))
    soa[0] = geom.prob_lo[0] + (ci + jitter[0]) * geom.dx[0]
    soa[1] = geom.prob_lo[1] + (cj + jitter[1]) * geom.dx[1]
    soa[2] = geom.prob_lo[2] + (ck + jitter[2]) * geom.dx[2]
    for a in range(3):
        soa[3 + a] = u[a] + config.drift[a]
    soa[6] = config.density * geom.cell_volume / max(config.ppc, 1)
    ids = np.arange(n, dtype=np.int64)
    return ids, soa


def init_uniform_plasma(config: SimulationConfig, geom: GridGeometry):
    """ppc particles per cell at jittered in-cell positions, Gaussian
    per-component momentum spread u_th around the configured drift."""
    return _loading(config, geom)


def init_migration_slab(config: SimulationConfig, geom: GridGeometry):
    """Particles filling the central third of the domain along the drift
    axis, bulk-drifting toward a decomposition boundary."""
    axis = int(np.argmax(np.abs(config.drift))) if any(config.drift) else 0
    nx, ny, nz = geom.n_cell
    n_axis = geom.n_cell[axis]
    lo = n_axis // 3
    hi = (2 * n_axis) // 3
    cells = np.arange(nx * ny * nz, dtype=np.int64)
    coord = (cells % nx, (cells // nx) % ny, cells // (nx * ny))[axis]
    mask = (coord >= lo) & (coord < hi)
    return _loading(config, geom, cell_mask=mask)


# --- CSV ---------------------------------------------------------------------

CSV_COLUMNS = _ALL_FIELDS + ["pps", "cpp"]


def _derived(m: StepMetrics, frequency_hz: float):
    t = m.t_particle
    if t > 0 and m.n_particles > 0:
        pps = m.n_particles / t
        return pps, frequency_hz / pps
    return 0.0, 0.0


def _format(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def metrics_to_csv(rows: List[StepMetrics], frequency_hz: float = 1.3e9) -> str:
    """One row per measured step plus mean/max summary rows."""
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for m in rows:
        pps, cpp = _derived(m, frequency_hz)
        vals = [getattr(m, name) for name in _ALL_FIELDS] + [pps, cpp]
        out.write(",".join(_format(v) for v in vals) + "\n")
    if rows:
        for label, agg in (("mean", np.mean), ("max", np.max)):
            vals = []
            for name in _ALL_FIELDS[1:]:
                vals.append(agg([getattr(m, name) for m in rows]))
            ppss, cpps = zip(*(_derived(m, frequency_hz) for m in rows))
            out.write(label + ","
                      + ",".join(_format(float(v)) for v in vals)
                      + f",{_format(float(agg(ppss)))},{_format(float(agg(cpps)))}\n")
    return out.getvalue()


def metrics_from_csv(text: str) -> List[StepMetrics]:
    """Parse step rows back; summary rows are skipped."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    if header != CSV_COLUMNS:
        raise ValueError("unexpected CSV schema")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if parts[0] in ("mean", "max"):
            continue
        kwargs = {}
        for name, text_val in zip(_ALL_FIELDS, parts):
            if name in _INT_FIELDS or name == "step":
                kwargs[name] = int(text_val)
            else:
                kwargs[name] = float(text_val)
        rows.append(StepMetrics(**kwargs))
    return rows
