"""Command-line front end: single runs, ablation sweeps, and verification."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .core import SimulationConfig, load_config, with_overrides
from .metrics import conservation_report, metrics_to_csv, pps_cpp
from .pipeline import (
    VariantMatrix,
    build_world,
    gather_fields,
    gather_particles,
    layout_violations,
    multiset_conserved,
    ownership_violations,
    run,
    step,
)


def _parse_triple(text):
    return tuple(int(v) for v in text.split(","))


def _add_common(p):
    p.add_argument("--config", type=Path, default=None,
                   help="key=value configuration file")
    p.add_argument("--interp", default=None, help="G0|G2|G3|G4|G5|G6|G7")
    p.add_argument("--deposit", default=None, help="D0|D1|D2|D3")
    p.add_argument("--comm", default=None, help="C0|C1|C2|C3|C4")
    p.add_argument("--ranks", type=_parse_triple, default=None,
                   help="rank grid, e.g. 2,2,2")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--no-deterministic", dest="deterministic",
                   action="store_false")
    p.add_argument("--virtual-time", action="store_true", default=None)
    p.add_argument("--out", type=Path, default=Path("."),
                   help="output directory for CSV and reports")


def _build_config(args) -> SimulationConfig:
    cfg = load_config(args.config) if args.config else SimulationConfig()
    overrides = {}
    for name in ("interp", "deposit", "comm", "ranks", "seed", "steps",
                 "deterministic"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.virtual_time is not None:
        overrides["virtual_time"] = bool(args.virtual_time)
    return with_overrides(cfg, **overrides)


def _write_outputs(out_dir: Path, tag: str, report, cfg):
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"metrics_{tag}.csv"
    csv_path.write_text(metrics_to_csv(report.metrics, cfg.cpp_frequency))
    if report.snapshots:
        cons = conservation_report(report.snapshots)
        (out_dir / f"conservation_{tag}.txt").write_text(cons.to_text())
    return csv_path


def _summary_line(report, cfg):
    t_steps = sum(m.t_particle for m in report.metrics) / max(len(report.metrics), 1)
    n = report.metrics[-1].n_particles if report.metrics else 0
    if t_steps > 0 and n > 0:
        pps, cpp = pps_cpp(t_steps, n, cfg.cpp_frequency)
        return (f"particles={n} t_step={t_steps:.6g}s "
                f"pps={pps:.4g} cpp={cpp:.4g}")
    return f"particles={n}"


def cmd_run(args) -> int:
    cfg = _build_config(args)
    variant = VariantMatrix.from_codes(cfg.interp, cfg.deposit, cfg.comm)
    report = run(cfg, variant)
    tag = "_".join(variant.codes)
    path = _write_outputs(args.out, tag, report, cfg)
    print(f"[run] {variant.codes} {_summary_line(report, cfg)}")
    print(f"[run] checksum {report.checksum[:16]} metrics -> {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    interps = (args.interp or "G0,G7").split(",")
    deposits = (args.deposit or "D0,D3").split(",")
    comms = (args.comm or cfg.comm).split(",")
    rows = []
    for gi in interps:
        for di in deposits:
            for ci in comms:
                try:
                    variant = VariantMatrix.from_codes(gi, di, ci)
                except Exception:
                    continue
                run_cfg = with_overrides(cfg, interp=variant.interp,
                                         deposit=variant.deposit,
                                         comm=variant.comm.code)
                t0 = time.perf_counter()
                report = run(run_cfg, variant, record_conservation=False)
                wall = time.perf_counter() - t0
                _write_outputs(args.out, "_".join(variant.codes), report, cfg)
                t_steps = (sum(m.t_particle for m in report.metrics)
                           / max(len(report.metrics), 1))
                n = report.metrics[-1].n_particles if report.metrics else 0
                pps = n / t_steps if t_steps > 0 else 0.0
                rows.append((variant.codes, n, t_steps, pps, wall))
                print(f"[ablate] {variant.codes} t_step={t_steps:.6g}s "
                      f"pps={pps:.4g}")
    args.out.mkdir(parents=True, exist_ok=True)
    summary = args.out / "ablate_summary.csv"
    with summary.open("w") as fh:
        fh.write("interp,deposit,comm,n_particles,t_step,pps,wall_s\n")
        for codes, n, t_steps, pps, wall in rows:
            fh.write(f"{codes[0]},{codes[1]},{codes[2]},{n},"
                     f"{t_steps:.17g},{pps:.17g},{wall:.17g}\n")
    if len(rows) >= 2:
        slowest = min(rows, key=lambda r: r[3])
        fastest = max(rows, key=lambda r: r[3])
        print(f"[ablate] throughput trend: {slowest[0]} = {slowest[3]:.4g} pps"
              f" -> {fastest[0]} = {fastest[3]:.4g} pps")
    print(f"[ablate] summary -> {summary}")
    return 0


def cmd_verify(args) -> int:
    """Oracle and invariant suites; nonzero exit on any failure."""
    from .oracle import compare_states, oracle_from_config, reference_step

    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        print(f"[verify] {'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        if not ok:
            failures += 1

    base = _build_config(args)
    small = with_overrides(base, n_cell=(8, 8, 8), prob_lo=(0.0, 0.0, 0.0),
                           prob_hi=(8e-6, 8e-6, 8e-6), ppc=2, u_th=0.05,
                           ranks=(1, 1, 1), steps=10, warmup=0,
                           workload="uniform", virtual_time=False)

    # engine against the brute-force reference
    variant = VariantMatrix.from_codes(small.interp, small.deposit, small.comm)
    world = build_world(small, variant)
    state = oracle_from_config(small)
    for _ in range(small.steps):
        step(world)
        reference_step(state)
    ids, soa = gather_particles(world)
    rep = compare_states(ids, soa, gather_fields(world), world.geom, state,
                         tolerance=1e-12)
    check("oracle equivalence", rep.passed,
          f"(field {rep.max_field_rel:.2e}, particle {rep.max_particle_rel:.2e})")

    # layout invariants under migration
    mig = with_overrides(base, n_cell=(16, 16, 16), prob_lo=(0.0, 0.0, 0.0),
                         prob_hi=(16e-6,) * 3, ppc=4, u_th=0.05,
                         drift=(0.25, 0.0, 0.0), workload="slab",
                         ranks=(2, 2, 2), steps=20, warmup=0,
                         interp="G7", deposit="D3", virtual_time=False)
    world = build_world(mig)
    clean = True
    for _ in range(mig.steps):
        step(world)
        clean &= (layout_violations(world) == 0
                  and multiset_conserved(world)
                  and ownership_violations(world) == 0)
    check("sort-on-write invariants", clean)

    # deterministic repeatability
    r1 = run(with_overrides(mig, steps=5), record_conservation=False)
    r2 = run(with_overrides(mig, steps=5), record_conservation=False)
    check("repeat-run checksum", r1.checksum == r2.checksum)

    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tilepic",
        description="desk-scale particle-in-cell engine with tile-batched "
                    "kernels, sort-on-write layout, and overlap scheduling")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a single variant")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)
    p_abl = sub.add_parser("ablate", help="sweep variant combinations")
    _add_common(p_abl)
    p_abl.set_defaults(func=cmd_ablate)
    p_ver = sub.add_parser("verify", help="oracle + invariant suites")
    _add_common(p_ver)
    p_ver.set_defaults(func=cmd_verify)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
