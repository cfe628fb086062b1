"""
Command-line entry point.

    nvpulse optimize    one (T, N) cell: records, best waveform and its spectrum
    nvpulse scan        resumable (T, N) grid: store, manifest and tables
    nvpulse trajectory  basis-state populations under a stored pulse
    nvpulse multipulse  repeated-inversion population trace
    nvpulse psd         spectrum of a stored pulse and of the Gaussian reference
    nvpulse export      rebuild tables from an existing store

Exit status is 0 on success, 2 for configuration errors, 1 for runtime
failures and 130 for an interrupted scan.  Failures also print one JSON line
to stderr: {"error": <kind>, "exit": <code>, "message": <text>}.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    gaussian_pi_reference,
    multipulse_trace,
    psd,
    sensing_state,
    write_table,
)
from .config import CONFIG_ENV, RunConfig
from .ensemble import (
    MANIFEST_NAME,
    STORE_NAME,
    ScanConfig,
    ScanError,
    ScanInterrupted,
    ScanManifest,
    best_per_cell,
    export_components,
    read_store,
    record_line,
    run_scan,
    store_header,
    write_best_table,
    write_component_table,
    write_record_table,
)
from .objective import TARGET_X, ControlProblem
from .optimizer import OptimizationRecord, best_record, multistart
from .propagator import IntegrationError, PropagationRequest, propagate, sample_trajectory, write_trajectory
from .pulse import Envelope, drive_array, sample_times, write_waveform
from .spin_model import ConfigError, SpinSystem

log = logging.getLogger("nvpulse")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_INTERRUPTED = 0, 1, 2, 130


class CommandError(RuntimeError):
    """Runtime failure reported with exit status 1."""


# --- helpers -------------------------------------------------------------


def _tag(record: OptimizationRecord, record_id: int | str) -> str:
    return f"T{record.duration:g}_N{record.n_basis}_r{record_id}"


def _write_text(path: Path, write) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        write(fh)
    return path


def _store_path(path: Path) -> Path:
    return path / STORE_NAME if path.is_dir() else path


def _load_records(path: Path) -> list[OptimizationRecord]:
    store = _store_path(path)
    if not store.exists():
        raise CommandError(f"no record store at {store}")
    records = read_store(store)
    if not records:
        raise CommandError(f"empty store: {store} contains no records")
    return records


def _select(records: list[OptimizationRecord], record_id: str, duration: float | None) -> tuple[int, OptimizationRecord]:
    """Pick a record by position, or the best one (optionally within a duration)."""
    indexed = list(enumerate(records))
    if duration is not None:
        indexed = [(i, r) for i, r in indexed if abs(r.duration - duration) <= 1e-12 * max(1.0, duration)]
        if not indexed:
            raise CommandError(f"no record with duration {duration} ns")
    if record_id == "best":
        best = best_record([r for _, r in indexed])
        return next(i for i, r in indexed if r is best), best
    try:
        k = int(record_id)
    except ValueError:
        raise ConfigError(f"--record must be an integer or 'best', got {record_id!r}") from None
    if not 0 <= k < len(records):
        raise CommandError(f"record {k} out of range (store has {len(records)})")
    return k, records[k]


def _pulse_unitary(system: SpinSystem, record: OptimizationRecord, tol: float) -> np.ndarray:
    env = Envelope.for_duration(record.duration, record.ramp_fraction)
    return propagate(PropagationRequest(system, record.params, env, atol=tol, rtol=tol)).U_final


def _spectrum_columns(waveform: np.ndarray, rate: float, cfg: RunConfig) -> dict:
    a = cfg.section("analysis")
    spec = psd(waveform, rate, zero_padding=int(a["zero_padding"]), window=a["window"])
    return {"f_GHz": spec.frequencies, "psd_G2_per_GHz": spec.density}


def _waveform(record: OptimizationRecord, rate: float) -> tuple[np.ndarray, np.ndarray]:
    env = Envelope.for_duration(record.duration, record.ramp_fraction)
    t = sample_times(record.duration, rate)
    if t.size < 256:  # short pulses: keep the spectrum well sampled
        t = np.linspace(0.0, record.duration, 257)
    return t, drive_array(record.params, env, t)


# --- subcommands ---------------------------------------------------------


def cmd_optimize(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    opt = cfg.section("optimize")
    system = cfg.system()
    problem = ControlProblem(system, float(opt["duration_ns"]), int(opt["n_basis"]), float(cfg.section("pulse")["ramp_fraction"]))
    best, records = multistart(problem, cfg.optimizer_options(), int(opt["restarts"]), cfg.jobs)
    header = cfg.provenance(command="optimize", T_ns=problem.duration, N=problem.n_basis)
    out.mkdir(parents=True, exist_ok=True)
    store = out / STORE_NAME
    with open(store, "w") as fh:
        fh.write(store_header(cfg.config_hash()))
        for r in records:
            fh.write(record_line(r))
    best_id = records.index(best)
    tag = _tag(best, best_id)
    rate = float(cfg.section("analysis")["sample_rate"])
    t, b = _waveform(best, rate)
    _write_text(out / f"waveform_{tag}.tsv", lambda fh: write_waveform(fh, t, b, header))
    _write_text(out / f"psd_{tag}.tsv", lambda fh: write_table(fh, _spectrum_columns(b, (t.size - 1) / best.duration, cfg), header))
    _write_text(out / "records.tsv", lambda fh: write_record_table(fh, records, header))
    summary = {
        "T_ns": best.duration,
        "N": best.n_basis,
        "record_id": best_id,
        "infidelity": best.infidelity,
        "max_amp_G": best.max_amplitude,
        "termination": best.termination,
        "store": str(store),
    }
    print(json.dumps(summary))
    return EXIT_OK


def scan_config(cfg: RunConfig, out: Path) -> ScanConfig:
    scan = cfg.section("scan")
    return ScanConfig(
        durations=scan["durations_ns"],
        basis_counts=scan["basis_counts"],
        restarts=int(scan["restarts"]),
        options=cfg.optimizer_options(),
        system=cfg.system(),
        output=out,
        jobs=cfg.jobs,
        ramp_fraction=float(cfg.section("pulse")["ramp_fraction"]),
    )


def _export_tables(store: Path, out: Path, header: list[str], cells=()) -> list:
    records = read_store(store)
    if not records:
        raise CommandError(f"empty store: {store} contains no records")
    summaries = best_per_cell(records, cells)
    _write_text(out / "best_per_cell.tsv", lambda fh: write_best_table(fh, summaries, header))
    _write_text(out / "records.tsv", lambda fh: write_record_table(fh, records, header))
    _write_text(out / "components.tsv", lambda fh: write_component_table(fh, export_components(records), header))
    return summaries


def cmd_scan(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    config = scan_config(cfg, out)
    try:
        manifest = run_scan(config, stop_after=args.stop_after)
    except (ScanInterrupted, KeyboardInterrupt) as exc:
        _error_line("interrupted", EXIT_INTERRUPTED, str(exc) or "scan interrupted; rerun the same command to resume")
        return EXIT_INTERRUPTED
    header = cfg.provenance(command="scan", scan_hash=manifest.config_hash)
    summaries = _export_tables(out / STORE_NAME, out, header, config.cells())
    failed = [c for c in manifest.cells if c.status == "failed"]
    for s in summaries:
        if s.best is not None:
            print(f"T={s.duration:g} ns N={s.n_basis}: best infidelity {s.best.infidelity:.3e}, max |B_x| {s.best.max_amplitude:.1f} G")
    if failed:
        raise CommandError(f"{len(failed)} cell(s) failed; see {out / MANIFEST_NAME}")
    return EXIT_OK


def cmd_trajectory(args, cfg: RunConfig) -> int:
    records = _load_records(Path(args.store))
    k, record = _select(records, args.record, args.duration)
    system = cfg.system()
    a = cfg.section("analysis")
    tol = cfg.propagation_tol
    psi0 = np.zeros(system.dimension, dtype=complex)
    psi0[system.polarized_index(0)] = 1.0
    env = Envelope.for_duration(record.duration, record.ramp_fraction)
    times = np.linspace(0.0, record.duration, int(a["trajectory_samples"]))
    req = PropagationRequest(system, record.params, env, atol=tol, rtol=tol, trajectory_times=times, initial_state=psi0)
    times, pops = sample_trajectory(req)
    header = cfg.provenance(command="trajectory", record=k, T_ns=record.duration, N=record.n_basis, initial="|0↓↓↓⟩")
    path = Path(args.out) / f"trajectory_{_tag(record, k)}.tsv"
    _write_text(path, lambda fh: write_trajectory(fh, times, pops, system.basis_labels(), float(a["population_threshold"]), header))
    print(path)
    return EXIT_OK


def cmd_multipulse(args, cfg: RunConfig) -> int:
    system = cfg.system()
    n_max = int(cfg.section("analysis")["multipulse_pulses"])
    if args.ideal:
        u = ideal_x_unitary(system)
        tag, duration = "ideal", None
        extra = {"pulse": "ideal subspace X"}
    else:
        records = _load_records(Path(args.store))
        k, record = _select(records, args.record, args.duration)
        u = _pulse_unitary(system, record, cfg.propagation_tol)
        tag, duration = _tag(record, k), record.duration
        extra = {"record": k, "T_ns": record.duration, "N": record.n_basis}
    trace = multipulse_trace(u, sensing_state(system), n_max, duration=duration)
    header = cfg.provenance(command="multipulse", initial="|+↓↓↓⟩", **extra)
    path = Path(args.out) / f"multipulse_{tag}.tsv"
    _write_text(path, lambda fh: write_table(fh, {"pulses": trace.counts, "population": trace.populations}, header))
    print(path)
    return EXIT_OK


def ideal_x_unitary(system: SpinSystem) -> np.ndarray:
    """X on the qubit pair, identity on every other basis state."""
    u = np.eye(system.dimension, dtype=complex)
    idx = [system.polarized_index(0), system.polarized_index(-1)]
    u[np.ix_(idx, idx)] = TARGET_X
    return u


def cmd_psd(args, cfg: RunConfig) -> int:
    records = _load_records(Path(args.store))
    k, record = _select(records, args.record, args.duration)
    a = cfg.section("analysis")
    rate = float(a["sample_rate"])
    t, b = _waveform(record, rate)
    actual_rate = (t.size - 1) / record.duration
    tag = _tag(record, k)
    header = cfg.provenance(command="psd", record=k, T_ns=record.duration, N=record.n_basis)
    out = Path(args.out)
    _write_text(out / f"waveform_{tag}.tsv", lambda fh: write_waveform(fh, t, b, header))
    _write_text(out / f"psd_{tag}.tsv", lambda fh: write_table(fh, _spectrum_columns(b, actual_rate, cfg), header))
    _, ref, pulse = gaussian_pi_reference(
        record.duration, cfg.system(), float(a["gaussian_sigma_fraction"]), samples=t.size
    )
    ref_header = header + [f"gaussian_peak_G {pulse.peak!r}", f"gaussian_sigma_ns {pulse.sigma!r}"]
    _write_text(out / f"waveform_gaussian_T{record.duration:g}.tsv", lambda fh: write_waveform(fh, t, ref, ref_header))
    _write_text(out / f"psd_gaussian_T{record.duration:g}.tsv", lambda fh: write_table(fh, _spectrum_columns(ref, actual_rate, cfg), ref_header))
    print(json.dumps({"record_id": k, "max_amp_G": record.max_amplitude, "gaussian_peak_G": pulse.peak}))
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    source = Path(args.store)
    store = _store_path(source)
    if not store.exists():
        raise CommandError(f"no record store at {store}")
    cells = ()
    manifest = source / MANIFEST_NAME if source.is_dir() else None
    if manifest is not None and manifest.exists():
        cells = [(c.duration, c.n_basis) for c in ScanManifest.read(manifest).cells]
    header = [f"nvpulse {__version__}", f"source {store}", f"store_sha256 {_file_digest(store)}"]
    _export_tables(store, Path(args.out), header, cells)
    return EXIT_OK


def _file_digest(path: Path) -> str:
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# --- argument parsing ----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"run config YAML (default: ${CONFIG_ENV} or the shipped defaults)")
    common.add_argument("--out", default="nvpulse_out", help="output directory")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. optimize.duration_ns=1.0 (repeatable)")
    profile = common.add_mutually_exclusive_group()
    profile.add_argument("--fast", dest="profile", action="store_const", const="fast", help="1e-8 integrator tolerance")
    profile.add_argument("--verify", dest="profile", action="store_const", const="verify", help="1e-12 integrator tolerance")
    common.add_argument("-v", "--verbose", action="count", default=0)

    select = argparse.ArgumentParser(add_help=False)
    select.add_argument("--store", required=True, help="record store file or scan directory")
    select.add_argument("--record", default="best", help="record index in the store, or 'best' (default)")
    select.add_argument("--duration", type=float, help="restrict 'best' to records with this duration (ns)")

    parser = argparse.ArgumentParser(prog="nvpulse", description="NV-center pi-pulse optimal control")
    parser.add_argument("--version", action="version", version=f"nvpulse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("optimize", parents=[common], help="multistart optimization of one (T, N) cell")
    scan = sub.add_parser("scan", parents=[common], help="resumable scan over durations and basis counts")
    scan.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    sub.add_parser("trajectory", parents=[common, select], help="population trajectory of a stored pulse")
    mp = sub.add_parser("multipulse", parents=[common], help="repeated-inversion population trace")
    mp_src = mp.add_mutually_exclusive_group(required=True)
    mp_src.add_argument("--store", help="record store file or scan directory")
    mp_src.add_argument("--ideal", action="store_true", help="use the ideal subspace X gate")
    mp.add_argument("--record", default="best")
    mp.add_argument("--duration", type=float)
    sub.add_parser("psd", parents=[common, select], help="spectrum of a stored pulse and its Gaussian reference")
    export = sub.add_parser("export", parents=[common], help="rebuild tables from an existing store")
    export.add_argument("--store", required=True, help="record store file or scan directory")
    return parser


COMMANDS = {
    "optimize": cmd_optimize,
    "scan": cmd_scan,
    "trajectory": cmd_trajectory,
    "multipulse": cmd_multipulse,
    "psd": cmd_psd,
    "export": cmd_export,
}


def _error_line(kind: str, code: int, message: str) -> None:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)


def load_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    path = args.config or os.environ.get(CONFIG_ENV) or None
    return RunConfig.load(path, overrides, args.profile)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _error_line("config", EXIT_CONFIG, str(exc))
        return EXIT_CONFIG
    except KeyboardInterrupt:
        _error_line("interrupted", EXIT_INTERRUPTED, "interrupted")
        return EXIT_INTERRUPTED
    except (CommandError, ScanError, IntegrationError, OSError, ValueError) as exc:
        _error_line("runtime", EXIT_RUNTIME, str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
