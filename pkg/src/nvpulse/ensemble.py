"""
Resumable scans over pulse duration T and basis count N.

A scan directory holds two files:

``records.jsonl``
    Append-only store, one optimization record per line, after a short block
    of '#' provenance lines.
``manifest.json``
    Per-cell status and the byte range each finished cell occupies in the
    store.  It is replaced atomically after every cell, so a crash leaves
    either the old or the new manifest, never a torn one.

On resume the store is truncated to the end of the last committed cell and
every cell not marked done is run again from its derived seeds.  The final
store is therefore the same whatever the interruption pattern.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from . import __version__
from .objective import ControlProblem
from .optimizer import OptimizationRecord, OptimizerOptions, best_record, multistart
from .pulse import TWO_PI
from .spin_model import SpinSystem, system_to_dict

log = logging.getLogger(__name__)

STORE_NAME = "records.jsonl"
MANIFEST_NAME = "manifest.json"
CELL_STATES = ("pending", "running", "done", "failed")
TABLE_COLUMNS = ("T_ns", "N", "seed", "infidelity", "max_amp_G", "termination")


class ScanError(RuntimeError):
    pass


class ScanInterrupted(ScanError):
    """Raised when a scan stops early; the manifest on disk is resumable."""


@dataclass(frozen=True)
class ScanConfig:
    durations: tuple[float, ...]
    basis_counts: tuple[int, ...]
    restarts: int
    options: OptimizerOptions
    system: SpinSystem
    output: Path
    jobs: int = 1
    ramp_fraction: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "durations", tuple(float(t) for t in self.durations))
        object.__setattr__(self, "basis_counts", tuple(int(n) for n in self.basis_counts))
        object.__setattr__(self, "output", Path(self.output))
        if not self.durations or not self.basis_counts:
            raise ValueError("durations and basis_counts must be non-empty")
        if any(not (math.isfinite(t) and t > 0) for t in self.durations):
            raise ValueError("durations must be positive")
        if any(n < 1 for n in self.basis_counts):
            raise ValueError("basis counts must be at least 1")
        if self.restarts < 1 or self.jobs < 1:
            raise ValueError("restarts and jobs must be at least 1")

    def cells(self) -> list[tuple[float, int]]:
        return [(t, n) for t in self.durations for n in self.basis_counts]

    def identity(self) -> dict:
        """Everything that determines the record set (parallelism excluded)."""
        opts = asdict(self.options)
        opts["frequency_bounds"] = list(opts["frequency_bounds"])
        return {
            "durations": list(self.durations),
            "basis_counts": list(self.basis_counts),
            "restarts": self.restarts,
            "ramp_fraction": self.ramp_fraction,
            "options": opts,
            "system": system_to_dict(self.system),
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def cell_key(duration: float, n_basis: int) -> str:
    return f"T={float(duration)!r}|N={int(n_basis)}"


@dataclass
class CellStatus:
    duration: float
    n_basis: int
    status: str = "pending"
    start: int = 0  # byte offsets of this cell's records in the store
    end: int = 0
    records: int = 0
    error: str = ""


@dataclass
class ScanManifest:
    config_hash: str
    cells: list[CellStatus]
    store: str = STORE_NAME
    header_end: int = 0
    version: str = __version__

    def cell(self, duration: float, n_basis: int) -> CellStatus:
        key = cell_key(duration, n_basis)
        for c in self.cells:
            if cell_key(c.duration, c.n_basis) == key:
                return c
        raise KeyError(key)

    @property
    def committed_offset(self) -> int:
        ends = [c.end for c in self.cells if c.status in ("done", "failed")]
        return max(ends, default=self.header_end)

    @property
    def complete(self) -> bool:
        return all(c.status in ("done", "failed") for c in self.cells)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScanManifest":
        cells = [CellStatus(**c) for c in doc["cells"]]
        for c in cells:
            if c.status not in CELL_STATES:
                raise ScanError(f"manifest: unknown cell status {c.status!r}")
        return cls(doc["config_hash"], cells, doc.get("store", STORE_NAME), doc.get("header_end", 0), doc.get("version", ""))

    def write(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def read(cls, path: Path) -> "ScanManifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ScanError(f"cannot read manifest {path}: {exc}") from None


# --- record store ----------------------------------------------------------


def record_line(record: OptimizationRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def store_header(config_hash: str) -> str:
    return f"# nvpulse {__version__} record store\n# config_hash {config_hash}\n"


def read_store(path: str | Path) -> list[OptimizationRecord]:
    """All records in a store, in file order.  Comment lines are skipped."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                records.append(OptimizationRecord.from_dict(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                raise ScanError(f"{path}:{lineno}: malformed record ({exc})") from None
    return records


def _open_store(config: ScanConfig) -> tuple[Path, Path, ScanManifest]:
    """Create or validate the scan directory; fail before any compute if unwritable."""
    out = config.output
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ScanError(f"cannot create output directory {out}: {exc.strerror}") from None
    store, manifest_path = out / STORE_NAME, out / MANIFEST_NAME
    if not os.access(out, os.W_OK) or (store.exists() and not os.access(store, os.W_OK)):
        raise ScanError(f"output {out} is not writable")
    digest = config.config_hash()

    if manifest_path.exists():
        manifest = ScanManifest.read(manifest_path)
        if manifest.config_hash != digest:
            raise ScanError(
                f"{manifest_path} belongs to a different configuration "
                f"(hash {manifest.config_hash}, current {digest}); use a fresh output directory"
            )
        expected = [cell_key(t, n) for t, n in config.cells()]
        if [cell_key(c.duration, c.n_basis) for c in manifest.cells] != expected:
            raise ScanError(f"{manifest_path}: cell list does not match the configuration")
        if not store.exists() or store.stat().st_size < manifest.committed_offset:
            raise ScanError(f"{store} is shorter than the manifest records; the store was modified")
        # drop any records appended after the last committed cell
        with open(store, "r+b") as fh:
            fh.truncate(manifest.committed_offset)
        for c in manifest.cells:
            if c.status == "running":
                c.status, c.start, c.end, c.records = "pending", 0, 0, 0
        return store, manifest_path, manifest

    header = store_header(digest).encode()
    with open(store, "wb") as fh:
        fh.write(header)
    manifest = ScanManifest(digest, [CellStatus(t, n) for t, n in config.cells()], header_end=len(header))
    manifest.write(manifest_path)
    return store, manifest_path, manifest


def run_scan(config: ScanConfig, stop_after: int | None = None) -> ScanManifest:
    """Run (or resume) every cell of the scan.

    Cells run in grid order; restarts inside a cell run on up to ``jobs``
    processes.  ``stop_after`` ends the call with :class:`ScanInterrupted`
    after that many cells have been committed in this invocation, which is how
    interruption is exercised in tests.
    """
    store, manifest_path, manifest = _open_store(config)
    finished = 0
    for cell in manifest.cells:
        if cell.status in ("done", "failed"):
            continue
        if stop_after is not None and finished >= stop_after:
            raise ScanInterrupted(f"scan stopped after {finished} cells; rerun to resume")
        cell.status = "running"
        manifest.write(manifest_path)
        start = manifest.committed_offset
        try:
            problem = ControlProblem(config.system, cell.duration, cell.n_basis, config.ramp_fraction)
            _, records = multistart(problem, config.options, config.restarts, config.jobs)
        except Exception as exc:  # a broken cell must not abort the scan
            log.warning("cell %s failed: %s", cell_key(cell.duration, cell.n_basis), exc)
            cell.status, cell.start, cell.end, cell.records = "failed", start, start, 0
            cell.error = f"{type(exc).__name__}: {exc}"
            manifest.write(manifest_path)
            finished += 1
            continue
        payload = "".join(record_line(r) for r in records).encode()
        with open(store, "r+b") as fh:
            fh.seek(start)
            fh.write(payload)
            fh.truncate()
            fh.flush()
            os.fsync(fh.fileno())
        cell.status, cell.start, cell.end, cell.records, cell.error = "done", start, start + len(payload), len(records), ""
        manifest.write(manifest_path)
        finished += 1
        log.info("cell %s done (%d records)", cell_key(cell.duration, cell.n_basis), len(records))
    return manifest


# --- tables --------------------------------------------------------------


@dataclass(frozen=True)
class CellSummary:
    duration: float
    n_basis: int
    best: OptimizationRecord | None
    count: int


def group_by_cell(records: Iterable[OptimizationRecord]) -> dict[tuple[float, int], list[OptimizationRecord]]:
    cells: dict[tuple[float, int], list[OptimizationRecord]] = {}
    for r in records:
        cells.setdefault((float(r.duration), int(r.n_basis)), []).append(r)
    return cells


def best_per_cell(
    records: Sequence[OptimizationRecord],
    cells: Sequence[tuple[float, int]] = (),
) -> list[CellSummary]:
    """Best record per (T, N), sorted by T then N.

    ``cells`` lists cells expected to be present; those without records appear
    with ``best=None`` so the table can flag them.
    """
    if not records and not cells:
        raise ScanError("empty store")
    grouped = group_by_cell(records)
    keys = set(grouped) | {(float(t), int(n)) for t, n in cells}
    out = []
    for key in sorted(keys):
        group = grouped.get(key, [])
        if not group:
            log.warning("cell T=%s N=%s has no records", *key)
        out.append(CellSummary(key[0], key[1], best_record(group) if group else None, len(group)))
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(stream: TextIO, header: Sequence[str], names: Sequence[str], rows: Iterable[Sequence]) -> None:
    for line in header:
        stream.write(f"# {line}\n")
    stream.write("\t".join(names) + "\n")
    for row in rows:
        stream.write("\t".join(_fmt(v) for v in row) + "\n")


def _alpha_names(width: int) -> list[str]:
    return [f"alpha_{k}" for k in range(width)]


def write_record_table(stream: TextIO, records: Sequence[OptimizationRecord], header: Sequence[str] = ()) -> None:
    """Every record as a row: T_ns, N, seed, infidelity, max_amp_G, termination, alpha_0 ...

    Rows with fewer parameters than the widest record are padded with empty
    fields.
    """
    width = max((len(r.alpha) for r in records), default=0)
    rows = []
    for r in records:
        alpha = list(r.alpha) + [""] * (width - len(r.alpha))
        rows.append([r.duration, r.n_basis, r.seed, r.infidelity, r.max_amplitude, r.termination, *alpha])
    _write_rows(stream, header, [*TABLE_COLUMNS, *_alpha_names(width)], rows)


def write_best_table(stream: TextIO, summaries: Sequence[CellSummary], header: Sequence[str] = ()) -> None:
    """Best-per-cell table with the same columns as :func:`write_record_table`.

    Cells without records get a row with termination ``no_records``.
    """
    width = max((len(s.best.alpha) for s in summaries if s.best), default=0)
    rows = []
    for s in summaries:
        if s.best is None:
            rows.append([s.duration, s.n_basis, "", "", "", "no_records", *[""] * width])
            continue
        r = s.best
        alpha = list(r.alpha) + [""] * (width - len(r.alpha))
        rows.append([r.duration, r.n_basis, r.seed, r.infidelity, r.max_amplitude, r.termination, *alpha])
    _write_rows(stream, header, [*TABLE_COLUMNS, *_alpha_names(width)], rows)


@dataclass(frozen=True)
class ComponentRow:
    duration: float
    n_basis: int
    record_id: int
    best: bool
    component: int
    amplitude: float  # G
    angular_frequency: float  # rad/ns
    phase: float

    @property
    def frequency_ghz(self) -> float:
        return self.angular_frequency / TWO_PI


def export_components(records: Sequence[OptimizationRecord]) -> list[ComponentRow]:
    """One row per sinusoidal component of every record.

    ``record_id`` is the record's position in the store; ``best`` marks the
    components of each cell's best record.
    """
    if not records:
        raise ScanError("empty store")
    best_ids = set()
    for group in group_by_cell(records).values():
        best = best_record(group)
        best_ids.add(next(i for i, r in enumerate(records) if r is best))
    rows = []
    for i, r in enumerate(records):
        p = r.params
        for k in range(p.n_basis):
            rows.append(
                ComponentRow(
                    r.duration, r.n_basis, i, i in best_ids, k,
                    float(p.amplitudes[k]), float(p.frequencies[k]), float(p.phases[k]),
                )
            )
    return rows


COMPONENT_COLUMNS = ("T_ns", "N", "record_id", "best", "component", "a_G", "omega_rad_per_ns", "f_GHz", "phi_rad")


def write_component_table(stream: TextIO, rows: Sequence[ComponentRow], header: Sequence[str] = ()) -> None:
    _write_rows(
        stream,
        header,
        COMPONENT_COLUMNS,
        (
            (r.duration, r.n_basis, r.record_id, r.best, r.component, r.amplitude, r.angular_frequency, r.frequency_ghz, r.phase)
            for r in rows
        ),
    )
