"""
Run configuration shared by the command-line tools.

A run config is a YAML mapping layered over the shipped defaults
(``data/default_run.yaml``).  Keys not present in the defaults are rejected,
so typos in a file or in a ``--set`` override fail loudly instead of being
ignored.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from . import __version__
from .optimizer import OptimizerOptions
from .propagator import DEFAULT_TOL, FAST_TOL, VERIFY_TOL
from .pulse import TWO_PI
from .spin_model import ConfigError, SpinSystem, default_system_text, load_system_config, system_to_dict

DEFAULT_RUN_RESOURCE = "default_run.yaml"
CONFIG_ENV = "NVPULSE_CONFIG"

# Integrator tolerance used for stand-alone propagations (trajectories,
# multipulse unitaries) under each profile.
PROFILES = {"fast": FAST_TOL, "default": DEFAULT_TOL, "verify": VERIFY_TOL}

# Keys whose value may be any mapping rather than following the defaults' shape.
_FREE_FORM = {("system",)}


def default_run_text() -> str:
    return resources.files("nvpulse.data").joinpath(DEFAULT_RUN_RESOURCE).read_text()


def _merge(base: dict, update: Mapping, path: tuple = ()) -> dict:
    for key, value in update.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"{'.'.join(map(str, here))}: unknown configuration key")
        if isinstance(base[key], dict) and here not in _FREE_FORM:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{'.'.join(here)}: expected a mapping")
            _merge(base[key], value, here)
        else:
            base[key] = copy.deepcopy(value)
    return base


def parse_override(text: str) -> tuple[list[str], Any]:
    """'optimizer.max_iterations=50' -> (['optimizer', 'max_iterations'], 50)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r}: expected key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return key.strip().split("."), value


def _nest(keys: list[str], value) -> dict:
    out: Any = value
    for key in reversed(keys):
        out = {key: out}
    return out


@dataclass(frozen=True)
class RunConfig:
    """Resolved run configuration (defaults + file + overrides)."""

    doc: dict
    base_dir: Path
    source: str = "<defaults>"

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        overrides: Iterable[str] = (),
        profile: str | None = None,
    ) -> "RunConfig":
        doc = yaml.safe_load(default_run_text())
        base_dir = Path.cwd()
        source = "<defaults>"
        if path is not None:
            path = Path(path)
            try:
                user = yaml.safe_load(path.read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse config {path}: {exc}") from None
            if user is not None:
                if not isinstance(user, Mapping):
                    raise ConfigError(f"{path}: run config must be a mapping")
                _merge(doc, user)
            base_dir = path.resolve().parent
            source = str(path)
        for text in overrides:
            keys, value = parse_override(text)
            _merge(doc, _nest(keys, value))
        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError(f"unknown tolerance profile {profile!r}")
            doc["profile"] = profile
        config = cls(doc, base_dir, source)
        config.validate()
        return config

    # -- accessors -------------------------------------------------------

    def section(self, name: str) -> dict:
        return self.doc[name]

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def jobs(self) -> int:
        return int(self.doc["jobs"])

    @property
    def profile(self) -> str:
        return self.doc["profile"]

    @property
    def propagation_tol(self) -> float:
        return PROFILES[self.profile]

    def system(self) -> SpinSystem:
        spec = self.doc["system"]
        if isinstance(spec, Mapping):
            return load_system_config(spec)
        if spec == "default":
            return load_system_config(default_system_text())
        path = Path(spec)
        if not path.is_absolute():
            path = self.base_dir / path
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"system: cannot read {path}: {exc.strerror}") from None
        return load_system_config(text)

    def optimizer_options(self) -> OptimizerOptions:
        o = self.doc["optimizer"]
        fast_tol = float(o["fast_tol"])
        verify_tol = float(o["verify_tol"])
        if self.profile == "fast":
            verify_tol = max(verify_tol, fast_tol)
        try:
            return OptimizerOptions(
                max_iterations=int(o["max_iterations"]),
                grad_inf_tol=float(o["grad_inf_tol"]),
                rel_obj_tol=float(o["rel_obj_tol"]),
                lbfgs_memory=int(o["lbfgs_memory"]),
                armijo=float(o["armijo"]),
                shrink=float(o["shrink"]),
                max_backtracks=int(o["max_backtracks"]),
                amplitude_bound=float(o["amplitude_bound"]),
                frequency_bounds=(0.0, TWO_PI * float(o["max_frequency_ghz"])),
                fast_tol=fast_tol,
                verify_tol=verify_tol,
                precondition=bool(o["precondition"]),
                seed=self.seed,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"optimizer: {exc}") from None

    def resolved(self) -> dict:
        """The config with the system expanded, as hashed and written into provenance."""
        doc = copy.deepcopy(self.doc)
        doc["system"] = system_to_dict(self.system())
        doc.pop("jobs", None)  # parallelism never changes results
        return doc

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def provenance(self, **extra) -> list[str]:
        """Comment lines identifying the configuration behind an artifact."""
        lines = [f"nvpulse {__version__}", f"config_hash {self.config_hash()}", f"seed {self.seed}"]
        lines += [f"{k} {v}" for k, v in extra.items()]
        return lines

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.doc["profile"] not in PROFILES:
            raise ConfigError(f"profile: expected one of {sorted(PROFILES)}")
        self.system()
        self.optimizer_options()
        try:
            if self.jobs < 1:
                raise ConfigError("jobs: must be at least 1")
            if self.seed < 0:
                raise ConfigError("seed: must be non-negative")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"seed/jobs: {exc}") from None
        ramp = _number(self.doc["pulse"], "ramp_fraction", "pulse")
        if not 0 < ramp <= 0.5:
            raise ConfigError("pulse.ramp_fraction: must lie in (0, 0.5]")
        opt = self.doc["optimize"]
        if _number(opt, "duration_ns", "optimize") <= 0:
            raise ConfigError("optimize.duration_ns: must be positive")
        for key in ("n_basis", "restarts"):
            if _integer(opt, key, "optimize") < 1:
                raise ConfigError(f"optimize.{key}: must be at least 1")
        scan = self.doc["scan"]
        durations = scan["durations_ns"]
        counts = scan["basis_counts"]
        if not isinstance(durations, list) or not durations:
            raise ConfigError("scan.durations_ns: must be a non-empty list")
        if not isinstance(counts, list) or not counts:
            raise ConfigError("scan.basis_counts: must be a non-empty list")
        for i, t in enumerate(durations):
            if not isinstance(t, (int, float)) or not math.isfinite(t) or t <= 0:
                raise ConfigError(f"scan.durations_ns[{i}]: must be a positive number")
        for i, n in enumerate(counts):
            if not isinstance(n, int) or n < 1:
                raise ConfigError(f"scan.basis_counts[{i}]: must be a positive integer")
        if _integer(scan, "restarts", "scan") < 1:
            raise ConfigError("scan.restarts: must be at least 1")
        a = self.doc["analysis"]
        if _number(a, "sample_rate", "analysis") <= 0:
            raise ConfigError("analysis.sample_rate: must be positive")
        if _integer(a, "zero_padding", "analysis") < 1:
            raise ConfigError("analysis.zero_padding: must be at least 1")
        if _integer(a, "trajectory_samples", "analysis") < 2:
            raise ConfigError("analysis.trajectory_samples: must be at least 2")
        if _integer(a, "multipulse_pulses", "analysis") < 0:
            raise ConfigError("analysis.multipulse_pulses: must be non-negative")
        if not 0 < _number(a, "gaussian_sigma_fraction", "analysis"):
            raise ConfigError("analysis.gaussian_sigma_fraction: must be positive")


def _number(section: Mapping, key: str, where: str) -> float:
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{where}.{key}: expected a finite number, got {value!r}")
    return float(value)


def _integer(section: Mapping, key: str, where: str) -> int:
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
    return value
