"""
Spin operators and the NV-center Hamiltonian.

The joint Hilbert space is ordered |electron> x |14N> x |13C_1> x |13C_2> ...
with every local basis sorted by descending magnetic quantum number, so the
first local state is m = +s and the last is m = -s.

Units
-----
Frequencies in the configuration (zero-field splitting, quadrupole, site
frequencies, hyperfine tensors) are linear GHz, gyromagnetic ratios are GHz/G,
fields are Gauss and times are nanoseconds.  ``build_drift`` and
``build_drive_operator`` return angular matrices (multiplied by 2*pi) so that
propagators evolve as exp(-i H t) with t in ns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, reduce
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

TWO_PI = 2.0 * math.pi
SUPPORTED_SPINS = (0.5, 1.0)


class ConfigError(ValueError):
    """Raised when a system or run configuration is malformed."""


def spin_operators(s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (Sx, Sy, Sz) for spin ``s`` in the descending-m Sz eigenbasis."""
    s = float(s)
    if s not in SUPPORTED_SPINS:
        raise ValueError(f"unsupported spin quantum number {s}; expected one of {SUPPORTED_SPINS}")
    m = np.arange(s, -s - 1.0, -1.0)
    dim = m.size
    s_plus = np.zeros((dim, dim))
    for k in range(1, dim):
        s_plus[k - 1, k] = math.sqrt(s * (s + 1.0) - m[k] * (m[k] + 1.0))
    sx = (s_plus + s_plus.T) / 2.0
    sy = (s_plus - s_plus.T) / 2.0j
    sz = np.diag(m)
    return sx.astype(complex), sy, sz.astype(complex)


@dataclass(frozen=True)
class SpinSite:
    label: str
    species: str
    spin: float
    gyromagnetic_ratio: float
    frequency: float = 0.0
    quadrupole: float = 0.0

    def __post_init__(self):
        if float(self.spin) not in SUPPORTED_SPINS:
            raise ValueError(f"site {self.label!r}: spin must be one of {SUPPORTED_SPINS}, got {self.spin}")
        for name in ("gyromagnetic_ratio", "frequency", "quadrupole"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"site {self.label!r}: {name} must be finite")
        if self.gyromagnetic_ratio == 0.0:
            raise ValueError(f"site {self.label!r}: gyromagnetic ratio must be nonzero")

    @property
    def dim(self) -> int:
        return int(round(2 * self.spin + 1))


@dataclass(frozen=True)
class HyperfineTensor:
    """Electron-nucleus coupling S . A . I, with A indexed (x, y, z) x (x, y, z) in GHz."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"hyperfine tensor must be 3x3, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("hyperfine tensor entries must be finite")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class SpinSystem:
    """Electron spin plus nuclear sites in a static field along the NV axis.

    ``hyperfine`` maps a nuclear site index to its coupling tensor with the
    electron (site 0).  Matrices derived from the system are cached and
    read-only.
    """

    sites: tuple[SpinSite, ...]
    zero_field: float
    static_field: float
    hyperfine: Mapping[int, HyperfineTensor] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "hyperfine", dict(sorted(self.hyperfine.items())))
        if not self.sites or self.sites[0].species != "electron":
            raise ValueError("site 0 must be the electron spin")
        if any(site.species == "electron" for site in self.sites[1:]):
            raise ValueError("only one electron site is supported")
        if not (math.isfinite(self.zero_field) and math.isfinite(self.static_field)):
            raise ValueError("zero-field splitting and static field must be finite")
        for idx in self.hyperfine:
            if not 1 <= idx < len(self.sites):
                raise ValueError(f"hyperfine entry references invalid nuclear site index {idx}")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(site.dim for site in self.sites)

    @property
    def dimension(self) -> int:
        return math.prod(self.dims)

    @cached_property
    def _site_operators(self) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]:
        ops = []
        for i, site in enumerate(self.sites):
            ops.append(tuple(_frozen(embed(op, i, self)) for op in spin_operators(site.spin)))
        return tuple(ops)

    def operators(self, site: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Full-space (Sx, Sy, Sz) for ``site``."""
        return self._site_operators[site]

    @cached_property
    def drift(self) -> np.ndarray:
        return _frozen(build_drift(self))

    @cached_property
    def drive_operator(self) -> np.ndarray:
        return _frozen(build_drive_operator(self))

    def basis_index(self, ms: Sequence[float]) -> int:
        """Index of the product state with magnetic quantum numbers ``ms``."""
        if len(ms) != len(self.sites):
            raise ValueError(f"expected {len(self.sites)} quantum numbers, got {len(ms)}")
        index = 0
        for site, m in zip(self.sites, ms):
            local = int(round(site.spin - float(m)))
            if not 0 <= local < site.dim:
                raise ValueError(f"m={m} is out of range for site {site.label!r}")
            index = index * site.dim + local
        return index

    def polarized_index(self, electron_m: float) -> int:
        """Product state with the given electron m and every nucleus fully down."""
        return self.basis_index([electron_m] + [-site.spin for site in self.sites[1:]])

    def basis_labels(self) -> list[str]:
        """Ket labels such as ``|0↓↓↓⟩``, ordered like the basis."""
        local = []
        for site in self.sites:
            names = []
            for k in range(site.dim):
                m = site.spin - k
                names.append("↑" if m > 0 else ("↓" if m < 0 else "0"))
            local.append(names)
        labels = [""]
        for names in local:
            labels = [prefix + name for prefix in labels for name in names]
        return [f"|{label}⟩" for label in labels]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def embed(op: np.ndarray, site: int, system: SpinSystem) -> np.ndarray:
    """Kronecker-embed a local operator acting on ``site`` into the joint space."""
    dims = system.dims
    if not 0 <= site < len(dims):
        raise ValueError(f"site index {site} out of range for {len(dims)} sites")
    op = np.asarray(op)
    if op.shape != (dims[site], dims[site]):
        raise ValueError(f"operator shape {op.shape} does not match site {site} dimension {dims[site]}")
    factors = [np.eye(d) for d in dims]
    factors[site] = op
    return reduce(np.kron, factors)


def build_drift(system: SpinSystem, angular: bool = True) -> np.ndarray:
    """Static Hamiltonian: zero-field, quadrupole, site, hyperfine and B_z Zeeman terms."""
    sx, sy, sz = system.operators(0)
    electron = system.sites[0]
    h = system.zero_field * (sz @ sz) + system.static_field * electron.gyromagnetic_ratio * sz
    s_vec = (sx, sy, sz)
    for j, site in enumerate(system.sites[1:], start=1):
        ix, iy, iz = system.operators(j)
        if site.quadrupole:
            h = h + site.quadrupole * (iz @ iz)
        if site.frequency:
            h = h + site.frequency * iz
        h = h + system.static_field * site.gyromagnetic_ratio * iz
        tensor = system.hyperfine.get(j)
        if tensor is not None:
            i_vec = (ix, iy, iz)
            for a in range(3):
                for b in range(3):
                    if tensor.matrix[a, b]:
                        h = h + tensor.matrix[a, b] * (s_vec[a] @ i_vec[b])
    if np.abs(h - h.conj().T).max() > 1e-12:
        raise ValueError("drift Hamiltonian is not Hermitian")
    h = (h + h.conj().T) / 2.0
    return TWO_PI * h if angular else h


def build_drive_operator(system: SpinSystem, angular: bool = True) -> np.ndarray:
    """Coupling of a transverse field B_x to every spin, per Gauss."""
    h = sum(site.gyromagnetic_ratio * system.operators(j)[0] for j, site in enumerate(system.sites))
    return TWO_PI * h if angular else h


def transition_frequencies(system: SpinSystem) -> tuple[float, float]:
    """Linear frequencies (GHz) of |0> -> |-1> and |0> -> |+1> with nuclei polarized down.

    Eigenstates are matched to the product states of largest overlap, which
    follows them adiabatically as long as the hyperfine mixing stays weak.
    """
    energies, vectors = np.linalg.eigh(system.drift)
    weights = np.abs(vectors) ** 2

    def energy_of(m: float) -> float:
        return energies[np.argmax(weights[system.polarized_index(m)])]

    e0, em1, ep1 = energy_of(0), energy_of(-1), energy_of(1)
    return abs(em1 - e0) / TWO_PI, abs(ep1 - e0) / TWO_PI


# --- configuration -------------------------------------------------------

_SCHEMA_RESOURCE = "system_config.schema.json"
DEFAULT_SYSTEM_RESOURCE = "default_system.yaml"


def system_schema() -> dict:
    import json

    return json.loads(resources.files("nvpulse.data").joinpath(_SCHEMA_RESOURCE).read_text())


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _finite(value, where: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{where}: value must be finite, got {value}")
    return value


def system_from_dict(doc: Mapping[str, Any]) -> SpinSystem:
    """Validate a parsed configuration mapping and build the system."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(system_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"{_path(err.absolute_path)}: {err.message}")

    sites = []
    for i, entry in enumerate(doc["sites"]):
        where = f"sites[{i}]"
        try:
            sites.append(
                SpinSite(
                    label=entry["label"],
                    species=entry["species"],
                    spin=float(entry["spin"]),
                    gyromagnetic_ratio=_finite(entry["gamma"], f"{where}.gamma"),
                    frequency=_finite(entry.get("frequency", 0.0), f"{where}.frequency"),
                    quadrupole=_finite(entry.get("quadrupole", 0.0), f"{where}.quadrupole"),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if sites[0].species != "electron":
        raise ConfigError("sites[0]: the first site must be the electron spin (species: electron)")

    hyperfine = {}
    for k, entry in enumerate(doc.get("hyperfine", [])):
        idx = entry["site"]
        name = sites[idx].label if 0 <= idx < len(sites) else "?"
        where = f"hyperfine[{k}] (site {idx} {name!r})"
        if not 1 <= idx < len(sites):
            raise ConfigError(f"{where}: site index must refer to a nucleus (1..{len(sites) - 1})")
        if idx in hyperfine:
            raise ConfigError(f"{where}: duplicate hyperfine entry")
        tensor = np.array(entry["tensor"], dtype=float)
        if tensor.shape == (9,):
            tensor = tensor.reshape(3, 3)
        if tensor.shape != (3, 3):
            raise ConfigError(f"{where}: tensor must have 9 entries or be 3x3, got shape {tensor.shape}")
        if not np.all(np.isfinite(tensor)):
            raise ConfigError(f"{where}: tensor entries must be finite")
        hyperfine[idx] = HyperfineTensor(tensor)

    try:
        return SpinSystem(
            sites=tuple(sites),
            zero_field=_finite(doc["zero_field"], "zero_field"),
            static_field=_finite(doc["static_field_gauss"], "static_field_gauss"),
            hyperfine=hyperfine,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_system_config(source: str | Mapping[str, Any]) -> SpinSystem:
    """Parse a YAML/JSON system configuration (text or already-parsed mapping)."""
    if isinstance(source, Mapping):
        return system_from_dict(source)
    try:
        doc = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse system config: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ConfigError("<root>: system config must be a mapping")
    return system_from_dict(doc)


def system_to_dict(system: SpinSystem) -> dict:
    sites = []
    for site in system.sites:
        entry = {"label": site.label, "species": site.species, "spin": site.spin, "gamma": site.gyromagnetic_ratio}
        if site.frequency:
            entry["frequency"] = site.frequency
        if site.quadrupole:
            entry["quadrupole"] = site.quadrupole
        sites.append(entry)
    return {
        "zero_field": system.zero_field,
        "static_field_gauss": system.static_field,
        "sites": sites,
        "hyperfine": [
            {"site": idx, "tensor": [float(x) for x in tensor.matrix.ravel()]}
            for idx, tensor in system.hyperfine.items()
        ],
    }


def serialize_system(system: SpinSystem) -> str:
    return yaml.safe_dump(system_to_dict(system), sort_keys=False)


def default_system_text() -> str:
    return resources.files("nvpulse.data").joinpath(DEFAULT_SYSTEM_RESOURCE).read_text()


def default_system(static_field: float | None = None) -> SpinSystem:
    """The shipped electron + 14N + two 13C configuration (36 dimensions)."""
    doc = yaml.safe_load(default_system_text())
    if static_field is not None:
        doc["static_field_gauss"] = static_field
    return system_from_dict(doc)


def electron_only(static_field: float = 850.0, zero_field: float = 2.870, gamma: float = 2.8024e-3) -> SpinSystem:
    return SpinSystem(
        sites=(SpinSite("e", "electron", 1.0, gamma),),
        zero_field=zero_field,
        static_field=static_field,
    )
