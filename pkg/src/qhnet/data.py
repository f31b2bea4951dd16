"""Dataset schema, JSON-lines persistence, splitting, and a teacher-student
synthetic data generator.

A dataset file holds one JSON object per line: a manifest line first
(`{"name":..., "convention":"qhnet-v1", "seed":..., "counts":{...}}`),
then one conformation per line with fields `atoms`, `positions` (N x 3,
Bohr), `hamiltonian` (N_orb x N_orb, Hartree) and optional `overlap`.
All floats are written with 17 significant digits, which round-trips
double precision exactly.

The convention tag identifies this package's basis ordering (shells
1s, 2s, 3s, 2p, 3p, 3d per atom, m = -l..+l inside each shell); files
tagged with any other convention are refused at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import hamiltonian
from .errors import ConfigurationError, DataError, DegenerateGeometryError
from .nn import SUPPORTED_ELEMENTS, ModelConfig, QHNet
from .spectra import cholesky
from .errors import NotPositiveDefiniteError

CONVENTION = "qhnet-v1"
MIN_PAIR_DISTANCE = 1.0  # Bohr
JITTER_SIGMA = 0.1  # Bohr
MAX_JITTER_ATTEMPTS = 1000

_ANGSTROM = 1.8897261254578281  # Bohr per Angstrom

def grid_snap(x: np.ndarray) -> np.ndarray:
    """Quantize coordinates to multiples of 2^-32 Bohr.

    Template positions and rigid translations drawn on this grid add
    exactly in float64 (sums stay well inside the 53-bit mantissa), so
    translating a template changes no position difference bitwise and the
    model output is bit-identical.
    """
    return np.round(np.asarray(x, dtype=np.float64) * 2.0**32) / 2.0**32


# template geometries in Bohr; synthetic stand-ins with the element
# compositions (and hence orbital counts) of the four reference molecules
_RAW_TEMPLATES: dict[str, tuple[tuple[int, ...], np.ndarray]] = {
    "water": (
        (8, 1, 1),
        _ANGSTROM
        * np.array(
            [
                [0.0000, 0.0000, 0.0000],
                [0.9584, 0.0000, 0.0000],
                [-0.2399, 0.9281, 0.0000],
            ]
        ),
    ),
    "ethanol": (
        (6, 6, 8, 1, 1, 1, 1, 1, 1),
        _ANGSTROM
        * np.array(
            [
                [-0.888, 0.167, 0.000],
                [0.464, -0.505, 0.000],
                [1.446, 0.474, 0.000],
                [-1.703, -0.560, 0.000],
                [-0.976, 0.792, 0.890],
                [-0.976, 0.792, -0.890],
                [0.553, -1.133, 0.890],
                [0.553, -1.133, -0.890],
                [2.284, 0.020, 0.000],
            ]
        ),
    ),
    "malondialdehyde": (
        (6, 6, 6, 8, 8, 1, 1, 1, 1),
        _ANGSTROM
        * np.array(
            [
                [-1.212, 0.241, 0.000],
                [0.000, -0.530, 0.000],
                [1.212, 0.241, 0.000],
                [-2.343, -0.217, 0.000],
                [2.343, -0.217, 0.000],
                [-1.094, 1.322, 0.000],
                [0.000, -1.180, 0.885],
                [0.000, -1.180, -0.885],
                [1.094, 1.322, 0.000],
            ]
        ),
    ),
    "uracil": (
        (7, 6, 7, 6, 6, 6, 8, 8, 1, 1, 1, 1),
        _ANGSTROM
        * np.array(
            [
                [0.000, 1.390, 0.000],
                [-1.204, 0.695, 0.000],
                [-1.204, -0.695, 0.000],
                [0.000, -1.390, 0.000],
                [1.204, -0.695, 0.000],
                [1.204, 0.695, 0.000],
                [-2.261, 1.305, 0.000],
                [0.000, -2.610, 0.000],
                [0.000, 2.400, 0.000],
                [-2.078, -1.200, 0.000],
                [2.140, -1.235, 0.000],
                [2.140, 1.235, 0.000],
            ]
        ),
    ),
}

TEMPLATES: dict[str, tuple[tuple[int, ...], np.ndarray]] = {
    name: (atoms, grid_snap(pos)) for name, (atoms, pos) in _RAW_TEMPLATES.items()
}


@dataclass
class Conformation:
    atoms: tuple[int, ...]
    positions: np.ndarray  # (N, 3) Bohr
    hamiltonian: np.ndarray  # (N_orb, N_orb) Hartree
    overlap: np.ndarray | None = None  # identity when absent


@dataclass
class DatasetManifest:
    name: str
    convention: str = CONVENTION
    seed: int = 0
    counts: dict[str, int] = field(default_factory=dict)


def validate_conformation(conf: Conformation, index: int | None = None) -> None:
    """Check all Conformation invariants; raises DataError with the record
    index on the first violation."""
    where = "" if index is None else f" (record {index})"
    for z in conf.atoms:
        if z not in SUPPORTED_ELEMENTS:
            raise DataError(f"unsupported element Z={z}{where}")
    pos = np.asarray(conf.positions, dtype=np.float64)
    n = len(conf.atoms)
    if pos.shape != (n, 3) or not np.all(np.isfinite(pos)):
        raise DataError(f"positions must be finite ({n}, 3){where}")
    n_orb = hamiltonian.n_orbitals(list(conf.atoms))
    h = np.asarray(conf.hamiltonian, dtype=np.float64)
    if h.shape != (n_orb, n_orb):
        raise DataError(
            f"hamiltonian shape {h.shape} does not match orbital count {n_orb}{where}"
        )
    if not np.all(np.isfinite(h)):
        raise DataError(f"non-finite hamiltonian entries{where}")
    asym = np.max(np.abs(h - h.T)) if n_orb else 0.0
    if asym > 1e-8:
        raise DataError(f"hamiltonian asymmetry {asym:.3e} exceeds 1e-8{where}")
    if conf.overlap is not None:
        s = np.asarray(conf.overlap, dtype=np.float64)
        if s.shape != (n_orb, n_orb) or not np.all(np.isfinite(s)):
            raise DataError(f"overlap shape/finiteness invalid{where}")
        if np.max(np.abs(s - s.T)) > 1e-8:
            raise DataError(f"overlap not symmetric{where}")
        try:
            cholesky(0.5 * (s + s.T))
        except NotPositiveDefiniteError:
            raise DataError(f"overlap not positive definite{where}")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_matrix(m: np.ndarray) -> str:
    rows = ("[" + ",".join(_fmt(v) for v in row) + "]" for row in m)
    return "[" + ",".join(rows) + "]"


def _conformation_line(conf: Conformation) -> str:
    parts = [
        '"atoms":[' + ",".join(str(int(z)) for z in conf.atoms) + "]",
        '"positions":' + _fmt_matrix(np.asarray(conf.positions)),
        '"hamiltonian":' + _fmt_matrix(np.asarray(conf.hamiltonian)),
    ]
    if conf.overlap is not None:
        parts.append('"overlap":' + _fmt_matrix(np.asarray(conf.overlap)))
    return "{" + ",".join(parts) + "}"


def save_dataset(path, conformations: list[Conformation], manifest: DatasetManifest) -> None:
    for k, conf in enumerate(conformations):
        validate_conformation(conf, k)
    head = {
        "name": manifest.name,
        "convention": manifest.convention,
        "seed": manifest.seed,
        "counts": manifest.counts,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for conf in conformations:
            fh.write(_conformation_line(conf) + "\n")


def load_dataset(path) -> tuple[list[Conformation], DatasetManifest]:
    """Parse, convention-check, and invariant-check a dataset file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty dataset file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: bad manifest line: {e}")
    for key in ("name", "convention", "seed", "counts"):
        if key not in head:
            raise DataError(f"{path}: manifest missing field {key!r}")
    if head["convention"] != CONVENTION:
        raise DataError(
            f"{path}: convention {head['convention']!r} is not {CONVENTION!r}; "
            "matrices must be permuted into this package's shell ordering"
        )
    manifest = DatasetManifest(
        name=head["name"],
        convention=head["convention"],
        seed=int(head["seed"]),
        counts=dict(head["counts"]),
    )
    out = []
    for k, line in enumerate(lines[1:]):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: record {k}: bad JSON: {e}")
        try:
            conf = Conformation(
                atoms=tuple(int(z) for z in rec["atoms"]),
                positions=np.array(rec["positions"], dtype=np.float64),
                hamiltonian=np.array(rec["hamiltonian"], dtype=np.float64),
                overlap=(
                    np.array(rec["overlap"], dtype=np.float64)
                    if "overlap" in rec
                    else None
                ),
            )
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}: record {k}: {e}")
        validate_conformation(conf, k)
        out.append(conf)
    total = sum(manifest.counts.values()) if manifest.counts else len(out)
    if manifest.counts and total != len(out):
        raise DataError(
            f"{path}: manifest counts sum to {total} but file has {len(out)} records"
        )
    return out, manifest


def min_pair_distance(positions: np.ndarray) -> float:
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        return np.inf
    d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
    return float(np.min(d[~np.eye(n, dtype=bool)]))


def jitter_positions(
    base: np.ndarray, rng: np.random.Generator, sigma: float = JITTER_SIGMA
) -> np.ndarray:
    """Gaussian-perturbed copy of `base`, resampled until no pair is closer
    than MIN_PAIR_DISTANCE; raises DegenerateGeometryError after
    MAX_JITTER_ATTEMPTS rejections."""
    for _ in range(MAX_JITTER_ATTEMPTS):
        pos = base + sigma * rng.standard_normal(base.shape)
        if min_pair_distance(pos) >= MIN_PAIR_DISTANCE:
            return pos
    raise DegenerateGeometryError(
        f"could not draw a geometry with pair distances >= {MIN_PAIR_DISTANCE} "
        f"Bohr in {MAX_JITTER_ATTEMPTS} attempts"
    )


def teacher_generate(
    config: ModelConfig,
    seed: int,
    n_samples: int,
    template: str,
    name: str | None = None,
) -> tuple[list[Conformation], DatasetManifest]:
    """Label jittered template geometries with a frozen randomly initialized
    model.  Labels are symmetrized, carry identity overlap (omitted in the
    record), and inherit the model's exact rigid-motion equivariance."""
    if template not in TEMPLATES:
        raise ConfigurationError(
            f"unknown template {template!r}; choose from {sorted(TEMPLATES)}"
        )
    atoms, base = TEMPLATES[template]
    teacher = QHNet(config)
    store = teacher.init_params(seed=seed)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        pos = jitter_positions(base, rng)
        h = teacher.predict_hamiltonian(store, list(atoms), pos, symmetrize=True)
        out.append(Conformation(atoms=atoms, positions=pos, hamiltonian=h))
    manifest = DatasetManifest(
        name=name or f"teacher-{template}",
        seed=seed,
        counts={"all": n_samples},
    )
    return out, manifest


def split(
    n_records: int, train_n: int, val_n: int, test_n: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic disjoint index sets drawn from a seeded shuffle."""
    if train_n + val_n + test_n > n_records:
        raise ConfigurationError(
            f"split sizes {train_n}+{val_n}+{test_n} exceed dataset size {n_records}"
        )
    perm = np.random.default_rng(seed).permutation(n_records)
    a = perm[:train_n]
    b = perm[train_n : train_n + val_n]
    c = perm[train_n + val_n : train_n + val_n + test_n]
    return a, b, c
