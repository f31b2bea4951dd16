"""Orbital bookkeeping: per-element shell configurations, extraction of
per-pair blocks from full-orbital matrices, molecular Hamiltonian assembly,
and the block rotation operator used in equivariance checks.

Shell ordering within an atom is fixed: s shells by principal number, then
p shells, then the d shell, with m = -l..+l inside each shell.  The full
orbital set is 1s, 2s, 3s, 2p, 3p, 3d (dimension 14).  External data under
another ordering (e.g. PySCF def2-SVP) must be permuted into this
convention before ingestion.
"""

from __future__ import annotations

import numpy as np

from . import irreps
from .errors import ContractViolation, DataError

# (shell name, rotation order) in the package-wide ordering
FULL_SHELLS: tuple[tuple[str, int], ...] = (
    ("1s", 0),
    ("2s", 0),
    ("3s", 0),
    ("2p", 1),
    ("3p", 1),
    ("3d", 2),
)
FULL_DIM = sum(2 * l + 1 for _, l in FULL_SHELLS)  # 14

ELEMENT_SHELLS: dict[int, tuple[str, ...]] = {
    1: ("1s", "2s", "2p"),
    6: ("1s", "2s", "3s", "2p", "3p", "3d"),
    7: ("1s", "2s", "3s", "2p", "3p", "3d"),
    8: ("1s", "2s", "3s", "2p", "3p", "3d"),
}

ELEMENT_NAMES = {1: "H", 6: "C", 7: "N", 8: "O"}


def _full_shell_offsets() -> dict[str, tuple[int, int]]:
    offs = {}
    pos = 0
    for name, l in FULL_SHELLS:
        offs[name] = (pos, l)
        pos += 2 * l + 1
    return offs


_FULL_OFFSETS = _full_shell_offsets()


def shell_orders(z: int) -> list[int]:
    """Rotation order of every shell of element z, in orbital order."""
    if z not in ELEMENT_SHELLS:
        raise DataError(f"unsupported element Z={z}")
    return [_FULL_OFFSETS[s][1] for s in ELEMENT_SHELLS[z]]


def orbital_dim(z: int) -> int:
    return sum(2 * l + 1 for l in shell_orders(z))


def orbital_indices(z: int) -> np.ndarray:
    """Row/column indices of element z's orbitals inside the 14x14 full block."""
    idx: list[int] = []
    for shell in ELEMENT_SHELLS.get(z) or _raise_unknown(z):
        pos, l = _FULL_OFFSETS[shell]
        idx.extend(range(pos, pos + 2 * l + 1))
    return np.array(idx)


def _raise_unknown(z):
    raise DataError(f"unsupported element Z={z}")


def atom_orbital_ranges(atoms: list[int]) -> list[tuple[int, int]]:
    """Half-open orbital index range of each atom in the assembled matrix."""
    ranges = []
    pos = 0
    for z in atoms:
        d = orbital_dim(z)
        ranges.append((pos, pos + d))
        pos += d
    return ranges


def n_orbitals(atoms: list[int]) -> int:
    return sum(orbital_dim(z) for z in atoms)


def extract_block(m: np.ndarray, elem_i: int, elem_j: int) -> np.ndarray:
    """Select the rows/columns of a full-orbital block belonging to the two
    elements' shells: (..., 14, 14) -> (..., dim_i, dim_j)."""
    m = np.asarray(m)
    if m.shape[-2:] != (FULL_DIM, FULL_DIM):
        raise ContractViolation(f"expected trailing {FULL_DIM}x{FULL_DIM}, got {m.shape}")
    ri = orbital_indices(elem_i)
    cj = orbital_indices(elem_j)
    return m[..., ri[:, None], cj[None, :]]


def assemble(
    diag: dict[int, np.ndarray],
    offdiag: dict[tuple[int, int], np.ndarray],
    atoms: list[int],
    symmetrize: bool = False,
) -> np.ndarray:
    """Place per-pair blocks at the atoms' orbital ranges.  `diag[i]` and
    `offdiag[(i, j)]` are already element-shaped (dim_i x dim_j)."""
    ranges = atom_orbital_ranges(atoms)
    n = ranges[-1][1] if ranges else 0
    h = np.zeros((n, n))
    for i, (r0, r1) in enumerate(ranges):
        try:
            h[r0:r1, r0:r1] = diag[i]
        except KeyError:
            raise ContractViolation(f"missing diagonal block {i}")
        for j, (c0, c1) in enumerate(ranges):
            if i == j:
                continue
            try:
                h[r0:r1, c0:c1] = offdiag[(i, j)]
            except KeyError:
                raise ContractViolation(f"missing off-diagonal block {(i, j)}")
    if symmetrize:
        h = 0.5 * (h + h.T)
    return h


def block_rotation(atoms: list[int], r: np.ndarray) -> np.ndarray:
    """Block-diagonal orthogonal matrix acting on the molecular orbital basis:
    D^l(R) per shell per atom (identity for s, D^1 for p, D^2 for d)."""
    max_l = 2
    d = irreps.wigner_d_all(max_l, r)
    n = n_orbitals(atoms)
    out = np.zeros((n, n))
    pos = 0
    for z in atoms:
        for l in shell_orders(z):
            w = 2 * l + 1
            out[pos : pos + w, pos : pos + w] = d[l]
            pos += w
    return out


def orbital_permutation(atoms: list[int], perm: list[int]) -> np.ndarray:
    """Orbital-space permutation matrix P so that assembling permuted atoms
    equals P H P^T of the original assembly.  `perm[k]` is the original index
    of the atom now at position k."""
    ranges = atom_orbital_ranges(atoms)
    n = ranges[-1][1] if ranges else 0
    order = []
    for k in perm:
        r0, r1 = ranges[k]
        order.extend(range(r0, r1))
    p = np.zeros((n, n))
    p[np.arange(n), order] = 1.0
    return p
