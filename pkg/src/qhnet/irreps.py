"""Real-basis rotation algebra: Clebsch-Gordan tables, real spherical
harmonics, Wigner-D matrices, and the path-wise tensor product / tensor
expansion contractions.

Conventions (fixed for the whole package):

* Real basis throughout, with m ordered -l..+l inside each order.
* Real spherical harmonics are component-normalized: every component has
  unit mean square over the uniform sphere (so Y^0 = [1] and the l=1
  harmonics are sqrt(3) * (y, z, x)).
* The l=1 basis order is (y, z, x), i.e. m = (-1, 0, +1).
* CG blocks are generated from the complex-basis Racah closed form and
  conjugated into the real basis; a per-order phase i^l is folded into the
  change-of-basis matrix so every block comes out real.  Each block is
  checked to be real within 1e-12 before the imaginary residue is dropped.
* Wigner-D matrices come from the Ivanic-Ruedenberg recursion seeded with
  the l=1 rotation, so they are built in purely real arithmetic.

External Hamiltonian data produced under a different spherical-harmonic
convention must be permuted/sign-flipped into this one before ingestion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, ContractViolation, DomainError

L_MAX_SUPPORTED = 6

Path = tuple[int, int, int]


# ---------------------------------------------------------------------------
# layouts


@dataclass(frozen=True)
class IrrepsLayout:
    """Segmented layout: `channels` copies of every order l = 0..l_max,
    stored flat as consecutive per-l segments of length channels*(2l+1)."""

    l_max: int
    channels: int
    offsets: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if not 0 <= self.l_max <= L_MAX_SUPPORTED:
            raise ConfigurationError(f"l_max={self.l_max} outside [0, {L_MAX_SUPPORTED}]")
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        offs = [0]
        for l in range(self.l_max + 1):
            offs.append(offs[-1] + self.channels * (2 * l + 1))
        object.__setattr__(self, "offsets", tuple(offs[:-1]))

    @property
    def size(self) -> int:
        return self.channels * sum(2 * l + 1 for l in range(self.l_max + 1))

    def segment_slice(self, l: int) -> slice:
        if not 0 <= l <= self.l_max:
            raise ContractViolation(f"order {l} not in layout (l_max={self.l_max})")
        start = self.offsets[l]
        return slice(start, start + self.channels * (2 * l + 1))


@dataclass
class IrrepsTensor:
    """Flat real feature vector over an IrrepsLayout."""

    layout: IrrepsLayout
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.layout.size,):
            raise ContractViolation(
                f"data shape {self.data.shape} does not match layout size {self.layout.size}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("IrrepsTensor entries must be finite")

    def segment(self, l: int) -> np.ndarray:
        """View of order-l features, shape (channels, 2l+1)."""
        return self.data[self.layout.segment_slice(l)].reshape(self.layout.channels, 2 * l + 1)

    @classmethod
    def from_segments(cls, layout: IrrepsLayout, segments: list[np.ndarray]) -> "IrrepsTensor":
        flat = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in segments])
        return cls(layout, flat)


# ---------------------------------------------------------------------------
# complex-basis Clebsch-Gordan (Racah closed form, exact rationals inside)


def _racah_cg(l1: int, l2: int, l3: int, m1: int, m2: int, m3: int) -> float:
    if m1 + m2 != m3:
        return 0.0
    f = math.factorial
    pref = Fraction(
        (2 * l3 + 1) * f(l1 + l2 - l3) * f(l1 - l2 + l3) * f(-l1 + l2 + l3),
        f(l1 + l2 + l3 + 1),
    )
    pref *= f(l3 + m3) * f(l3 - m3) * f(l1 - m1) * f(l1 + m1) * f(l2 - m2) * f(l2 + m2)
    total = Fraction(0)
    k_min = max(0, l2 - l3 - m1, l1 - l3 + m2)
    k_max = min(l1 + l2 - l3, l1 - m1, l2 + m2)
    for k in range(k_min, k_max + 1):
        denom = (
            f(k)
            * f(l1 + l2 - l3 - k)
            * f(l1 - m1 - k)
            * f(l2 + m2 - k)
            * f(l3 - l2 + m1 + k)
            * f(l3 - l1 - m2 + k)
        )
        total += Fraction((-1) ** k, denom)
    if total == 0:
        return 0.0
    return math.sqrt(pref) * float(total)


def _complex_cg_block(l1: int, l2: int, l3: int) -> np.ndarray:
    out = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if -l3 <= m3 <= l3:
                out[l1 + m1, l2 + m2, l3 + m3] = _racah_cg(l1, l2, l3, m1, m2, m3)
    return out


def _real_to_complex_basis(l: int) -> np.ndarray:
    """Change-of-basis Q with complex_m = sum_r Q[m, r] * real_r, carrying the
    extra (-i)^l phase that makes the conjugated CG blocks purely real."""
    q = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    for m in range(-l, 0):
        q[l + m, l + abs(m)] = 1 / math.sqrt(2)
        q[l + m, l - abs(m)] = -1j / math.sqrt(2)
    q[l, l] = 1.0
    for m in range(1, l + 1):
        q[l + m, l + abs(m)] = (-1) ** m / math.sqrt(2)
        q[l + m, l - abs(m)] = 1j * (-1) ** m / math.sqrt(2)
    return (-1j) ** l * q


def _real_cg_block(l1: int, l2: int, l3: int) -> np.ndarray:
    q1 = _real_to_complex_basis(l1)
    q2 = _real_to_complex_basis(l2)
    q3 = _real_to_complex_basis(l3)
    c = _complex_cg_block(l1, l2, l3).astype(np.complex128)
    k = np.einsum("ij,kl,nm,ikn->jlm", q1, q2, np.conj(q3), c)
    residue = np.max(np.abs(k.imag))
    if residue > 1e-12:
        raise ContractViolation(
            f"real CG block ({l1},{l2},{l3}) has imaginary residue {residue:.3e}"
        )
    return np.ascontiguousarray(k.real)


def valid_paths(l_max: int, l3_max: int | None = None) -> list[Path]:
    """Order triples obeying the triangle rule with l1, l2 <= l_max and
    l3 <= l3_max (default l_max)."""
    cap = l_max if l3_max is None else l3_max
    paths = []
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            for l3 in range(abs(l1 - l2), min(cap, l1 + l2) + 1):
                paths.append((l1, l2, l3))
    return paths


class CGTable:
    """Immutable table of real-basis CG blocks for every valid path with
    orders up to l_max.  Block (l1, l2, l3) has shape (2l1+1, 2l2+1, 2l3+1)."""

    def __init__(self, l_max: int, blocks: dict[Path, np.ndarray]):
        self.l_max = l_max
        for b in blocks.values():
            b.setflags(write=False)
        self._blocks = blocks

    def __contains__(self, path: Path) -> bool:
        return tuple(path) in self._blocks

    def block(self, path: Path) -> np.ndarray:
        try:
            return self._blocks[tuple(path)]
        except KeyError:
            raise ContractViolation(f"path {tuple(path)} not in CG table (l_max={self.l_max})")

    def paths(self) -> list[Path]:
        return sorted(self._blocks)


def build_cg_table(l_max: int, l3_max: int | None = None) -> CGTable:
    """Real-basis CG blocks for all valid paths.  `l3_max` (default l_max)
    may exceed L_MAX_SUPPORTED up to 2*l_max: the Racah generator is exact
    for any order, and output orders beyond l_max only ever feed the tensor
    expansion (which needs l3 up to l1+l2 for the reconstruction identity),
    never the rotation recursion."""
    if not 0 <= l_max <= L_MAX_SUPPORTED:
        raise ConfigurationError(f"l_max={l_max} outside [0, {L_MAX_SUPPORTED}]")
    if l3_max is not None and not l_max <= l3_max <= 2 * l_max:
        raise ConfigurationError(f"l3_max={l3_max} outside [{l_max}, {2 * l_max}]")
    blocks = {p: _real_cg_block(*p) for p in valid_paths(l_max, l3_max)}
    return CGTable(l_max, blocks)


# ---------------------------------------------------------------------------
# real spherical harmonics (component-normalized)


def real_spherical_harmonics(l: int, r_hat: np.ndarray) -> np.ndarray:
    """Real spherical harmonics Y^l_m(r_hat), m = -l..l, scaled so every
    component has unit mean square over the uniform sphere.

    Accepts a single unit 3-vector or an array (..., 3); returns (..., 2l+1).
    """
    if not 0 <= l <= L_MAX_SUPPORTED:
        raise DomainError(f"order {l} outside [0, {L_MAX_SUPPORTED}]")
    r = np.asarray(r_hat, dtype=np.float64)
    if r.shape[-1] != 3:
        raise DomainError("r_hat must have a trailing axis of length 3")
    norms = np.sqrt(np.sum(r * r, axis=-1))
    if np.max(np.abs(norms - 1.0)) > 1e-9:
        raise DomainError("r_hat must be a unit vector within 1e-9")
    x, y, z = r[..., 0], r[..., 1], r[..., 2]

    # h[m][k] = P_k^m(z) / sin(theta)^m, a polynomial in z (no Condon-Shortley
    # phase), built by the standard three-term recurrences.
    h = [[np.zeros_like(z) for _ in range(l + 1)] for _ in range(l + 1)]
    for m in range(l + 1):
        hmm = np.full_like(z, float(math.prod(range(1, 2 * m, 2)) or 1))
        h[m][m] = hmm
        if m + 1 <= l:
            h[m][m + 1] = z * (2 * m + 1) * hmm
        for k in range(m + 2, l + 1):
            h[m][k] = ((2 * k - 1) * z * h[m][k - 1] - (k + m - 1) * h[m][k - 2]) / (k - m)

    # cos/sin(m*phi) * sin(theta)^m from the Chebyshev-style recurrence on (x, y)
    a = [np.ones_like(z), x]
    b = [np.zeros_like(z), y]
    for m in range(2, l + 1):
        a.append(x * a[m - 1] - y * b[m - 1])
        b.append(x * b[m - 1] + y * a[m - 1])

    out = np.empty(r.shape[:-1] + (2 * l + 1,))
    out[..., l] = math.sqrt(2 * l + 1) * h[0][l]
    for m in range(1, l + 1):
        k = math.sqrt(2 * (2 * l + 1) * math.factorial(l - m) / math.factorial(l + m))
        out[..., l + m] = k * h[m][l] * a[m]
        out[..., l - m] = k * h[m][l] * b[m]
    return out


# ---------------------------------------------------------------------------
# rotations and Wigner-D


def check_rotation(r: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise DomainError(f"rotation must be 3x3, got {r.shape}")
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise DomainError("matrix is not orthogonal within 1e-12")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise DomainError("matrix determinant is not +1 within 1e-12")
    return r


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random rotation from a QR decomposition of a Gaussian matrix."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _wigner_d1(r: np.ndarray) -> np.ndarray:
    # l=1 real harmonics are sqrt(3)*(y, z, x): conjugate R by the (y,z,x) pick
    perm = np.array([1, 2, 0])
    return r[np.ix_(perm, perm)]


def _ir_step(d1: np.ndarray, dprev: np.ndarray, l: int) -> np.ndarray:
    """One Ivanic-Ruedenberg recursion step: D^l from D^1 and D^(l-1)."""

    def r1(i, j):  # i, j in -1..1
        return d1[i + 1, j + 1]

    def prev(a, b):  # a, b in -(l-1)..(l-1)
        return dprev[a + l - 1, b + l - 1]

    def p(i, a, b):
        if b == l:
            return r1(i, 1) * prev(a, l - 1) - r1(i, -1) * prev(a, -(l - 1))
        if b == -l:
            return r1(i, 1) * prev(a, -(l - 1)) + r1(i, -1) * prev(a, l - 1)
        return r1(i, 0) * prev(a, b)

    def u_term(m, n):
        return p(0, m, n)

    def v_term(m, n):
        if m == 0:
            return p(1, 1, n) + p(-1, -1, n)
        if m > 0:
            res = p(1, m - 1, n) * math.sqrt(1 + (m == 1))
            if m != 1:
                res -= p(-1, -m + 1, n)
            return res
        res = p(-1, -m - 1, n) * math.sqrt(1 + (m == -1))
        if m != -1:
            res += p(1, m + 1, n)
        return res

    def w_term(m, n):
        if m > 0:
            return p(1, m + 1, n) + p(-1, -m - 1, n)
        return p(1, m - 1, n) - p(-1, -m + 1, n)

    out = np.empty((2 * l + 1, 2 * l + 1))
    for m in range(-l, l + 1):
        am = abs(m)
        for n in range(-l, l + 1):
            denom = (l + n) * (l - n) if abs(n) < l else (2 * l) * (2 * l - 1)
            cu = math.sqrt((l + m) * (l - m) / denom)
            cv = 0.5 * math.sqrt((1 + (m == 0)) * (l + am - 1) * (l + am) / denom) * (
                1 - 2 * (m == 0)
            )
            cw = -0.5 * math.sqrt((l - am - 1) * (l - am) / denom) * (1 - (m == 0))
            val = 0.0
            if cu != 0.0:
                val += cu * u_term(m, n)
            if cv != 0.0:
                val += cv * v_term(m, n)
            if cw != 0.0:
                val += cw * w_term(m, n)
            out[m + l, n + l] = val
    return out


def wigner_d_all(l_max: int, r: np.ndarray) -> list[np.ndarray]:
    """Real Wigner-D matrices D^l(R) for l = 0..l_max."""
    r = check_rotation(r)
    mats = [np.ones((1, 1))]
    if l_max >= 1:
        mats.append(_wigner_d1(r))
    for l in range(2, l_max + 1):
        mats.append(_ir_step(mats[1], mats[l - 1], l))
    return mats


def wigner_d(l: int, r: np.ndarray) -> np.ndarray:
    """Real orthogonal matrix representing R on the order-l real harmonics."""
    if not 0 <= l <= L_MAX_SUPPORTED:
        raise DomainError(f"order {l} outside [0, {L_MAX_SUPPORTED}]")
    return wigner_d_all(l, r)[l]


# ---------------------------------------------------------------------------
# path-wise tensor product / tensor expansion


def tensor_product_path(u: np.ndarray, v: np.ndarray, path: Path, cg: CGTable) -> np.ndarray:
    """w_m3 = sum_{m1,m2} C[m1,m2,m3] u_m1 v_m2 on one (l1, l2, l3) path.

    Leading axes broadcast, so (..., 2l1+1) x (..., 2l2+1) -> (..., 2l3+1).
    """
    l1, l2, l3 = path
    block = cg.block(path)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape[-1] != 2 * l1 + 1 or v.shape[-1] != 2 * l2 + 1:
        raise ContractViolation(
            f"input lengths {u.shape[-1]}, {v.shape[-1]} do not match path {path}"
        )
    return np.einsum("abc,...a,...b->...c", block, u, v)


def tensor_expansion_path(w: np.ndarray, path: Path, cg: CGTable) -> np.ndarray:
    """Inverse of the tensor product: (..., 2l3+1) -> (..., 2l1+1, 2l2+1),
    so that summing expansions of (u x v)^l3 over all l3 rebuilds u v^T."""
    l1, l2, l3 = path
    block = cg.block(path)
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != 2 * l3 + 1:
        raise ContractViolation(f"input length {w.shape[-1]} does not match path {path}")
    return np.einsum("abc,...c->...ab", block, w)
