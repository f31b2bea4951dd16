"""Real-basis irrep algebra: Clebsch-Gordan table, spherical harmonics,
rotation matrices, tensor product and tensor expansion."""

import numpy as np
import pytest

from qhnet import irreps
from qhnet.errors import ConfigurationError, ContractViolation, DomainError

RNG = np.random.default_rng(20260823)


# ---------------------------------------------------------------------------
# layouts


def test_layout_size_and_slices():
    lay = irreps.IrrepsLayout(l_max=2, channels=3)
    assert lay.size == 3 * (1 + 3 + 5)
    assert lay.segment_slice(0) == slice(0, 3)
    assert lay.segment_slice(1) == slice(3, 12)
    assert lay.segment_slice(2) == slice(12, 27)


def test_layout_rejects_bad_args():
    with pytest.raises(ConfigurationError):
        irreps.IrrepsLayout(l_max=7, channels=1)
    with pytest.raises(ConfigurationError):
        irreps.IrrepsLayout(l_max=-1, channels=1)
    with pytest.raises(ConfigurationError):
        irreps.IrrepsLayout(l_max=2, channels=0)


def test_irreps_tensor_segment_roundtrip():
    lay = irreps.IrrepsLayout(l_max=2, channels=2)
    data = RNG.standard_normal(lay.size)
    t = irreps.IrrepsTensor(lay, data)
    rebuilt = irreps.IrrepsTensor.from_segments(lay, [t.segment(l) for l in range(3)])
    assert np.array_equal(rebuilt.data, data)


def test_irreps_tensor_rejects_bad_shape():
    lay = irreps.IrrepsLayout(l_max=1, channels=1)
    with pytest.raises(ContractViolation):
        irreps.IrrepsTensor(lay, np.zeros(5))
    with pytest.raises(ContractViolation):
        irreps.IrrepsTensor(lay, np.full(lay.size, np.nan))


# ---------------------------------------------------------------------------
# Clebsch-Gordan table


def test_cg_000_block_is_scalar_one():
    cg = irreps.build_cg_table(0)
    assert np.array_equal(cg.block((0, 0, 0)), np.ones((1, 1, 1)))


def test_cg_110_block_is_scaled_identity_pairing():
    # contracting two order-1 vectors to a scalar must be proportional to the
    # Euclidean inner product; magnitude 1/sqrt(3) at matching-m slots
    cg = irreps.build_cg_table(1)
    block = cg.block((1, 1, 0))[:, :, 0]
    expected = np.abs(np.eye(3)) / np.sqrt(3.0)
    assert np.allclose(np.abs(block), expected, atol=1e-14)
    # the signed pattern still represents the rotation-invariant pairing
    u = RNG.standard_normal(3)
    v = RNG.standard_normal(3)
    w = irreps.tensor_product_path(u, v, (1, 1, 0), cg)
    r = irreps.random_rotation(RNG)
    d1 = irreps.wigner_d(1, r)
    w_rot = irreps.tensor_product_path(d1 @ u, d1 @ v, (1, 1, 0), cg)
    assert abs(w_rot[0] - w[0]) < 1e-12


def test_cg_orthogonality_all_paths():
    # stacking C^(l3) over all l3 for fixed (l1, l2) gives an orthogonal map
    # from the (2l1+1)(2l2+1) product space onto the direct sum
    l_max = 4
    cg = irreps.build_cg_table(l_max, l3_max=2 * l_max)
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            cols = []
            for l3 in range(abs(l1 - l2), l1 + l2 + 1):
                cols.append(cg.block((l1, l2, l3)).reshape(-1, 2 * l3 + 1))
            c = np.concatenate(cols, axis=1)
            # square orthogonal: the direct sum exhausts the product space
            assert c.shape[0] == c.shape[1]
            gram = c.T @ c
            assert np.max(np.abs(gram - np.eye(gram.shape[0]))) <= 1e-12, (l1, l2)


def test_cg_blocks_only_valid_paths():
    cg = irreps.build_cg_table(2)
    assert (1, 1, 2) in cg
    assert (0, 0, 1) not in cg
    assert (2, 2, 5) not in cg
    with pytest.raises(ContractViolation):
        cg.block((0, 0, 1))


def test_build_cg_table_rejects_bad_lmax():
    with pytest.raises(ConfigurationError):
        irreps.build_cg_table(7)
    with pytest.raises(ConfigurationError):
        irreps.build_cg_table(-1)


def test_valid_paths_triangle_rule():
    paths = irreps.valid_paths(2)
    for l1, l2, l3 in paths:
        assert abs(l1 - l2) <= l3 <= l1 + l2
    assert (1, 1, 0) in paths and (1, 1, 1) in paths and (1, 1, 2) in paths
    assert (2, 2, 5) not in paths


# ---------------------------------------------------------------------------
# spherical harmonics


def test_sph_l0_is_one():
    out = irreps.real_spherical_harmonics(0, np.array([0.0, 0.0, 1.0]))
    assert np.array_equal(out, np.array([1.0]))


def test_sph_l1_along_z_single_component_sqrt3():
    out = irreps.real_spherical_harmonics(1, np.array([0.0, 0.0, 1.0]))
    nz = np.flatnonzero(np.abs(out) > 1e-14)
    assert len(nz) == 1
    assert abs(abs(out[nz[0]]) - np.sqrt(3.0)) < 1e-14


def test_sph_component_normalization_unit_mean_square():
    # each component has unit mean square over the uniform sphere
    n = 200_000
    rng = np.random.default_rng(7)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for l in range(5):
        y = irreps.real_spherical_harmonics(l, v)
        ms = np.mean(y * y, axis=0)
        assert np.max(np.abs(ms - 1.0)) < 0.05, l


def test_sph_rotation_rule():
    rng = np.random.default_rng(3)
    for l in range(5):
        for _ in range(5):
            r = irreps.random_rotation(rng)
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            lhs = irreps.real_spherical_harmonics(l, r @ v)
            rhs = irreps.wigner_d(l, r) @ irreps.real_spherical_harmonics(l, v)
            assert np.max(np.abs(lhs - rhs)) < 1e-12, l


def test_sph_rejects_non_unit_input():
    with pytest.raises(DomainError):
        irreps.real_spherical_harmonics(1, np.array([0.0, 0.0, 2.0]))


# ---------------------------------------------------------------------------
# rotations and Wigner-D


def test_check_rotation_accepts_and_rejects():
    r = irreps.random_rotation(np.random.default_rng(0))
    irreps.check_rotation(r)
    with pytest.raises(DomainError):
        irreps.check_rotation(2.0 * np.eye(3))
    with pytest.raises(DomainError):
        irreps.check_rotation(np.diag([1.0, 1.0, -1.0]))  # det -1


def test_random_rotation_is_orthogonal_det_one():
    rng = np.random.default_rng(5)
    for _ in range(20):
        r = irreps.random_rotation(rng)
        assert np.max(np.abs(r @ r.T - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_wigner_identity_rotation():
    for l in range(5):
        d = irreps.wigner_d(l, np.eye(3))
        assert np.max(np.abs(d - np.eye(2 * l + 1))) < 1e-13


def test_wigner_l1_conjugate_to_cartesian_rotation():
    # D^1 equals R in a fixed permutation of (x, y, z) axes; find the
    # permutation once from axis-aligned harmonics, then verify on random R
    basis = np.eye(3)
    y = np.array([irreps.real_spherical_harmonics(1, e) for e in basis])
    p = y.T / np.sqrt(3.0)  # columns: harmonic image of each cartesian axis
    assert np.max(np.abs(p @ p.T - np.eye(3))) < 1e-13
    rng = np.random.default_rng(11)
    for _ in range(10):
        r = irreps.random_rotation(rng)
        d1 = irreps.wigner_d(1, r)
        assert np.max(np.abs(d1 - p @ r @ p.T)) < 1e-12


def test_wigner_homomorphism_and_orthogonality():
    rng = np.random.default_rng(13)
    for _ in range(10):
        r1 = irreps.random_rotation(rng)
        r2 = irreps.random_rotation(rng)
        for l in range(5):
            d12 = irreps.wigner_d(l, r1 @ r2)
            d1 = irreps.wigner_d(l, r1)
            d2 = irreps.wigner_d(l, r2)
            assert np.max(np.abs(d12 - d1 @ d2)) < 1e-11, l
            assert np.max(np.abs(d1 @ d1.T - np.eye(2 * l + 1))) < 1e-11, l


def test_wigner_d_all_matches_wigner_d():
    r = irreps.random_rotation(np.random.default_rng(17))
    ds = irreps.wigner_d_all(4, r)
    for l in range(5):
        assert np.array_equal(ds[l], irreps.wigner_d(l, r)) or np.allclose(
            ds[l], irreps.wigner_d(l, r), atol=0
        )


# ---------------------------------------------------------------------------
# tensor product / expansion


def test_tp_scalar_path():
    cg = irreps.build_cg_table(0)
    out = irreps.tensor_product_path(np.array([2.0]), np.array([3.0]), (0, 0, 0), cg)
    assert np.array_equal(out, np.array([6.0]))


def test_tp_110_matches_hand_contraction():
    cg = irreps.build_cg_table(1)
    block = cg.block((1, 1, 0))
    u = RNG.standard_normal(3)
    v = RNG.standard_normal(3)
    out = irreps.tensor_product_path(u, v, (1, 1, 0), cg)
    hand = np.einsum("abc,a,b->c", block, u, v)
    assert np.max(np.abs(out - hand)) < 1e-15
    # magnitude equals |<u, v>| / sqrt(3), the invariant pairing
    assert abs(abs(out[0]) - abs(u @ v) / np.sqrt(3.0)) < 1e-12


def test_tp_bilinear():
    cg = irreps.build_cg_table(2)
    u1, u2 = RNG.standard_normal((2, 5))
    v = RNG.standard_normal(3)
    path = (2, 1, 2)
    lhs = irreps.tensor_product_path(2.0 * u1 + u2, v, path, cg)
    rhs = 2.0 * irreps.tensor_product_path(u1, v, path, cg) + irreps.tensor_product_path(
        u2, v, path, cg
    )
    assert np.max(np.abs(lhs - rhs)) < 1e-13


def test_tp_equivariance_all_paths():
    l_max = 4
    cg = irreps.build_cg_table(l_max)
    rng = np.random.default_rng(23)
    for path in irreps.valid_paths(l_max):
        l1, l2, l3 = path
        for _ in range(3):
            u = rng.standard_normal(2 * l1 + 1)
            v = rng.standard_normal(2 * l2 + 1)
            r = irreps.random_rotation(rng)
            lhs = irreps.tensor_product_path(
                irreps.wigner_d(l1, r) @ u, irreps.wigner_d(l2, r) @ v, path, cg
            )
            rhs = irreps.wigner_d(l3, r) @ irreps.tensor_product_path(u, v, path, cg)
            assert np.max(np.abs(lhs - rhs)) < 1e-11, path


def test_tp_missing_path_raises():
    cg = irreps.build_cg_table(2)
    with pytest.raises(ContractViolation):
        irreps.tensor_product_path(np.zeros(1), np.zeros(1), (0, 0, 1), cg)


def test_expansion_scalar_path():
    cg = irreps.build_cg_table(0)
    out = irreps.tensor_expansion_path(np.array([5.0]), (0, 0, 0), cg)
    assert np.array_equal(out, np.array([[5.0]]))


@pytest.mark.parametrize("l1,l2", [(l1, l2) for l1 in range(5) for l2 in range(5)])
def test_expansion_inverts_product(l1, l2):
    # summing the expansions of every product component reconstructs the
    # outer product u v^T
    cg = irreps.build_cg_table(4, l3_max=8)
    rng = np.random.default_rng(100 * l1 + l2)
    u = rng.standard_normal(2 * l1 + 1)
    v = rng.standard_normal(2 * l2 + 1)
    recon = np.zeros((2 * l1 + 1, 2 * l2 + 1))
    for l3 in range(abs(l1 - l2), l1 + l2 + 1):
        w = irreps.tensor_product_path(u, v, (l1, l2, l3), cg)
        recon += irreps.tensor_expansion_path(w, (l1, l2, l3), cg)
    assert np.max(np.abs(recon - np.outer(u, v))) < 1e-11
