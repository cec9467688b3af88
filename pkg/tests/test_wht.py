"""Walsh-Hadamard kernel tests against a direct matrix-multiply oracle."""

import numpy as np
import pytest

from hbrnet.wht import (
    CoeffGrid,
    WhtPlan,
    fwht_1d,
    fwht_1d_counted,
    fwht_2d,
    ifwht_2d,
    lowpass_mask,
    sequency_permutation,
    sequency_reorder,
)


def hadamard_matrix(m: int) -> np.ndarray:
    """Oracle: orthonormal Hadamard matrix built by explicit recursion."""
    h = np.array([[1.0]])
    for _ in range(m):
        h = np.block([[h, h], [h, -h]]) / np.sqrt(2.0)
    return h


def sign_changes(row: np.ndarray) -> int:
    s = np.sign(row)
    return int(np.sum(s[1:] != s[:-1]))


def test_constant_pair():
    plan = WhtPlan(m=1)
    out = fwht_1d(np.array([1.0, 1.0]), plan)
    np.testing.assert_allclose(out, [np.sqrt(2.0), 0.0], atol=1e-12)


def test_natural_order_length4():
    plan = WhtPlan(m=2)
    out = fwht_1d(np.array([1.0, 2.0, 3.0, 4.0]), plan)
    # oracle: H_2 @ x with orthonormal scaling
    expected = hadamard_matrix(2) @ np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, [5.0, -1.0, -2.0, 0.0], atol=1e-12)


def test_basis_vector():
    plan = WhtPlan(m=3)
    e0 = np.zeros(8)
    e0[0] = 1.0
    out = fwht_1d(e0, plan)
    np.testing.assert_allclose(out, np.full(8, 1.0 / np.sqrt(8.0)), atol=1e-12)


@pytest.mark.parametrize("m", range(7))
def test_matches_matrix_oracle(m):
    rng = np.random.default_rng(100 + m)
    x = rng.standard_normal(1 << m)
    h = hadamard_matrix(m)
    np.testing.assert_allclose(fwht_1d(x, WhtPlan(m=m)), h @ x, atol=1e-10)


@pytest.mark.parametrize("m", range(7))
def test_sequency_matches_sorted_oracle(m):
    rng = np.random.default_rng(200 + m)
    x = rng.standard_normal(1 << m)
    h = hadamard_matrix(m)
    order = np.argsort([sign_changes(row) for row in h], kind="stable")
    expected = h[order] @ x
    got = fwht_1d(x, WhtPlan(m=m, ordering="sequency"))
    np.testing.assert_allclose(got, expected, atol=1e-10)


@pytest.mark.parametrize("n", [2, 4, 8, 32, 128, 512, 1024])
def test_involution(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n)
    for ordering in ("natural", "sequency"):
        plan = WhtPlan(m=n.bit_length() - 1, ordering=ordering)
        np.testing.assert_allclose(fwht_1d(fwht_1d(x, plan), plan), x, atol=1e-10)


@pytest.mark.parametrize("n", [2, 16, 256, 1024])
def test_parseval_and_linearity(n):
    rng = np.random.default_rng(n + 7)
    plan = WhtPlan(m=n.bit_length() - 1)
    x = rng.standard_normal(n)
    y = rng.standard_normal(n)
    fx, fy = fwht_1d(x, plan), fwht_1d(y, plan)
    assert abs(np.sum(fx**2) / np.sum(x**2) - 1.0) < 1e-10
    np.testing.assert_allclose(
        fwht_1d(0.3 * x - 1.7 * y, plan), 0.3 * fx - 1.7 * fy, atol=1e-10
    )


@pytest.mark.parametrize("n", [2, 8, 64, 1024, 4096])
def test_butterfly_addition_count(n):
    m = n.bit_length() - 1
    _, adds = fwht_1d_counted(np.ones(n), WhtPlan(m=m))
    assert adds == n * m


def test_rejects_bad_length():
    with pytest.raises(ValueError, match="does not match"):
        fwht_1d(np.ones(3), WhtPlan(m=2))
    with pytest.raises(ValueError, match="does not match"):
        fwht_1d(np.ones(8), WhtPlan(m=2))
    with pytest.raises(ValueError):
        WhtPlan(m=-1)


def test_sequency_reorder_length4():
    # sign-change counts of the natural H_2 rows are 0, 3, 1, 2
    out = sequency_reorder(np.array([1.0, 2.0, 3.0, 4.0]), "to_sequency")
    np.testing.assert_array_equal(out, [1.0, 3.0, 4.0, 2.0])


def test_sequency_reorder_length2_unchanged():
    np.testing.assert_array_equal(
        sequency_reorder(np.array([5.0, 6.0]), "to_sequency"), [5.0, 6.0]
    )


def test_sequency_reorder_roundtrip():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(32)
    back = sequency_reorder(sequency_reorder(x, "to_sequency"), "to_natural")
    np.testing.assert_array_equal(back, x)
    g = rng.standard_normal((16, 8))
    back2 = sequency_reorder(sequency_reorder(g, "to_sequency"), "to_natural")
    np.testing.assert_array_equal(back2, g)


def test_sequency_permutation_orders_by_sign_changes():
    for m in range(1, 7):
        h = hadamard_matrix(m)
        perm = sequency_permutation(m)
        counts = [sign_changes(h[i]) for i in perm]
        assert counts == list(range(1 << m))


def test_fwht_2d_constant_image():
    img = np.full((4, 4), 3.0)
    grid = fwht_2d(img, WhtPlan(m=2, ordering="sequency"))
    assert abs(grid.values[0, 0] - 12.0) < 1e-12  # 4 * c at DC
    assert np.max(np.abs(grid.values.flat[1:])) < 1e-12


def test_fwht_2d_roundtrip_and_parseval():
    rng = np.random.default_rng(11)
    img = rng.standard_normal((16, 16))
    for ordering in ("natural", "sequency"):
        plan = WhtPlan(m=4, ordering=ordering)
        grid = fwht_2d(img, plan)
        np.testing.assert_allclose(ifwht_2d(grid), img, atol=1e-10)
    img8 = rng.standard_normal((8, 8))
    grid8 = fwht_2d(img8, WhtPlan(m=3))
    ratio = np.sum(grid8.values**2) / np.sum(img8**2)
    assert 1 - 1e-10 < ratio < 1 + 1e-10


def test_fwht_2d_roundtrip_float32():
    rng = np.random.default_rng(12)
    img = rng.standard_normal((16, 16)).astype(np.float32)
    grid = fwht_2d(img, WhtPlan(m=4))
    assert grid.values.dtype == np.float32
    np.testing.assert_allclose(ifwht_2d(grid), img, atol=1e-4)


def test_fwht_2d_rejects_non_pow2():
    with pytest.raises(ValueError, match="power of two"):
        fwht_2d(np.ones((6, 8)), WhtPlan(m=3))


def test_lowpass_mask_full_size_identity():
    rng = np.random.default_rng(21)
    grid = fwht_2d(rng.standard_normal((8, 8)), WhtPlan(m=3, ordering="sequency"))
    kept = lowpass_mask(grid, 8)
    np.testing.assert_array_equal(kept.values, grid.values)


def test_lowpass_mask_constant_image_unchanged():
    grid = fwht_2d(np.full((8, 8), 2.5), WhtPlan(m=3, ordering="sequency"))
    kept = lowpass_mask(grid, 1)
    np.testing.assert_allclose(kept.values, grid.values, atol=1e-12)


def test_lowpass_mask_idempotent():
    rng = np.random.default_rng(22)
    grid = fwht_2d(rng.standard_normal((8, 8)), WhtPlan(m=3, ordering="sequency"))
    once = lowpass_mask(grid, 3)
    twice = lowpass_mask(once, 3)
    np.testing.assert_array_equal(once.values, twice.values)


def test_lowpass_mask_rejects_out_of_range():
    grid = CoeffGrid(np.zeros((8, 8)), ordering="sequency")
    for k in (0, 9):
        with pytest.raises(ValueError, match="out of range"):
            lowpass_mask(grid, k)
    with pytest.raises(ValueError, match="sequency-ordered"):
        lowpass_mask(CoeffGrid(np.zeros((8, 8)), ordering="natural"), 2)
