import numpy as np
import pytest

from fdp.domain import DomainError, DoseGrid, StructureMask
from fdp.dvh import (
    DVHCurve,
    EmptyMaskError,
    compute_dvh,
    conformity_index,
    dose_percentile,
    homogeneity_index,
    max_dose,
    mean_dose,
)

SPACING = (4.0, 4.0, 4.0)


def grid(values):
    return DoseGrid(values.shape, SPACING, values)


def full_mask(dims, name="s", kind="OAR", rx=None):
    return StructureMask(name, kind, np.ones(dims, bool), rx)


def oracle_quantile(sorted_vals, q):
    """Independent order-statistic interpolation, plain python arithmetic."""
    n = len(sorted_vals)
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo])


def ramp_grid(n=100_000):
    """Dense linear ramp 0..100 Gy filling a synthetic 1D-style mask."""
    dims = (50, 50, 40)
    vals = np.linspace(0.0, 100.0, n).astype(np.float32)
    arr = np.zeros(dims, np.float32)
    arr.reshape(-1)[:n] = vals
    mask = np.zeros(dims, bool)
    mask.reshape(-1)[:n] = True
    return grid(arr), StructureMask("ramp", "PTV", mask, 70.0)


class TestComputeDvh:
    def test_uniform_dose(self):
        dims = (4, 4, 4)
        g = grid(np.full(dims, 60.0, np.float32))
        curve = compute_dvh(g, full_mask(dims))
        assert np.all(curve.dose_at_fraction == 60.0)
        assert curve.dose_at_fraction.shape == (101,)

    def test_two_voxel_interpolation(self):
        dims = (4, 4, 4)
        vals = np.zeros(dims, np.float32)
        mask = np.zeros(dims, bool)
        mask[0, 0, 0] = mask[0, 0, 1] = True
        vals[0, 0, 1] = 60.0
        curve = compute_dvh(grid(vals), StructureMask("two", "OAR", mask))
        assert curve.dose_at_fraction[100] == 0.0    # fraction 1.0 -> min
        assert curve.dose_at_fraction[0] == 60.0     # fraction 0.0 -> max
        assert curve.dose_at_fraction[50] == 30.0    # linear midpoint

    def test_matches_counting_oracle_exactly(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            dims = (16, 16, 16)
            vals = rng.uniform(0, 80, dims).astype(np.float32)
            mask = rng.random(dims) < 0.4
            if not mask.any():
                mask[0, 0, 0] = True
            curve = compute_dvh(grid(vals), StructureMask("m", "OAR", mask))
            svals = sorted(float(v) for v in vals[mask])
            n = len(svals)
            for k in range(101):
                f = k / 100.0
                expected = oracle_quantile(svals, 1.0 - f)
                assert curve.dose_at_fraction[k] == expected
                # counting property: at least f of the voxels receive >= the value
                count = sum(v >= curve.dose_at_fraction[k] for v in svals)
                assert count / n >= f - 1.0 / n

    def test_monotone_non_increasing(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            dims = (8, 8, 8)
            vals = rng.uniform(0, 80, dims).astype(np.float32)
            curve = compute_dvh(grid(vals), full_mask(dims))
            assert np.all(np.diff(curve.dose_at_fraction) <= 0)

    def test_empty_mask(self):
        dims = (4, 4, 4)
        mask = StructureMask("m", "OAR", np.ones((5, 5, 5), bool))
        with pytest.raises(DomainError):
            compute_dvh(grid(np.zeros(dims, np.float32)), mask)


class TestDosePercentile:
    def test_uniform(self):
        dims = (4, 4, 4)
        g = grid(np.full(dims, 70.0, np.float32))
        assert dose_percentile(g, full_mask(dims), 95) == 70.0

    def test_ramp_dense_sampling(self):
        g, mask = ramp_grid()
        assert abs(dose_percentile(g, mask, 5) - 95.0) < 0.1
        assert abs(dose_percentile(g, mask, 95) - 5.0) < 0.1
        assert abs(dose_percentile(g, mask, 50) - 50.0) < 0.1

    def test_bounds_rejected(self):
        dims = (4, 4, 4)
        g = grid(np.zeros(dims, np.float32))
        for t in (0, 100, -5, 120):
            with pytest.raises(DomainError):
                dose_percentile(g, full_mask(dims), t)

    def test_consistency_with_curve(self):
        rng = np.random.default_rng(11)
        dims = (8, 8, 8)
        vals = rng.uniform(0, 80, dims).astype(np.float32)
        g = grid(vals)
        mask = full_mask(dims)
        curve = compute_dvh(g, mask)
        for t in range(1, 100):
            assert dose_percentile(g, mask, t) == curve.dose_at_fraction[t]


class TestIndices:
    def test_hi_uniform_is_zero(self):
        dims = (4, 4, 4)
        g = grid(np.full(dims, 60.0, np.float32))
        assert homogeneity_index(g, full_mask(dims, kind="PTV", rx=60.0)) == 0.0

    def test_hi_ramp(self):
        g, mask = ramp_grid()
        assert abs(homogeneity_index(g, mask) - 1.8) < 0.01

    def test_hi_zero_median_errors(self):
        dims = (4, 4, 4)
        g = grid(np.zeros(dims, np.float32))
        with pytest.raises(DomainError):
            homogeneity_index(g, full_mask(dims, kind="PTV", rx=60.0))

    def test_ci_all_covered(self):
        dims = (4, 4, 4)
        g = grid(np.full(dims, 70.0, np.float32))
        assert conformity_index(g, full_mask(dims, kind="PTV", rx=70.0), 70.0) == 1.0

    def test_ci_half_covered(self):
        dims = (4, 4, 4)
        vals = np.zeros(dims, np.float32)
        vals.reshape(-1)[:32] = 70.0
        assert conformity_index(grid(vals), full_mask(dims, kind="PTV", rx=70.0), 70.0) == 0.5

    def test_ci_matches_counting_oracle(self):
        rng = np.random.default_rng(5)
        dims = (8, 8, 8)
        vals = rng.uniform(0, 100, dims).astype(np.float32)
        mask = rng.random(dims) < 0.5
        mask[0, 0, 0] = True
        sm = StructureMask("p", "PTV", mask, 70.0)
        expected = sum(1 for v in vals[mask] if v >= 70.0) / mask.sum()
        assert conformity_index(grid(vals), sm, 70.0) == expected

    def test_mean_dose(self):
        dims = (4, 4, 4)
        assert mean_dose(grid(np.full(dims, 10.0, np.float32)), full_mask(dims)) == 10.0
        vals = np.zeros(dims, np.float32)
        mask = np.zeros(dims, bool)
        mask[0, 0, 0] = mask[0, 0, 1] = True
        vals[0, 0, 1] = 20.0
        assert mean_dose(grid(vals), StructureMask("m", "OAR", mask)) == 10.0

    def test_mean_matches_compensated_sum(self):
        rng = np.random.default_rng(9)
        dims = (16, 16, 16)
        vals = rng.uniform(0, 80, dims).astype(np.float32)
        mask = rng.random(dims) < 0.3
        mask[0, 0, 0] = True
        got = mean_dose(grid(vals), StructureMask("m", "OAR", mask))
        expected = float(np.sum(vals[mask], dtype=np.float64)) / int(mask.sum())
        assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))

    def test_max_dose(self):
        dims = (4, 4, 4)
        vals = np.zeros(dims, np.float32)
        vals[2, 2, 2] = 55.0
        assert max_dose(grid(vals), full_mask(dims)) == 55.0


class TestScaleEquivariance:
    def test_scaling(self):
        rng = np.random.default_rng(13)
        dims = (8, 8, 8)
        vals = rng.uniform(1, 80, dims).astype(np.float32)
        mask = full_mask(dims, kind="PTV", rx=40.0)
        g1, g2 = grid(vals), grid(vals * 2.0)
        assert np.isclose(dose_percentile(g2, mask, 30), 2 * dose_percentile(g1, mask, 30))
        assert np.isclose(mean_dose(g2, mask), 2 * mean_dose(g1, mask))
        assert np.isclose(homogeneity_index(g2, mask), homogeneity_index(g1, mask))
        assert conformity_index(g2, mask, 80.0) == conformity_index(g1, mask, 40.0)


class TestCurveType:
    def test_rejects_increasing(self):
        vf = np.arange(101) / 100.0
        dose = np.arange(101, dtype=float)
        with pytest.raises(DomainError):
            DVHCurve("s", vf, dose)

    def test_csv_round_trip(self):
        dims = (4, 4, 4)
        curve = compute_dvh(grid(np.random.default_rng(0).uniform(0, 80, dims).astype(np.float32)),
                            full_mask(dims))
        back = DVHCurve.from_csv("s", curve.to_csv())
        assert np.array_equal(back.dose_at_fraction, curve.dose_at_fraction)
