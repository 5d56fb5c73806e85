import numpy as np
import pytest

from fdp import dvh
from fdp.domain import DomainError
from fdp.phantoms import (
    Cohort,
    PhantomGeometryError,
    PhantomSpec,
    PhantomStyle,
    generate_cohort,
    generate_phantom,
    random_spec,
    read_cohort_dir,
    rebuild_reference,
    split_counts,
    write_cohort_dir,
)


@pytest.fixture(scope="module")
def case7():
    return generate_phantom(random_spec(7))


class TestSpec:
    def test_style_ranges_enforced(self):
        with pytest.raises(DomainError):
            PhantomStyle(0.5, (1.0, 1.0))
        with pytest.raises(DomainError):
            PhantomStyle(0.08, (2.0, 1.0))

    def test_counts_enforced(self):
        style = PhantomStyle(0.08, (1.0, 1.0))
        with pytest.raises(DomainError):
            PhantomSpec(0, 4, 2, style, ())
        with pytest.raises(DomainError):
            PhantomSpec(0, 1, 7, PhantomStyle(0.08, tuple([1.0] * 7)), ())

    def test_random_spec_deterministic(self):
        assert random_spec(5) == random_spec(5)


class TestGeneration:
    def test_same_seed_identical(self, case7):
        again = generate_phantom(random_spec(7))
        assert np.array_equal(case7.ct.values, again.ct.values)
        assert np.array_equal(case7.reference_dose.values, again.reference_dose.values)
        for a, b in zip(case7.structures, again.structures):
            assert np.array_equal(a.voxels, b.voxels)

    def test_hi_matches_style(self):
        for seed in (1, 2, 3):
            spec = random_spec(seed)
            case = generate_phantom(spec)
            for s in case.ptvs:
                hi = dvh.homogeneity_index(case.reference_dose, s)
                assert abs(hi - spec.style.alpha_hi) <= 0.01

    def test_hi_extremes_differ(self):
        spec = random_spec(9)
        lo = PhantomSpec(spec.seed, spec.n_ptv, spec.n_oar,
                         PhantomStyle(0.02, spec.style.alpha_spare), spec.beam_angles)
        hi = PhantomSpec(spec.seed, spec.n_ptv, spec.n_oar,
                         PhantomStyle(0.20, spec.style.alpha_spare), spec.beam_angles)
        case_lo, case_hi = generate_phantom(lo), generate_phantom(hi)
        ptv = case_lo.ptvs[0]
        delta = (dvh.homogeneity_index(case_hi.reference_dose, case_hi.ptvs[0])
                 - dvh.homogeneity_index(case_lo.reference_dose, ptv))
        assert delta >= 0.1

    def test_ci_invariant(self):
        for seed in (4, 5, 6):
            case = generate_phantom(random_spec(seed))
            for s in case.ptvs:
                assert dvh.conformity_index(case.reference_dose, s, s.prescription) >= 0.95

    def test_oar_mean_monotone_in_spare(self):
        spec = random_spec(9)
        means = []
        for w in (0.7, 0.9, 1.1, 1.3):
            tweaked = PhantomSpec(spec.seed, spec.n_ptv, spec.n_oar,
                                  PhantomStyle(spec.style.alpha_hi,
                                               tuple([w] * spec.n_oar)),
                                  spec.beam_angles)
            case = generate_phantom(tweaked)
            means.append(dvh.mean_dose(case.reference_dose, case.oars[0]))
        assert all(b > a for a, b in zip(means, means[1:]))

    def test_structures_disjoint(self, case7):
        total = np.zeros(case7.ct.dims, int)
        for s in case7.structures:
            total += s.voxels
        assert total.max() == 1


class TestRebuild:
    def test_hi_retarget(self, case7):
        for h in (0.02, 0.11, 0.20):
            rb = rebuild_reference(case7, {s.name: h for s in case7.ptvs},
                                   {s.name: 1.0 for s in case7.oars})
            for s in case7.ptvs:
                assert abs(dvh.homogeneity_index(rb, s) - h) <= 0.01

    def test_oar_weight_scales_mean_exactly(self, case7):
        base = {s.name: dvh.mean_dose(case7.reference_dose, s) for s in case7.oars}
        rb = rebuild_reference(case7, {s.name: 0.08 for s in case7.ptvs},
                               {s.name: 0.8 for s in case7.oars})
        for s in case7.oars:
            assert dvh.mean_dose(rb, s) == pytest.approx(0.8 * base[s.name], rel=1e-4)

    def test_ptv_mean_invariant_under_hi(self, case7):
        means = []
        for h in (0.02, 0.20):
            rb = rebuild_reference(case7, {s.name: h for s in case7.ptvs},
                                   {s.name: 1.0 for s in case7.oars})
            means.append([dvh.mean_dose(rb, s) for s in case7.ptvs])
        assert np.allclose(means[0], means[1], rtol=1e-3)

    def test_identity_outside_structures(self, case7):
        rb = rebuild_reference(case7, {s.name: 0.15 for s in case7.ptvs},
                               {s.name: 0.7 for s in case7.oars})
        outside = np.ones(case7.ct.dims, bool)
        for s in case7.structures:
            outside &= ~s.voxels
        assert np.allclose(rb.values[outside], case7.reference_dose.values[outside],
                           atol=1e-5)


class TestCohort:
    def test_split_counts(self):
        assert split_counts(10) == (7, 1, 2)
        assert split_counts(60) == (42, 6, 12)
        assert split_counts(1) == (1, 0, 0)

    def test_cohort_ten(self):
        cohort = generate_cohort(10, 3)
        parts = list(cohort.split.values())
        assert parts.count("train") == 7
        assert parts.count("valid") == 1
        assert parts.count("test") == 2
        ids = [c.case_id for c in cohort.cases]
        assert len(set(ids)) == 10

    def test_regeneration_identical_split(self):
        a = generate_cohort(6, 5)
        b = generate_cohort(6, 5)
        assert a.split == b.split

    def test_dir_round_trip(self, tmp_path):
        cohort = generate_cohort(3, 2)
        write_cohort_dir(cohort, tmp_path / "c")
        back = read_cohort_dir(tmp_path / "c")
        assert back.split == cohort.split
        for a, b in zip(cohort.cases, back.cases):
            assert a.case_id == b.case_id
            assert np.array_equal(a.reference_dose.values, b.reference_dose.values)

    def test_n_must_be_positive(self):
        with pytest.raises(DomainError):
            generate_cohort(0, 1)
