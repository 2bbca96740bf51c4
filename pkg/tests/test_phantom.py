from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shortmr.phantom import (
    Cohort, PhantomSpec, SubjectRecord, balanced_demographics, generate_cohort, generate_subject,
    subject_stream, synthetic_atlas,
)
from shortmr.volume import Volume

QUIET = dict(noise_sigma=0.0, anatomy_jitter=0.0)


def record(sex="female", race="White", dx="CN", sid="s"):
    return SubjectRecord(sid, sex, race, 70.0, dx, (sid + "_0",))


class TestAtlas:
    def test_two_region_grid(self):
        atlas = synthetic_atlas((8, 8, 8), 2, "grid", 0)
        assert set(np.unique(atlas.labels)) == {0, 1, 2}
        # the split is along one axis, so each region is a contiguous half-ellipsoid
        first_axis = [np.unique(np.nonzero(atlas.labels == r)[0]) for r in (1, 2)]
        assert first_axis[0].max() < first_axis[1].min() or first_axis[1].max() < first_axis[0].min()

    @pytest.mark.parametrize("scheme", ["grid", "voronoi"])
    def test_deterministic_and_masked(self, scheme):
        a = synthetic_atlas((12, 10, 9), 7, scheme, 3)
        b = synthetic_atlas((12, 10, 9), 7, scheme, 3)
        assert np.array_equal(a.labels, b.labels)
        assert set(np.unique(a.labels)) == set(range(8))
        inside = a.labels > 0
        assert a.brain_mask.sum() == inside.sum()

    def test_pigeonhole(self):
        mask_voxels = int(synthetic_atlas((8, 8, 8), 2, "grid", 0).brain_mask.sum())
        with pytest.raises(ValueError):
            synthetic_atlas((8, 8, 8), mask_voxels + 1, "grid", 0)

    def test_too_few_regions(self):
        with pytest.raises(ValueError):
            synthetic_atlas((8, 8, 8), 1, "grid", 0)


class TestSpec:
    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            PhantomSpec(attr_regions=(3,), disease_regions=(3,))

    def test_overlap_allowed_on_request(self):
        assert PhantomSpec(attr_regions=(3,), disease_regions=(3,), allow_overlap=True).attr_regions == (3,)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(shape=(7, 8, 8)), dict(disease_effect=0.0), dict(disease_effect=1.5),
         dict(noise_sigma=-1.0), dict(attr_regions=(17,))],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PhantomSpec(**kwargs)

    def test_dict_round_trip(self):
        spec = PhantomSpec(shape=(16, 16, 16), attr_regions=(2, 4), seed=9)
        assert PhantomSpec.from_dict(spec.to_dict()) == spec


class TestSubject:
    @pytest.fixture
    def setup(self):
        spec = PhantomSpec(shape=(16, 16, 16), n_regions=8, attr_regions=(3,), disease_regions=(6,))
        return spec, synthetic_atlas(spec.shape, spec.n_regions, "grid", 0)

    def test_all_effects_off(self, setup):
        spec, atlas = setup
        spec = replace(spec, attr_effect=0.0, disease_effect=1.0, **QUIET)
        vols = [
            generate_subject(spec, record(s, r, d), atlas, subject_stream(0, i)).data
            for i, (s, r, d) in enumerate([("female", "Black", "CN"), ("male", "White", "AD"), ("male", "Black", "CN")])
        ]
        assert all(np.array_equal(vols[0], v) for v in vols[1:])

    def test_attribute_delta(self, setup):
        spec, atlas = setup
        spec = replace(spec, attr_effect=0.5, **QUIET)
        region = atlas.labels == 3
        a0 = generate_subject(spec, record("female"), atlas, subject_stream(0, 0)).data
        a1 = generate_subject(spec, record("male"), atlas, subject_stream(0, 0)).data
        assert float(a1[region].mean() - a0[region].mean()) == pytest.approx(0.5, abs=1e-6)

    def test_disease_ratio_monte_carlo(self, setup):
        spec, atlas = setup
        spec = replace(spec, disease_effect=0.8, noise_sigma=0.1)
        region = atlas.labels == 6

        def region_mean(dx, offset):
            return np.mean([
                generate_subject(spec, record(dx=dx), atlas, subject_stream(11, offset + i)).data[region].mean()
                for i in range(500)
            ])

        ratio = region_mean("AD", 0) / region_mean("CN", 500)
        assert ratio == pytest.approx(0.8, abs=0.02)

    @given(st.sampled_from(["female", "male"]), st.sampled_from(["CN", "AD"]), st.integers(0, 50))
    def test_effects_confined(self, sex, dx, index):
        spec = PhantomSpec(
            shape=(8, 8, 8), n_regions=4, attr_regions=(1,), disease_regions=(3,), attr_effect=0.7,
            disease_effect=0.6, **QUIET,
        )
        atlas = synthetic_atlas(spec.shape, spec.n_regions, "grid", 0)
        off = replace(spec, attr_effect=0.0, disease_effect=1.0)
        on_vol = generate_subject(spec, record(sex, dx=dx), atlas, subject_stream(0, index)).data
        off_vol = generate_subject(off, record(sex, dx=dx), atlas, subject_stream(0, index)).data
        outside = ~np.isin(atlas.labels, (1, 3))
        assert np.array_equal(on_vol[outside], off_vol[outside])

    def test_background_is_zero(self, setup):
        spec, atlas = setup
        v = generate_subject(spec, record("male", dx="AD"), atlas, subject_stream(0, 3))
        assert isinstance(v, Volume) and v.data.dtype == np.float32
        assert np.all(v.data[atlas.labels == 0] == 0)

    def test_shape_mismatch(self, setup):
        spec, _ = setup
        with pytest.raises(ValueError):
            generate_subject(spec, record(), synthetic_atlas((8, 8, 8), 8, "grid", 0), subject_stream(0, 0))


class TestCohort:
    def test_composition_echo(self, tiny_spec):
        c = generate_cohort(tiny_spec, [("female", "White", "CN", 70, 3)])
        assert len(c) == 3
        assert all((r.sex, r.race, r.diagnosis) == ("female", "White", "CN") for r in c.subjects)

    def test_deterministic(self, tiny_spec):
        demo = balanced_demographics(2)
        a, b = generate_cohort(tiny_spec, demo), generate_cohort(tiny_spec, demo)
        assert [r.subject_id for r in a.subjects] == [r.subject_id for r in b.subjects]
        assert all(np.array_equal(a.samples[k].data, b.samples[k].data) for k in a.samples)

    def test_cell_counts(self):
        spec = PhantomSpec(shape=(8, 8, 8), n_regions=4, attr_regions=(1,), disease_regions=(2,))
        c = generate_cohort(spec, balanced_demographics(40))
        assert c.counts("sex", "diagnosis") == {
            ("female", "CN"): 40, ("female", "AD"): 40, ("male", "CN"): 40, ("male", "AD"): 40,
        }

    def test_unrelated_subjects_unchanged_by_edits(self, tiny_spec):
        a = generate_cohort(tiny_spec, [("female", "White", "CN", 70, 2), ("male", "White", "AD", 70, 2)])
        b = generate_cohort(tiny_spec, [("female", "White", "CN", 70, 2), ("male", "White", "AD", 70, 3)])
        for sid in a.samples:
            assert np.array_equal(a.samples[sid].data, b.samples[sid].data)

    def test_multiple_samples_share_anatomy(self, tiny_spec):
        spec = replace(tiny_spec, samples_per_subject=3)
        c = generate_cohort(spec, [("male", "White", "AD", 70, 1)])
        (rec,) = c.subjects
        assert len(rec.sample_ids) == 3
        vols = [c.samples[s].data for s in rec.sample_ids]
        assert not np.array_equal(vols[0], vols[1])
        assert abs(float(np.corrcoef(vols[0].ravel(), vols[1].ravel())[0, 1])) > 0.9

    def test_empty_demographics(self, tiny_spec):
        with pytest.raises(ValueError, match="empty"):
            generate_cohort(tiny_spec, [])

    def test_negative_count(self, tiny_spec):
        with pytest.raises(ValueError):
            generate_cohort(tiny_spec, [("male", "White", "AD", 70, -1)])

    def test_sample_referenced_once(self):
        vol = Volume(np.zeros((2, 2, 2)))
        recs = [record(sid="a"), SubjectRecord("b", "male", "White", 60.0, "AD", ("a_0",))]
        with pytest.raises(ValueError):
            Cohort(recs, {"a_0": vol})

    def test_bad_vocabulary(self):
        with pytest.raises(ValueError):
            record(sex="unknown")
