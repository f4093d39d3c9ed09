import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.spatial.distance import directed_hausdorff

from noduleseg.evaluator import dsc
from noduleseg.phantom_gen import NODULE_TYPES, PhantomSpec, generate, generate_dataset, simulate_raters
from noduleseg.volume_store import BinaryMask3D, consensus_mask


def hausdorff(a, b):
    pa, pb = np.argwhere(a), np.argwhere(b)
    return max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])


def sphere(diameter, size=20):
    c = (size - 1) / 2
    z, y, x = np.ogrid[:size, :size, :size]
    return BinaryMask3D((((z - c) ** 2 + (y - c) ** 2 + (x - c) ** 2) <= (diameter / 2) ** 2).astype(np.uint8))


@pytest.fixture(scope="module")
def every_type():
    return {
        kind: generate(PhantomSpec(nodule_type=kind, diameter_mm=4.0 if kind == "small" else 10.0, noise_std=0.0, seed=5))
        for kind in NODULE_TYPES
    }


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(nodule_type="spiky")
    with pytest.raises(ValueError):
        PhantomSpec(nodule_type="small", diameter_mm=6.0)
    with pytest.raises(ValueError):
        PhantomSpec(diameter_mm=30.0, shape=(24, 64, 64))
    with pytest.raises(ValueError):
        PhantomSpec(noise_std=-1)
    with pytest.raises(ValueError):
        generate(PhantomSpec(diameter_mm=22.0, shape=(24, 64, 64)))


def test_noise_free_volume_is_piecewise_constant(every_type):
    for kind, case in every_type.items():
        s = case.spec
        levels = {s.lung_hu, s.wall_hu, s.nodule_hu}
        assert set(np.unique(case.volume.data).tolist()) <= levels, kind
        assert np.all(case.volume.data[case.wall_mask.as_bool()] == s.wall_hu)


@pytest.mark.parametrize("d", [4.0, 6.0, 8.0, 10.0, 14.0])
def test_voxel_count_matches_sphere_volume(d):
    case = generate(PhantomSpec(diameter_mm=d, shape=(32, 64, 64), seed=int(d)))
    expected = math.pi * d**3 / 6
    assert abs(case.true_mask.volume - expected) <= 0.15 * expected


def test_juxtapleural_touches_wall(every_type):
    case = every_type["juxtapleural"]
    grown = ndimage.binary_dilation(case.true_mask.as_bool(), structure=ndimage.generate_binary_structure(3, 1))
    assert (grown & case.wall_mask.as_bool()).any()
    assert case.record.attached
    for kind in ("isolated", "ggo", "calcified"):
        other = every_type[kind]
        grown = ndimage.binary_dilation(other.true_mask.as_bool(), iterations=2)
        assert not (grown & other.wall_mask.as_bool()).any()


def test_type_signatures(every_type):
    iso = every_type["isolated"].spec
    ggo = every_type["ggo"].spec
    assert abs(ggo.nodule_hu - ggo.lung_hu) <= 0.25 * abs(iso.nodule_hu - iso.lung_hu)
    calc = every_type["calcified"]
    assert calc.spec.nodule_hu - calc.spec.tissue_hu >= 600
    assert np.all(calc.volume.data[calc.true_mask.as_bool()] == calc.spec.calcified_hu)
    cav = every_type["cavitary"]
    assert cav.cavity_mask is not None and cav.cavity_mask.volume > 0
    core = cav.cavity_mask.as_bool()
    assert np.all(cav.volume.data[core] == cav.spec.lung_hu)
    assert not (core & ~cav.true_mask.as_bool()).any()
    assert every_type["small"].record.diameter_mm < 6
    assert all(every_type[k].cavity_mask is None for k in NODULE_TYPES if k != "cavitary")


def test_generation_is_pure(every_type):
    again = generate(every_type["cavitary"].spec)
    ref = every_type["cavitary"]
    assert np.array_equal(again.volume.data, ref.volume.data)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(again.rater_masks, ref.rater_masks))
    assert again.record == ref.record and again.seed_box == ref.seed_box
    other = generate(PhantomSpec(nodule_type="cavitary", seed=6, noise_std=0.0))
    assert not np.array_equal(other.volume.data, ref.volume.data)


def test_seed_box_contains_start_footprint(every_type):
    for case in every_type.values():
        box = case.seed_box
        footprint = case.true_mask.as_bool()[box.z]
        assert footprint.any()
        assert not (footprint & ~box.box_mask(footprint.shape)).any()


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(NODULE_TYPES), st.integers(0, 2**31 - 1))
def test_case_invariants(kind, seed):
    d = 4.0 if kind == "small" else 8.0
    case = generate(PhantomSpec(nodule_type=kind, diameter_mm=d, seed=seed))
    assert len(case.rater_masks) == 4
    truth = case.true_mask.as_bool()
    for r in case.rater_masks:
        assert hausdorff(r.as_bool(), truth) <= 2
    box = case.seed_box
    assert not (truth[box.z] & ~box.box_mask(truth.shape[1:])).any()


def test_zero_perturbation_gives_exact_raters():
    truth = sphere(10)
    raters = simulate_raters(truth, seed=1, dilate_rate=0, erode_rate=0, flip_rate=0)
    assert all(np.array_equal(r.data, truth.data) for r in raters)
    assert np.array_equal(consensus_mask(raters).data, truth.data)


def test_rater_determinism():
    truth = sphere(10)
    a, b = simulate_raters(truth, seed=9), simulate_raters(truth, seed=9)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    c = simulate_raters(truth, seed=10)
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(a, c))


@pytest.mark.parametrize("diameter", [8, 10, 14])
def test_consensus_recovers_truth(diameter):
    truth = sphere(diameter)
    for seed in range(5):
        raters = simulate_raters(truth, seed=seed)
        assert dsc(truth, consensus_mask(raters)) >= 0.95
        for r in raters:
            assert hausdorff(r.as_bool(), truth.as_bool()) <= 2
        assert len({r.data.tobytes() for r in raters}) == 4


def test_raters_reject_empty_mask():
    with pytest.raises(ValueError):
        simulate_raters(BinaryMask3D(np.zeros((4, 4, 4), np.uint8)))


def test_dataset_cycles_types_and_is_seeded():
    cases = generate_dataset(12, seed=3)
    kinds = [c.spec.nodule_type for c in cases]
    assert kinds == list(NODULE_TYPES) * 2
    assert [c.case_id for c in cases[:2]] == ["phantom000", "phantom001"]
    assert all(c.record.diameter_mm < 6 for c in cases if c.spec.nodule_type == "small")
    again = generate_dataset(12, seed=3)
    assert all(np.array_equal(a.volume.data, b.volume.data) for a, b in zip(cases, again))
