import numpy as np
import pytest

from voxrel.preprocess import load_manifest
from voxrel.synth import (
    PhantomParams,
    _anatomy,
    generate_dataset,
    generate_parcellation,
    generate_subject,
    load_parcellation,
    save_parcellation,
)

P = PhantomParams()


def test_subject_deterministic_per_seed():
    a = generate_subject("patient", "lesion", P, seed=11)
    b = generate_subject("patient", "lesion", P, seed=11)
    c = generate_subject("patient", "lesion", P, seed=12)
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    assert a[0] != c[0]


def test_intensities_in_unit_range():
    vol, _, _ = generate_subject("patient", "lesion", P, seed=3)
    assert vol.data.min() == 0.0
    assert vol.data.max() == 1.0


def test_control_with_zero_lesion_count_has_empty_mask():
    p = PhantomParams(control_lesion_count_range=(0, 0))
    _, lesion, _ = generate_subject("control", "lesion", p, seed=5)
    assert lesion.count() == 0


def test_masks_inside_brain():
    vol, lesion, wm = generate_subject("patient", "lesion", P, seed=9)
    brain = _anatomy(P, 1.0)["brain"]
    assert not (lesion.data.astype(bool) & ~brain).any()
    assert not (wm.data.astype(bool) & ~brain).any()
    assert (lesion.data.astype(bool) & ~wm.data.astype(bool)).sum() == 0


def test_lesion_volume_separation():
    pv, cv = [], []
    for i in range(30):
        _, lp, _ = generate_subject("patient", "lesion", P, seed=100 + i)
        _, lc, _ = generate_subject("control", "lesion", P, seed=200 + i)
        pv.append(lp.count())
        cv.append(lc.count())
    assert np.mean(pv) > 10 * max(np.mean(cv), 1e-9)


def test_atrophy_regime_scales_ventricles_not_lesions():
    _, lesion_p, wm_p = generate_subject("patient", "atrophy", P, seed=31)
    _, lesion_c, wm_c = generate_subject("control", "atrophy", P, seed=31)
    assert lesion_p.count() == 0 and lesion_c.count() == 0
    # larger ventricles displace white matter
    assert wm_p.count() < wm_c.count()


def test_parcellation_covers_brain_exactly():
    parc = generate_parcellation(P)
    regions = _anatomy(P, 1.0)
    brain = regions["brain"]
    assert np.array_equal(parc.labels > 0, brain)
    counts = np.bincount(parc.labels.ravel(), minlength=len(parc.names))
    assert counts[1:].sum() == brain.sum()
    assert (counts[1:] > 0).all()  # every named region realized


def test_parcellation_ventricle_label_matches_geometry():
    parc = generate_parcellation(P)
    regions = _anatomy(P, 1.0)
    vent_label = parc.names.index("ventricles")
    assert np.array_equal(parc.labels == vent_label, regions["ventricles"])


def test_parcellation_round_trip(tmp_path):
    parc = generate_parcellation(P)
    save_parcellation(parc, tmp_path / "labels.vvol", tmp_path / "names.json")
    again = load_parcellation(tmp_path / "labels.vvol", tmp_path / "names.json")
    assert again.names == parc.names
    assert np.array_equal(again.labels, parc.labels)


def test_generate_dataset_counts_and_balance(tmp_path):
    m = generate_dataset(3, "lesion", P, seed=1, out_dir=tmp_path)
    assert len(m.subjects) == 6
    assert sum(s.label for s in m.subjects) == 3
    loaded = load_manifest(tmp_path / "manifest.json")
    assert len(loaded.subjects) == 6


def test_generate_dataset_reproducible_bytes(tmp_path):
    generate_dataset(2, "lesion", P, seed=4, out_dir=tmp_path / "a")
    generate_dataset(2, "lesion", P, seed=4, out_dir=tmp_path / "b")
    for rel in ["manifest.json", "images/p000.vvol", "lesions/p001.vvol", "wm/c000.vvol"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_dataset_rejects_zero(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(0, "lesion", P, seed=0, out_dir=tmp_path)


def test_params_validation():
    with pytest.raises(ValueError):
        PhantomParams(dims=(8, 38, 32))
    with pytest.raises(ValueError):
        PhantomParams(lesion_radius_range=(1.0, 50.0))


def test_params_dict_round_trip():
    p = PhantomParams(lesion_count_range=(2, 4))
    again = PhantomParams.from_dict(p.to_dict())
    assert again == p
