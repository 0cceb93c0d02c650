import numpy as np
import pytest

from robust_ssl.data import (DataError, SyntheticSpec, load_csv, make_base, make_dataset,
                             mixup_midpoints, noise_box, save_csv)


def test_same_seed_same_dataset():
    a = make_dataset(SyntheticSpec(seed=4))
    b = make_dataset(SyntheticSpec(seed=4))
    assert a.equals(b)
    assert not a.equals(make_dataset(SyntheticSpec(seed=5)))


@pytest.mark.parametrize("ratio,expected", [(0.0, 0), (0.25, 667), (0.5, 2000), (0.75, 6000)])
def test_ood_count_follows_ratio(ratio, expected):
    ds = make_dataset(SyntheticSpec(ood_ratio=ratio))
    assert int(ds.ood_mask.sum()) == expected
    assert (~ds.ood_mask).sum() == 2000


def test_faraway_points_are_far():
    ds = make_dataset(SyntheticSpec(ood_kind="faraway", ood_ratio=0.5, seed=1))
    xid, xo = ds.x_unlabeled[~ds.ood_mask], ds.x_unlabeled[ds.ood_mask]
    assert np.linalg.norm(xo.mean(0) - xid.mean(0)) > 5
    assert np.linalg.norm(xo - xid.mean(0), axis=1).min() > 5


def test_faraway_offset_too_close_is_rejected():
    with pytest.raises(DataError):
        make_dataset(SyntheticSpec(faraway_offset=(1.0, 1.0)))


def test_boundary_points_are_cross_class_midpoints():
    ds = make_dataset(SyntheticSpec(ood_kind="boundary", ood_ratio=0.25))
    xo = ds.x_unlabeled[ds.ood_mask]
    xid = ds.x_unlabeled[~ds.ood_mask]
    lo, hi = xid.min(0), xid.max(0)
    assert ((xo >= lo) & (xo <= hi)).all()
    np.testing.assert_allclose(mixup_midpoints([[0, 0]], [[2, 4]]), [[1, 2]])


def test_noise_points_inside_widened_box():
    ds = make_dataset(SyntheticSpec(ood_kind="noise", ood_ratio=0.25))
    lo, hi = noise_box(ds.x_unlabeled[~ds.ood_mask])
    xo = ds.x_unlabeled[ds.ood_mask]
    assert ((xo >= lo) & (xo <= hi)).all()


def test_labeled_set_is_balanced_and_in_distribution():
    for kind in ("two-moons", "blobs", "circles"):
        ds = make_base(SyntheticSpec(kind=kind, n_labeled=6))
        assert np.bincount(ds.y_labeled).tolist() == [3, 3]


def test_random_placement_differs_from_spread():
    a = make_base(SyntheticSpec(labeled_placement="random"))
    b = make_base(SyntheticSpec(labeled_placement="spread"))
    assert not np.array_equal(a.x_labeled, b.x_labeled)
    np.testing.assert_array_equal(a.x_unlabeled, b.x_unlabeled)


@pytest.mark.parametrize("bad", [dict(ood_ratio=1.0), dict(ood_ratio=-0.1), dict(n_labeled=5),
                                 dict(kind="spiral"), dict(ood_kind="adversarial"),
                                 dict(noise_sigma=-1), dict(labeled_placement="grid")])
def test_spec_validation(bad):
    with pytest.raises(DataError):
        SyntheticSpec(**bad)


def test_csv_round_trip(tmp_path):
    ds = make_dataset(SyntheticSpec(n_unlabeled_id=50, n_test=20, ood_ratio=0.5))
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert ds.equals(back)


@pytest.mark.parametrize("content,needle", [
    ("", "empty"),
    ("x0,x1,label,split\n", "provenance"),
    ("x0,x1,label,split,provenance\n1,2,0,train\n", "expected 5 fields"),
    ("x0,x1,label,split,provenance\n1,a,0,train,id\n", "malformed"),
    ("x0,x1,label,split,provenance\n1,2,0,dev,id\n", "split"),
])
def test_csv_errors(tmp_path, content, needle):
    p = tmp_path / "bad.csv"
    p.write_text(content)
    with pytest.raises(DataError, match=needle):
        load_csv(p)


def test_summary_fields():
    s = make_dataset(SyntheticSpec(ood_ratio=0.5)).summary()
    assert s["n_unlabeled"] == 4000 and s["n_unlabeled_ood"] == 2000
    assert s["ood_ratio"] == pytest.approx(0.5)
