#!/usr/bin/env python3
"""
Test synthetic tasks, shifts, splits and CSV I/O
"""

import numpy as np
import pytest

from laplace_lora.core.errors import (
    BadConfig,
    DimMismatch,
    LabelOutOfRange,
    ParseError,
    SplitLeakage,
)
from laplace_lora.data import (
    Dataset,
    ShiftKind,
    Split,
    apply_shift,
    apply_shifts,
    ensure_tuning_split,
    gen_synthetic,
    load_csv,
    parse_shift,
    save_csv,
    train_val_split,
)


class TestSynthetic:
    @pytest.mark.parametrize("name,n_classes", [("gaussians", 4), ("moons", 2), ("rings", 3)])
    def test_class_balance(self, name, n_classes):
        ds = gen_synthetic(name, n_per_class=25, n_classes=n_classes, noise=0.2, seed=1)
        assert ds.size == 25 * n_classes
        assert np.bincount(ds.labels).tolist() == [25] * n_classes
        assert ds.input_dim == 2
        assert ds.name == name

    def test_deterministic(self):
        first = gen_synthetic("gaussians", 10, seed=3)
        second = gen_synthetic("gaussians", 10, seed=3)
        np.testing.assert_array_equal(first.features, second.features)
        np.testing.assert_array_equal(first.labels, second.labels)
        other = gen_synthetic("gaussians", 10, seed=4)
        assert not np.array_equal(first.features, other.features)

    def test_extra_dimensions(self):
        assert gen_synthetic("gaussians", 5, input_dim=6).input_dim == 6

    def test_split_tag(self):
        assert gen_synthetic("rings", 5, split=Split.TEST).split == Split.TEST

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(name="spirals", n_per_class=5),
            dict(name="moons", n_per_class=5, n_classes=3),
            dict(name="gaussians", n_per_class=0),
            dict(name="gaussians", n_per_class=5, noise=-1.0),
        ],
    )
    def test_bad_arguments(self, kwargs):
        with pytest.raises(BadConfig):
            gen_synthetic(**kwargs)


class TestShifts:
    @pytest.fixture
    def blobs(self):
        return gen_synthetic("gaussians", 10, seed=0, split=Split.TEST)

    def test_full_rotation_is_identity(self, blobs):
        turned = apply_shifts(blobs, "rotate:360")
        np.testing.assert_allclose(turned.features, blobs.features, atol=1e-12)

    def test_quarter_turn_is_counterclockwise(self):
        ds = Dataset(np.array([[1.0, 0.0]]), np.array([0]), n_classes=2)
        out = apply_shifts(ds, "rotate:90")
        np.testing.assert_allclose(out.features, [[0.0, 1.0]], atol=1e-15)

    def test_translate(self, blobs):
        out = apply_shifts(blobs, "translate:1,-2")
        np.testing.assert_allclose(out.features, blobs.features + [1.0, -2.0])
        np.testing.assert_allclose(
            apply_shifts(blobs, "translate:3").features, blobs.features + 3.0
        )

    def test_translate_dim_mismatch(self, blobs):
        with pytest.raises(DimMismatch):
            apply_shifts(blobs, "translate:1,2,3")

    def test_labels_and_split_preserved(self, blobs):
        out = apply_shifts(blobs, "rotate:45+scale:2+noise:0.5", seed=9)
        np.testing.assert_array_equal(out.labels, blobs.labels)
        assert out.split == Split.TEST

    def test_noise_is_seeded(self, blobs):
        first = apply_shifts(blobs, "noise:0.5", seed=2)
        second = apply_shifts(blobs, "noise:0.5", seed=2)
        np.testing.assert_array_equal(first.features, second.features)

    def test_composition_order(self):
        shifts = parse_shift("rotate:90+translate:1,0")
        assert [s.kind for s in shifts] == [ShiftKind.ROTATE, ShiftKind.TRANSLATE]
        ds = Dataset(np.array([[1.0, 0.0]]), np.array([0]), n_classes=2)
        out = ds
        for shift in shifts:
            out = apply_shift(out, shift)
        np.testing.assert_allclose(out.features, [[1.0, 1.0]], atol=1e-15)

    def test_label(self):
        assert parse_shift("translate:3,3")[0].label == "translate:3,3"

    @pytest.mark.parametrize("spec", ["spin:3", "rotate:", "rotate:a", "scale:1,2", "noise:-1"])
    def test_invalid(self, blobs, spec):
        with pytest.raises(BadConfig):
            apply_shifts(blobs, spec)


class TestSplits:
    def test_train_val_split(self):
        ds = gen_synthetic("gaussians", 20, seed=0)
        fit, val = train_val_split(ds, 0.25, seed=0)
        assert fit.split == Split.TRAIN and val.split == Split.VAL
        assert fit.size + val.size == ds.size
        assert val.size == 20
        assert np.bincount(val.labels).tolist() == [5, 5, 5, 5]
        rows = {tuple(r) for r in fit.features} | {tuple(r) for r in val.features}
        assert len(rows) == ds.size

    def test_tuning_refuses_test_data(self):
        ds = gen_synthetic("gaussians", 5, split=Split.TEST)
        with pytest.raises(SplitLeakage):
            ensure_tuning_split(ds)
        ensure_tuning_split(ds.with_split(Split.VAL))


class TestDataset:
    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan, 1.0]]), np.array([0]), n_classes=2)

    def test_label_range(self):
        with pytest.raises(LabelOutOfRange):
            Dataset(np.zeros((2, 2)), np.array([0, 2]), n_classes=2)

    def test_shape_mismatch(self):
        with pytest.raises(DimMismatch):
            Dataset(np.zeros((3, 2)), np.array([0, 1]), n_classes=2)


class TestCsv:
    def test_round_trip_is_exact(self, tmp_path):
        ds = gen_synthetic("moons", 15, n_classes=2, noise=0.1, seed=2)
        back = load_csv(save_csv(ds, tmp_path / "moons.csv"), n_classes=2)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.name == "moons"

    def test_hand_written_file(self, tmp_path):
        path = tmp_path / "tiny.csv"
        path.write_text("x0,x1,label\n0.5,1.5,0\n-1,2,1\n3e-1,0,2\n")
        ds = load_csv(path, split=Split.VAL)
        np.testing.assert_array_equal(ds.features, [[0.5, 1.5], [-1.0, 2.0], [0.3, 0.0]])
        assert ds.labels.tolist() == [0, 1, 2]
        assert ds.n_classes == 3
        assert ds.split == Split.VAL

    def test_bad_cell_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,x1,label\n0.5,1.5,0\n1.0,2.0,1\n1.0,abc,1\n")
        with pytest.raises(ParseError) as info:
            load_csv(path)
        assert info.value.line == 4
        assert "line 4" in str(info.value)

    def test_bad_label_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,label\n0.5,zero\n")
        with pytest.raises(ParseError) as info:
            load_csv(path)
        assert info.value.line == 2

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,label\n0,0,0\n")
        with pytest.raises(ParseError) as info:
            load_csv(path)
        assert info.value.line == 1

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,label\n0.5,0\n0.1,4\n")
        with pytest.raises(LabelOutOfRange):
            load_csv(path, n_classes=3)
