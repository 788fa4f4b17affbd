import numpy as np
import pytest

from rootsr.metrics import (
    BG,
    EDT_INF,
    FN,
    FP,
    TP,
    confusion_map,
    distance_tolerant_prf,
    edt_squared,
    export_confusion_slices,
    write_report_csv,
)
from rootsr.volume import Volume

from conftest import edt_squared_ref, rng, tolerant_prf_ref


def mask(arr):
    return np.asarray(arr, dtype=np.uint8)


class TestEdt:
    def test_1d_line(self):
        m = np.zeros((1, 1, 4), dtype=np.uint8)
        m[0, 0, 0] = m[0, 0, 3] = 1
        assert edt_squared(m).dist2[0, 0].tolist() == [0, 1, 1, 0]

    def test_pythagoras_corner(self):
        m = np.zeros((2, 2, 2), dtype=np.uint8)
        m[0, 0, 0] = 1
        d = edt_squared(m).dist2
        assert d[1, 1, 1] == 3
        assert d[1, 1, 0] == 2
        assert d[0, 0, 1] == 1

    def test_zero_on_features(self):
        r = rng(2)
        m = (r.random((8, 8, 8)) < 0.2)
        d = edt_squared(m).dist2
        assert (d[m] == 0).all()
        assert (d[~m] > 0).all()

    def test_empty_mask_sentinel(self):
        d = edt_squared(np.zeros((3, 3, 3), dtype=np.uint8)).dist2
        assert (d == EDT_INF).all()

    @pytest.mark.parametrize("density", [0.01, 0.05, 0.2])
    def test_matches_brute_force(self, density):
        r = rng(int(density * 1000))
        for trial in range(6):
            m = r.random((9, 10, 11)) < density
            got = edt_squared(m).dist2
            ref = edt_squared_ref(m)
            if not m.any():
                assert (got == EDT_INF).all()
                continue
            assert np.array_equal(got, ref)

    def test_lipschitz_along_axes(self):
        r = rng(5)
        m = r.random((10, 10, 10)) < 0.05
        m[0, 0, 0] = True
        d = np.sqrt(edt_squared(m).dist2.astype(np.float64))
        for ax in range(3):
            diff = np.abs(np.diff(d, axis=ax))
            assert diff.max() <= 1.0 + 1e-12

    def test_anisotropic_shape(self):
        m = np.zeros((2, 5, 9), dtype=np.uint8)
        m[1, 2, 4] = 1
        d = edt_squared(m).dist2
        assert d[1, 2, 8] == 16
        assert d[0, 0, 0] == 1 + 4 + 16


class TestTolerantPrf:
    def test_identical_masks_perfect(self):
        r = rng(0)
        m = mask(r.random((6, 6, 6)) < 0.2)
        rep = distance_tolerant_prf(m, m, [0, 1, 2])
        for row in rep.rows:
            assert row.precision == row.recall == row.f1 == 1.0

    def test_single_offset_voxel(self):
        p = np.zeros((5, 5, 5), dtype=np.uint8)
        g = np.zeros((5, 5, 5), dtype=np.uint8)
        g[2, 2, 2] = 1
        p[2, 2, 3] = 1
        rep = distance_tolerant_prf(p, g, [0, 1])
        assert rep.row(0).f1 == 0.0
        assert rep.row(1).f1 == 1.0

    def test_extra_far_voxel_precision(self):
        g = np.zeros((6, 6, 20), dtype=np.uint8)
        g[2, 2, :9] = 1  # |G| = 9
        p = g.copy()
        p[5, 5, 19] = 1  # one extra prediction far away
        rep = distance_tolerant_prf(p, g, [0])
        row = rep.row(0)
        assert row.precision == pytest.approx(0.9)
        assert row.recall == 1.0
        assert row.f1 == pytest.approx(2 * 0.9 / 1.9)

    def test_empty_conventions(self):
        z = np.zeros((4, 4, 4), dtype=np.uint8)
        o = z.copy()
        o[1, 1, 1] = 1
        both = distance_tolerant_prf(z, z, [0, 3]).rows
        assert all(r.precision == r.recall == r.f1 == 1.0 for r in both)
        one = distance_tolerant_prf(o, z, [0, 3]).rows
        assert all(r.precision == r.recall == r.f1 == 0.0 for r in one)
        other = distance_tolerant_prf(z, o, [5]).rows
        assert all(r.f1 == 0.0 for r in other)

    def test_matches_brute_force_all_pairs(self):
        r = rng(31)
        for trial in range(8):
            p = r.random((7, 7, 7)) < 0.1
            g = r.random((7, 7, 7)) < 0.1
            for tol in [0, 1, 2, 2.5]:
                rep = distance_tolerant_prf(mask(p), mask(g), [tol])
                prec, rec, f1 = tolerant_prf_ref(p, g, tol)
                row = rep.row(tol)
                assert row.precision == pytest.approx(prec, abs=1e-12)
                assert row.recall == pytest.approx(rec, abs=1e-12)
                assert row.f1 == pytest.approx(f1, abs=1e-12)

    def test_monotone_in_tolerance(self):
        r = rng(77)
        for trial in range(10):
            p = mask(r.random((8, 8, 8)) < 0.08)
            g = mask(r.random((8, 8, 8)) < 0.08)
            rep = distance_tolerant_prf(p, g, [0, 1, 2, 3, 4, 5])
            for a, b in zip(rep.rows, rep.rows[1:]):
                assert b.precision >= a.precision
                assert b.recall >= a.recall
                assert b.f1 >= a.f1

    def test_swap_exchanges_precision_recall(self):
        r = rng(13)
        p = mask(r.random((6, 6, 6)) < 0.15)
        g = mask(r.random((6, 6, 6)) < 0.15)
        ab = distance_tolerant_prf(p, g, [0, 1, 2]).rows
        ba = distance_tolerant_prf(g, p, [0, 1, 2]).rows
        for x, y in zip(ab, ba):
            assert x.precision == y.recall
            assert x.recall == y.precision
            assert x.f1 == pytest.approx(y.f1, abs=1e-15)

    def test_dontcare_removed_from_both(self):
        p = np.zeros((4, 4, 4), dtype=np.uint8)
        g = np.zeros((4, 4, 4), dtype=np.uint8)
        dc = np.zeros((4, 4, 4), dtype=np.uint8)
        p[0, 0, 0] = g[3, 3, 3] = 1
        dc[0, 0, 0] = dc[3, 3, 3] = 1  # masks both disagreements away
        rep = distance_tolerant_prf(p, g, [0], dontcare=dc)
        assert rep.row(0).f1 == 1.0  # both masks empty after exclusion
        assert rep.dontcare_excluded

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            distance_tolerant_prf(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)), [0])

    def test_volume_inputs(self):
        m = Volume(mask(rng(1).random((1, 5, 5, 5)) < 0.2).reshape(1, 5, 5, 5))
        rep = distance_tolerant_prf(m, m, [0])
        assert rep.row(0).f1 == 1.0


class TestConfusion:
    def test_identical_masks_all_tp(self):
        m = mask(rng(3).random((5, 5, 5)) < 0.2)
        cv = confusion_map(m, m, 0)
        assert ((cv.labels == TP) == (m != 0)).all()
        assert not (cv.labels == FP).any()
        assert not (cv.labels == FN).any()

    def test_empty_pred_all_fn(self):
        g = mask(rng(4).random((5, 5, 5)) < 0.2)
        cv = confusion_map(np.zeros_like(g), g, 1)
        assert ((cv.labels == FN) == (g != 0)).all()

    def test_counts_consistent_with_prf(self):
        r = rng(9)
        p = mask(r.random((7, 7, 7)) < 0.12)
        g = mask(r.random((7, 7, 7)) < 0.12)
        for tol in [0, 1, 2]:
            cv = confusion_map(p, g, tol)
            row = distance_tolerant_prf(p, g, [tol]).row(tol)
            assert (cv.labels == TP).sum() == row.matched_pred
            assert (cv.labels == FP).sum() == row.pred_count - row.matched_pred
            assert (cv.labels == FN).sum() == row.gt_count - row.matched_gt

    def test_categories_partition(self):
        r = rng(10)
        p = mask(r.random((6, 6, 6)) < 0.2)
        g = mask(r.random((6, 6, 6)) < 0.2)
        cv = confusion_map(p, g, 1)
        assert set(np.unique(cv.labels)) <= {BG, TP, FP, FN}

    def test_dontcare_is_background(self):
        p = np.zeros((3, 3, 3), dtype=np.uint8)
        p[1, 1, 1] = 1
        dc = p.copy()
        cv = confusion_map(p, np.zeros_like(p), 0, dontcare=dc)
        assert (cv.labels == BG).all()


class TestExports:
    def test_all_background_black(self, tmp_path):
        cv = confusion_map(np.zeros((2, 3, 4)), np.zeros((2, 3, 4)), 1)
        paths = export_confusion_slices(cv, "d", tmp_path)
        assert len(paths) == 2
        raw = open(paths[0], "rb").read()
        header, pixels = raw.split(b"255\n", 1)
        assert header.startswith(b"P6")
        assert pixels == bytes(3 * 4 * 3)

    def test_single_tp_green_pixel(self, tmp_path):
        p = np.zeros((1, 2, 2), dtype=np.uint8)
        p[0, 1, 0] = 1
        cv = confusion_map(p, p, 0)
        paths = export_confusion_slices(cv, "d", tmp_path)
        pixels = open(paths[0], "rb").read().split(b"255\n", 1)[1]
        img = np.frombuffer(pixels, dtype=np.uint8).reshape(2, 2, 3)
        assert img[1, 0].tolist() == [0, 255, 0]
        assert img.sum() == 255

    def test_image_dims_match_slice(self, tmp_path):
        cv = confusion_map(np.zeros((2, 3, 5)), np.zeros((2, 3, 5)), 1)
        path = export_confusion_slices(cv, "h", tmp_path)[0]
        header = open(path, "rb").read().split(b"\n")
        assert header[1] == b"5 2"  # cols rows

    def test_csv_format(self, tmp_path):
        m = mask(rng(2).random((4, 4, 4)) < 0.3)
        rep = distance_tolerant_prf(m, m, [0, 1.5])
        out = tmp_path / "r.csv"
        write_report_csv(rep, out)
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "tolerance,precision,recall,f1,pred_count,gt_count"
        assert lines[1].startswith("0,1.000000,1.000000,1.000000,")
        assert lines[2].startswith("1.5,")
