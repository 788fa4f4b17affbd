import dataclasses
import json

import numpy as np
import pytest

from rootsr.synth import (
    Augment,
    DatasetConfig,
    RootGenParams,
    SoilSpec,
    apply_symmetry,
    build_sample,
    compose_sample,
    generate_dataset,
    generate_root,
    inverse_symmetry,
    load_dataset,
    make_dontcare,
    make_soil,
    rasterize,
)
from rootsr.volume import Volume, write_rvol

from conftest import rng


SMALL_ROOT = RootGenParams(
    seed=3,
    taproot_length=(18.0, 24.0),
    branching_rate=0.1,
    initial_radius=(0.9, 1.4),
    domain=24.0,
)


class TestGenerateRoot:
    def test_noise_free_limit_is_straight_line(self):
        p = RootGenParams(
            seed=0, direction_jitter=0.0, branching_rate=0.0,
            taproot_length=(20.0, 20.0), initial_radius=(1.5, 1.5),
            taper_rate=0.01, domain=32.0,
        )
        root = generate_root(p)
        assert len(root.branches) == 1
        b = root.branches[0]
        assert np.allclose(b.vertices[:, 1], b.vertices[0, 1])
        assert np.allclose(b.vertices[:, 2], b.vertices[0, 2])
        d = np.diff(b.vertices[:, 0])
        assert np.allclose(d, 1.0)
        ratios = b.radii[1:] / b.radii[:-1]
        assert np.allclose(ratios, np.exp(-0.01))

    def test_deterministic_per_seed(self):
        a = generate_root(SMALL_ROOT)
        b = generate_root(SMALL_ROOT)
        assert len(a.branches) == len(b.branches)
        for ba, bb in zip(a.branches, b.branches):
            assert np.array_equal(ba.vertices, bb.vertices)
            assert np.array_equal(ba.radii, bb.radii)
        c = generate_root(dataclasses.replace(SMALL_ROOT, seed=4))
        assert not np.array_equal(a.branches[0].vertices, c.branches[0].vertices)

    def test_radii_non_increasing_and_bounded(self):
        for seed in range(10):
            root = generate_root(dataclasses.replace(SMALL_ROOT, seed=seed))
            for b in root.branches:
                assert (np.diff(b.radii) <= 1e-12).all()
                assert (b.radii >= SMALL_ROOT.r_min).all()

    def test_child_base_radius_leq_parent(self):
        for seed in range(5):
            root = generate_root(dataclasses.replace(SMALL_ROOT, seed=seed))
            for b in root.branches:
                if b.parent is None:
                    continue
                pb = root.branches[b.parent[0]]
                assert b.radii[0] <= pb.radii[b.parent[1]] + 1e-12

    def test_zero_step_rejected(self):
        with pytest.raises(ValueError, match="step_length"):
            RootGenParams(step_length=0.0)

    def test_branch_count_tracks_poisson_rate(self):
        # Monte-Carlo check of the branching mechanism: the expected number
        # of surviving children is the Poisson exposure (rate x arc length at
        # depth < max_depth) thinned by the probability that the child radius
        # draw clears r_min, integrated over the generated radii profile.
        params = RootGenParams()
        lo, hi = params.radius_ratio
        counts, expected = [], []
        for seed in range(100):
            root = generate_root(dataclasses.replace(params, seed=seed))
            counts.append(len(root.branches) - 1)
            exp = 0.0
            for b in root.branches:
                if b.depth >= params.max_depth:
                    continue
                r = b.radii[1:]  # spawn points: one per growth step
                p_survive = np.clip((hi - params.r_min / r) / (hi - lo), 0.0, 1.0)
                exp += params.branching_rate * params.step_length * p_survive.sum()
            expected.append(exp)
        mean_count, mean_expected = np.mean(counts), np.mean(expected)
        assert 0.7 * mean_expected <= mean_count <= 1.3 * mean_expected


class TestRasterize:
    def test_axis_segment_radius(self):
        # one segment along d through the volume center, radius 1.6
        center = 8.0
        verts = np.array([[0.0, center, center], [16.0, center, center]])
        root_sys = _single_branch(verts, 1.6)
        occ_sr, _ = rasterize(root_sys, 16)
        occ = occ_sr.data[0]
        # SR voxel centers on the h/w plane: (i + 0.5) / 2; occupied iff the
        # in-plane distance <= 1.6 (i.e. 3.2 SR units)
        d_slice = occ[16]  # middle of the volume
        ih, iw = np.nonzero(d_slice)
        ch = (ih + 0.5) / 2 - center
        cw = (iw + 0.5) / 2 - center
        assert ((ch**2 + cw**2) <= 1.6**2 + 1e-12).all()
        # every voxel with center distance <= 1.6 is set
        yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
        dist2 = ((yy + 0.5) / 2 - center) ** 2 + ((xx + 0.5) / 2 - center) ** 2
        assert np.array_equal(d_slice != 0, dist2 <= 1.6**2)

    def test_off_axis_exclusion(self):
        verts = np.array([[0.0, 8.0, 8.0], [16.0, 8.0, 8.0]])
        occ_sr, _ = rasterize(_single_branch(verts, 1.6), 16)
        # a voxel at in-plane distance 3.3 SR units (1.65 in 1x) must be off
        occ = occ_sr.data[0]
        iw = int(round((8.0 + 1.65) * 2 - 0.5))
        assert occ[16, 15, iw] == 0 or (8.0 + 1.65 - 8.0) <= 1.6

    def test_empty_root(self):
        from rootsr.synth import RootSystem

        occ_sr, frac = rasterize(RootSystem(()), 8)
        assert not occ_sr.data.any()
        assert not frac.data.any()

    def test_frac_is_eight_child_mean(self):
        root = generate_root(SMALL_ROOT)
        occ_sr, frac = rasterize(root, 24)
        occ = occ_sr.data[0]
        manual = np.zeros((24, 24, 24))
        for d in range(24):
            for h in range(24):
                for w in range(24):
                    manual[d, h, w] = occ[
                        2 * d : 2 * d + 2, 2 * h : 2 * h + 2, 2 * w : 2 * w + 2
                    ].mean()
        assert np.array_equal(frac.data[0], manual.astype(np.float32))
        vals = np.unique(frac.data)
        assert np.isin(vals * 8, np.arange(9)).all()

    def test_roots_outside_grid_clipped(self):
        verts = np.array([[-10.0, -10.0, -10.0], [-5.0, -10.0, -10.0]])
        occ_sr, _ = rasterize(_single_branch(verts, 2.0), 8)
        assert not occ_sr.data.any()


def _single_branch(verts, radius):
    from rootsr.synth import Branch, RootSystem

    radii = np.full(len(verts), float(radius))
    return RootSystem((Branch(verts, radii, None, 0),))


class TestMakeSoil:
    def test_constant_when_noise_free(self):
        spec = SoilSpec(noise_amplitudes=(), noise_frequencies=(),
                        artifact_density=0.0, gaussian_sigma=0.0, base_intensity=0.3)
        vol = make_soil(spec, (8, 8, 8), seed=1)
        assert np.allclose(vol.data, 0.3)

    def test_deterministic(self):
        spec = SoilSpec()
        a = make_soil(spec, (12, 12, 12), seed=5)
        b = make_soil(spec, (12, 12, 12), seed=5)
        assert a == b
        c = make_soil(spec, (12, 12, 12), seed=6)
        assert a != c

    def test_defaults_in_range_with_variance(self):
        for seed in range(10):
            vol = make_soil(SoilSpec(), (16, 16, 16), seed=seed)
            assert vol.data.min() >= 0 and vol.data.max() <= 1
            assert vol.data.std() > 0.01

    def test_file_backed_crop(self, tmp_path):
        src = Volume(rng(0).random((1, 16, 16, 16)).astype(np.float32))
        p = tmp_path / "soil.rvol"
        write_rvol(src, p)
        vol = make_soil(SoilSpec(path=str(p)), (8, 8, 8), seed=0)
        assert vol.spatial == (8, 8, 8)
        assert np.array_equal(vol.data, src.data[:, 4:12, 4:12, 4:12])

    def test_file_too_small(self, tmp_path):
        src = Volume(np.zeros((1, 4, 4, 4), dtype=np.float32))
        p = tmp_path / "soil.rvol"
        write_rvol(src, p)
        with pytest.raises(ValueError, match="larger than"):
            make_soil(SoilSpec(path=str(p)), (8, 8, 8), seed=0)

    def test_file_missing(self, tmp_path):
        with pytest.raises(OSError):
            make_soil(SoilSpec(path=str(tmp_path / "nope.rvol")), (4, 4, 4), seed=0)


class TestMakeDontcare:
    def test_zero_tolerance_empty(self):
        occ = np.zeros((1, 8, 8, 8), dtype=np.uint8)
        occ[0, 4, 4, 4] = 1
        dc = make_dontcare(Volume(occ), 0)
        assert not dc.data.any()

    def test_single_voxel_six_neighbors(self):
        occ = np.zeros((1, 7, 7, 7), dtype=np.uint8)
        occ[0, 3, 3, 3] = 1
        dc = make_dontcare(Volume(occ), 1).data[0]
        expected = np.zeros((7, 7, 7), dtype=bool)
        for delta in [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                      (0, 0, 1), (0, 0, -1)]:
            expected[3 + delta[0], 3 + delta[1], 3 + delta[2]] = True
        assert np.array_equal(dc != 0, expected)

    def test_all_root_no_boundary(self):
        occ = np.ones((1, 6, 6, 6), dtype=np.uint8)
        assert not make_dontcare(Volume(occ), 2).data.any()

    def test_monotone_in_tolerance(self):
        root = generate_root(SMALL_ROOT)
        occ_sr, _ = rasterize(root, 24)
        masks = [make_dontcare(occ_sr, t).data != 0 for t in (0, 1, 2, 3)]
        for a, b in zip(masks, masks[1:]):
            assert (a <= b).all()


class TestSymmetries:
    def test_identity(self):
        arr = rng(0).random((2, 3, 3, 3))
        assert np.array_equal(apply_symmetry(arr, 0), arr)

    def test_group_inverse_round_trip(self):
        arr = rng(1).random((1, 4, 4, 4)).astype(np.float32)
        for g in range(48):
            back = apply_symmetry(apply_symmetry(arr, g), inverse_symmetry(g))
            assert np.array_equal(back, arr), g

    def test_all_distinct(self):
        arr = np.arange(64, dtype=np.float64).reshape(1, 4, 4, 4)
        images = {apply_symmetry(arr, g).tobytes() for g in range(48)}
        assert len(images) == 48


class TestComposeSample:
    def _setup(self, s=12):
        root = generate_root(dataclasses.replace(SMALL_ROOT, domain=float(s)))
        occ_sr, frac = rasterize(root, s)
        soil = make_soil(SoilSpec(), (s,) * 3, seed=2)
        dc = make_dontcare(occ_sr, 1)
        return frac, occ_sr, soil, dc

    def test_zero_occupancy_returns_soil(self):
        from rootsr.synth import RootSystem

        s = 8
        occ_sr, frac = rasterize(RootSystem(()), s)
        soil = make_soil(SoilSpec(), (s,) * 3, seed=3)
        dc = make_dontcare(occ_sr, 1)
        sample = compose_sample(frac, occ_sr, soil, Augment(contrast=0.4), dc)
        assert sample.mri == soil

    def test_full_voxel_closed_form(self):
        s = 8
        frac = np.zeros((1, s, s, s), dtype=np.float32)
        frac[0, 4, 4, 4] = 1.0
        occ = np.zeros((1, 2 * s, 2 * s, 2 * s), dtype=np.uint8)
        occ[0, 8:10, 8:10, 8:10] = 1
        soil = Volume(np.full((1, s, s, s), 0.3, dtype=np.float32))
        dc = Volume(np.zeros((1, 2 * s, 2 * s, 2 * s), dtype=np.uint8))
        sample = compose_sample(Volume(frac), Volume(occ), soil, Augment(contrast=0.4), dc)
        assert sample.mri.data[0, 4, 4, 4] == pytest.approx(0.7, abs=1e-6)
        assert sample.mri.data[0, 0, 0, 0] == pytest.approx(0.3, abs=1e-7)

    def test_symmetry_round_trip_bitwise(self):
        frac, occ_sr, soil, dc = self._setup()
        g = 23
        sample = compose_sample(frac, occ_sr, soil, Augment(contrast=0.3, symmetry=g), dc)
        inv = inverse_symmetry(g)
        mri_back = apply_symmetry(sample.mri.data, inv)
        tgt_back = apply_symmetry(sample.target.data, inv)
        dc_back = apply_symmetry(sample.dontcare.data, inv)
        ident = compose_sample(frac, occ_sr, soil, Augment(contrast=0.3, symmetry=0), dc)
        assert np.array_equal(mri_back, ident.mri.data)
        assert np.array_equal(tgt_back, ident.target.data)
        assert np.array_equal(dc_back, ident.dontcare.data)

    def test_contrast_raises_root_mean(self):
        frac, occ_sr, soil, dc = self._setup()
        if not occ_sr.data.any():
            pytest.skip("degenerate root draw")
        sample = compose_sample(frac, occ_sr, soil, Augment(contrast=0.3), dc)
        inside = frac.data > 0.99
        if inside.any():
            assert sample.mri.data[inside].mean() > soil.data.mean()

    def test_dim_mismatch(self):
        frac, occ_sr, soil, dc = self._setup()
        bad_soil = Volume(np.zeros((1, 5, 5, 5), dtype=np.float32))
        with pytest.raises(ValueError, match="dims"):
            compose_sample(frac, occ_sr, bad_soil, Augment(), dc)

    def test_noise_requires_rng(self):
        frac, occ_sr, soil, dc = self._setup()
        with pytest.raises(ValueError, match="rng"):
            compose_sample(frac, occ_sr, soil, Augment(noise_sigma=0.1), dc)


TINY_DATASET = DatasetConfig(
    n_train=2,
    n_val=1,
    dims=48,
    base_seed=77,
    root=dataclasses.replace(SMALL_ROOT, taproot_length=(30.0, 40.0), domain=48.0),
)


class TestGenerateDataset:
    def test_file_count_and_manifest(self, tmp_path):
        manifest = generate_dataset(TINY_DATASET, tmp_path)
        rvols = sorted(str(p.relative_to(tmp_path)) for p in tmp_path.rglob("*.rvol"))
        assert len(rvols) == 9
        listed = [r[k] for r in manifest["train"] + manifest["val"]
                  for k in ("mri", "target", "dontcare")]
        assert sorted(listed) == rvols
        assert [r["seed"] for r in manifest["train"]] == [77, 78]
        assert [r["seed"] for r in manifest["val"]] == [79]

    def test_regeneration_bit_identical(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_dataset(TINY_DATASET, d1)
        generate_dataset(TINY_DATASET, d2)
        files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_workers_match_serial(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_dataset(TINY_DATASET, d1, workers=1)
        generate_dataset(TINY_DATASET, d2, workers=3)
        for rel in sorted(p.relative_to(d1) for p in d1.rglob("*.rvol")):
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_load_round_trip(self, tmp_path):
        generate_dataset(TINY_DATASET, tmp_path)
        train, val, manifest = load_dataset(tmp_path)
        assert len(train) == 2 and len(val) == 1
        sample = train[0]
        assert sample.mri.spatial == (48, 48, 48)
        assert sample.target.spatial == (96, 96, 96)
        assert sample.target.data.max() <= 1

    @pytest.mark.slow
    def test_default_root_fraction_in_band(self):
        fracs = []
        for index in range(20):
            sample = build_sample(DatasetConfig(), index)
            fracs.append(sample.target.data.mean())
        mean = float(np.mean(fracs))
        assert 0.001 <= mean <= 0.05, f"mean target root fraction {mean:.4%}"
