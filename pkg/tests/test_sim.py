import math

import numpy as np
import pytest

from mpoxrf.optics import (
    EntryOutcome,
    MpoGeometry,
    TraceOutcome,
    pore_entry,
    trace_channel,
)
from mpoxrf.sim import (
    BATCH_SIZE,
    DetectorSpec,
    Scene,
    Source,
    _batch_rng,
    _sample_emission_arrays,
    apply_energy_response,
    batch_seed,
    project_to_detector,
    sample_emission,
    simulate,
)

GEOM = MpoGeometry(plate_side=20.0, thickness_t=1.2, pore_width_w=20.0, pitch_p=25.0)


def cu_scene(L_s=25.0, L_i=25.0, x=0.0, z=0.0):
    return Scene(
        sources=(Source("Cu", ((8.0, 1.0),), (x, -L_s, z)),), L_s=L_s, L_i=L_i
    )


class TestSourceValidation:
    def test_needs_lines(self):
        with pytest.raises(ValueError):
            Source("x", (), (0, -25, 0))

    def test_rejects_nonpositive_line(self):
        with pytest.raises(ValueError):
            Source("x", ((8.0, 0.0),), (0, -25, 0))
        with pytest.raises(ValueError):
            Source("x", ((-1.0, 1.0),), (0, -25, 0))

    def test_rect_needs_both_dimensions(self):
        with pytest.raises(ValueError):
            Source("x", ((8.0, 1.0),), (0, -25, 0), width=1.0, height=0.0)

    def test_scene_validation(self):
        src = Source("x", ((8.0, 1.0),), (0, -25, 0))
        with pytest.raises(ValueError):
            Scene(sources=(src,), L_s=0.0, L_i=25.0)
        with pytest.raises(ValueError):
            Scene(sources=(), L_s=25.0, L_i=25.0)

    def test_detector_validation(self):
        with pytest.raises(ValueError):
            DetectorSpec(n_x=0)
        with pytest.raises(ValueError):
            DetectorSpec(e_bin_width=0.0)


class TestSampleEmission:
    def test_point_source_slope_envelope(self):
        rng = np.random.default_rng(1)
        scene = cu_scene()
        bound = (GEOM.plate_side / 2) / scene.L_s
        for _ in range(2000):
            p = sample_emission(scene.sources[0], GEOM, scene, rng)
            assert abs(p.slope_x) <= bound + 1e-12
            assert abs(p.slope_z) <= bound + 1e-12
            assert 0.0 < p.weight <= 1.0
            assert p.energy == 8.0

    def test_line_intensity_fractions(self):
        src = Source("two", ((4.0, 1.0), (8.0, 3.0)), (0, -25, 0))
        scene = Scene(sources=(src,), L_s=25.0, L_i=25.0)
        rng = _batch_rng(17, 0)
        *_, energy, _ = _sample_emission_arrays(scene, GEOM, 100_000, rng)
        frac = np.mean(energy == 8.0)
        assert frac == pytest.approx(0.75, abs=0.01)

    def test_rect_source_uniform(self):
        src = Source("rect", ((8.0, 1.0),), (1.0, -25.0, -2.0), width=4.0, height=2.0)
        scene = Scene(sources=(src,), L_s=25.0, L_i=25.0)
        rng = _batch_rng(3, 0)
        n = 100_000
        ex, _, ez, *_ = _sample_emission_arrays(scene, GEOM, n, rng)
        # uniform over [center - w/2, center + w/2]: mean = center +- 3 sigma/sqrt(N)
        tol_x = 3 * (4.0 / math.sqrt(12)) / math.sqrt(n)
        tol_z = 3 * (2.0 / math.sqrt(12)) / math.sqrt(n)
        assert ex.mean() == pytest.approx(1.0, abs=tol_x)
        assert ez.mean() == pytest.approx(-2.0, abs=tol_z)
        assert ex.min() >= 1.0 - 2.0 and ex.max() <= 1.0 + 2.0

    def test_sources_behind_plate_rejected(self):
        src = Source("bad", ((8.0, 1.0),), (0.0, 5.0, 0.0))
        scene = Scene(sources=(src,), L_s=25.0, L_i=25.0)
        with pytest.raises(ValueError):
            sample_emission(src, GEOM, scene, np.random.default_rng(0))


class TestProjectToDetector:
    def test_axial_propagation(self):
        entry = pore_entry(1.0, 0.0, GEOM)
        trace = trace_channel(entry.u, entry.v, 0.0, 0.0, 8.0, GEOM)
        x, z = project_to_detector(trace, entry, GEOM, 25.0)
        assert x == pytest.approx(1.0, abs=GEOM.pore_width_w * 1e-3)
        assert z == pytest.approx(0.0, abs=GEOM.pore_width_w * 1e-3)

    def test_linear_propagation(self):
        entry = pore_entry(0.0, 0.0, GEOM)
        trace = trace_channel(entry.u, entry.v, 0.0072, 0.0, 8.0, GEOM)
        assert trace.n_reflections_x == 0
        x, _ = project_to_detector(trace, entry, GEOM, 25.0)
        # 0.0072 * 25 mm = 0.18 mm, plus in-channel drift below a pore width
        assert x == pytest.approx(0.0072 * 25.0, abs=GEOM.pore_width_w * 1e-3 * 2)

    def test_true_focusing_mirror_point(self):
        # single odd reflection in each plane lands at the source point
        # when L_s = L_i (unit magnification, erect image); slopes drawn
        # inside the acceptance window to populate the (1, 1) class
        scene = cu_scene(x=0.6, z=-0.4)
        rng = np.random.default_rng(11)
        hits = []
        for _ in range(4000):
            slope_x, slope_z = rng.uniform(-0.02, 0.02, 2)
            tx = 0.6 + slope_x * scene.L_s
            tz = -0.4 + slope_z * scene.L_s
            entry = pore_entry(tx, tz, GEOM)
            if entry.outcome is not EntryOutcome.PORE:
                continue
            t = trace_channel(entry.u, entry.v, slope_x, slope_z, 8.0, GEOM)
            if t.outcome is not TraceOutcome.EXITED:
                continue
            if t.n_reflections_x == 1 and t.n_reflections_z == 1:
                hits.append(project_to_detector(t, entry, GEOM, scene.L_i))
        assert len(hits) > 20
        hits = np.array(hits)
        # in-channel drift and pore size bound the miss distance
        assert np.all(np.abs(hits[:, 0] - 0.6) < 0.05)
        assert np.all(np.abs(hits[:, 1] + 0.4) < 0.05)

    def test_absorbed_rays_rejected(self):
        entry = pore_entry(0.0, 0.0, GEOM)
        dead = trace_channel(entry.u, entry.v, 0.05, 0.0, 8.0, GEOM)
        assert dead.outcome is TraceOutcome.ABSORBED
        with pytest.raises(ValueError):
            project_to_detector(dead, entry, GEOM, 25.0)


class TestEnergyResponse:
    def test_zero_fwhm_is_identity(self):
        det = DetectorSpec(energy_fwhm=0.0)
        rng = np.random.default_rng(0)
        assert apply_energy_response(8.04, det, rng) == 8.04

    def test_sigma_matches_fwhm(self):
        det = DetectorSpec(energy_fwhm=1.12)
        rng = np.random.default_rng(12)
        draws = np.array(
            [apply_energy_response(8.04, det, rng) for _ in range(200_000)]
        )
        assert draws.std() == pytest.approx(1.12 / 2.3548, abs=0.002)
        assert draws.mean() == pytest.approx(8.04, abs=0.005)

    def test_nonpositive_energy_rejected(self):
        with pytest.raises(ValueError):
            apply_energy_response(0.0, DetectorSpec(), np.random.default_rng(0))


class TestBatchSeeding:
    def test_mix_is_deterministic_and_spread(self):
        seeds = {batch_seed(42, b) for b in range(1000)}
        assert len(seeds) == 1000
        assert batch_seed(42, 0) == batch_seed(42, 0)
        assert batch_seed(42, 0) != batch_seed(43, 0)
        assert all(0 <= s < 2**64 for s in seeds)


class TestSimulate:
    def test_zero_photons_valid_empty_cube(self):
        cube = simulate(cu_scene(), GEOM, DetectorSpec(), 0, seed=1)
        assert cube.counts.sum() == 0
        assert cube.photons == 0

    def test_count_conservation(self):
        cube = simulate(cu_scene(), GEOM, DetectorSpec(), 300_000, seed=2)
        s = cube.stats
        assert int(cube.counts.sum()) == s.detected
        assert s.detected <= 300_000
        assert (
            s.missed_plate
            + s.web_absorbed
            + s.wall_absorbed
            + s.off_detector
            + s.below_threshold
            + s.out_of_band
            + s.detected
            == 300_000
        )

    def test_worker_count_invariance(self):
        kwargs = dict(scene=cu_scene(), mpo=GEOM, detector=DetectorSpec())
        c1 = simulate(n_photons=200_000, seed=9, n_workers=1, **kwargs)
        c3 = simulate(n_photons=200_000, seed=9, n_workers=3, **kwargs)
        assert np.array_equal(c1.counts, c3.counts)

    def test_seed_changes_stream(self):
        kwargs = dict(scene=cu_scene(), mpo=GEOM, detector=DetectorSpec())
        a = simulate(n_photons=100_000, seed=1, **kwargs)
        b = simulate(n_photons=100_000, seed=2, **kwargs)
        assert not np.array_equal(a.counts, b.counts)

    def test_matches_scalar_chain(self):
        # with FWHM=0 and the binary model, one batch is a deterministic
        # function of its emission arrays; replay it through the scalar
        # contract operations and compare cubes exactly
        det = DetectorSpec(energy_fwhm=0.0)
        scene = cu_scene()
        n = 4000
        cube = simulate(scene, GEOM, det, n, seed=31)

        rng = _batch_rng(31, 0)
        _, _, _, tx, tz, sx, sz, energy, _ = _sample_emission_arrays(
            scene, GEOM, n, rng
        )
        expected = np.zeros((det.n_y, det.n_x, det.n_bins), dtype=np.uint64)
        pitch_mm = det.pitch * 1e-3
        x0 = -det.n_x * pitch_mm / 2
        z0 = -det.n_y * pitch_mm / 2
        for k in range(n):
            entry = pore_entry(tx[k], tz[k], GEOM)
            if entry.outcome is not EntryOutcome.PORE:
                continue
            t = trace_channel(entry.u, entry.v, sx[k], sz[k], energy[k], GEOM)
            if t.outcome is not TraceOutcome.EXITED:
                continue
            x, z = project_to_detector(t, entry, GEOM, scene.L_i)
            ix = math.floor((x - x0) / pitch_mm)
            iy = math.floor((z - z0) / pitch_mm)
            if not (0 <= ix < det.n_x and 0 <= iy < det.n_y):
                continue
            if energy[k] < det.threshold:
                continue
            b = math.floor((energy[k] - det.e_min) / det.e_bin_width)
            if 0 <= b < det.n_bins:
                expected[iy, ix, b] += 1
        assert np.array_equal(cube.counts, expected)

    def test_mirror_symmetry_on_axis(self):
        det = DetectorSpec()
        cube = simulate(cu_scene(), GEOM, det, 3_000_000, seed=101)
        img = cube.counts.sum(axis=2).astype(np.int64)
        left = img[:, : det.n_x // 2]
        right = img[:, det.n_x // 2 :][:, ::-1]
        a = left + right
        mask = a > 0
        chi2 = float((((left - right) ** 2)[mask] / a[mask]).sum())
        dof = int(mask.sum())
        assert chi2 / dof < 1.5

    def test_cross_size_grows_with_working_distance(self):
        # projection magnification: arm reach scales with L_s + L_i
        from mpoxrf import analysis as an

        det = DetectorSpec()
        extents = {}
        for L in (25.0, 45.0):
            cube = simulate(cu_scene(L_s=L, L_i=L), GEOM, det, 10_000_000, seed=21)
            img = an.energy_window(cube, 0.0, 25.0)
            c = an.find_psf_center(img)
            h, v = an.extract_arm_profiles(img, c)
            extents[L] = (
                an.arm_extent(h, core_exclude_mm=0.25)
                + an.arm_extent(v, core_exclude_mm=0.25)
            ) / 2.0
        assert extents[45.0] > extents[25.0]
        assert extents[45.0] / extents[25.0] == pytest.approx(90.0 / 50.0, rel=0.2)

    def test_cross_arms_align_with_pore_axes(self):
        # focused spot plus arms along the channel axes, weak quadrants
        det = DetectorSpec()
        cube = simulate(cu_scene(), GEOM, det, 3_000_000, seed=55)
        img = cube.counts.sum(axis=2).astype(float)
        c = det.n_x // 2
        band = 2  # +-2 px about each axis
        arm_x = img[c - band : c + band + 1, :].sum()
        arm_z = img[:, c - band : c + band + 1].sum()
        total = img.sum()
        quadrant = total - arm_x - arm_z + img[
            c - band : c + band + 1, c - band : c + band + 1
        ].sum()
        peak = img[c - band : c + band + 1, c - band : c + band + 1].sum()
        assert peak > 0.05 * total  # bright central spot
        assert arm_x + arm_z - peak > quadrant  # arms beat the quadrants

    def test_class_images_cover_detected(self):
        cube = simulate(
            cu_scene(), GEOM, DetectorSpec(), 400_000, seed=6, class_images=True
        )
        per_class = {k: int(v.sum()) for k, v in cube.stats.class_images.items()}
        assert sum(per_class.values()) == cube.stats.detected
        assert per_class == {
            k: v for k, v in cube.stats.class_counts.items()
        }

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            simulate(cu_scene(), GEOM, DetectorSpec(), -1)
        with pytest.raises(ValueError):
            simulate(cu_scene(), GEOM, DetectorSpec(), 10, n_workers=0)

    def test_multi_batch_partition(self):
        # crossing a batch boundary must not disturb determinism
        n = BATCH_SIZE + 17
        kwargs = dict(scene=cu_scene(), mpo=GEOM, detector=DetectorSpec())
        a = simulate(n_photons=n, seed=4, n_workers=1, **kwargs)
        b = simulate(n_photons=n, seed=4, n_workers=2, **kwargs)
        assert np.array_equal(a.counts, b.counts)
        assert a.stats.n_photons == n
