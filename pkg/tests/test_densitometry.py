import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hepatoscan.atlas import LiverShapeType
from hepatoscan.densitometry import (
    HIST_LO,
    N_BINS,
    DensityMode,
    DensityReport,
    Histogram,
    assign_and_measure,
    find_modes,
    hu_histogram,
    measure,
    render_report,
)
from hepatoscan.matcher import MatchResult, not_found
from hepatoscan.phantom import Lesion, PhantomSpec, generate
from hepatoscan.volume import BinaryMask, CtVolume, GridMismatchError, InvalidArgumentError, VoxelGrid, mask_volume_ml


def block(values, spacing=(1.0, 1.0, 1.0)):
    v = np.asarray(values)
    g = VoxelGrid(v.shape[::-1], spacing)
    return CtVolume(g, v), BinaryMask(g, np.ones(v.shape, bool))


def hist_from(samples):
    v = np.rint(samples).astype(int)
    counts = np.bincount(v - HIST_LO, minlength=N_BINS)
    return Histogram(counts)


class TestHistogram:
    def test_constant(self):
        vol, mask = block(np.full((12, 12, 12), 40))
        h = hu_histogram(vol, mask)
        assert np.count_nonzero(h.counts) == 1
        assert h.counts[40 - HIST_LO] == h.total
        # 4 mm erosion on a 12 mm cube leaves the 4^3 core
        assert h.total == 4**3

    def test_gaussian_region(self):
        rng = np.random.default_rng(0)
        vals = np.rint(rng.normal(50, 5, (60, 60, 60))).astype(np.int16)
        vol, mask = block(vals)
        h = hu_histogram(vol, mask)
        assert h.total >= 10**5
        hu = h.hu
        assert (h.counts * hu).sum() / h.counts.sum() == pytest.approx(50.0, abs=0.1)
        assert abs(hu[np.argmax(h.counts)] - 50) <= 1

    def test_overflow_counted(self):
        vals = np.full((12, 12, 12), 40)
        vals[4:8, 4:8, 4:6] = -500
        vals[4:8, 4:8, 6:8] = 900
        vol, mask = block(vals)
        h = hu_histogram(vol, mask)
        assert h.below == 32 and h.above == 32
        assert h.total == 64

    def test_erosion_fallback(self):
        vol, mask = block(np.full((2, 2, 2), 10))
        assert hu_histogram(vol, mask).total == 8

    def test_empty_mask(self):
        vol, mask = block(np.zeros((3, 3, 3)))
        with pytest.raises(InvalidArgumentError):
            hu_histogram(vol, BinaryMask.empty(mask.grid))


class TestModes:
    def test_unimodal(self):
        rng = np.random.default_rng(1)
        modes = find_modes(hist_from(rng.normal(50, 5, 10**5)))
        assert len(modes) == 1
        assert abs(modes[0].peak_hu - 50) <= 1

    def test_bimodal_mixture(self):
        rng = np.random.default_rng(2)
        s = np.concatenate([rng.normal(55, 3, 50_000), rng.normal(23, 3, 50_000)])
        modes = find_modes(hist_from(s))
        assert len(modes) == 2
        assert abs(modes[0].peak_hu - 23) <= 1 and abs(modes[1].peak_hu - 55) <= 1
        # intervals meet at the valley
        assert modes[0].hi_hu < modes[1].lo_hu

    def test_close_peaks_merge(self):
        counts = np.zeros(N_BINS, int)
        counts[50 - HIST_LO] = 1000
        counts[54 - HIST_LO] = 1000
        assert len(find_modes(Histogram(counts))) == 1

    def test_all_overflow(self):
        modes = find_modes(Histogram(np.zeros(N_BINS, int), below=10))
        assert len(modes) == 1 and modes[0].peak_hu == HIST_LO

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            find_modes(Histogram(np.zeros(N_BINS, int)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**16), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_count_monotone_in_prominence(self, seed, p1, p2):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 5))
        s = np.concatenate([rng.normal(rng.uniform(-150, 250), rng.uniform(2, 10), int(rng.integers(200, 5000))) for _ in range(k)])
        h = hist_from(np.clip(s, -200, 300))
        lo, hi = sorted((p1, p2))
        assert len(find_modes(h, prominence=hi)) <= len(find_modes(h, prominence=lo))


class TestMeasure:
    def test_constant_region(self):
        vol, mask = block(np.full((10, 10, 10), 37))
        r = measure(vol, mask)
        assert len(r.modes) == 1
        m = r.modes[0]
        assert m.mean_hu == 37.0 and m.std_hu == 0.0 and m.fraction == 1.0
        assert m.voxel_count == 1000
        assert r.total_volume_ml == mask_volume_ml(mask)

    def test_every_voxel_accounted(self):
        rng = np.random.default_rng(3)
        vals = np.where(rng.random((20, 20, 20)) < 0.3, rng.normal(20, 4, (20, 20, 20)), rng.normal(70, 4, (20, 20, 20)))
        vals[0, 0, :5] = [-900, 1500, 400, -300, 2000]  # outside every interval
        vol, mask = block(np.rint(vals).astype(np.int16), (0.7, 0.7, 2.5))
        r = measure(vol, mask)
        assert sum(m.voxel_count for m in r.modes) == mask.bits.sum()
        assert sum(m.fraction for m in r.modes) == pytest.approx(1.0, abs=1e-9)
        assert [m.voxel_count for m in r.modes] == sorted((m.voxel_count for m in r.modes), reverse=True)
        assert r.dominant_mode_index == 0
        assert r.total_volume_ml == mask_volume_ml(mask)

    def test_phantom_lesion(self):
        vol, truth = generate(PhantomSpec(kind="body", liver_hu=50.0, lesion=Lesion(24.0, fraction=0.2), noise_sigma_hu=5.0, seed=4))
        r = measure(vol, truth.liver_mask)
        assert len(r.modes) == 2
        assert r.modes[0].mean_hu == pytest.approx(50.0, abs=2.0)
        assert r.modes[1].mean_hu == pytest.approx(24.0, abs=2.0)
        assert r.modes[0].fraction == pytest.approx(0.8, abs=0.03)
        assert r.modes[1].fraction == pytest.approx(0.2, abs=0.03)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**16), st.integers(-60, 60))
    def test_shift_equivariance(self, seed, c):
        rng = np.random.default_rng(seed)
        vals = np.rint(np.where(rng.random((14, 14, 14)) < 0.3, rng.normal(10, 4, (14, 14, 14)), rng.normal(60, 4, (14, 14, 14))))
        vol, mask = block(vals.astype(np.int16))
        vol2, _ = block((vals + c).astype(np.int16))
        r1, r2 = measure(vol, mask), measure(vol2, mask)
        assert len(r1.modes) == len(r2.modes)
        for a, b in zip(r1.modes, r2.modes):
            assert b.mean_hu == pytest.approx(a.mean_hu + c, abs=1e-9)
            assert b.voxel_count == a.voxel_count
            assert b.std_hu == pytest.approx(a.std_hu, abs=1e-9)

    def test_grid_mismatch(self):
        vol, mask = block(np.zeros((4, 4, 4)))
        other = BinaryMask(VoxelGrid((4, 4, 4), (2, 2, 2)), mask.bits)
        with pytest.raises(GridMismatchError):
            assign_and_measure(vol, other, find_modes(Histogram(np.ones(N_BINS, int))))


def _match():
    return MatchResult("I-a", LiverShapeType.I, (0.0, 0.0, 0.0), 1.0, 0.81234, 1.0)


class TestRender:
    def test_one_mode_exact(self):
        mode = DensityMode(52.3, 8.04, 1_500_000, 1500.0, 1.0)
        rep = DensityReport((mode,), 1500.0, Histogram(np.zeros(N_BINS, int)))
        text = render_report(rep, _match())
        assert text == (
            "LIVER REPORT\n"
            "detected: yes\n"
            "template: I-a type: I score: 0.812\n"
            "visible_fraction: 1.00\n"
            "total_volume_ml: 1500.0\n"
            "modes: 1\n"
            "mode 1: mean_hu 52.3 std_hu 8.0 volume_ml 1500.0 fraction 1.00\n"
            "dominant_mode: 1\n"
        )
        assert len(text.splitlines()) == 8
        assert render_report(rep, _match()) == text
        assert text.isascii()

    def test_two_modes_and_negative_zero(self):
        modes = (DensityMode(-0.04, 3.0, 80, 0.8, 0.8), DensityMode(24.0, 2.5, 20, 0.2, 0.2))
        text = render_report(DensityReport(modes, 1.0, Histogram(np.zeros(N_BINS, int))), _match())
        assert "mode 1: mean_hu 0.0 std_hu 3.0 volume_ml 0.8 fraction 0.80\n" in text
        assert "mode 2: mean_hu 24.0 std_hu 2.5 volume_ml 0.2 fraction 0.20\n" in text
        assert "modes: 2\n" in text

    def test_not_detected(self):
        assert render_report(None, not_found(0.2874)) == "LIVER REPORT\ndetected: no\nbest_score: 0.287\n"
        assert render_report(None, None) == "LIVER REPORT\ndetected: no\nbest_score: -1.000\n"
