import numpy as np
import pytest

from kidreg import geometry as geo
from kidreg import volume as vol
from kidreg.errors import EmptyMaskError, InvalidParameterError, SizeError


def smooth_volume(dims, spacing, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=dims)
    from scipy.ndimage import gaussian_filter
    return vol.Volume(gaussian_filter(data, 3.0), spacing)


def ball_mask(dims, spacing, center_vox, radius_vox):
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1)
    d2 = ((idx - np.asarray(center_vox)) ** 2).sum(-1)
    return vol.MaskVolume((d2 <= radius_vox ** 2).astype(np.float32), spacing)


class TestResample:
    def test_already_isotropic_is_identity(self):
        v = smooth_volume((10, 12, 14), (0.8, 0.8, 0.8))
        out = vol.resample_isotropic(v, 0.8)
        assert np.array_equal(out.data, v.data)

    def test_constant_stays_constant(self):
        v = vol.Volume(np.full((8, 8, 8), 3.5, np.float32), (2.0, 1.0, 1.5))
        out = vol.resample_isotropic(v, 0.8)
        assert np.allclose(out.data, 3.5)
        assert np.allclose(out.spacing, 0.8)

    def test_dimension_arithmetic(self):
        v = vol.Volume(np.zeros((40, 40, 40), np.float32), (2.0, 2.0, 2.0))
        out = vol.resample_isotropic(v, 0.8)
        assert out.dims == (100, 100, 100)

    def test_never_extrapolates(self):
        v = smooth_volume((9, 9, 9), (1.1, 0.7, 0.9), seed=3)
        out = vol.resample_isotropic(v)
        assert out.data.min() >= v.data.min() - 1e-6
        assert out.data.max() <= v.data.max() + 1e-6

    def test_bad_target(self):
        v = smooth_volume((4, 4, 4), (1, 1, 1))
        with pytest.raises(InvalidParameterError):
            vol.resample_isotropic(v, 0.0)


class TestCropPad:
    def test_pure_crop_preserves_interior(self):
        v = smooth_volume((40, 40, 40), (1, 1, 1), seed=1)
        m = ball_mask((40, 40, 40), (1, 1, 1), (20, 20, 20), 6)
        out_v, out_m = vol.crop_pad_about_centroid(v, m, (16, 16, 16))
        assert out_v.dims == (16, 16, 16)
        assert np.array_equal(out_v.data, v.data[12:28, 12:28, 12:28])

    def test_centroid_recentred(self):
        v = smooth_volume((40, 40, 40), (1, 1, 1), seed=2)
        m = ball_mask((40, 40, 40), (1, 1, 1), (8, 25, 30), 5)
        out_v, out_m = vol.crop_pad_about_centroid(v, m, (24, 24, 24))
        c = out_m.centroid_mm() / out_m.spacing
        assert np.all(np.abs(c - 24 // 2) <= 1.0)

    def test_zero_padding_near_border(self):
        v = smooth_volume((20, 20, 20), (1, 1, 1), seed=4)
        m = ball_mask((20, 20, 20), (1, 1, 1), (2, 10, 10), 2)
        out_v, _ = vol.crop_pad_about_centroid(v, m, (20, 20, 20))
        assert np.all(out_v.data[:7] == 0)  # shifted in from the near border

    def test_empty_mask(self):
        v = smooth_volume((8, 8, 8), (1, 1, 1))
        m = vol.MaskVolume(np.zeros((8, 8, 8), np.float32), (1, 1, 1))
        with pytest.raises(EmptyMaskError):
            vol.crop_pad_about_centroid(v, m, (8, 8, 8))


class TestUsWindow:
    def test_slab_indices(self):
        frames = [np.full((24, 28), i + 1.0, np.float32) for i in range(5)]
        w = vol.FrameWindow(frames, (0.8, 0.8))
        slab = vol.build_us_window(w, (128, 224, 288))
        for i, z in enumerate(range(62, 67)):
            assert np.all(slab.data[z][slab.data[z] != 0] == i + 1.0)
        occupied = np.zeros(128, bool)
        occupied[62:67] = True
        assert np.all(slab.data[~occupied] == 0)

    def test_single_frame_at_center(self):
        w = vol.FrameWindow([np.ones((10, 10), np.float32)], (0.8, 0.8))
        slab = vol.build_us_window(w, (128, 32, 32))
        assert slab.data[64].sum() == 100
        assert slab.data.sum() == 100

    def test_depth_sum_equals_frame_sum(self):
        rng = np.random.default_rng(0)
        frames = [rng.random((12, 14)).astype(np.float32) for _ in range(3)]
        w = vol.FrameWindow(frames, (1.0, 1.0))
        slab = vol.build_us_window(w, (16, 20, 20))
        assert np.isclose(slab.data.sum(), sum(f.sum() for f in frames), rtol=1e-5)

    def test_oversized_frames_rejected(self):
        w = vol.FrameWindow([np.ones((30, 30), np.float32)], (1, 1))
        with pytest.raises(SizeError):
            vol.build_us_window(w, (8, 16, 16))


class TestInitialAlign:
    def grid(self):
        return (32, 32, 32), (1.0, 1.0, 1.0)

    def test_centered_masks_zero_translation(self):
        dims, sp = self.grid()
        ct = ball_mask(dims, sp, (15.5, 15.5, 15.5), 6)
        us = ball_mask(dims, sp, (15.5, 15.5, 15.5), 6)
        t = vol.initial_align(ct, us)
        assert np.allclose(t.translation, 0.0, atol=1e-6)

    def test_depth_shift_recovered(self):
        dims, sp = self.grid()
        ct = ball_mask(dims, sp, (20.5, 15.5, 15.5), 6)
        us = ball_mask(dims, sp, (15.5, 15.5, 15.5), 6)
        t = vol.initial_align(ct, us)
        assert np.allclose(t.translation, [-5, 0, 0], atol=1e-6)

    def test_is_axis_standardized_to_center(self):
        dims, sp = self.grid()
        ct = ball_mask(dims, sp, (15.5, 15.5, 10.5), 6)
        us = ball_mask(dims, sp, (15.5, 15.5, 20.5), 6)
        t = vol.initial_align(ct, us)
        # axis2 goes to the grid center, not to the US centroid
        assert np.allclose(t.translation, [0, 0, 5.0], atol=1e-6)

    def test_empty_us_mask(self):
        dims, sp = self.grid()
        ct = ball_mask(dims, sp, (15, 15, 15), 6)
        us = vol.MaskVolume(np.zeros(dims, np.float32), sp)
        with pytest.raises(EmptyMaskError):
            vol.initial_align(ct, us)


class TestWarp:
    def test_identity_is_bit_identical(self):
        v = smooth_volume((16, 16, 16), (1, 1, 1), seed=5)
        out = vol.warp_volume(v, geo.RigidTransform.identity())
        assert np.array_equal(out.data, v.data)

    def test_integer_translation_shifts_exactly(self):
        v = smooth_volume((20, 20, 20), (1.0, 1.0, 1.0), seed=6)
        t = geo.params_to_matrix(geo.RigidParams((0, 0, 0), (3, 0, 0)), (0, 0, 0))
        out = vol.warp_volume(v, t)
        assert np.allclose(out.data[5:15], v.data[2:12], atol=1e-5)

    def test_round_trip_error_small(self):
        v = smooth_volume((32, 32, 32), (1.0, 1.0, 1.0), seed=7)
        p = geo.RigidParams(np.deg2rad([5, -4, 6]), (2.0, -1.5, 1.0))
        t = geo.params_to_matrix(p, v.center_mm)
        back = vol.warp_volume(vol.warp_volume(v, t), geo.invert(t))
        rng_range = v.data.max() - v.data.min()
        interior = (slice(8, 24),) * 3
        err = np.abs(back.data - v.data)[interior].mean()
        assert err < 0.02 * rng_range


class TestContour:
    def test_empty_slice(self):
        assert vol.extract_contour(np.zeros((8, 8)), (0.8, 0.8)).shape == (0, 2)

    def test_square_perimeter(self):
        f = np.zeros((20, 20), np.float32)
        f[5:15, 5:15] = 1.0
        pts = vol.extract_contour(f, (0.8, 0.8))
        assert len(pts)
        # brute-force boundary-pixel oracle: perimeter pixels of the square
        boundary = []
        for i in range(5, 15):
            for j in range(5, 15):
                if i in (5, 14) or j in (5, 14):
                    boundary.append((i * 0.8, j * 0.8))
        boundary = np.array(boundary)
        d = np.sqrt(((pts[:, None, :] - boundary[None]) ** 2).sum(-1)).min(1)
        assert d.max() <= 0.4 + 1e-9  # within half a voxel

    def test_complement_same_contour(self):
        f = np.zeros((16, 16), np.float32)
        f[4:10, 6:12] = 1.0
        a = vol.extract_contour(f, (1.0, 1.0))
        b = vol.extract_contour(1.0 - f, (1.0, 1.0))
        a = a[np.lexsort(a.T)]
        b = b[np.lexsort(b.T)]
        assert np.allclose(a, b)


class TestOrientationAndIO:
    def test_canonicalize_permutes_and_flips(self):
        v = smooth_volume((6, 8, 10), (1.0, 2.0, 3.0), seed=8)
        # store as S(axis2 reversed), A, R: code "SAR"
        data = np.transpose(v.data, (2, 1, 0))[::-1]
        weird = vol.Volume(np.ascontiguousarray(data), (3.0, 2.0, 1.0), "SAR")
        canon = vol.canonicalize(weird)
        assert np.array_equal(canon.data, v.data)
        assert np.allclose(canon.spacing, v.spacing)
        assert canon.orientation == "RAI"

    def test_volume_file_roundtrip(self, tmp_path):
        v = smooth_volume((5, 6, 7), (0.8, 0.8, 0.8), seed=9)
        path = tmp_path / "vol.json"
        vol.save_volume(path, v)
        back = vol.load_volume(path)
        assert np.array_equal(back.data, v.data)
        assert np.allclose(back.spacing, v.spacing)
