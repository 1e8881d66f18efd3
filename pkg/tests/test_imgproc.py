import numpy as np
import pytest

from krfws.imgproc_tools import (GrayImage, HogParams, crop_and_scale, descriptor_length,
                                 extract_patch, hog, phog)


def ramp(size, step=0.01):
    # intensity growing to the right
    return GrayImage(np.tile(np.arange(size) * step, (size, 1)))


class TestGrayImage:

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            GrayImage(np.full((4, 4), 1.5))

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            GrayImage(np.zeros((4, 4, 3)))

    def test_copies_input(self):
        data = np.zeros((4, 5))
        img = GrayImage(data)
        data[0, 0] = 1.0
        assert img.data[0, 0] == 0.0
        assert (img.width, img.height) == (5, 4)


class TestExtractPatch:

    def test_inside_crop_is_copy(self, rng):
        img = GrayImage(rng.random((64, 64)))
        patch = extract_patch(img, (30, 20), 32)
        np.testing.assert_array_equal(patch.data, img.data[4:36, 14:46])

    def test_corner_replicates_edges(self):
        data = np.arange(16, dtype=float).reshape(4, 4) / 16
        img = GrayImage(data)
        patch = extract_patch(img, (0, 0), 8)
        assert patch.data.shape == (8, 8)
        # rows and columns before the image repeat the first row/column
        np.testing.assert_array_equal(patch.data[:4, :4], np.full((4, 4), data[0, 0]))
        np.testing.assert_array_equal(patch.data[4, 4:], data[0, :4])

    def test_constant_image(self):
        img = GrayImage(np.full((10, 10), 0.5))
        patch = extract_patch(img, (-3.2, 40.7), 16)
        np.testing.assert_array_equal(patch.data, 0.5)

    def test_non_finite_center(self):
        img = GrayImage(np.zeros((10, 10)))
        with pytest.raises(ValueError):
            extract_patch(img, (np.nan, 1.0), 8)

    def test_small_side(self):
        with pytest.raises(ValueError):
            extract_patch(GrayImage(np.zeros((10, 10))), (5, 5), 3)


class TestCropAndScale:

    def test_identity_scale(self, rng):
        img = GrayImage(rng.random((32, 32)))
        out = crop_and_scale(img, (16, 16), 1.0, 32)
        np.testing.assert_allclose(out.data, img.data, atol=1e-6)


class TestHog:

    def test_constant_patch_gives_zeros(self):
        patch = GrayImage(np.full((16, 16), 0.3))
        for variant in ("basic", "extended"):
            d = hog(patch, HogParams(cell_size=8, variant=variant))
            np.testing.assert_array_equal(d, 0.0)

    def test_horizontal_ramp_votes_into_bin_zero(self):
        params = HogParams(cell_size=8, orientation_bins=9, block_layout=None)
        d = hog(ramp(16), params).reshape(4, 9)
        assert np.all(d[:, 0] > 0)
        np.testing.assert_allclose(d[:, 1:], 0.0, atol=1e-12)

    def test_basic_length(self, rng):
        patch = GrayImage(rng.random((16, 16)))
        assert len(hog(patch, HogParams(cell_size=8))) == 36

    def test_extended_length(self, rng):
        patch = GrayImage(rng.random((16, 16)))
        assert len(hog(patch, HogParams(cell_size=8, variant="extended"))) == 4 * 31

    def test_indivisible_side(self, rng):
        with pytest.raises(ValueError):
            hog(GrayImage(rng.random((12, 12))), HogParams(cell_size=8))

    def test_invariant_to_intensity_offset(self, rng):
        data = 0.5 * rng.random((16, 16))
        params = HogParams(cell_size=8)
        np.testing.assert_allclose(hog(GrayImage(data), params), hog(GrayImage(data + 0.3), params),
                                   atol=1e-12)

    def test_invariant_to_contrast(self, rng):
        data = rng.random((16, 16))
        params = HogParams(cell_size=4, block_layout=2)
        np.testing.assert_allclose(hog(GrayImage(data), params), hog(GrayImage(0.5*data), params),
                                   atol=1e-12)

    def test_entries_non_negative(self, rng):
        d = hog(GrayImage(rng.random((32, 32))), HogParams(cell_size=8, variant="extended"))
        assert d.min() >= 0

    def test_bad_params(self):
        with pytest.raises(ValueError):
            HogParams(cell_size=1)
        with pytest.raises(ValueError):
            HogParams(orientation_bins=1)
        with pytest.raises(ValueError):
            HogParams(variant="fancy")


class TestPhog:

    def test_single_level_equals_hog(self, rng):
        patch = GrayImage(rng.random((32, 32)))
        params = HogParams()
        np.testing.assert_array_equal(phog(patch, [32], params).values,
                                      hog(patch, params.with_cell_size(32)))

    def test_three_level_length(self, rng):
        patch = GrayImage(rng.random((32, 32)))
        d = phog(patch, [8, 32, 16], HogParams())
        assert len(d) == 189
        assert d.levels == (32, 16, 8)

    def test_constant_patch(self):
        d = phog(GrayImage(np.full((32, 32), 0.7)), [32, 16, 8], HogParams(variant="extended"))
        np.testing.assert_array_equal(d.values, 0.0)

    def test_empty_levels(self, rng):
        with pytest.raises(ValueError):
            phog(GrayImage(rng.random((32, 32))), [], HogParams())

    @pytest.mark.parametrize("side,levels,variant", [(32, (32, 16, 8), "basic"),
                                                     (64, (64, 32, 16), "extended"),
                                                     (16, (8,), "basic"),
                                                     (64, (16, 32), "extended")])
    def test_descriptor_length_matches(self, rng, side, levels, variant):
        params = HogParams(variant=variant)
        patch = GrayImage(rng.random((side, side)))
        assert len(phog(patch, levels, params)) == descriptor_length(side, levels, params)
