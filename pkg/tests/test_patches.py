import numpy as np
import pytest

from echodetect import (
    BinaryMask,
    DegenerateInputError,
    LabelVolume,
    PatchSpec,
    Volume3D,
    sample_training_patch,
    stitch_predictions,
    tile_volume,
)


class TestPatchSpec:
    def test_default_stride_is_half(self):
        spec = PatchSpec(size=(128, 128, 128))
        assert spec.stride == (64, 64, 64)

    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError):
            PatchSpec(size=32, stride=33)


class TestTileVolume:
    def test_exact_fit_single_tile(self):
        assert tile_volume((128, 128, 128), PatchSpec(128, 64)) == [(0, 0, 0)]

    def test_regular_grid(self):
        origins = tile_volume((192, 192, 192), PatchSpec(128, 64))
        per_axis = sorted({o[0] for o in origins})
        assert per_axis == [0, 64]
        assert len(origins) == 8

    def test_clamped_final_origin(self):
        origins = tile_volume((130, 130, 130), PatchSpec(128, 64))
        per_axis = sorted({o[0] for o in origins})
        assert per_axis == [0, 2]

    @pytest.mark.parametrize("shape", [(32, 40, 37), (64, 33, 50)])
    def test_full_coverage(self, shape):
        spec = PatchSpec(32, 16)
        covered = np.zeros(shape, dtype=int)
        for o in tile_volume(shape, spec):
            covered[o[0]:o[0] + 32, o[1]:o[1] + 32, o[2]:o[2] + 32] += 1
        assert (covered >= 1).all()

    def test_too_small_raises(self):
        with pytest.raises(ValueError):
            tile_volume((16, 40, 40), PatchSpec(32))


class TestStitchPredictions:
    def test_single_tile_exact(self, rng):
        patch = rng.random((8, 8, 8))
        out = stitch_predictions([((0, 0, 0), patch)], (8, 8, 8), blend="uniform")
        np.testing.assert_array_equal(out, patch)

    @pytest.mark.parametrize("blend", ["uniform", "gaussian"])
    def test_constant_preserved(self, blend):
        tiles = [((0, 0, 0), np.full((8, 8, 8), 0.7)), ((4, 0, 0), np.full((8, 8, 8), 0.7))]
        out = stitch_predictions(tiles, (12, 8, 8), blend=blend)
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_uniform_overlap_average(self):
        # overlap region gets the plain mean of the two tile values
        tiles = [((0, 0, 0), np.full((4, 4, 4), 0.2)), ((2, 0, 0), np.full((4, 4, 4), 0.8))]
        out = stitch_predictions(tiles, (6, 4, 4), blend="uniform")
        np.testing.assert_allclose(out[:2], 0.2, atol=1e-12)
        np.testing.assert_allclose(out[2:4], 0.5, atol=1e-12)
        np.testing.assert_allclose(out[4:], 0.8, atol=1e-12)

    def test_order_independent(self, rng):
        origins = tile_volume((10, 10, 10), PatchSpec(6, 4))
        tiles = [(o, rng.random((6, 6, 6))) for o in origins]
        out1 = stitch_predictions(tiles, (10, 10, 10), blend="gaussian")
        out2 = stitch_predictions(tiles[::-1], (10, 10, 10), blend="gaussian")
        np.testing.assert_allclose(out1, out2, atol=1e-12)

    def test_channel_dims(self, rng):
        patch = rng.random((2, 6, 6, 6))
        out = stitch_predictions([((0, 0, 0), patch)], (6, 6, 6), blend="uniform")
        assert out.shape == (2, 6, 6, 6)
        np.testing.assert_allclose(out, patch)

    def test_uncovered_voxel_raises(self, rng):
        with pytest.raises(ValueError):
            stitch_predictions([((0, 0, 0), rng.random((4, 4, 4)))], (8, 8, 8))


def _case(shape, lesion=None):
    g = np.random.default_rng(5)
    vol = Volume3D(g.random(shape).astype(np.float32))
    prostate = BinaryMask(np.ones(shape, bool))
    label = np.zeros(shape, np.uint8)
    if lesion is not None:
        label[lesion] = 1
    return vol, prostate, LabelVolume(label, "strong")


class TestSampleTrainingPatch:
    def test_whole_volume_patch(self):
        vol, prostate, label = _case((16, 16, 16))
        patch = sample_training_patch(vol, prostate, label, PatchSpec(16), np.random.default_rng(0))
        assert patch.origin == (0, 0, 0)
        np.testing.assert_array_equal(patch.image, vol.data)
        assert patch.valid.all()

    def test_deterministic_per_seed(self):
        vol, prostate, label = _case((24, 24, 24), lesion=(slice(4, 8), slice(4, 8), slice(4, 8)))
        a = sample_training_patch(vol, prostate, label, PatchSpec(16), np.random.default_rng(9))
        b = sample_training_patch(vol, prostate, label, PatchSpec(16), np.random.default_rng(9))
        assert a.origin == b.origin
        np.testing.assert_array_equal(a.image, b.image)

    def test_padding_marks_outer_shell(self):
        # 12^3 volume with a 16^3 patch: padded by 2 on each side
        vol, prostate, label = _case((12, 12, 12))
        patch = sample_training_patch(vol, prostate, label, PatchSpec(16), np.random.default_rng(3))
        assert patch.image.shape == (16, 16, 16)
        assert patch.origin == (-2, -2, -2)
        expected_valid = np.zeros((16, 16, 16), bool)
        expected_valid[2:14, 2:14, 2:14] = True
        np.testing.assert_array_equal(patch.valid, expected_valid)
        assert (patch.image[~patch.valid] == 0).all()

    def test_centers_inside_prostate(self):
        shape = (20, 20, 20)
        g = np.random.default_rng(11)
        vol = Volume3D(g.random(shape).astype(np.float32))
        prostate = np.zeros(shape, bool)
        prostate[6:14, 6:14, 6:14] = True
        label = np.zeros(shape, np.uint8)
        label[9:11, 9:11, 9:11] = 1
        rng = np.random.default_rng(42)
        spec = PatchSpec(8)
        for _ in range(300):
            patch = sample_training_patch(
                Volume3D(vol.data), BinaryMask(prostate), LabelVolume(label, "strong"), spec, rng, 0.5
            )
            # patch window must intersect the prostate (center is inside it)
            sl = tuple(slice(max(o, 0), o + 8) for o in patch.origin)
            assert prostate[sl].any()

    def test_positive_bias_one_hits_lesions(self):
        shape = (20, 20, 20)
        vol = Volume3D(np.zeros(shape, np.float32))
        prostate = np.ones(shape, bool)
        label = np.zeros(shape, np.uint8)
        label[2:4, 15:18, 5] = 1
        rng = np.random.default_rng(7)
        for _ in range(50):
            patch = sample_training_patch(
                vol, BinaryMask(prostate), LabelVolume(label, "strong"), PatchSpec(8), rng, positive_bias=1.0
            )
            assert patch.label.sum() > 0  # lesion-centred patch contains lesion voxels

    def test_empty_prostate_raises(self):
        vol, _, label = _case((8, 8, 8))
        with pytest.raises(DegenerateInputError):
            sample_training_patch(
                vol, BinaryMask(np.zeros((8, 8, 8), bool)), label, PatchSpec(8), np.random.default_rng(0)
            )
