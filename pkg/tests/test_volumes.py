import numpy as np
import pytest

from echodetect import (
    BinaryMask,
    DegenerateInputError,
    GridMismatchError,
    Volume3D,
    connected_components,
    crop_to_bbox,
    normalize_intensity,
)
from echodetect.volumes import paste_into


def flood_fill_components(mask: np.ndarray, connectivity: int):
    """Brute-force BFS oracle, independent of scipy labeling."""
    offsets = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) == (0, 0, 0):
                    continue
                if connectivity == 6 and abs(dz) + abs(dy) + abs(dx) != 1:
                    continue
                offsets.append((dz, dy, dx))
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    for start in map(tuple, np.argwhere(mask)):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        comp = []
        while queue:
            v = queue.pop()
            comp.append(v)
            for off in offsets:
                n = tuple(a + b for a, b in zip(v, off))
                if any(c < 0 or c >= s for c, s in zip(n, mask.shape)):
                    continue
                if mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        comps.append(frozenset(comp))
    return set(comps)


class TestConnectedComponents:
    def test_empty_mask(self):
        assert connected_components(BinaryMask(np.zeros((4, 4, 4), bool))) == []

    def test_single_voxel(self):
        mask = np.zeros((4, 4, 4), bool)
        mask[1, 2, 3] = True
        comps = connected_components(BinaryMask(mask))
        assert len(comps) == 1 and comps[0].size == 1
        assert comps[0].centroid == (1.0, 2.0, 3.0)

    def test_corner_touching_voxels(self):
        # two voxels sharing only a cube corner
        mask = np.zeros((4, 4, 4), bool)
        mask[0, 0, 0] = mask[1, 1, 1] = True
        assert len(connected_components(BinaryMask(mask), connectivity=6)) == 2
        assert len(connected_components(BinaryMask(mask), connectivity=26)) == 1

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_matches_flood_fill_oracle(self, connectivity, rng):
        for _ in range(20):
            mask = rng.random((7, 7, 7)) < 0.25
            got = connected_components(BinaryMask(mask), connectivity)
            got_sets = {frozenset(map(tuple, c.voxels)) for c in got}
            assert got_sets == flood_fill_components(mask, connectivity)

    def test_partition_and_ordering(self, rng):
        mask = rng.random((10, 10, 10)) < 0.2
        comps = connected_components(BinaryMask(mask), 26)
        union = np.zeros(mask.shape, bool)
        total = 0
        for c in comps:
            sub = c.to_mask(mask.shape)
            assert not (union & sub).any()  # pairwise disjoint
            union |= sub
            total += c.size
        assert (union == mask).all()
        assert total == mask.sum()
        sizes = [c.size for c in comps]
        assert sizes == sorted(sizes, reverse=True)


class TestNormalizeIntensity:
    def test_linear_span(self):
        data = np.linspace(0, 1, 6 * 6 * 6, dtype=np.float32).reshape(6, 6, 6)
        roi = BinaryMask(np.ones((6, 6, 6), bool))
        out = normalize_intensity(Volume3D(data), roi)
        assert out.data.min() == 0.0 and out.data.max() == 1.0
        assert (out.data >= 0).all() and (out.data <= 1).all()

    def test_constant_volume_raises(self):
        vol = Volume3D(np.full((5, 5, 5), 3.0, dtype=np.float32))
        with pytest.raises(DegenerateInputError):
            normalize_intensity(vol, BinaryMask(np.ones((5, 5, 5), bool)))

    def test_matches_direct_percentile_computation(self, rng):
        data = rng.normal(10, 4, (8, 8, 8)).astype(np.float32)
        roi = rng.random((8, 8, 8)) < 0.6
        out = normalize_intensity(Volume3D(data), BinaryMask(roi))
        # oracle: order statistics computed by explicit sorting
        inside = np.sort(data[roi])
        n = inside.size
        p1 = inside[int(np.floor(0.01 * (n - 1)))]
        p99 = inside[int(np.ceil(0.99 * (n - 1)))]
        expected = (np.clip(data, p1, p99) - p1) / (p99 - p1)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)
        assert (out.data >= 0).all() and (out.data <= 1).all()
        # monotone: order of any two voxels is preserved (up to clipping ties)
        flat_in, flat_out = data.ravel(), out.data.ravel()
        idx = rng.integers(0, flat_in.size, size=(200, 2))
        for i, j in idx:
            if flat_in[i] < flat_in[j]:
                assert flat_out[i] <= flat_out[j]

    def test_idempotent(self, rng):
        data = rng.random((8, 8, 8)).astype(np.float32) * 7 + 2
        roi = BinaryMask(np.ones((8, 8, 8), bool))
        once = normalize_intensity(Volume3D(data), roi)
        twice = normalize_intensity(once, roi)
        np.testing.assert_allclose(once.data, twice.data, atol=1e-6)

    def test_grid_mismatch(self):
        vol = Volume3D(np.zeros((4, 4, 4)) + np.arange(4))
        with pytest.raises(GridMismatchError):
            normalize_intensity(vol, BinaryMask(np.ones((5, 5, 5), bool)))


class TestCropToBbox:
    def test_identity_crop(self, rng):
        vol = Volume3D(rng.random((6, 6, 6)))
        sub, offset = crop_to_bbox(vol, BinaryMask(np.ones((6, 6, 6), bool)), 0)
        assert offset == (0, 0, 0)
        np.testing.assert_array_equal(sub.data, vol.data)

    def test_single_voxel_margin(self, rng):
        vol = Volume3D(rng.random((10, 10, 10)))
        mask = np.zeros((10, 10, 10), bool)
        mask[5, 5, 5] = True
        sub, offset = crop_to_bbox(vol, BinaryMask(mask), 2)
        assert offset == (3, 3, 3)
        assert sub.shape == (5, 5, 5)

    def test_clamped_at_boundaries(self, rng):
        # enumerate expected bounds for a mask near the edge with a large margin
        vol = Volume3D(rng.random((8, 12, 9)))
        mask = np.zeros((8, 12, 9), bool)
        mask[0:2, 10:12, 4] = True
        sub, offset = crop_to_bbox(vol, BinaryMask(mask), 10)
        idx = np.argwhere(mask)
        lo = np.maximum(idx.min(axis=0) - 10, 0)
        hi = np.minimum(idx.max(axis=0) + 11, (8, 12, 9))
        assert offset == tuple(lo)
        assert sub.shape == tuple(hi - lo)

    def test_empty_mask_raises(self, rng):
        with pytest.raises(DegenerateInputError):
            crop_to_bbox(Volume3D(rng.random((4, 4, 4))), BinaryMask(np.zeros((4, 4, 4), bool)), 0)

    def test_paste_back_roundtrip(self, rng):
        vol = Volume3D(rng.random((9, 9, 9)))
        mask = rng.random((9, 9, 9)) < 0.1
        mask[4, 4, 4] = True
        sub, offset = crop_to_bbox(vol, BinaryMask(mask), 1)
        np.testing.assert_array_equal(paste_into(vol.data, sub.data, offset), vol.data)

    def test_physical_origin_shift(self, rng):
        vol = Volume3D(rng.random((6, 6, 6)), spacing=(2.0, 1.0, 0.5), origin=(10.0, 0.0, -4.0))
        mask = np.zeros((6, 6, 6), bool)
        mask[2:4, 3, 1] = True
        sub, offset = crop_to_bbox(vol, BinaryMask(mask, spacing=(2.0, 1.0, 0.5)), 0)
        expected = tuple(o + i * s for o, i, s in zip(vol.origin, offset, vol.spacing))
        assert sub.origin == expected


class TestInvariantsOnConstruction:
    def test_volume_rejects_nan(self):
        data = np.zeros((3, 3, 3))
        data[1, 1, 1] = np.nan
        with pytest.raises(ValueError):
            Volume3D(data)

    def test_volume_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Volume3D(np.zeros((3, 3, 3)), spacing=(1.0, 0.0, 1.0))

    def test_label_rejects_other_values(self):
        with pytest.raises(ValueError):
            from echodetect import LabelVolume

            LabelVolume(np.full((3, 3, 3), 2), "strong")
