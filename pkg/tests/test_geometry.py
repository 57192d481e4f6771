import numpy as np
import pytest

from pointcontrast.geometry import (
    RegionLabelMap,
    ViewTransform,
    color_jitter,
    make_annotation_regions,
    make_grid_regions,
    mask_bounding_box,
    render_view,
    sample_points,
    sample_valid_masks,
    sample_view_transform,
    transform_label_map,
    view_point_to_source,
)


class TestGridRegions:
    def test_even_division_4x4(self):
        lm = make_grid_regions(224, 224, 4)
        assert lm.n_regions == 16
        ids, counts = np.unique(lm.labels, return_counts=True)
        assert list(ids) == list(range(16))
        assert all(c == 56 * 56 for c in counts)
        # ids are row-major: cell (r, c) = r*4 + c
        assert lm.labels[0, 0] == 0
        assert lm.labels[0, 223] == 3
        assert lm.labels[223, 0] == 12
        assert lm.labels[223, 223] == 15

    def test_even_division_2x2(self):
        lm = make_grid_regions(224, 224, 2)
        _, counts = np.unique(lm.labels, return_counts=True)
        assert len(counts) == 4
        assert all(c == 112 * 112 for c in counts)

    def test_uneven_division_partitions(self):
        # 225 pixels over 4 cells: extents must be {57, 56, 56, 56} per axis
        lm = make_grid_regions(225, 225, 4)
        row_ids = lm.labels[:, 0] // 4
        extents = sorted(np.bincount(row_ids), reverse=True)
        assert extents == [57, 56, 56, 56]
        col_extents = sorted(np.bincount(lm.labels[0, :] % 4), reverse=True)
        assert col_extents == [57, 56, 56, 56]
        # every pixel labeled exactly once with a valid id
        assert lm.labels.min() >= 0
        assert lm.labels.max() < 16
        assert np.unique(lm.labels).size == 16

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            make_grid_regions(3, 224, 4)
        with pytest.raises(ValueError):
            make_grid_regions(224, 224, 0)

    def test_partition_property_random_sizes(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h = int(rng.integers(8, 200))
            w = int(rng.integers(8, 200))
            n = int(rng.integers(1, 8))
            lm = make_grid_regions(h, w, n)
            assert lm.labels.shape == (h, w)
            assert lm.labels.min() >= 0
            assert lm.labels.max() == n * n - 1


class TestAnnotationRegions:
    def test_full_image_mask(self):
        mask = np.ones((32, 32), dtype=bool)
        lm = make_annotation_regions([mask], 32, 32, "mask")
        assert np.all(lm.labels == 0)
        assert lm.n_regions == 2  # background id exists even if unused

    def test_two_disjoint_boxes(self):
        lm = make_annotation_regions([(0, 0, 4, 4), (10, 10, 4, 4)], 32, 32, "box")
        assert np.all(lm.labels[0:4, 0:4] == 0)
        assert np.all(lm.labels[10:14, 10:14] == 1)
        assert lm.labels[20, 20] == 2  # shared background id

    def test_overlap_later_shape_wins(self):
        boxes = [(0, 0, 8, 8), (4, 4, 8, 8)]
        lm = make_annotation_regions(boxes, 32, 32, "box")
        # rasterize independently and inspect the overlap pixels
        a = np.zeros((32, 32), dtype=bool)
        a[0:8, 0:8] = True
        b = np.zeros((32, 32), dtype=bool)
        b[4:12, 4:12] = True
        overlap = a & b
        assert np.all(lm.labels[overlap] == 1)
        assert np.all(lm.labels[a & ~b] == 0)

    def test_empty_shape_list_is_all_background(self):
        lm = make_annotation_regions([], 16, 16, "mask")
        assert np.all(lm.labels == 0)
        assert lm.n_regions == 1

    def test_out_of_bounds_box_rejected(self):
        with pytest.raises(ValueError):
            make_annotation_regions([(30, 0, 4, 4)], 32, 32, "box")

    def test_mask_bounding_box(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[3:7, 5:11] = True
        assert mask_bounding_box(mask) == (5, 3, 6, 4)


class TestViewTransformSampling:
    def test_full_scale_square_gives_whole_image(self):
        rng = np.random.default_rng(0)
        t = sample_view_transform(64, 64, rng, scale_range=(1.0, 1.0), out_size=64)
        assert t.crop_box == (0, 0, 64, 64)

    def test_identical_seed_identical_transform(self):
        t1 = sample_view_transform(100, 80, np.random.default_rng(42), (0.2, 1.0), 32)
        t2 = sample_view_transform(100, 80, np.random.default_rng(42), (0.2, 1.0), 32)
        assert t1 == t2

    def test_monte_carlo_area_fractions_within_range(self):
        rng = np.random.default_rng(123)
        area = 224 * 224
        for _ in range(10_000):
            t = sample_view_transform(224, 224, rng, (0.2, 1.0), 64)
            x0, y0, w, h = t.crop_box
            frac = w * h / area
            assert 0.2 <= frac <= 1.0
            assert 0 <= x0 and 0 <= y0 and x0 + w <= 224 and y0 + h <= 224

    def test_bad_scale_range_rejected(self):
        with pytest.raises(ValueError):
            sample_view_transform(64, 64, np.random.default_rng(0), (0.0, 1.0), 32)
        with pytest.raises(ValueError):
            sample_view_transform(64, 64, np.random.default_rng(0), (0.5, 1.2), 32)


class TestTransformLabelMap:
    def test_identity_transform_is_noop(self):
        lm = make_grid_regions(64, 64, 4)
        t = ViewTransform((0, 0, 64, 64), False, 64)
        out = transform_label_map(lm, t, 64)
        np.testing.assert_array_equal(out.labels, lm.labels)

    def test_hflip_twice_restores_labels(self):
        lm = make_grid_regions(48, 48, 4)
        t = ViewTransform((0, 0, 48, 48), True, 48)
        once = transform_label_map(lm, t, 48)
        twice = RegionLabelMap(once.labels[:, ::-1], once.n_regions)
        np.testing.assert_array_equal(twice.labels[:, ::-1], once.labels)
        # flipping the flipped map recovers the original
        np.testing.assert_array_equal(once.labels[:, ::-1], lm.labels)

    def test_flip_equivariance(self):
        lm = make_grid_regions(97, 53, 4)
        rng = np.random.default_rng(5)
        for _ in range(25):
            base = sample_view_transform(97, 53, rng, (0.2, 1.0), 24)
            flipped = ViewTransform(base.crop_box, True, base.out_size)
            unflipped = ViewTransform(base.crop_box, False, base.out_size)
            a = transform_label_map(lm, flipped, 24).labels
            b = transform_label_map(lm, unflipped, 24).labels
            np.testing.assert_array_equal(a, b[:, ::-1])

    def test_top_left_quadrant_crop_of_2x2_grid(self):
        lm = make_grid_regions(64, 64, 2)
        t = ViewTransform((0, 0, 32, 32), False, 16)
        out = transform_label_map(lm, t, 16)
        # direct rasterization oracle: every source pixel in the quadrant is cell 0
        assert np.all(lm.labels[0:32, 0:32] == 0)
        assert np.all(out.labels == 0)

    def test_round_trip_views_to_source_cells(self):
        rng = np.random.default_rng(99)
        lm = make_grid_regions(113, 157, 4)
        for _ in range(200):
            t = sample_view_transform(113, 157, rng, (0.2, 1.0), 32)
            warped = transform_label_map(lm, t, 32)
            r = int(rng.integers(0, 32))
            c = int(rng.integers(0, 32))
            sr, sc = view_point_to_source(t, 32, r, c)
            assert 0 <= sr < 113 and 0 <= sc < 157
            assert lm.labels[sr, sc] == warped.labels[r, c]


class TestMaskAndPointSampling:
    def _map_with_ids(self, ids, shape=(8, 8)):
        labels = np.full(shape, -1, dtype=np.int64)
        for j, rid in enumerate(ids):
            labels[j, :] = rid
        return RegionLabelMap(labels, max(ids) + 1)

    def test_draws_from_shared_ids_only(self):
        lm1 = self._map_with_ids([3, 7, 9])
        lm2 = self._map_with_ids([3, 7, 11])
        rng = np.random.default_rng(1)
        ids = sample_valid_masks(lm1, lm2, 16, rng)
        assert len(ids) == 16
        assert set(ids) <= {3, 7}

    def test_all_grid_ids_shared(self):
        lm = make_grid_regions(64, 64, 4)
        t = ViewTransform((0, 0, 64, 64), False, 64)
        warped = transform_label_map(lm, t, 32)
        ids = sample_valid_masks(warped, warped, 16, np.random.default_rng(0))
        assert len(ids) == 16
        assert set(ids) <= set(range(16))

    def test_no_shared_ids_signals_no_overlap(self):
        lm1 = self._map_with_ids([0, 1])
        lm2 = self._map_with_ids([2, 3])
        assert sample_valid_masks(lm1, lm2, 16, np.random.default_rng(0)) is None

    def test_shared_id_soundness(self):
        rng = np.random.default_rng(11)
        lm = make_grid_regions(100, 100, 4)
        for _ in range(20):
            t1 = sample_view_transform(100, 100, rng, (0.2, 1.0), 16)
            t2 = sample_view_transform(100, 100, rng, (0.2, 1.0), 16)
            w1 = transform_label_map(lm, t1, 16)
            w2 = transform_label_map(lm, t2, 16)
            ids = sample_valid_masks(w1, w2, 8, rng)
            if ids is None:
                continue
            for rid in ids:
                assert np.any(w1.labels == rid)
                assert np.any(w2.labels == rid)

    def test_single_pixel_region_repeats(self):
        labels = np.zeros((4, 4), dtype=np.int64)
        labels[2, 3] = 1
        lm = RegionLabelMap(labels, 2)
        coords, ind = sample_points(lm, [1], 4, np.random.default_rng(0))
        assert coords.shape == (4, 2)
        assert np.all(coords == [2, 3])
        assert np.all(ind == 1)

    def test_large_region_gives_distinct_points(self):
        lm = make_grid_regions(32, 32, 2)
        coords, ind = sample_points(lm, [0], 16, np.random.default_rng(0))
        assert len(np.unique(coords[:, 0] * 32 + coords[:, 1])) == 16
        assert np.all(ind == 0)
        assert np.all(lm.labels[coords[:, 0], coords[:, 1]] == 0)

    def test_absent_region_rejected(self):
        lm = make_grid_regions(16, 16, 2)
        with pytest.raises(ValueError):
            sample_points(lm, [99], 4, np.random.default_rng(0))

    def test_two_pixel_region_uniformity(self):
        labels = np.full((4, 4), 1, dtype=np.int64)
        labels[0, 0] = 0
        labels[3, 3] = 0
        lm = RegionLabelMap(labels, 2)
        rng = np.random.default_rng(3)
        hits = 0
        draws = 10_000
        for _ in range(draws):
            coords, _ = sample_points(lm, [0], 1, rng)
            hits += int(coords[0, 0] == 0)
        assert 0.47 <= hits / draws <= 0.53

    def test_fresh_draws_per_repeated_id(self):
        lm = make_grid_regions(32, 32, 2)
        coords, _ = sample_points(lm, [0, 0], 8, np.random.default_rng(0))
        first, second = coords[:8], coords[8:]
        assert not np.array_equal(first, second)


class TestViewRendering:
    def test_render_identity_reproduces_image(self):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32, 3)).astype(np.float32)
        t = ViewTransform((0, 0, 32, 32), False, 32)
        np.testing.assert_allclose(render_view(img, t), img, atol=1e-6)

    def test_render_flip_mirrors_columns(self):
        rng = np.random.default_rng(1)
        img = rng.random((16, 16, 3)).astype(np.float32)
        plain = render_view(img, ViewTransform((0, 0, 16, 16), False, 16))
        flipped = render_view(img, ViewTransform((0, 0, 16, 16), True, 16))
        np.testing.assert_allclose(flipped, plain[:, ::-1], atol=1e-6)

    def test_color_jitter_stays_in_unit_interval_and_is_seeded(self):
        rng = np.random.default_rng(2)
        img = rng.random((8, 8, 3)).astype(np.float32)
        out1 = color_jitter(img, np.random.default_rng(5), 0.4)
        out2 = color_jitter(img, np.random.default_rng(5), 0.4)
        np.testing.assert_array_equal(out1, out2)
        assert out1.min() >= 0.0 and out1.max() <= 1.0
        assert color_jitter(img, np.random.default_rng(5), 0.0) is img
