import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtaformer import data, reference
from dtaformer.data import (PointCloudBlock, cell_assignment, fps, grid_subsample,
                            grid_subsample_indices, load_blocks, normalize_block, partition_area,
                            read_block, read_block_binary, save_block, save_block_binary,
                            synth_generate, synth_spec)
from dtaformer.errors import BlockFormatError


def block(n=5, c=6, k=6, seed=0):
    g = np.random.default_rng(seed)
    return PointCloudBlock(g.normal(size=(n, c)) * 10, g.integers(0, k, n), "b", k)


class TestBlockFiles:
    def test_text_round_trip_is_exact(self, tmp_path):
        b = block()
        save_block(b, tmp_path / "a.blk", 6)
        got = read_block(tmp_path / "a.blk", synth_spec(5))
        assert np.array_equal(got.points, b.points)
        assert np.array_equal(got.labels, b.labels)

    def test_binary_round_trip(self, tmp_path):
        b = block()
        b.points = b.points.astype(np.float32).astype(np.float64)
        save_block_binary(b, tmp_path / "a.bin", 6)
        got = read_block_binary(tmp_path / "a.bin")
        assert np.array_equal(got.points, b.points) and np.array_equal(got.labels, b.labels)
        assert got.num_classes == 6

    def test_truncated_binary(self, tmp_path):
        save_block_binary(block(), tmp_path / "a.bin", 6)
        raw = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "a.bin").write_bytes(raw[:-3])
        with pytest.raises(BlockFormatError):
            read_block_binary(tmp_path / "a.bin")

    def test_empty_directory(self, tmp_path):
        assert load_blocks(tmp_path) == []

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_blocks(tmp_path / "nope")

    def test_sorted_order(self, tmp_path):
        for name in ("b", "a", "c"):
            save_block(block(), tmp_path / f"{name}.blk", 6)
        assert [b.block_id for b in load_blocks(tmp_path)] == ["a", "b", "c"]

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "bad.blk"
        p.write_text("2 6 6\n0 0 0 1 1 1 0\n0 0 0 1 1 1 99\n")
        with pytest.raises(BlockFormatError, match=r"bad\.blk:3"):
            read_block(p, synth_spec(2))

    @pytest.mark.parametrize("body,line", [("1 6 6\n0 0 0 1 1 1\n", 2), ("1 6 6\n0 0 x 1 1 1 0\n", 2),
                                           ("1 6\n", 1), ("2 6 6\n0 0 0 1 1 1 0\n", None)])
    def test_malformed(self, tmp_path, body, line):
        p = tmp_path / "m.blk"
        p.write_text(body)
        with pytest.raises(BlockFormatError, match=rf"m\.blk:{line}" if line else "declares"):
            read_block(p)

    def test_schema_mismatch(self, tmp_path):
        save_block(block(c=4), tmp_path / "a.blk", 6)
        with pytest.raises(BlockFormatError, match="channels"):
            read_block(tmp_path / "a.blk", synth_spec(5))


class TestNormalize:
    def test_unit_cube(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        out = normalize_block(PointCloudBlock(corners, np.zeros(8, dtype=int)))
        assert np.allclose(out.points, corners - 0.5)

    def test_single_point(self):
        out = normalize_block(PointCloudBlock(np.array([[3.0, -2.0, 7.0, 0.4]]), np.zeros(1, dtype=int)))
        assert np.array_equal(out.points, [[0.0, 0.0, 0.0, 0.0]])

    def test_three_points(self):
        pts = np.array([[0, 0, 0, 0], [2, 0, 0, 5], [1, 1, 0, 10]], dtype=float)
        out = normalize_block(PointCloudBlock(pts, np.zeros(3, dtype=int)))
        # centroid (1, 1/3, 0), largest extent 2
        expected = [[-0.5, -1 / 6, 0, 0], [0.5, -1 / 6, 0, 0.5], [0, 1 / 3, 0, 1]]
        assert np.allclose(out.points, expected)

    def test_input_untouched(self):
        b = block()
        before = b.points.copy()
        normalize_block(b)
        assert np.array_equal(b.points, before)


class TestPartition:
    def test_two_tiles(self, rng):
        pts = np.column_stack([rng.uniform(0, 40, 2000), rng.uniform(0, 20, 2000), rng.normal(size=2000)])
        blocks = partition_area(pts, np.zeros(2000, dtype=int), 256, edge=20.0)
        assert len(blocks) == 2
        assert all(b.count == 256 for b in blocks)

    def test_padding_keeps_every_point(self, rng):
        pts = rng.uniform(0, 5, (30, 3))
        (b,) = partition_area(pts, np.arange(30), 50, edge=20.0)
        assert b.count == 50
        assert set(b.labels.tolist()) == set(range(30))

    def test_sparse_cell_dropped(self, rng):
        pts = np.vstack([rng.uniform(0, 19, (200, 3)), [[39.0, 1.0, 0.0]]])
        assert len(partition_area(pts, np.zeros(201, dtype=int), 100, edge=20.0)) == 1

    def test_empty(self):
        assert partition_area(np.zeros((0, 3)), np.zeros(0, dtype=int), 10) == []

    def test_membership_matches_brute_force(self, rng):
        pts = np.column_stack([rng.uniform(0, 50, 3000), rng.uniform(0, 30, 3000), np.zeros(3000)])
        labels = np.arange(3000)
        lo = pts[:, :2].min(0)
        cells = {}
        for i, (x, y) in enumerate(pts[:, :2]):
            key = (min(int((x - lo[0]) // 10), 4), min(int((y - lo[1]) // 10), 2))
            cells.setdefault(key, set()).add(i)
        blocks = partition_area(pts, labels, 64, edge=10.0)
        assert len(blocks) == len(cells)
        for b in blocks:
            ix, iy = (int(v) for v in b.block_id.split("_")[1:])
            assert set(b.labels.tolist()) <= cells[(ix, iy)]

    def test_cell_assignment_upper_edge(self):
        idx, shape = cell_assignment(np.array([[0.0, 0.0], [40.0, 20.0]]), 20.0)
        assert shape.tolist() == [2, 1]
        assert idx.tolist() == [[0, 0], [1, 0]]


class TestGridSubsample:
    def test_single_voxel(self, rng):
        assert len(grid_subsample(rng.uniform(0.1, 0.9, (20, 3)), 1.0)) == 1

    def test_sparse_points_unchanged(self):
        pts = np.array([[i + 0.5, 0.5, 0.5] for i in range(6)])
        assert len(grid_subsample(pts, 1.0)) == 6

    def test_five_points(self):
        pts = np.array([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9], [0.6, 0.5, 0.4], [1.2, 0.1, 0.1], [1.9, 0.2, 0.3]])
        keep = grid_subsample_indices(pts, 1.0)
        voxels = {}
        for i, p in enumerate(pts):
            voxels.setdefault(tuple(int(np.floor(c)) for c in p), []).append(i)
        expected = []
        for members in voxels.values():
            cen = pts[members].mean(0)
            expected.append(min(members, key=lambda i: (((pts[i] - cen) ** 2).sum(), i)))
        assert keep.tolist() == sorted(expected) == [2, 3]

    def test_labels_follow(self):
        pts = np.array([[0.1, 0.1, 0.1], [5.0, 5.0, 5.0]])
        _, lab = grid_subsample(pts, 1.0, np.array([4, 7]))
        assert lab.tolist() == [4, 7]


class TestFPS:
    def test_square_corners(self):
        sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        assert fps(sq, 2).tolist() == [0, 3]

    def test_k_one_and_full(self, rng):
        pts = rng.normal(size=(7, 3))
        assert fps(pts, 1).tolist() == [0]
        assert sorted(fps(pts, 7).tolist()) == list(range(7))

    def test_too_many(self):
        with pytest.raises(ValueError):
            fps(np.zeros((3, 3)), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 10_000), st.data())
    def test_matches_brute_force(self, m, seed, d):
        pts = np.random.default_rng(seed).normal(size=(m, 3))
        k = d.draw(st.integers(1, m))
        assert fps(pts, k).tolist() == reference.fps(pts, k)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_generate(3, 128, seed=5), synth_generate(3, 128, seed=5)
        assert all(np.array_equal(x.points, y.points) and np.array_equal(x.labels, y.labels) for x, y in zip(a, b))
        assert not np.array_equal(a[0].points, synth_generate(1, 128, seed=6)[0].points)

    def test_every_class_at_least_two_percent(self):
        for b in synth_generate(8, 512, seed=1):
            freq = np.bincount(b.labels, minlength=6) / b.count
            assert freq.min() >= 0.02

    def test_shapes(self):
        (b,) = synth_generate(1, 100, num_classes=4, seed=0, num_channels=5)
        assert b.points.shape == (100, 5) and b.labels.max() < 4

    def test_nearest_centroid_floor(self):
        train = synth_generate(8, 512, seed=0)
        test = synth_generate(4, 512, seed=1)
        x = np.vstack([normalize_block(b).points for b in train])
        y = np.concatenate([b.labels for b in train])
        cents = np.stack([x[y == k].mean(0) for k in range(6)])
        xt = np.vstack([normalize_block(b).points for b in test])
        yt = np.concatenate([b.labels for b in test])
        pred = ((xt[:, None] - cents[None]) ** 2).sum(-1).argmin(1)
        assert (pred == yt).mean() > 0.70

    def test_class_means_independent_of_seed(self):
        assert np.array_equal(data.class_intensity_means(6, 3), data.class_intensity_means(6, 3))
