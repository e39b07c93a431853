"""Event stream IO, window slicing, and voxelization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seal.events import (
    EventFormatError,
    EventStream,
    EventValidationError,
    VoxelConfig,
    VoxelGrid,
    load_events,
    load_voxel,
    normalize_voxel,
    save_events,
    save_voxel,
    slice_window,
    voxelize,
)


def make_stream(xs, ys, ts, ps, w=8, h=8):
    return EventStream.from_arrays(xs, ys, ts, ps, w, h)


class TestEventStream:
    def test_validates_lengths(self):
        with pytest.raises(EventValidationError):
            EventStream.from_arrays([1, 2], [1], [0, 1], [1, 1], 8, 8)

    def test_validates_monotonic_time(self):
        with pytest.raises(EventValidationError, match="non-decreasing"):
            make_stream([1, 1], [1, 1], [5, 3], [1, 1])

    def test_validates_bounds_with_index(self):
        with pytest.raises(EventValidationError, match="record 1"):
            make_stream([1, 8], [1, 1], [0, 1], [1, 1])

    def test_validates_polarity(self):
        with pytest.raises(EventValidationError, match="polarity"):
            make_stream([1], [1], [0], [2])


class TestBinaryContainer:
    def test_round_trip_two_events(self, tmp_path):
        s = make_stream([1, 3], [2, 4], [10, 20], [1, -1])
        path = tmp_path / "s.evt"
        save_events(s, path)
        r = load_events(path)
        assert np.array_equal(r.xs, s.xs) and np.array_equal(r.ys, s.ys)
        assert np.array_equal(r.ts, s.ts) and np.array_equal(r.ps, s.ps)
        assert (r.width, r.height) == (8, 8)

    def test_empty_payload_valid_header(self, tmp_path):
        path = tmp_path / "empty.evt"
        save_events(EventStream.empty(8, 8), path)
        assert len(load_events(path)) == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.evt"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(EventFormatError, match="magic"):
            load_events(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.evt"
        s = make_stream([1, 3], [2, 4], [10, 20], [1, -1])
        save_events(s, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(EventFormatError, match="truncated"):
            load_events(path)


class TestCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("x,y,t,p\n1,2,10,1\n3,4,20,-1\n")
        s = load_events(path, format="csv", width=8, height=8)
        assert list(s.xs) == [1, 3] and list(s.ps) == [1, -1]

    def test_out_of_range_names_row(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("x,y,t,p\n8,0,0,1\n")
        with pytest.raises(EventValidationError, match="row 0"):
            load_events(path, format="csv", width=8, height=8)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("a,b,c,d\n1,2,3,1\n")
        with pytest.raises(EventFormatError, match="header"):
            load_events(path, format="csv", width=8, height=8)


class TestSliceWindow:
    def test_basic(self):
        s = make_stream([0, 1, 2], [0, 0, 0], [0, 10, 30], [1, 1, 1])
        out = slice_window(s, 0, 25)
        assert list(out.ts) == [0, 10]

    def test_past_end_empty(self):
        s = make_stream([0], [0], [5], [1])
        assert len(slice_window(s, 100, 25)) == 0

    def test_half_open_boundary(self):
        s = make_stream([0, 1, 2], [0, 0, 0], [10, 29, 30], [1, 1, 1])
        out = slice_window(s, 10, 20)
        assert list(out.ts) == [10, 29]

    def test_subsequence_property(self):
        rng = np.random.default_rng(0)
        ts = np.sort(rng.integers(0, 1000, size=50))
        s = make_stream(rng.integers(0, 8, 50), rng.integers(0, 8, 50), ts,
                        rng.choice([-1, 1], 50))
        out = slice_window(s, 200, 300)
        assert len(out) <= len(s)
        assert np.all((out.ts >= 200) & (out.ts < 500))


class TestVoxelize:
    CFG = VoxelConfig(bins=3, window_us=25_000, height=4, width=4)

    def test_empty_stream_zero_grid(self):
        g = voxelize(EventStream.empty(4, 4), self.CFG, t0=0)
        assert g.data.shape == (3, 4, 4) and not g.data.any()

    def test_event_at_window_start(self):
        s = make_stream([1], [2], [0], [1], 4, 4)
        g = voxelize(s, self.CFG, t0=0)
        assert g.data[0, 2, 1] == 1.0
        assert g.data.sum() == 1.0

    def test_quarter_window_kernel_split(self):
        # t* = (B-1) * (dT/4) / dT = 0.5 -> weight 0.5 in bins 0 and 1
        s = make_stream([1], [2], [6250], [-1], 4, 4)
        g = voxelize(s, self.CFG, t0=0)
        assert g.data[0, 2, 1] == pytest.approx(-0.5)
        assert g.data[1, 2, 1] == pytest.approx(-0.5)
        assert g.data[2, 2, 1] == 0.0

    def test_single_bin_collapses(self):
        cfg = VoxelConfig(bins=1, window_us=25_000, height=4, width=4)
        s = make_stream([0, 1], [0, 0], [0, 24_000], [1, 1], 4, 4)
        g = voxelize(s, cfg, t0=0)
        assert g.data[0, 0, 0] == 1.0 and g.data[0, 0, 1] == 1.0

    def test_mass_conservation_random(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = 200
            s = make_stream(rng.integers(0, 4, n), rng.integers(0, 4, n),
                            np.sort(rng.integers(0, 25_000, n)),
                            np.ones(n, dtype=np.int64), 4, 4)
            g = voxelize(s, self.CFG, t0=0)
            assert g.data.sum() == pytest.approx(n, rel=1e-4)

    @given(st.integers(2, 5), st.integers(0, 24_999))
    @settings(max_examples=40, deadline=None)
    def test_kernel_partition_of_unity(self, bins, t):
        tstar = (bins - 1) * t / 25_000
        weights = [max(1 - abs(tstar - b), 0.0) for b in range(bins)]
        assert sum(weights) == pytest.approx(1.0, abs=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        n = 60
        ts = np.sort(rng.integers(0, 25_000, 2 * n))
        xs = rng.integers(0, 4, 2 * n)
        ys = rng.integers(0, 4, 2 * n)
        ps = rng.choice([-1, 1], 2 * n)
        s_all = make_stream(xs, ys, ts, ps, 4, 4)
        s1 = make_stream(xs[:n], ys[:n], ts[:n], ps[:n], 4, 4)
        s2 = make_stream(xs[n:], ys[n:], ts[n:], ps[n:], 4, 4)
        g_all = voxelize(s_all, self.CFG, t0=0)
        g1 = voxelize(s1, self.CFG, t0=0)
        g2 = voxelize(s2, self.CFG, t0=0)
        np.testing.assert_allclose(g_all.data, g1.data + g2.data, atol=1e-9)

    def test_geometry_rescale_nearest(self):
        s = make_stream([7], [0], [0], [1], 8, 8)
        cfg = VoxelConfig(bins=1, window_us=1000, height=4, width=4)
        g = voxelize(s, cfg, t0=0)
        # round(7 * 4/8) = round(3.5) = 4 -> clipped to 3
        assert g.data[0, 0, 3] == 1.0


class TestNormalize:
    def test_zero_grid_unchanged(self):
        g = VoxelGrid(np.zeros((1, 2, 2)), VoxelConfig(1, 10, 2, 2))
        assert not normalize_voxel(g).data.any()

    def test_halves_at_peak_two(self):
        data = np.array([[[2.0, -1.0], [0.5, 0.0]]])
        g = VoxelGrid(data, VoxelConfig(1, 10, 2, 2))
        np.testing.assert_array_equal(normalize_voxel(g).data, data / 2.0)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((2, 3, 3))
        g = VoxelGrid(data, VoxelConfig(2, 10, 3, 3))
        once = normalize_voxel(g)
        twice = normalize_voxel(once)
        np.testing.assert_array_equal(once.data, twice.data)


class TestVoxelFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((3, 4, 5)).astype(np.float32).astype(np.float64)
        g = VoxelGrid(data, VoxelConfig(3, 25_000, 4, 5), t0=123)
        path = tmp_path / "g.vox"
        save_voxel(g, path)
        r = load_voxel(path)
        assert r.t0 == 123 and r.config.bins == 3
        np.testing.assert_array_equal(r.data, data)
