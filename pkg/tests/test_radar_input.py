import math

import numpy as np
import pytest

from rvmde.geometry import Intrinsics, PointCloud, Pose, transform_points
from rvmde.radar_input import (MER_CHANNELS, MerSpec, PillarSpec, RadarInputError, build_mer, extend_height,
                               load_mer)
from rvmde.raster import RasterFormatError, read_raster, write_raster

POSE = Pose.from_rt([[0, -1, 0], [0, 0, -1], [1, 0, 0]], [0, 1.5, 0])  # level camera 1.5 m up
K = Intrinsics(100.0, 100.0, 64.0, 32.0)
W, H = 128, 64


def random_cloud(rng, n):
    return PointCloud(np.column_stack([rng.uniform(2, 40, n), rng.uniform(-15, 15, n), rng.uniform(0, 2, n)]))


class TestExtendHeight:
    def test_empty(self):
        out = extend_height(PointCloud(np.zeros((0, 3))), PillarSpec(), POSE, K, W, H)
        assert out.shape == (1, H, W) and not out.any()

    def test_dead_ahead(self):
        out = extend_height(PointCloud([[20.0, 0.0, 0.7]]), PillarSpec(0.3, 2.0), POSE, K, W, H)[0]
        top = math.floor(32 + 100 * (1.5 - 2.0) / 20)
        bottom = math.floor(32 + 100 * (1.5 - 0.3) / 20)
        rows = np.flatnonzero(out[:, 64])
        assert rows.tolist() == list(range(top, bottom + 1))
        assert np.all(out[rows, 64] == 20.0)
        assert np.count_nonzero(out) == len(rows)

    def test_overlap_min(self):
        out = extend_height(PointCloud([[10.0, 0.0, 1.0], [30.0, 0.0, 1.0]]), PillarSpec(), POSE, K, W, H)[0]
        col = out[:, 64]
        assert set(col[col > 0].tolist()) == {10.0}

    def test_truncated_not_discarded(self):
        out = extend_height(PointCloud([[2.0, 0.0, 1.0]]), PillarSpec(0.0, 5.0), POSE, K, W, H)[0]
        assert out[0, 64] == 2.0 and out[H - 1, 64] == 2.0

    def test_behind_camera_skipped(self):
        out = extend_height(PointCloud([[-5.0, 0.0, 1.0]]), PillarSpec(), POSE, K, W, H)
        assert not out.any()

    def test_degenerate_pillar_single_pixel(self, rng):
        cloud = random_cloud(rng, 30)
        out = extend_height(cloud, PillarSpec(1.0, 1.0), POSE, K, W, H)[0]
        assert np.count_nonzero(out) <= 30

    def test_invalid_pillar(self):
        with pytest.raises(RadarInputError):
            PillarSpec(2.0, 0.3)

    def test_extra_columns_ignored(self, rng):
        cloud = random_cloud(rng, 10)
        wide = PointCloud(np.column_stack([cloud.points, rng.normal(size=(10, 3))]))
        a = extend_height(cloud, PillarSpec(), POSE, K, W, H)
        b = extend_height(wide, PillarSpec(), POSE, K, W, H)
        assert np.array_equal(a, b)


class TestMer:
    def test_empty(self):
        out = build_mer(PointCloud(np.zeros((0, 3))), POSE, K, W, H)
        assert out.shape == (MER_CHANNELS, H, W) and not out.any()

    def test_peak_in_all_channels(self):
        out = build_mer(PointCloud([[20.0, 0.0, 1.5]]), POSE, K, W, H)
        assert np.all(out[:, 32, 64] == 20.0)

    def test_confidence_06_channels(self):
        spec = MerSpec()
        # pick a horizontal offset du with conf(du, 0) nearest 0.6
        du = spec.sigma_u * math.sqrt(-2 * math.log(0.6))
        du_px = round(du)
        conf = spec.confidence(du_px, 0)
        assert 0.5 <= conf < 0.7
        out = build_mer(PointCloud([[20.0, 0.0, 1.5]]), POSE, K, W, H, spec)
        present = [c for c in range(1, 6) if out[c, 32, 64 + du_px] > 0]
        assert present == [3, 4, 5]

    def test_nesting_and_values(self, rng):
        for _ in range(30):
            cloud = random_cloud(rng, int(rng.integers(1, 25)))
            out = build_mer(cloud, POSE, K, W, H)
            sup = out > 0
            for j in range(1, 5):
                assert not np.any(sup[j] & ~sup[j + 1])
            assert not np.any(sup[0] & ~sup[5])
            depths = set(transform_points(cloud, POSE).xyz[:, 2].tolist())
            assert set(out[sup].tolist()) <= depths

    def test_overlap_nearest_wins(self):
        out = build_mer(PointCloud([[10.0, 0.0, 1.5], [30.0, 0.3, 1.5]]), POSE, K, W, H)
        assert out[5, 32, 64] == 10.0

    @pytest.mark.parametrize("kw", [dict(sigma_u=0), dict(thresholds=(0.9, 0.7, 0.5, 0.3)),
                                    dict(thresholds=(0.1, 0.3, 0.5, 0.7, 0.9)),
                                    dict(thresholds=(1.0, 0.7, 0.5, 0.3, 0.1))])
    def test_invalid_spec(self, kw):
        with pytest.raises(RadarInputError):
            MerSpec(**kw)


class TestRasterFiles:
    def test_mer_round_trip(self, tmp_path, rng):
        mer = build_mer(random_cloud(rng, 12), POSE, K, W, H).astype(np.float32)
        write_raster(tmp_path / "m.rvrd", mer)
        back = load_mer(tmp_path / "m.rvrd", expected_hw=(H, W))
        assert back.tobytes() == mer.tobytes()
        write_raster(tmp_path / "m2.rvrd", back)
        assert (tmp_path / "m.rvrd").read_bytes() == (tmp_path / "m2.rvrd").read_bytes()

    def test_header_layout(self, tmp_path):
        write_raster(tmp_path / "r.rvrd", np.ones((2, 3), np.float32))
        blob = (tmp_path / "r.rvrd").read_bytes()
        assert blob[:4] == b"RVRD" and blob[4:16] == bytes([1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0])
        assert len(blob) == 16 + 4 * 6

    def test_wrong_channels(self, tmp_path):
        write_raster(tmp_path / "m.rvrd", np.zeros((3, 4, 4)))
        with pytest.raises(RadarInputError, match="expected 6 channels"):
            load_mer(tmp_path / "m.rvrd")

    def test_negative(self, tmp_path):
        arr = np.zeros((6, 4, 4))
        arr[2, 1, 1] = -1
        write_raster(tmp_path / "m.rvrd", arr)
        with pytest.raises(RadarInputError, match="negative depth"):
            load_mer(tmp_path / "m.rvrd")

    def test_dimension_mismatch(self, tmp_path):
        write_raster(tmp_path / "m.rvrd", np.zeros((6, 4, 4)))
        with pytest.raises(RadarInputError, match="4x4"):
            load_mer(tmp_path / "m.rvrd", expected_hw=(4, 8))

    def test_corrupt(self, tmp_path):
        write_raster(tmp_path / "m.rvrd", np.zeros((6, 4, 4)))
        blob = (tmp_path / "m.rvrd").read_bytes()
        (tmp_path / "t.rvrd").write_bytes(blob[:-1])
        (tmp_path / "b.rvrd").write_bytes(b"XXXX" + blob[4:])
        for name in ("t.rvrd", "b.rvrd"):
            with pytest.raises(RasterFormatError):
                read_raster(tmp_path / name)
