import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mitodet import nn, wsi
from mitodet.errors import BadThresholds, NoTissue, TileGeometryError
from oracles import hotspot_count_oracle


@pytest.fixture(scope="module")
def small_model():
    return nn.init_params(nn.build_network(0.0625), np.random.default_rng(7))


def _texture(seed, h, w):
    rng = np.random.default_rng(seed)
    return (rng.uniform(0, 1, (h, w, 3)) * 255).astype(np.uint8)


def _pm(values):
    return wsi.ProbabilityMap(np.asarray(values, dtype=np.float32), stride=4, origin=50)


class TestDenseMap:
    def test_seams_match_monolithic(self, small_model):
        img = _texture(0, 600, 600)
        tiled = wsi.dense_probability_map(img, small_model, tile_cells=16)
        whole = nn.forward(small_model, nn.prepare_input(img)[None])[0, :, :, 1]
        assert tiled.values.shape == whole.shape == (126, 126)
        assert np.abs(tiled.values - whole).max() < 1e-5

    def test_matches_per_patch_evaluation(self, small_model):
        img = _texture(1, 300, 260)
        pm = wsi.dense_probability_map(img, small_model, tile_cells=7)
        rng = np.random.default_rng(2)
        for r, c in zip(rng.integers(0, pm.height, 10), rng.integers(0, pm.width, 10)):
            patch = img[4 * r : 4 * r + 100, 4 * c : 4 * c + 100]
            p = nn.predict_proba(small_model, patch[None])[0]
            assert abs(pm.values[r, c] - p) < 1e-5

    def test_grid_geometry(self, small_model):
        pm = wsi.dense_probability_map(_texture(2, 203, 151), small_model)
        assert (pm.height, pm.width, pm.stride, pm.origin) == (26, 13, 4, 50)
        x, y = pm.to_full([0, 2], [0, 3])
        assert x.tolist() == [50, 62] and y.tolist() == [50, 58]

    def test_all_false_mask_gives_zero_map(self, small_model):
        img = _texture(3, 200, 200)
        mask = wsi.TissueMask(np.zeros((13, 13), bool), 16)
        assert not wsi.dense_probability_map(img, small_model, mask).values.any()

    def test_zero_model_is_half_inside_tissue(self):
        m = nn.zero_params(nn.build_network(0.0625))
        img = np.full((300, 300, 3), 255, np.uint8)
        img[:, :150] = 120
        mask = wsi.tissue_mask(img)
        pm = wsi.dense_probability_map(img, m, mask)
        x, _ = pm.to_full(0, np.arange(pm.width))
        inside = mask.at(x, np.full_like(x, 50))
        assert np.allclose(pm.values[0, inside], 0.5) and np.all(pm.values[0, ~inside] == 0)

    def test_workers_do_not_change_map(self, small_model):
        img = _texture(4, 260, 260)
        a = wsi.dense_probability_map(img, small_model, tile_cells=10, workers=1)
        b = wsi.dense_probability_map(img, small_model, tile_cells=10, workers=8)
        assert np.array_equal(a.values, b.values)

    def test_geometry_errors(self, small_model):
        with pytest.raises(TileGeometryError):
            wsi.dense_probability_map(_texture(0, 80, 200), small_model)
        with pytest.raises(TileGeometryError):
            wsi.dense_probability_map(_texture(0, 200, 200), small_model, tile_cells=0)
        pooled = nn.init_params(nn.build_pooled_network(0.0625), np.random.default_rng(0))
        with pytest.raises(TileGeometryError):
            wsi.dense_probability_map(_texture(0, 200, 200), pooled)


class TestPostprocess:
    def test_empty_map(self):
        assert wsi.postprocess(_pm(np.zeros((20, 20)))).shape == (0, 3)

    def test_close_blobs_keep_the_stronger(self):
        v = np.zeros((30, 40))
        v[10, 10] = 0.9
        v[10, 25] = 0.85  # 15 cells = 60 px away
        dets = wsi.postprocess(_pm(v))
        assert dets.tolist() == [[90.0, 90.0, pytest.approx(0.9)]]

    def test_far_blobs_both_survive(self):
        v = np.zeros((30, 60))
        v[10, 10] = 0.9
        v[10, 40] = 0.85  # 120 px
        assert len(wsi.postprocess(_pm(v))) == 2

    def test_three_cell_blob(self):
        v = np.zeros((12, 12))
        v[5, 5:8] = [0.85, 0.95, 0.9]
        dets = wsi.postprocess(_pm(v))
        # centroid at column 6, row 5
        assert dets[0, :2].tolist() == [74.0, 70.0]
        assert dets[0, 2] == pytest.approx(0.95)

    def test_diagonal_cells_are_one_component(self):
        v = np.zeros((10, 10))
        v[2, 2] = v[3, 3] = 0.9
        assert len(wsi.postprocess(_pm(v), d=1)) == 1

    def test_floor(self):
        v = np.zeros((10, 10))
        v[4, 4] = 0.79
        assert len(wsi.postprocess(_pm(v))) == 0

    @given(st.integers(0, 10_000), st.sampled_from([20.0, 50.0, 100.0]))
    def test_suppression_distance(self, seed, d):
        rng = np.random.default_rng(seed)
        dets = np.column_stack([rng.uniform(0, 400, (40, 2)), rng.uniform(0.8, 1, 40)])
        kept = wsi.suppress(dets, d)
        diff = kept[:, None, :2] - kept[None, :, :2]
        dist = np.sqrt((diff ** 2).sum(-1)) + np.eye(len(kept)) * 1e9
        assert dist.min() >= d
        # every dropped detection has a stronger-or-equal neighbour within d
        for x, y, p in dets:
            near = np.hypot(kept[:, 0] - x, kept[:, 1] - y) < d
            assert near.any() or ((kept[:, 0] == x) & (kept[:, 1] == y)).any()

    def test_probability_order(self):
        dets = np.array([[0, 0, 0.85], [10, 0, 0.95], [200, 0, 0.9]])
        assert wsi.suppress(dets, 100)[:, 2].tolist() == [0.95, 0.9]


class TestThreshold:
    dets = np.array([[1, 1, 0.8], [2, 2, 0.9], [3, 3, 0.95], [4, 4, 1.0]])

    def test_identity_and_empty(self):
        assert np.array_equal(wsi.apply_threshold(self.dets, 0.0), self.dets)
        assert len(wsi.apply_threshold(self.dets, 1.01)) == 0

    def test_manual_filter(self):
        assert wsi.apply_threshold(self.dets, 0.9)[:, 0].tolist() == [2, 3, 4]

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        small = {tuple(r) for r in wsi.apply_threshold(self.dets, hi).tolist()}
        big = {tuple(r) for r in wsi.apply_threshold(self.dets, lo).tolist()}
        assert small <= big


class TestHotspot:
    mask = wsi.TissueMask(np.ones((1000, 1000), bool), 16)  # 16000 px square

    def test_radius(self):
        assert wsi.hotspot_radius_px() == pytest.approx(3191.538, abs=1e-3)

    def test_empty(self):
        assert wsi.hotspot(np.zeros((0, 3)), self.mask)[0] == 0

    def test_planted_cluster(self):
        rng = np.random.default_rng(0)
        cluster = np.column_stack([rng.uniform(7800, 8200, (30, 2)), np.full(30, 0.99)])
        far = np.array([[500, 500, 0.99], [15500, 500, 0.99], [500, 15500, 0.99],
                        [15500, 15500, 0.99], [15500, 8000, 0.99]])
        count, (cx, cy) = wsi.hotspot(np.vstack([cluster, far]), self.mask)
        assert count >= 30
        r = wsi.hotspot_radius_px()
        assert hotspot_count_oracle(cluster[:, :2].tolist(), [(cx, cy)], r)[0] == 30

    def test_count_matches_oracle_at_center(self):
        rng = np.random.default_rng(1)
        dets = np.column_stack([rng.uniform(0, 16000, (200, 2)), np.ones(200)])
        count, center = wsi.hotspot(dets, self.mask)
        assert hotspot_count_oracle(dets[:, :2].tolist(), [center], wsi.hotspot_radius_px())[0] == count

    def test_percentile_at_least_median(self):
        rng = np.random.default_rng(2)
        dets = np.column_stack([rng.uniform(0, 16000, (400, 2)), np.ones(400)])
        r = wsi.hotspot_radius_px()
        centers = [(x, y) for y in range(0, 16000, 200) for x in range(0, 16000, 200)]
        counts = hotspot_count_oracle(dets[::4, :2].tolist(), centers[::97], r)
        count, _ = wsi.hotspot(dets[::4], self.mask)
        assert count >= np.median(counts)

    def test_monotone_in_delta(self):
        rng = np.random.default_rng(3)
        dets = np.column_stack([rng.uniform(0, 16000, (150, 2)), rng.uniform(0.8, 1, 150)])
        counts = [wsi.hotspot(wsi.apply_threshold(dets, d), self.mask)[0] for d in (0.8, 0.85, 0.9, 0.95, 1.0)]
        assert counts == sorted(counts, reverse=True)

    def test_no_tissue(self):
        with pytest.raises(NoTissue):
            wsi.hotspot(np.zeros((0, 3)), wsi.TissueMask(np.zeros((50, 50), bool), 16))

    def test_summary(self):
        dets = np.array([[8000, 8000, 0.99], [8100, 8000, 0.5]])
        s = wsi.summarize(dets, self.mask, delta=0.9)
        assert (s.hotspot_count, s.grade, s.proliferation_score) == (1, 1, 1)
        assert "grade = 1\n" in s.to_text() and "theta2 = 20\n" in s.to_text()


class TestGrade:
    @pytest.mark.parametrize("count,g", [(0, 1), (6, 1), (7, 2), (20, 2), (21, 3), (500, 3)])
    def test_boundaries(self, count, g):
        assert wsi.grade(count) == g

    def test_bad_thresholds(self):
        with pytest.raises(BadThresholds):
            wsi.grade(3, 20, 20)
        with pytest.raises(ValueError):
            wsi.grade(-1)

    @given(st.integers(0, 100), st.integers(0, 100))
    def test_monotone(self, a, b):
        if a <= b:
            assert wsi.grade(a) <= wsi.grade(b)

    def test_score_is_count(self):
        assert wsi.proliferation_score(0) == 0 and wsi.proliferation_score(17) == 17


class TestIO:
    def test_slide_roundtrip(self, tmp_path):
        img = _texture(5, 700, 530)
        man = wsi.write_slide(tmp_path / "s", img, tile_size=256)
        assert (man.rows, man.cols) == (3, 3)
        back, man2 = wsi.read_slide(tmp_path / "s")
        assert np.array_equal(back, img) and man2 == man

    def test_pmap_roundtrip(self, tmp_path):
        pm = _pm(np.random.default_rng(0).uniform(0, 1, (17, 23)))
        wsi.write_pmap(tmp_path / "m.pmap", pm)
        data = (tmp_path / "m.pmap").read_bytes()
        assert data[:4] == b"PMAP" and len(data) == 16 + 4 * 17 * 23
        back = wsi.read_pmap(tmp_path / "m.pmap")
        assert np.array_equal(back.values, pm.values) and back.stride == 4

    def test_pmap_truncated(self, tmp_path):
        wsi.write_pmap(tmp_path / "m.pmap", _pm(np.zeros((4, 4))))
        (tmp_path / "t.pmap").write_bytes((tmp_path / "m.pmap").read_bytes()[:-3])
        with pytest.raises(ValueError):
            wsi.read_pmap(tmp_path / "t.pmap")

    def test_preview(self, tmp_path):
        wsi.write_pmap_preview(tmp_path / "p.png", _pm([[0.0, 1.0]]))
        from PIL import Image
        assert np.asarray(Image.open(tmp_path / "p.png")).tolist() == [[0, 255]]

    def test_detections_roundtrip(self, tmp_path):
        dets = np.array([[10.25, 20.5, 0.912345], [3.0, 4.0, 1.0]])
        wsi.write_detections(tmp_path / "d.csv", dets)
        assert np.allclose(wsi.read_detections(tmp_path / "d.csv"), dets)
        wsi.write_detections(tmp_path / "e.csv", np.zeros((0, 3)))
        assert wsi.read_detections(tmp_path / "e.csv").shape == (0, 3)


class TestTissueMask:
    def test_white_is_background(self):
        m = wsi.tissue_mask(np.full((64, 64, 3), 255, np.uint8))
        assert m.mask.shape == (4, 4) and not m.mask.any()

    def test_stained_region(self):
        img = np.full((64, 64, 3), 255, np.uint8)
        img[:, 32:] = 150
        m = wsi.tissue_mask(img)
        assert m.mask[:, 2:].all() and not m.mask[:, :2].any()
        assert m.at(40, 5) and not m.at(5, 5)
        assert np.array_equal(wsi.tissue_mask_array(img)[0, 30:34], [False, False, True, True])
