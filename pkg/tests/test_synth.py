import numpy as np
import pytest
from scipy.spatial import cKDTree

from mitodet import candidates, stain, synth
from mitodet.errors import ConfigInfeasible

SMALL = dict(width=700, height=700, n_mitoses=6, n_dark_nuclei=30, n_mimics=8, n_pale_nuclei=120,
             n_phh3_artifacts=5)


def _cfg(**kw):
    return synth.SynthConfig(**{**SMALL, **kw})


class TestSlide:
    def test_deterministic(self):
        a = synth.generate_slide(_cfg(seed=4))
        b = synth.generate_slide(_cfg(seed=4))
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mitoses, b.mitoses)

    def test_seeds_differ(self):
        a = synth.generate_slide(_cfg(seed=4))
        b = synth.generate_slide(_cfg(seed=5))
        assert np.any(a.image != b.image)

    def test_no_mitoses(self):
        s = synth.generate_slide(_cfg(n_mitoses=0))
        assert s.mitoses.shape == (0, 2)

    def test_twenty_five_mitoses_spaced(self):
        s = synth.generate_slide(synth.SynthConfig(seed=1))
        assert len(s.mitoses) == 25
        d = np.hypot(*(s.mitoses[:, None] - s.mitoses[None]).transpose(2, 0, 1)) + np.eye(25) * 1e9
        assert d.min() > 100

    def test_mitosis_centers_are_dark(self):
        s = synth.generate_slide(synth.SynthConfig(seed=2, noise_std=0.0))
        xi, yi = np.rint(s.mitoses).astype(int).T
        assert np.all(s.image[yi, xi].mean(axis=1) / 255.0 < 0.6)

    def test_mitoses_inside_tissue_and_margin(self):
        cfg = _cfg(seed=7)
        s = synth.generate_slide(cfg)
        xi, yi = np.rint(s.mitoses).astype(int).T
        assert s.tissue[yi, xi].all()
        assert s.mitoses.min() >= cfg.margin and s.mitoses.max() <= 700 - cfg.margin

    def test_output_type(self):
        s = synth.generate_slide(_cfg())
        assert s.image.dtype == np.uint8 and s.image.shape == (700, 700, 3)

    def test_infeasible(self):
        with pytest.raises(ConfigInfeasible):
            synth.generate_slide(_cfg(width=300, height=300, n_mitoses=40))
        with pytest.raises(ConfigInfeasible):
            synth.SynthConfig(jitter=600)
        with pytest.raises(ConfigInfeasible):
            synth.SynthConfig(width=100, height=100)


class TestRendering:
    def test_reflectance_in_unit_range(self):
        scene = synth.build_scene(_cfg(seed=3))
        for refl in (synth.render_he(scene), synth.render_phh3(scene)):
            assert refl.min() >= 0.0 and refl.max() <= 1.0

    def test_he_has_no_dab(self):
        s = synth.generate_slide(_cfg(seed=3, noise_std=0.0))
        assert np.abs(stain.rgb_to_hed(s.image)[..., 2]).max() < 0.02


class TestPair:
    def test_zero_shift_is_aligned(self):
        p = synth.generate_pair(_cfg(seed=6))
        assert p.phh3.shape == p.he.image.shape
        assert np.allclose(p.mitoses_phh3, p.he.mitoses)
        assert not p.displacement.any()

    def test_dab_only_at_mitoses_and_artifacts(self):
        p = synth.generate_pair(_cfg(seed=3, noise_std=0.0))
        dab = stain.rgb_to_hed(p.phh3)[..., 2]
        yy, xx = np.mgrid[:700, :700]
        away = np.ones(dab.shape, bool)
        for x, y in np.vstack([p.mitoses_phh3, p.artifacts_phh3]):
            away &= (xx - x) ** 2 + (yy - y) ** 2 > 100 ** 2
        assert away.mean() > 0.3
        assert np.abs(dab[away]).max() < 0.02
        xi, yi = np.rint(p.mitoses_phh3).astype(int).T
        assert np.all(dab[yi, xi] > 0.5)

    def test_shift_moves_mitoses(self):
        p = synth.generate_pair(_cfg(seed=8, shift=(40, -25)))
        assert np.allclose(p.mitoses_phh3 - p.he.mitoses, [40, -25])
        assert p.shift == (40, -25)

    def test_shifted_image_content(self):
        b = synth.generate_pair(_cfg(seed=8, noise_std=0.0, shift=(40, -25)))
        canvas = synth.render_phh3(b.he.scene)
        pad = b.he.scene.pad
        # PHH3 pixel (x, y) shows the scene at (x - 40, y + 25)
        expected = stain.to_uint8(canvas[pad + 25 : pad + 725, pad - 40 : pad + 660])
        assert np.array_equal(b.phh3, expected)

    def test_jitter_bounded(self):
        p = synth.generate_pair(_cfg(seed=9, shift=(10, 5), jitter=8, jitter_spacing=256))
        assert np.all(np.abs(p.displacement[..., 0] - 10) <= 8)
        assert np.all(np.abs(p.displacement[..., 1] - 5) <= 8)
        # planted positions satisfy q = p + D(q) to within the field's local slope
        xi, yi = np.clip(np.rint(p.mitoses_phh3), 0, 699).astype(int).T
        resid = p.mitoses_phh3 - p.he.mitoses - p.displacement[yi, xi]
        assert np.abs(resid).max() < 0.1


def test_candidate_recall_on_default_slides():
    found = planted = 0
    for seed in (100, 101):
        s = synth.generate_slide(synth.SynthConfig(seed=seed))
        pts = np.array([(c.x, c.y) for c in candidates.detect_candidates(s.image)])
        dist, _ = cKDTree(pts).query(s.mitoses)
        found += int((dist <= 30).sum())
        planted += len(s.mitoses)
    assert found / planted >= 0.99


def test_observers():
    truth = np.array([1, 0] * 500)
    obs = synth.simulate_observers(truth, n_observers=4, error_rate=0.1, seed=0)
    assert obs.shape == (4, 1000)
    assert 0.08 < (obs != truth).mean() < 0.12
    assert np.array_equal(obs, synth.simulate_observers(truth, 4, 0.1, seed=0))
