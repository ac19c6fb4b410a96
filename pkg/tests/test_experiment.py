import numpy as np

from mitodet import experiment as ex
from mitodet import synth

TINY = ex.ExperimentConfig(n_train_slides=2, n_val_slides=1, n_test_slides=1, slide_size=700, n_mitoses=6,
                           max_pair_shift=20, member_gamma=0.0625, student_gamma=0.0625, k=2,
                           n_easy_negatives=40, n_hard_negatives=40, epochs=2, steps_per_epoch=2,
                           student_steps_per_epoch=2, batch=8, phh3_epochs=1, phh3_steps_per_epoch=2,
                           negative_pool=200, transfer_background=60)


def test_background_patches_keep_away_from_reference():
    s = synth.generate_slide(synth.SynthConfig(width=700, height=700, n_mitoses=6, seed=2))
    rng = np.random.default_rng(0)
    p = ex.background_patches(s.image, s.mitoses, 300, 100.0, rng)
    assert 0 < len(p) <= 300 and p.shape[1:] == (128, 128, 3)
    assert len(ex.background_patches(s.image, s.mitoses, 0, 100.0, rng)) == 0


def test_slide_scorer_is_deterministic():
    s = synth.generate_slide(synth.SynthConfig(width=400, height=400, n_mitoses=2, seed=3))
    from mitodet import nn

    m = nn.init_params(nn.build_network(0.0625), np.random.default_rng(0))
    score = ex.slide_f1_scorer([s.image], [s.mitoses], TINY)
    a = score(m)
    assert 0.0 <= a <= 1.0 and a == score(m)


def test_tiny_run_end_to_end(tmp_path):
    res = ex.run_experiment(TINY, tmp_path)
    assert set(res.best) == {"single", "ensemble", "student"}
    assert set(res.checks) == {"test_f1", "ensemble_vs_single", "student_vs_ensemble", "student_span"}
    text = (tmp_path / "report.txt").read_text()
    assert "student_best_f1 = " in text and "seconds = " in text
    assert (tmp_path / "ensemble.txt").read_text().count("member = ") == 2
