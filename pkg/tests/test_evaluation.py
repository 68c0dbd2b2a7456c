"""Evaluation tests: Pearson correlation, contour alignment, low-anchor
construction, transfer-task building, and the speaker-accuracy protocol."""

import json

import numpy as np
import pytest

from filmtts import corpus, evaluation as E
from filmtts.dsp import PitchContour


class TestPearson:
    def test_identity(self):
        x = np.array([1.0, 2.0, 4.0])
        assert E.pearson(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_negation(self):
        x = np.array([1.0, 2.0, 4.0])
        assert E.pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_reference_value(self):
        r = E.pearson([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
        assert r == pytest.approx(0.9820, abs=1e-4)

    def test_constant_input_is_error(self):
        with pytest.raises(ValueError, match="constant"):
            E.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_too_short(self):
        with pytest.raises(ValueError):
            E.pearson([1.0], [2.0])

    def test_scale_shift_invariance_and_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            x = rng.normal(size=20)
            y = rng.normal(size=20)
            r = E.pearson(x, y)
            assert E.pearson(3.5 * x + 2.0, y) == pytest.approx(r, abs=1e-10)
            assert E.pearson(y, x) == pytest.approx(r, abs=1e-12)
            assert E.pearson(-x, y) == pytest.approx(-r, abs=1e-12)


class TestAlignContours:
    def test_identical_fully_voiced(self):
        c = PitchContour(np.linspace(5.0, 6.0, 10), np.ones(10, bool))
        a, b = E.align_contours(c, c)
        np.testing.assert_array_equal(a, b)

    def test_unvoiced_frames_discarded(self):
        vals = np.array([5.0, np.nan, 5.5, np.nan, 6.0])
        voiced = np.array([1, 0, 1, 0, 1], bool)
        full = PitchContour(np.array([5.0, 5.5, 6.0]), np.ones(3, bool))
        gappy = PitchContour(vals, voiced)
        a1, b1 = E.align_contours(full, gappy)
        np.testing.assert_allclose(a1, b1, atol=1e-12)

    def test_insertion_invariance(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(5.5, 0.3, size=12)
        base = PitchContour(vals, np.ones(12, bool))
        padded_vals = np.insert(vals, [3, 7], np.nan)
        padded_voiced = np.insert(np.ones(12, bool), [3, 7], False)
        padded = PitchContour(padded_vals, padded_voiced)
        ref = PitchContour(rng.normal(5.5, 0.3, size=9), np.ones(9, bool))
        a1, b1 = E.align_contours(ref, base)
        a2, b2 = E.align_contours(ref, padded)
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)

    def test_resample_to_longer_keeps_ramp(self):
        short = PitchContour(np.arange(10.0), np.ones(10, bool))
        long = PitchContour(np.arange(20.0), np.ones(20, bool))
        a, b = E.align_contours(short, long)
        assert a.size == b.size == 20
        diffs = np.diff(a)
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-6)

    def test_too_few_voiced(self):
        bad = PitchContour(np.array([5.0, np.nan]), np.array([1, 0], bool))
        good = PitchContour(np.linspace(5, 6, 5), np.ones(5, bool))
        with pytest.raises(ValueError):
            E.align_contours(bad, good)


class TestF0Pcc:
    def test_self_correlation_is_one(self):
        c = PitchContour(np.sin(np.linspace(0, 3, 40)) + 5.0, np.ones(40, bool))
        assert E.f0_pcc(c, c) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_contour(self):
        vals = np.sin(np.linspace(0, 3, 40)) + 5.0
        c = PitchContour(vals, np.ones(40, bool))
        inv = PitchContour(10.0 - vals, np.ones(40, bool))
        assert E.f0_pcc(c, inv) == pytest.approx(-1.0, abs=1e-9)


@pytest.fixture(scope="module")
def mini_corpus():
    spec = corpus.SyntheticSpec(n_speakers=3, n_styles=3, utterances_per_pair=6, seed=21)
    records, table, stats = corpus.generate_synthetic_corpus(spec)
    return spec, records, table, stats


class TestLowAnchor:
    def test_duration_multiset_and_total_preserved(self, mini_corpus):
        _, records, _, _ = mini_corpus
        r = records[0]
        ov = E.make_low_anchor(r, seed=5)
        assert sorted(ov["durations"].tolist()) == sorted(r.durations.tolist())
        assert ov["durations"].sum() == r.durations.sum()

    def test_flat_pitch_zero_variance(self, mini_corpus):
        _, records, _, _ = mini_corpus
        ov = E.make_low_anchor(records[1], seed=5)
        assert np.var(ov["pitch"]) == 0.0

    def test_same_seed_identical(self, mini_corpus):
        _, records, _, _ = mini_corpus
        a = E.make_low_anchor(records[2], seed=9)
        b = E.make_low_anchor(records[2], seed=9)
        np.testing.assert_array_equal(a["durations"], b["durations"])
        np.testing.assert_array_equal(a["pitch"], b["pitch"])


class TestTransferTasks:
    def test_constraints_hold(self, mini_corpus):
        _, records, table, _ = mini_corpus
        by_id = {r.utterance_id: r for r in records}
        tasks = E.build_transfer_tasks(records[:10], records, len(table), seed=3)
        for t in tasks:
            ref = by_id[t.reference_id]
            assert t.target_speaker != ref.speaker_id
            assert t.target_text_id != t.reference_id
            assert not np.array_equal(t.phoneme_ids, ref.phoneme_ids)

    def test_deterministic(self, mini_corpus):
        _, records, table, _ = mini_corpus
        a = E.build_transfer_tasks(records[:8], records, len(table), seed=4)
        b = E.build_transfer_tasks(records[:8], records, len(table), seed=4)
        assert [(t.reference_id, t.target_text_id, t.target_speaker) for t in a] == \
               [(t.reference_id, t.target_text_id, t.target_speaker) for t in b]


class TestSpeakerClassifierProtocol:
    def test_ground_truth_convergence_and_accuracy(self, mini_corpus):
        _, records, table, _ = mini_corpus
        train, test = corpus.split_corpus(records, 0.8, 0)
        clf, acc = E.train_eval_speaker_classifier(train, test, len(table), 80, seed=0,
                                                   max_steps=1500)
        assert acc >= 0.99
        # pipeline identity: feeding ground truth through the same accuracy
        # path reproduces the classifier's ground-truth accuracy
        assert clf.accuracy(test) == acc

    def test_failure_to_converge_is_error(self, mini_corpus):
        _, records, table, _ = mini_corpus
        train, test = corpus.split_corpus(records, 0.8, 0)
        with pytest.raises(ValueError, match="accuracy"):
            E.train_eval_speaker_classifier(train, test, len(table), 80, seed=0, max_steps=1)

    def test_single_speaker_trivially_perfect(self):
        spec = corpus.SyntheticSpec(n_speakers=1, n_styles=1, utterances_per_pair=6, seed=2)
        records, table, stats = corpus.generate_synthetic_corpus(spec)
        train, test = corpus.split_corpus(records, 0.7, 0)
        clf, acc = E.train_eval_speaker_classifier(train, test, 1, 80, seed=0, max_steps=50)
        assert acc == 1.0

    def test_spectrogram_only_mode_ignores_contours(self, mini_corpus):
        _, records, _, _ = mini_corpus
        clf = E.EvalSpeakerClassifier(80, 3, seed=1)
        clf.eval()
        import filmtts.autodiff as ad
        from filmtts.autodiff import Tensor
        mel = records[0].mel.astype(np.float32)
        rng = np.random.default_rng(3)
        with ad.no_grad():
            a = clf.encoder(Tensor(mel), Tensor(rng.normal(size=mel.shape[0]).astype(np.float32)),
                            Tensor(rng.normal(size=mel.shape[0]).astype(np.float32)),
                            mode="spectrogram_only")
            b = clf.encoder(Tensor(mel), Tensor(rng.normal(size=mel.shape[0]).astype(np.float32)),
                            Tensor(rng.normal(size=mel.shape[0]).astype(np.float32)),
                            mode="spectrogram_only")
        np.testing.assert_array_equal(a.data, b.data)


class TestReports:
    def test_report_round_trip(self, tmp_path):
        payload = {"accuracy": 0.5, "tasks": [{"hit": True}], "ci95": [0.1, 0.9]}
        path = tmp_path / "report.json"
        E.write_report(path, payload)
        assert json.loads(path.read_text()) == payload

    def test_ci_and_aggregates_shape(self, mini_corpus):
        vals = np.array([0.2, 0.4, 0.6, 0.8])
        lo, hi = E._ci95_mean(vals)
        assert lo < vals.mean() < hi
