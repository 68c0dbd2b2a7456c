"""Corpus tests: deterministic synthesis with recoverable factors, record
serialization, stratified splitting, and real-data ingestion."""

import os

import numpy as np
import pytest

from filmtts import corpus, dsp, sections


@pytest.fixture(scope="module")
def small_corpus():
    spec = corpus.SyntheticSpec(n_speakers=3, n_styles=3, utterances_per_pair=4, seed=11)
    records, table, stats = corpus.generate_synthetic_corpus(spec)
    return spec, records, table, stats


class TestSyntheticGeneration:
    def test_deterministic(self, small_corpus):
        spec, records, _, _ = small_corpus
        again, _, _ = corpus.generate_synthetic_corpus(
            corpus.SyntheticSpec(n_speakers=3, n_styles=3, utterances_per_pair=4, seed=11))
        assert len(again) == len(records)
        for a, b in zip(records, again):
            assert a.utterance_id == b.utterance_id
            np.testing.assert_array_equal(a.mel, b.mel)
            np.testing.assert_array_equal(a.phoneme_ids, b.phoneme_ids)
            np.testing.assert_array_equal(a.frame_pitch, b.frame_pitch)

    def test_durations_sum_to_frames(self, small_corpus):
        _, records, _, _ = small_corpus
        for r in records:
            assert int(r.durations.sum()) == r.n_frames

    def test_neutral_only_speaker_exists(self, small_corpus):
        _, records, table, _ = small_corpus
        assert not all(table.expressive)
        neutral_spk = table.expressive.index(False)
        styles = {r.style_id for r in records if r.speaker_id == neutral_spk}
        assert styles == {0}

    def test_noise_zero_same_sequence_identical(self):
        spec = corpus.SyntheticSpec(n_speakers=1, n_styles=1, utterances_per_pair=6,
                                    noise_amplitude=0.0, min_phonemes=3, max_phonemes=3, seed=2)
        records, _, _ = corpus.generate_synthetic_corpus(spec)
        by_seq = {}
        for r in records:
            by_seq.setdefault(tuple(r.phoneme_ids), []).append(r)
        for group in by_seq.values():
            for other in group[1:]:
                np.testing.assert_array_equal(group[0].mel, other.mel)

    def test_rising_style_slope(self, small_corpus):
        spec, records, _, _ = small_corpus
        rising = [r for r in records if r.style_id == 1]
        assert rising
        for r in rising:
            t = (np.arange(r.n_frames) + 0.5) * spec.hop_seconds
            v = r.voiced
            design = np.vstack([t[v], np.ones(int(v.sum()))]).T
            slope = np.linalg.lstsq(design, r.frame_pitch[v].astype(np.float64), rcond=None)[0][0]
            assert abs(slope - 0.5) < 0.05, slope

    def test_standardized_targets_have_unit_scale(self, small_corpus):
        _, records, _, _ = small_corpus
        per_spk = {}
        for r in records:
            per_spk.setdefault(r.speaker_id, []).append(r.phoneme_pitch)
        for vals in per_spk.values():
            z = np.concatenate(vals)
            assert abs(z.mean()) < 1e-5
            assert abs(z.std() - 1.0) < 1e-5

    def test_empty_style_row_rejected(self):
        with pytest.raises(ValueError, match="no available style"):
            corpus.SyntheticSpec(n_speakers=2, n_styles=2,
                                 style_availability=[[True, True], [False, False]])

    def test_pitch_recovery_from_ground_truth_mel(self, small_corpus):
        _, records, _, _ = small_corpus
        r = records[0]
        rec = corpus.recover_pitch_from_mel(r.mel)
        agree = rec.voiced == r.voiced
        assert agree.mean() > 0.95
        both = rec.voiced & r.voiced
        assert np.abs(rec.log_f0[both] - r.frame_pitch[both]).max() < 0.05

    def test_style_recoverable_by_least_squares_at_zero_noise(self):
        spec = corpus.SyntheticSpec(n_speakers=2, n_styles=3, utterances_per_pair=8,
                                    noise_amplitude=0.0, seed=5,
                                    style_availability=[[True] * 3, [True] * 3])
        records, _, _ = corpus.generate_synthetic_corpus(spec)

        def features(r):
            # resample standardized phoneme pitch and normalized durations
            grid = np.linspace(0, 1, 8)
            src = np.linspace(0, 1, r.n_phonemes)
            f1 = np.interp(grid, src, r.phoneme_pitch)
            f2 = np.interp(grid, src, r.durations / r.durations.mean())
            return np.concatenate([f1, f2, [1.0]])

        x = np.stack([features(r) for r in records])
        y = np.zeros((len(records), 3))
        y[np.arange(len(records)), [r.style_id for r in records]] = 1.0
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        pred = np.argmax(x @ w, axis=1)
        truth = np.array([r.style_id for r in records])
        assert (pred == truth).mean() == 1.0


class TestRecordIO:
    def test_round_trip_bitwise(self, small_corpus, tmp_path):
        _, records, _, _ = small_corpus
        r = records[3]
        path = tmp_path / "r.dftx"
        corpus.save_record(path, r)
        back = corpus.load_record(path)
        np.testing.assert_array_equal(back.mel, r.mel)
        np.testing.assert_array_equal(back.phoneme_ids, r.phoneme_ids)
        np.testing.assert_array_equal(back.durations, r.durations)
        np.testing.assert_array_equal(back.frame_pitch, r.frame_pitch)
        np.testing.assert_array_equal(back.voiced, r.voiced)
        assert back.utterance_id == r.utterance_id
        assert back.style_id == r.style_id

    def test_corrupted_magic_named(self, small_corpus, tmp_path):
        _, records, _, _ = small_corpus
        path = tmp_path / "bad.dftx"
        corpus.save_record(path, records[0])
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(sections.ContainerError, match="magic"):
            corpus.load_record(path)

    def test_truncation_named_no_partial_record(self, small_corpus, tmp_path):
        _, records, _, _ = small_corpus
        path = tmp_path / "t.dftx"
        corpus.save_record(path, records[0])
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 7])
        with pytest.raises(sections.ContainerError, match="truncated"):
            corpus.load_record(path)

    def test_version_mismatch(self, small_corpus, tmp_path):
        _, records, _, _ = small_corpus
        path = tmp_path / "v.dftx"
        corpus.save_record(path, records[0])
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(sections.ContainerError, match="version"):
            corpus.load_record(path)

    def test_invariant_violation_on_load(self, small_corpus, tmp_path):
        _, records, _, _ = small_corpus
        r = records[0]
        tampered = corpus.UtteranceRecord(
            r.utterance_id, r.speaker_id, r.phoneme_ids,
            r.durations, r.phoneme_pitch, r.phoneme_energy,
            r.mel, r.frame_pitch, r.voiced, r.frame_energy, r.style_id)
        tampered.durations = tampered.durations.copy()
        tampered.durations[0] += 1   # now sums past the mel length
        path = tmp_path / "inv.dftx"
        corpus.save_record(path, tampered)
        with pytest.raises(ValueError, match="durations sum"):
            corpus.load_record(path)

    def test_corpus_round_trip_with_manifest(self, small_corpus, tmp_path):
        spec, records, table, stats = small_corpus
        d = tmp_path / "c"
        corpus.save_corpus(d, records, table, stats, spec)
        back_recs, back_table, back_stats, back_spec = corpus.load_corpus(d)
        assert len(back_recs) == len(records)
        assert back_table.names == table.names
        assert back_spec.seed == spec.seed
        assert back_stats.pitch[0].mean == stats.pitch[0].mean


class TestSplit:
    def test_ratio_eight_two(self, small_corpus):
        _, records, _, _ = small_corpus
        spec = corpus.SyntheticSpec(n_speakers=2, n_styles=1, utterances_per_pair=10, seed=3)
        recs, _, _ = corpus.generate_synthetic_corpus(spec)
        train, test = corpus.split_corpus(recs, 0.8, 0)
        for spk in (0, 1):
            assert sum(r.speaker_id == spk for r in train) == 8
            assert sum(r.speaker_id == spk for r in test) == 2

    def test_union_and_disjointness(self, small_corpus):
        _, records, _, _ = small_corpus
        train, test = corpus.split_corpus(records, 0.7, 4)
        ids = {r.utterance_id for r in records}
        tids = {r.utterance_id for r in train}
        eids = {r.utterance_id for r in test}
        assert tids | eids == ids
        assert not (tids & eids)

    def test_same_seed_identical(self, small_corpus):
        _, records, _, _ = small_corpus
        a = corpus.split_corpus(records, 0.75, 9)
        b = corpus.split_corpus(records, 0.75, 9)
        assert [r.utterance_id for r in a[0]] == [r.utterance_id for r in b[0]]

    def test_proportions_within_one(self, small_corpus):
        _, records, _, _ = small_corpus
        train, _ = corpus.split_corpus(records, 0.8, 1)
        by_spk_total = {}
        by_spk_train = {}
        for r in records:
            by_spk_total[r.speaker_id] = by_spk_total.get(r.speaker_id, 0) + 1
        for r in train:
            by_spk_train[r.speaker_id] = by_spk_train.get(r.speaker_id, 0) + 1
        for spk, total in by_spk_total.items():
            assert abs(by_spk_train[spk] - 0.8 * total) <= 1.0

    def test_single_utterance_speaker_rejected(self, small_corpus):
        _, records, _, _ = small_corpus
        only = [r for r in records if r.speaker_id == 0][:1] + \
               [r for r in records if r.speaker_id == 1]
        with pytest.raises(ValueError, match="need >= 2"):
            corpus.split_corpus(only, 0.8, 0)

    def test_bad_ratio(self, small_corpus):
        _, records, _, _ = small_corpus
        with pytest.raises(ValueError):
            corpus.split_corpus(records, 1.0, 0)


def _tone_wav(tmp_path, name="u.wav", seconds=1.0, freq=220.0):
    t = np.arange(int(22050 * seconds)) / 22050
    w = (0.6 * np.sin(2 * np.pi * freq * t)).astype(np.float32)
    path = tmp_path / name
    dsp.write_wav(path, w, 22050)
    return path, w.size


class TestIngestReal:
    def test_single_phoneme_covers_everything(self, tmp_path):
        wav, n = _tone_wav(tmp_path)
        tsv = tmp_path / "a.tsv"
        tsv.write_text(f"AH\t0.0\t{n / 22050:.6f}\n", encoding="utf-8")
        rec = corpus.ingest_real(wav, tsv, speaker_id=0)
        assert rec.n_phonemes == 1
        assert rec.durations[0] == rec.n_frames

    def test_two_equal_spans(self, tmp_path):
        wav, n = _tone_wav(tmp_path, "b.wav")
        dur = n / 22050
        tsv = tmp_path / "b.tsv"
        tsv.write_text(f"A\t0.0\t{dur/2:.6f}\nB\t{dur/2:.6f}\t{dur:.6f}\n", encoding="utf-8")
        rec = corpus.ingest_real(wav, tsv, speaker_id=0)
        assert abs(int(rec.durations[0]) - int(rec.durations[1])) <= 1
        assert rec.durations.sum() == rec.n_frames

    def test_rounding_reconciled_by_largest_remainder(self, tmp_path):
        wav, n = _tone_wav(tmp_path, "c.wav")
        dur = n / 22050
        # three spans whose naive frame rounding overshoots
        edges = [0.0, dur * 0.334, dur * 0.667, dur]
        tsv = tmp_path / "c.tsv"
        tsv.write_text("".join(f"P{i}\t{edges[i]:.6f}\t{edges[i+1]:.6f}\n" for i in range(3)),
                       encoding="utf-8")
        rec = corpus.ingest_real(wav, tsv, speaker_id=0)
        assert rec.durations.sum() == rec.n_frames
        assert (rec.durations >= 1).all()

    def test_alignment_beyond_audio_rejected(self, tmp_path):
        wav, n = _tone_wav(tmp_path, "d.wav")
        tsv = tmp_path / "d.tsv"
        tsv.write_text(f"A\t0.0\t{n / 22050 + 0.2:.6f}\n", encoding="utf-8")
        with pytest.raises(ValueError, match="mismatch"):
            corpus.ingest_real(wav, tsv, speaker_id=0)

    def test_unknown_label_rejected(self, tmp_path):
        wav, n = _tone_wav(tmp_path, "e.wav")
        tsv = tmp_path / "e.tsv"
        tsv.write_text(f"ZZ\t0.0\t{n / 22050:.6f}\n", encoding="utf-8")
        with pytest.raises(ValueError, match="not in label map"):
            corpus.ingest_real(wav, tsv, speaker_id=0, label_map={"AH": 0})
