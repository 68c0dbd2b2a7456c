"""End-to-end CLI tests: command wiring, exit codes, run-directory outputs,
and byte-level determinism of generated artifacts."""

import json
import os

import numpy as np
import pytest

from filmtts import cli, runconfig

DESK_TINY = [
    "--set", "synthetic.n_speakers=3",
    "--set", "synthetic.n_styles=2",
    "--set", "synthetic.utterances_per_pair=3",
    "--set", "synthetic.min_phonemes=3",
    "--set", "synthetic.max_phonemes=4",
    "--set", "synthetic.base_duration=3.0",
    "--set", "synthetic.n_mels=16",
    "--set", "model.hidden=16",
    "--set", "model.encoder_blocks=1",
    "--set", "model.decoder_blocks=1",
    "--set", "model.heads=2",
    "--set", "model.n_mels=16",
    "--set", "model.prosody_conv_channels=16",
    "--set", "model.prosody_blocks=1",
    "--set", "train.batch_size=3",
    "--set", "train.total_steps=8",
    "--set", "train.warmup_steps=50",
    "--set", "train.lambda_a_ramp_steps=50",
    "--set", "run.split_ratio=0.7",
]


def _dir_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    rc = cli.main(["gen-corpus", "--out", str(d)] + DESK_TINY)
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_dir):
    d = tmp_path_factory.mktemp("run")
    rc = cli.main(["train", "--corpus", str(corpus_dir), "--out", str(d)] + DESK_TINY)
    assert rc == 0
    return d


class TestGenCorpus:
    def test_outputs_exist(self, corpus_dir):
        assert (corpus_dir / "manifest.json").exists()
        assert (corpus_dir / "config.ini").exists()
        manifest = json.loads((corpus_dir / "manifest.json").read_text())
        assert manifest["records"]
        assert (corpus_dir / manifest["records"][0]["file"]).exists()

    def test_byte_identical_reruns(self, tmp_path):
        d1, d2 = tmp_path / "c1", tmp_path / "c2"
        assert cli.main(["gen-corpus", "--out", str(d1)] + DESK_TINY) == 0
        assert cli.main(["gen-corpus", "--out", str(d2)] + DESK_TINY) == 0
        assert _dir_bytes(d1) == _dir_bytes(d2)


class TestTrain:
    def test_outputs(self, run_dir):
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "checkpoint.dftx").exists()
        assert (run_dir / "config.ini").exists()
        header = (run_dir / "metrics.csv").read_text().splitlines()[0]
        assert header.split(",") == ["step", "mel_mse", "mel_mae", "dur_mse", "energy_mse",
                                     "pitch_mse", "l_e", "l_f", "l_a", "l_r", "total",
                                     "lr", "lambda_a"]

    def test_resolved_config_reproduces_run(self, tmp_path, corpus_dir, run_dir):
        d2 = tmp_path / "rerun"
        rc = cli.main(["train", "--corpus", str(corpus_dir), "--out", str(d2),
                       "--config", str(run_dir / "config.ini")])
        assert rc == 0
        assert (d2 / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
        assert (d2 / "checkpoint.dftx").read_bytes() == (run_dir / "checkpoint.dftx").read_bytes()


class TestSynthesisCommands:
    def test_synth(self, tmp_path, corpus_dir, run_dir):
        manifest = json.loads((corpus_dir / "manifest.json").read_text())
        rec_id = manifest["records"][0]["utterance_id"]
        out = tmp_path / "synth"
        rc = cli.main(["synth", "--checkpoint", str(run_dir / "checkpoint.dftx"),
                       "--corpus", str(corpus_dir), "--record", rec_id,
                       "--out", str(out)] + DESK_TINY)
        assert rc == 0
        mel = np.load(out / f"{rec_id}.npy")
        assert mel.ndim == 2 and mel.shape[1] == 16

    def test_transfer_and_anchor(self, tmp_path, corpus_dir, run_dir):
        manifest = json.loads((corpus_dir / "manifest.json").read_text())
        ids = [e["utterance_id"] for e in manifest["records"]]
        out = tmp_path / "xfer"
        rc = cli.main(["transfer", "--checkpoint", str(run_dir / "checkpoint.dftx"),
                       "--corpus", str(corpus_dir), "--reference", ids[0],
                       "--text", ids[4], "--target-speaker", "1",
                       "--out", str(out)] + DESK_TINY)
        assert rc == 0
        files = list(out.glob("*.npy"))
        assert len(files) == 1

        out2 = tmp_path / "anchor"
        rc = cli.main(["anchor", "--checkpoint", str(run_dir / "checkpoint.dftx"),
                       "--corpus", str(corpus_dir), "--record", ids[0], "--seed", "3",
                       "--out", str(out2)] + DESK_TINY)
        assert rc == 0
        anchor_mel = np.load(next(iter(out2.glob("*.npy"))))
        from filmtts import corpus as corpus_mod
        rec = corpus_mod.load_record(corpus_dir / manifest["records"][0]["file"])
        assert anchor_mel.shape[0] == rec.durations.sum()

    def test_transfer_bad_speaker_exit_2(self, tmp_path, corpus_dir, run_dir):
        manifest = json.loads((corpus_dir / "manifest.json").read_text())
        ids = [e["utterance_id"] for e in manifest["records"]]
        rc = cli.main(["transfer", "--checkpoint", str(run_dir / "checkpoint.dftx"),
                       "--corpus", str(corpus_dir), "--reference", ids[0],
                       "--text", ids[1], "--target-speaker", "99",
                       "--out", str(tmp_path / "x")] + DESK_TINY)
        assert rc == 2


class TestExitCodes:
    def test_usage_error_is_one(self, capsys):
        rc = cli.main(["train"])  # missing required args
        assert rc == 1

    def test_missing_corpus_is_two(self, tmp_path):
        rc = cli.main(["train", "--corpus", str(tmp_path / "nope"), "--out",
                       str(tmp_path / "r")] + DESK_TINY)
        assert rc == 2

    def test_unknown_config_key_is_two(self, tmp_path):
        rc = cli.main(["gen-corpus", "--out", str(tmp_path / "c"),
                       "--set", "model.bogus=3"])
        assert rc == 2

    def test_bad_checkpoint_is_two(self, tmp_path, corpus_dir):
        bad = tmp_path / "bad.dftx"
        bad.write_bytes(b"NOPExxxxxxxxxxxxxxxx")
        rc = cli.main(["synth", "--checkpoint", str(bad), "--corpus", str(corpus_dir),
                       "--record", "syn_00000", "--out", str(tmp_path / "o")])
        assert rc == 2


class TestConfig:
    def test_profile_round_trip(self, tmp_path):
        cfg = runconfig.desk_profile()
        path = tmp_path / "c.ini"
        runconfig.save_config(path, cfg)
        again = runconfig.load_config(path, runconfig.desk_profile())
        assert runconfig.to_ini(again) == runconfig.to_ini(cfg)

    def test_paper_profile_matches_published_settings(self):
        cfg = runconfig.paper_profile()
        assert cfg.model.hidden == 128
        assert cfg.model.encoder_blocks == 4
        assert cfg.model.heads == 8
        assert cfg.model.prosody_conv_channels == 1024
        assert cfg.train.batch_size == 48
        assert cfg.train.lambda_f == 1e-3
        assert cfg.train.lambda_r == 1e-6
        assert cfg.train.lambda_a_max == 1e-2
        assert cfg.train.warmup_steps == 10000

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ValueError, match="unknown section"):
            runconfig.load_config(path)

    def test_override_validation(self):
        cfg = runconfig.desk_profile()
        with pytest.raises(ValueError, match="unknown key"):
            runconfig.apply_kv(cfg, "model.not_a_field", "1")
        with pytest.raises(ValueError):
            runconfig.apply_kv(cfg, "model.hidden", "63")  # not divisible by heads

    def test_env_run_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FILMTTS_RUNS", str(tmp_path))
        rc = cli.main(["gen-corpus", "--out", "under_root"] + DESK_TINY)
        assert rc == 0
        assert (tmp_path / "under_root" / "manifest.json").exists()


class TestEval():
    def test_eval_pcc_runs_and_reports(self, tmp_path, corpus_dir, run_dir):
        out = tmp_path / "pcc"
        rc = cli.main(["eval-pcc", "--checkpoint", str(run_dir / "checkpoint.dftx"),
                       "--corpus", str(corpus_dir), "--out", str(out),
                       "--set", "run.max_eval_tasks=4"] + DESK_TINY)
        assert rc == 0
        report = json.loads((out / "pcc_report.json").read_text())
        assert "mean_r" in report and "tasks" in report and "ci95" in report

    def test_eval_json_deterministic(self, tmp_path, corpus_dir, run_dir):
        outs = []
        for name in ("p1", "p2"):
            out = tmp_path / name
            rc = cli.main(["eval-pcc", "--checkpoint", str(run_dir / "checkpoint.dftx"),
                           "--corpus", str(corpus_dir), "--out", str(out),
                           "--set", "run.max_eval_tasks=4"] + DESK_TINY)
            assert rc == 0
            outs.append((out / "pcc_report.json").read_bytes())
        assert outs[0] == outs[1]
