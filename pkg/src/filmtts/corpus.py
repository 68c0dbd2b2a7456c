"""Synthetic corpus with known disentangled speaker/style factors, record
serialization, stratified splitting, and real-data ingestion.

Synthetic mel frames compose four separable cues in log-mel space:
a per-phoneme spectral template (low bins), a pitch-position bump
(middle bins, recoverable by template matching), a style timbre band
(top bins), and a per-speaker spectral tilt across all bins. Styles also
shape the pitch contour, energy envelope, and duration pattern; speakers
shift base pitch, energy gain, and speaking rate. That gives evaluation
ground truth for both prosody transfer and speaker identity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dsp, sections
from .dsp import DspConfig, PhonemeAlignment, PitchContour, SpeakerStats

PITCH_LO = np.log(60.0)
PITCH_HI = np.log(500.0)


def mel_regions(n_mels):
    """(template, pitch, style) bin ranges; half the bins carry phoneme
    identity, the next three-eighths the pitch bump, the rest the style band.
    At 80 bins this is 0-40 / 40-70 / 70-80."""
    if n_mels < 8:
        raise ValueError("synthetic mels need at least 8 bins")
    a = n_mels // 2
    b = (n_mels * 7) // 8
    return (0, a), (a, b), (b, n_mels)


@dataclass
class SpeakerTable:
    names: list                     # index == dense speaker id
    expressive: list                # bool per speaker

    def __post_init__(self):
        if len(self.names) != len(self.expressive):
            raise ValueError("names and expressive flags must align")

    def __len__(self):
        return len(self.names)

    def to_json(self):
        return {"names": list(self.names), "expressive": [bool(b) for b in self.expressive]}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["names"], obj["expressive"])


@dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: int
    phoneme_ids: np.ndarray         # [N]
    durations: np.ndarray           # [N] frames, >= 1
    phoneme_pitch: np.ndarray       # [N] standardized
    phoneme_energy: np.ndarray      # [N] standardized
    mel: np.ndarray                 # [T, n_mels] log
    frame_pitch: np.ndarray         # [T] ln Hz, NaN on unvoiced
    voiced: np.ndarray              # [T] bool
    frame_energy: np.ndarray        # [T]
    style_id: int = -1              # synthetic only; hidden from the model

    def __post_init__(self):
        self.phoneme_ids = np.asarray(self.phoneme_ids, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.phoneme_pitch = np.asarray(self.phoneme_pitch, dtype=np.float32)
        self.phoneme_energy = np.asarray(self.phoneme_energy, dtype=np.float32)
        self.mel = np.asarray(self.mel, dtype=np.float32)
        self.frame_pitch = np.asarray(self.frame_pitch, dtype=np.float32)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        self.frame_energy = np.asarray(self.frame_energy, dtype=np.float32)
        self.validate()

    def validate(self):
        n = len(self.phoneme_ids)
        if n < 1:
            raise ValueError(f"{self.utterance_id}: record must contain at least one phoneme")
        for name in ("durations", "phoneme_pitch", "phoneme_energy"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{self.utterance_id}: {name} length != phoneme count")
        if np.any(self.durations < 1):
            raise ValueError(f"{self.utterance_id}: durations must be >= 1 frame")
        t = int(self.durations.sum())
        if self.mel.ndim != 2 or self.mel.shape[0] != t:
            raise ValueError(f"{self.utterance_id}: mel has {self.mel.shape[0]} frames, durations sum to {t}")
        for name in ("frame_pitch", "voiced", "frame_energy"):
            if len(getattr(self, name)) != t:
                raise ValueError(f"{self.utterance_id}: {name} length != total frames {t}")
        if not (np.all(np.isfinite(self.phoneme_pitch)) and np.all(np.isfinite(self.phoneme_energy))):
            raise ValueError(f"{self.utterance_id}: standardized targets must be finite")

    @property
    def n_frames(self):
        return self.mel.shape[0]

    @property
    def n_phonemes(self):
        return len(self.phoneme_ids)

    @property
    def alignment(self):
        ends = np.cumsum(self.durations)
        starts = ends - self.durations
        return PhonemeAlignment(self.phoneme_ids, np.stack([starts, ends], axis=1))

    def pitch_contour(self):
        return PitchContour(self.frame_pitch.astype(np.float64), self.voiced)


@dataclass
class SyntheticSpec:
    n_speakers: int = 3
    n_styles: int = 3
    utterances_per_pair: int = 20
    phoneme_inventory: int = 12
    min_phonemes: int = 6
    max_phonemes: int = 10
    base_duration: float = 5.0
    noise_amplitude: float = 0.02
    pitch_jitter: float = 0.015   # ln-Hz; keeps every speaker's pitch stats non-degenerate
    n_mels: int = 80
    hop_seconds: float = 256.0 / 22050.0
    seed: int = 0
    # Optional explicit factor tables; derived deterministically when None.
    speaker_pitch_offsets: list = None
    speaker_tilts: list = None
    speaker_energy_gains: list = None
    speaker_rate_scales: list = None
    style_availability: list = None   # [S][Y] booleans

    def __post_init__(self):
        if self.n_speakers < 1 or self.n_styles < 1:
            raise ValueError("need at least one speaker and one style")
        if self.phoneme_inventory < 2:
            raise ValueError("phoneme inventory too small")
        self.availability()  # validates explicit tables eagerly

    def _spread(self, explicit, lo, hi):
        if explicit is not None:
            if len(explicit) != self.n_speakers:
                raise ValueError(f"expected {self.n_speakers} per-speaker values, got {len(explicit)}")
            return [float(v) for v in explicit]
        return [float(v) for v in np.linspace(lo, hi, self.n_speakers)]

    def pitch_offsets(self):
        return self._spread(self.speaker_pitch_offsets, np.log(120.0), np.log(280.0))

    def tilts(self):
        return self._spread(self.speaker_tilts, -1.2, 1.2)

    def energy_gains(self):
        return self._spread(self.speaker_energy_gains, -0.3, 0.3)

    def rate_scales(self):
        return self._spread(self.speaker_rate_scales, 0.85, 1.2)

    def availability(self):
        """Which styles each speaker records; derived tables keep the last
        third of speakers neutral-only (style 0), mirroring a data regime
        where some voices have no expressive material."""
        s, y = self.n_speakers, self.n_styles
        if self.style_availability is None:
            n_neutral = max(1, s // 3) if s >= 3 else 0
            return [[True] + [False] * (y - 1) if spk >= s - n_neutral else [True] * y
                    for spk in range(s)]
        if len(self.style_availability) != s:
            raise ValueError(f"style availability needs {s} rows")
        for spk, row in enumerate(self.style_availability):
            if len(row) != y:
                raise ValueError(f"style availability row {spk} has {len(row)} entries, expected {y}")
            if not any(row):
                raise ValueError(f"speaker {spk} has no available style")
        return [list(map(bool, row)) for row in self.style_availability]

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


_STYLE_SHAPES = ("flat", "rising", "falling", "arch", "dip", "wiggle")


def style_contour(style, times, duration_s):
    """Style pitch-contour offset in ln Hz at absolute times (seconds)."""
    shape = _STYLE_SHAPES[style % len(_STYLE_SHAPES)]
    mag = 0.35 + 0.1 * (style // len(_STYLE_SHAPES))
    if shape == "flat":
        return np.zeros_like(times)
    if shape == "rising":
        return 0.5 * (times - duration_s / 2.0)
    if shape == "falling":
        return -0.5 * (times - duration_s / 2.0)
    if shape == "arch":
        return mag * np.sin(np.pi * times / duration_s)
    if shape == "dip":
        return -mag * np.sin(np.pi * times / duration_s)
    return mag * np.sin(2.0 * np.pi * 2.5 * times / duration_s)


def _style_energy_envelope(style, times, duration_s):
    if style == 0:
        return np.zeros_like(times)
    phase = 0.7 * style
    return 0.25 * np.sin(np.pi * times / duration_s + phase) + 0.1 * (style % 3)


def _style_duration_pattern(style, n):
    idx = np.arange(n)
    if style == 0:
        return np.ones(n)
    amp = 0.25 + 0.1 * (style % 3)
    period = 2 + (style % 3)
    return 1.0 + amp * np.sin(2.0 * np.pi * idx / period + 0.5 * style)


def phoneme_template(phoneme_id, n_mels):
    """Smooth two-bump spectral shape for the template region."""
    lo, hi = mel_regions(n_mels)[0]
    width = hi - lo
    b = np.arange(width)
    c1 = 3.0 + 1.6180339887 * (phoneme_id * 7 % width)
    c1 = c1 % width
    c2 = (c1 + width / 2.6) % width
    bump = 1.6 * np.exp(-0.5 * ((b - c1) / 2.5) ** 2) + 1.1 * np.exp(-0.5 * ((b - c2) / 3.5) ** 2)
    return bump


def is_voiced_phoneme(phoneme_id):
    """Every fourth phoneme id acts as an unvoiced consonant."""
    return phoneme_id % 4 != 0


def pitch_to_bin(log_f0, n_mels=80):
    lo, hi = mel_regions(n_mels)[1]
    rel = (np.asarray(log_f0) - PITCH_LO) / (PITCH_HI - PITCH_LO)
    return lo + np.clip(rel, 0.0, 1.0) * (hi - lo - 1)


def recover_pitch_from_mel(mel, floor_margin=0.75):
    """Invert the pitch-bump encoding of a (possibly model-generated) mel.

    Returns a PitchContour; a frame is voiced when the pitch region carries
    a clear bump above its own baseline.
    """
    mel = np.asarray(mel, dtype=np.float64)
    lo, hi = mel_regions(mel.shape[1])[1]
    region = mel[:, lo:hi]
    baseline = np.median(region, axis=1, keepdims=True)
    lift = region - baseline
    t = mel.shape[0]
    log_f0 = np.full(t, np.nan)
    voiced = np.zeros(t, dtype=bool)
    width = hi - lo
    for i in range(t):
        row = lift[i]
        peak = row.max()
        if peak < floor_margin:
            continue
        w = np.maximum(row - 0.25 * peak, 0.0)
        centroid = float((w * np.arange(width)).sum() / w.sum())
        rel = centroid / (width - 1)
        log_f0[i] = PITCH_LO + rel * (PITCH_HI - PITCH_LO)
        voiced[i] = True
    return PitchContour(log_f0, voiced)


def _synth_utterance(spec, speaker, style, rec_index, rng, factors):
    n = int(rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
    while True:
        ids = rng.integers(0, spec.phoneme_inventory, n)
        if any(is_voiced_phoneme(i) for i in ids):
            break
    pattern = _style_duration_pattern(style, n)
    rate = factors["rate"][speaker]
    durations = np.maximum(np.round(spec.base_duration * rate * pattern).astype(np.int64), 1)
    t_frames = int(durations.sum())
    dur_s = t_frames * spec.hop_seconds
    times = (np.arange(t_frames) + 0.5) * spec.hop_seconds

    contour = factors["pitch"][speaker] + style_contour(style, times, dur_s)
    if spec.pitch_jitter > 0:
        # whole-ish cycle counts over the utterance stay orthogonal to any
        # linear trend, so style slopes remain recoverable by regression
        f1 = (3.0 + rng.uniform(0, 0.15)) / dur_s
        f2 = (6.0 + rng.uniform(0, 0.15)) / dur_s
        ph1, ph2 = rng.uniform(0, 1, 2)
        contour = contour + spec.pitch_jitter * (
            np.sin(2 * np.pi * (f1 * times + ph1)) + 0.6 * np.sin(2 * np.pi * (f2 * times + ph2))) / 1.6
    contour = np.clip(contour, PITCH_LO + 0.05, PITCH_HI - 0.05)
    ends = np.cumsum(durations)
    starts = ends - durations
    voiced = np.zeros(t_frames, dtype=bool)
    for pid, s, e in zip(ids, starts, ends):
        voiced[s:e] = is_voiced_phoneme(pid)

    gain = factors["energy"][speaker] + _style_energy_envelope(style, times, dur_s)
    tilt = factors["tilt"][speaker] * (np.arange(spec.n_mels) / (spec.n_mels - 1) - 0.5)

    mel = np.full((t_frames, spec.n_mels), -4.0)
    (lo_t, hi_t), (lo_p, hi_p), (lo_s, hi_s) = mel_regions(spec.n_mels)
    for pid, s, e in zip(ids, starts, ends):
        mel[s:e, lo_t:hi_t] += phoneme_template(int(pid), spec.n_mels)
    width_p = hi_p - lo_p
    bins = np.arange(width_p)
    centers = pitch_to_bin(contour, spec.n_mels) - lo_p
    bump = 2.2 * np.exp(-0.5 * ((bins[None, :] - centers[:, None]) / 1.3) ** 2)
    mel[:, lo_p:hi_p] += bump * voiced[:, None]
    width_s = hi_s - lo_s
    sb = np.arange(width_s)
    c = (0.5 + 0.9 * style) % width_s
    mel[:, lo_s:hi_s] += (0.9 + 0.15 * style) * np.exp(-0.5 * ((sb - c) / 1.1) ** 2)
    mel += gain[:, None] + tilt[None, :]
    if spec.noise_amplitude > 0:
        mel += rng.normal(0.0, spec.noise_amplitude, mel.shape)

    frame_pitch = np.where(voiced, contour, np.nan)
    frame_energy = np.linalg.norm(np.exp(mel), axis=1)
    return {
        "utterance_id": f"syn_{rec_index:05d}",
        "speaker_id": speaker,
        "style_id": style,
        "phoneme_ids": ids,
        "durations": durations,
        "mel": mel,
        "frame_pitch": frame_pitch,
        "voiced": voiced,
        "frame_energy": frame_energy,
    }


def generate_synthetic_corpus(spec: SyntheticSpec):
    """Deterministic corpus: same spec and seed give byte-identical records."""
    availability = spec.availability()
    factors = {"pitch": spec.pitch_offsets(), "tilt": spec.tilts(),
               "energy": spec.energy_gains(), "rate": spec.rate_scales()}
    table = SpeakerTable(
        names=[f"spk{idx:02d}" for idx in range(spec.n_speakers)],
        expressive=[any(row[1:]) for row in availability],
    )
    raw = []
    rec_index = 0
    for speaker in range(spec.n_speakers):
        for style in range(spec.n_styles):
            if not availability[speaker][style]:
                continue
            for _ in range(spec.utterances_per_pair):
                rng = np.random.Generator(np.random.Philox(key=np.array([spec.seed, rec_index], dtype=np.uint64)))
                raw.append(_synth_utterance(spec, speaker, style, rec_index, rng, factors))
                rec_index += 1

    per_spk_pitch = {s: [] for s in range(spec.n_speakers)}
    per_spk_energy = {s: [] for s in range(spec.n_speakers)}
    prepared = []
    for item in raw:
        align = PhonemeAlignment(item["phoneme_ids"], np.stack(
            [np.cumsum(item["durations"]) - item["durations"], np.cumsum(item["durations"])], axis=1))
        ph_pitch = dsp.phoneme_average(item["frame_pitch"], align, voiced=item["voiced"])
        ph_energy = dsp.phoneme_average(item["frame_energy"], align)
        per_spk_pitch[item["speaker_id"]].append(ph_pitch)
        per_spk_energy[item["speaker_id"]].append(ph_energy)
        prepared.append((item, ph_pitch, ph_energy))

    stats = SpeakerStats.fit(
        {s: np.concatenate(v) for s, v in per_spk_pitch.items() if v},
        {s: np.concatenate(v) for s, v in per_spk_energy.items() if v},
    )

    records = []
    for item, ph_pitch, ph_energy in prepared:
        spk = item["speaker_id"]
        records.append(UtteranceRecord(
            utterance_id=item["utterance_id"],
            speaker_id=spk,
            phoneme_ids=item["phoneme_ids"],
            durations=item["durations"],
            phoneme_pitch=stats.standardize_pitch(ph_pitch, spk),
            phoneme_energy=stats.standardize_energy(ph_energy, spk),
            mel=item["mel"],
            frame_pitch=item["frame_pitch"],
            voiced=item["voiced"],
            frame_energy=item["frame_energy"],
            style_id=item["style_id"],
        ))
    return records, table, stats


# -- record serialization --------------------------------------------------------


def save_record(path, record: UtteranceRecord):
    meta = {
        "utterance_id": record.utterance_id,
        "speaker_id": int(record.speaker_id),
        "style_id": int(record.style_id),
    }
    secs = [
        ("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
        ("phoneme_ids", sections.encode_array(record.phoneme_ids)),
        ("durations", sections.encode_array(record.durations)),
        ("phoneme_pitch", sections.encode_array(record.phoneme_pitch)),
        ("phoneme_energy", sections.encode_array(record.phoneme_energy)),
        ("mel", sections.encode_array(record.mel)),
        ("frame_pitch", sections.encode_array(record.frame_pitch)),
        ("voiced", sections.encode_array(record.voiced)),
        ("frame_energy", sections.encode_array(record.frame_energy)),
    ]
    sections.write_container(path, secs)


_RECORD_FIELDS = ("phoneme_ids", "durations", "phoneme_pitch", "phoneme_energy",
                  "mel", "frame_pitch", "voiced", "frame_energy")


def load_record(path) -> UtteranceRecord:
    secs = sections.read_container(path)
    if "meta" not in secs:
        raise sections.ContainerError(f"{path}: missing 'meta' section")
    meta = json.loads(secs["meta"].decode("utf-8"))
    arrays = {}
    for name in _RECORD_FIELDS:
        if name not in secs:
            raise sections.ContainerError(f"{path}: missing '{name}' section")
        arrays[name] = sections.decode_array(secs[name], name)
    rec = UtteranceRecord(
        utterance_id=meta["utterance_id"],
        speaker_id=meta["speaker_id"],
        style_id=meta.get("style_id", -1),
        phoneme_ids=arrays["phoneme_ids"].astype(np.int64),
        durations=arrays["durations"].astype(np.int64),
        phoneme_pitch=arrays["phoneme_pitch"],
        phoneme_energy=arrays["phoneme_energy"],
        mel=arrays["mel"],
        frame_pitch=arrays["frame_pitch"],
        voiced=arrays["voiced"].astype(bool),
        frame_energy=arrays["frame_energy"],
    )
    return rec


def save_corpus(directory, records, table: SpeakerTable, stats: SpeakerStats, spec: SyntheticSpec = None):
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        fname = f"rec_{i:05d}.dftx"
        save_record(os.path.join(directory, fname), rec)
        entries.append({
            "file": fname,
            "utterance_id": rec.utterance_id,
            "speaker_id": int(rec.speaker_id),
            "style_id": int(rec.style_id),
        })
    manifest = {
        "version": sections.VERSION,
        "records": entries,
        "speakers": table.to_json(),
        "stats": stats.to_json(),
        "synthetic_spec": spec.to_json() if spec is not None else None,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_corpus(directory):
    mpath = os.path.join(directory, "manifest.json")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    records = [load_record(os.path.join(directory, e["file"])) for e in manifest["records"]]
    table = SpeakerTable.from_json(manifest["speakers"])
    stats = SpeakerStats.from_json(manifest["stats"])
    spec = SyntheticSpec.from_json(manifest["synthetic_spec"]) if manifest.get("synthetic_spec") else None
    return records, table, stats, spec


# -- splitting ---------------------------------------------------------------------


def split_corpus(records, ratio, seed):
    """Deterministic per-speaker stratified split into (train, test)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    by_speaker = {}
    for i, rec in enumerate(records):
        by_speaker.setdefault(rec.speaker_id, []).append(i)
    train_idx, test_idx = [], []
    for spk in sorted(by_speaker):
        idx = np.array(by_speaker[spk])
        if idx.size < 2:
            raise ValueError(f"speaker {spk} has {idx.size} utterance(s); need >= 2 to stratify")
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, spk], dtype=np.uint64)))
        perm = rng.permutation(idx.size)
        n_train = int(round(ratio * idx.size))
        n_train = min(max(n_train, 1), idx.size - 1)
        train_idx.extend(idx[perm[:n_train]])
        test_idx.extend(idx[perm[n_train:]])
    train_idx.sort()
    test_idx.sort()
    return [records[i] for i in train_idx], [records[i] for i in test_idx]


# -- real-data ingestion -------------------------------------------------------------


def ingest_real(wav_path, alignment_path, speaker_id, cfg: DspConfig = None,
                stats: SpeakerStats = None, label_map=None, utterance_id=None):
    """Build a record from a WAV plus a phoneme alignment TSV.

    Durations come from span lengths in frames, reconciled to the actual
    frame count by largest-remainder rounding. Without precomputed speaker
    stats, the utterance standardizes against itself.
    """
    cfg = cfg or DspConfig()
    w = dsp.load_wav(wav_path, cfg.sample_rate)
    rows = parse_and_check_alignment(alignment_path, w.duration, cfg)
    labels = [r[0] for r in rows]
    if label_map is None:
        label_map = {lab: i for i, lab in enumerate(sorted(set(labels)))}
    try:
        ids = np.array([label_map[lab] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"{alignment_path}: phoneme label {exc} not in label map") from None

    lin = dsp.mel_linear(w, cfg)
    t_frames = lin.shape[0]
    mel = np.log(np.maximum(lin, cfg.log_floor)).astype(np.float32)
    energy = dsp.frame_energy(lin)
    contour = dsp.estimate_pitch(w, cfg)

    real_frames = np.array([(e - s) / cfg.hop_seconds for _, s, e in rows])
    durations = dsp.largest_remainder_durations(real_frames, t_frames)
    ends = np.cumsum(durations)
    align = PhonemeAlignment(ids, np.stack([ends - durations, ends], axis=1))

    if contour.voiced.any():
        ph_pitch = dsp.phoneme_average(contour.log_f0, align, voiced=contour.voiced)
    else:
        ph_pitch = np.zeros(len(ids))
    ph_energy = dsp.phoneme_average(energy, align)
    if stats is None:
        stats = SpeakerStats.fit({speaker_id: ph_pitch}, {speaker_id: ph_energy})
    return UtteranceRecord(
        utterance_id=utterance_id or os.path.splitext(os.path.basename(wav_path))[0],
        speaker_id=speaker_id,
        phoneme_ids=ids,
        durations=durations,
        phoneme_pitch=stats.standardize_pitch(ph_pitch, speaker_id),
        phoneme_energy=stats.standardize_energy(ph_energy, speaker_id),
        mel=mel,
        frame_pitch=contour.log_f0,
        voiced=contour.voiced,
        frame_energy=energy,
        style_id=-1,
    )


def parse_and_check_alignment(path, audio_duration, cfg):
    rows = dsp.parse_alignment_tsv(path)
    end = rows[-1][2]
    if end > audio_duration + cfg.hop_seconds:
        raise ValueError(
            f"{path}: alignment ends at {end:.3f}s but audio lasts {audio_duration:.3f}s "
            f"(mismatch beyond one frame)")
    return rows
