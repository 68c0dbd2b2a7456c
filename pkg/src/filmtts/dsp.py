"""Acoustic feature extraction: log-mel spectrograms, frame energy,
autocorrelation pitch with voicing, phoneme-level averaging, and per-speaker
standardization of prosody targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile


@dataclass
class DspConfig:
    sample_rate: int = 22050
    win_length: int = 1024        # ~46.4 ms at 22050 Hz
    hop_length: int = 256         # ~11.6 ms
    n_fft: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    pitch_fmin: float = 60.0
    pitch_fmax: float = 500.0     # wide enough for high-pitched material
    voicing_threshold: float = 0.3
    rms_gate: float = 1e-4

    @property
    def hop_seconds(self):
        return self.hop_length / self.sample_rate

    @property
    def win_seconds(self):
        return self.win_length / self.sample_rate


@dataclass
class Waveform:
    samples: np.ndarray           # mono float32 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be non-empty and mono")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray            # [T, n_mels], natural-log magnitudes
    hop_seconds: float
    win_seconds: float


@dataclass
class PitchContour:
    log_f0: np.ndarray            # [T] ln Hz on voiced frames, NaN elsewhere
    voiced: np.ndarray            # [T] bool

    def __post_init__(self):
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.log_f0.shape != self.voiced.shape:
            raise ValueError("log_f0 and voiced must have the same length")
        if np.any(~np.isfinite(self.log_f0[self.voiced])):
            raise ValueError("voiced frames must carry finite log_f0")


@dataclass
class PhonemeAlignment:
    """Contiguous non-overlapping frame spans, one per phoneme, covering [0, T)."""

    phoneme_ids: np.ndarray       # [N] int
    spans: np.ndarray             # [N, 2] int, [start, end) frames

    def __post_init__(self):
        self.phoneme_ids = np.asarray(self.phoneme_ids, dtype=np.int64)
        self.spans = np.asarray(self.spans, dtype=np.int64)
        if self.spans.ndim != 2 or self.spans.shape[1] != 2 or len(self.spans) != len(self.phoneme_ids):
            raise ValueError("spans must be [N, 2] matching phoneme_ids")
        if len(self.spans) == 0:
            raise ValueError("alignment must contain at least one phoneme")
        if np.any(self.spans[:, 1] <= self.spans[:, 0]):
            raise ValueError("every span must be at least one frame long")
        if self.spans[0, 0] != 0 or np.any(self.spans[1:, 0] != self.spans[:-1, 1]):
            raise ValueError("spans must be ordered, disjoint and exhaustive from frame 0")

    @property
    def durations(self):
        return self.spans[:, 1] - self.spans[:, 0]

    @property
    def total_frames(self):
        return int(self.spans[-1, 1])


# -- WAV ingestion -------------------------------------------------------------


def load_wav(path, expected_rate=22050):
    """Read a mono PCM-16 or float-32 WAV, normalizing samples to [-1, 1]."""
    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expected_rate}; resample upstream")
    if data.ndim != 1:
        raise ValueError(f"{path}: stereo input rejected, convert to mono first")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = np.clip(data, -1.0, 1.0)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}; use PCM-16 or float-32")
    return Waveform(samples, rate)


def write_wav(path, samples, sample_rate):
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sample_rate, (x * 32767.0).astype(np.int16))


# -- framing and mel -----------------------------------------------------------


def frame_count(n_samples, cfg):
    if n_samples < cfg.win_length:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one {cfg.win_length}-sample window")
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def _frames(samples, cfg):
    t = frame_count(samples.size, cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(t)[:, None]
    return samples[idx]


def _hann(n):
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular mel filters over the rfft bins, shape [n_mels, n_fft//2 + 1]."""
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, freqs.size))
    for i in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_freqs(cfg):
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def stft_magnitudes(w: Waveform, cfg: DspConfig):
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    frames = _frames(w.samples.astype(np.float64), cfg) * _hann(cfg.win_length)
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))


def mel_linear(w: Waveform, cfg: DspConfig):
    """Linear (pre-log) mel magnitudes, shape [T, n_mels]."""
    return stft_magnitudes(w, cfg) @ mel_filterbank(cfg).T


def stft_mel(w: Waveform, cfg: DspConfig) -> MelSpectrogram:
    lin = mel_linear(w, cfg)
    frames = np.log(np.maximum(lin, cfg.log_floor)).astype(np.float32)
    return MelSpectrogram(frames, cfg.hop_seconds, cfg.win_seconds)


def frame_energy(linear_frames):
    """Euclidean norm of each pre-log frame."""
    return np.linalg.norm(np.asarray(linear_frames, dtype=np.float64), axis=1)


# -- pitch ----------------------------------------------------------------------


def estimate_pitch(w: Waveform, cfg: DspConfig) -> PitchContour:
    """Normalized-autocorrelation pitch per hop with parabolic peak refinement.

    A frame is voiced iff its peak normalized autocorrelation clears the
    voicing threshold and its RMS clears the silence gate. Contour length
    matches the mel frame count. Silence yields all-unvoiced, never an error.
    """
    samples = w.samples.astype(np.float64)
    t_frames = frame_count(samples.size, cfg)
    n = cfg.win_length
    lag_min = max(2, int(np.floor(cfg.sample_rate / cfg.pitch_fmax)))
    lag_max = min(n - 2, int(np.ceil(cfg.sample_rate / cfg.pitch_fmin)))
    if lag_min >= lag_max:
        raise ValueError("pitch search band is empty for this window length")

    frames = _frames(samples, cfg)
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt((frames ** 2).mean(axis=1))

    # FFT autocorrelation plus cumulative-energy normalization per lag.
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), axis=1)[:, :n]
    sq = frames ** 2
    csum = np.concatenate([np.zeros((t_frames, 1)), np.cumsum(sq, axis=1)], axis=1)
    total = csum[:, -1]

    lags = np.arange(lag_min, lag_max + 1)
    e_head = csum[:, n - lags]                    # energy of x[0 : n-lag]
    e_tail = total[:, None] - csum[:, lags]       # energy of x[lag : n]
    denom = np.sqrt(np.maximum(e_head * e_tail, 1e-300))
    norm_ac = ac[:, lag_min:lag_max + 1] / denom

    log_f0 = np.full(t_frames, np.nan)
    voiced = np.zeros(t_frames, dtype=bool)
    for i in range(t_frames):
        if rms[i] < cfg.rms_gate:
            continue
        r = norm_ac[i]
        peak = r.max()
        if peak < cfg.voicing_threshold:
            continue
        # A periodic signal peaks at every period multiple; take the
        # smallest-lag local maximum near the global peak to avoid
        # octave-down errors.
        is_max = np.zeros(r.size, dtype=bool)
        is_max[1:-1] = (r[1:-1] >= r[:-2]) & (r[1:-1] >= r[2:])
        is_max[0] = r[0] >= r[1]
        is_max[-1] = r[-1] >= r[-2]
        cand = np.flatnonzero(is_max & (r >= peak - 0.03))
        j = int(cand[0])
        lag = float(lags[j])
        if 0 < j < norm_ac.shape[1] - 1:
            ym, y0, yp = norm_ac[i, j - 1], norm_ac[i, j], norm_ac[i, j + 1]
            denom_p = ym - 2.0 * y0 + yp
            if abs(denom_p) > 1e-12:
                delta = 0.5 * (ym - yp) / denom_p
                if abs(delta) <= 1.0:
                    lag += delta
        f0 = cfg.sample_rate / lag
        if cfg.pitch_fmin <= f0 <= cfg.pitch_fmax:
            log_f0[i] = np.log(f0)
            voiced[i] = True
    return PitchContour(log_f0, voiced)


def interpolate_unvoiced(contour: PitchContour):
    """Dense log-pitch: linear across unvoiced gaps, held constant at edges."""
    voiced_idx = np.flatnonzero(contour.voiced)
    if voiced_idx.size == 0:
        raise ValueError("cannot interpolate an all-unvoiced contour")
    t = np.arange(contour.log_f0.size)
    return np.interp(t, voiced_idx, contour.log_f0[voiced_idx])


# -- phoneme-level targets -------------------------------------------------------


def phoneme_average(values, align: PhonemeAlignment, voiced=None):
    """Per-phoneme mean of a frame contour.

    With a voicing mask, each span averages its voiced frames only; a span
    with no voiced frame falls back to the unvoiced-interpolated contour.
    """
    values = np.asarray(values, dtype=np.float64)
    if align.total_frames > values.size:
        raise ValueError(f"alignment covers {align.total_frames} frames but contour has {values.size}")
    if voiced is not None:
        contour = PitchContour(values, voiced)
        dense = interpolate_unvoiced(contour)
    out = np.empty(len(align.phoneme_ids))
    for i, (s, e) in enumerate(align.spans):
        if voiced is None:
            out[i] = values[s:e].mean()
        else:
            mask = contour.voiced[s:e]
            out[i] = values[s:e][mask].mean() if mask.any() else dense[s:e].mean()
    return out


@dataclass
class _Moments:
    mean: float
    std: float


@dataclass
class SpeakerStats:
    """Per-speaker mean/std of phoneme-level log-pitch and energy.

    Fit on the training split only; standard deviations are floored at 1e-6
    so the transform is always invertible.
    """

    pitch: dict = field(default_factory=dict)     # speaker id -> _Moments
    energy: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, per_speaker_pitch, per_speaker_energy):
        """Both arguments map speaker id -> concatenated phoneme-level values."""
        stats = cls()
        for spk, vals in per_speaker_pitch.items():
            v = np.asarray(vals, dtype=np.float64)
            stats.pitch[int(spk)] = _Moments(float(v.mean()), max(float(v.std()), 1e-6))
        for spk, vals in per_speaker_energy.items():
            v = np.asarray(vals, dtype=np.float64)
            stats.energy[int(spk)] = _Moments(float(v.mean()), max(float(v.std()), 1e-6))
        return stats

    def _moments(self, table, speaker):
        try:
            return table[int(speaker)]
        except KeyError:
            raise ValueError(f"unknown speaker id {speaker}") from None

    def standardize_pitch(self, values, speaker):
        m = self._moments(self.pitch, speaker)
        return (np.asarray(values, dtype=np.float64) - m.mean) / m.std

    def inverse_pitch(self, values, speaker):
        m = self._moments(self.pitch, speaker)
        return np.asarray(values, dtype=np.float64) * m.std + m.mean

    def standardize_energy(self, values, speaker):
        m = self._moments(self.energy, speaker)
        return (np.asarray(values, dtype=np.float64) - m.mean) / m.std

    def inverse_energy(self, values, speaker):
        m = self._moments(self.energy, speaker)
        return np.asarray(values, dtype=np.float64) * m.std + m.mean

    def to_json(self):
        return {
            "pitch": {str(k): [v.mean, v.std] for k, v in self.pitch.items()},
            "energy": {str(k): [v.mean, v.std] for k, v in self.energy.items()},
        }

    @classmethod
    def from_json(cls, obj):
        stats = cls()
        for k, (mean, std) in obj["pitch"].items():
            stats.pitch[int(k)] = _Moments(mean, std)
        for k, (mean, std) in obj["energy"].items():
            stats.energy[int(k)] = _Moments(mean, std)
        return stats


# -- alignment files --------------------------------------------------------------


def parse_alignment_tsv(path):
    """Rows of `label<TAB>start_seconds<TAB>end_seconds`, monotone and non-overlapping."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated fields, got {len(parts)}")
            label, start, end = parts[0], float(parts[1]), float(parts[2])
            if end <= start:
                raise ValueError(f"{path}:{ln}: span end {end} not after start {start}")
            if rows and start < rows[-1][2] - 1e-9:
                raise ValueError(f"{path}:{ln}: span starts at {start}, before previous end {rows[-1][2]}")
            rows.append((label, start, end))
    if not rows:
        raise ValueError(f"{path}: alignment file contains no spans")
    return rows


def largest_remainder_durations(real_durations, total):
    """Round positive real durations to integers >= 1 summing exactly to `total`."""
    real = np.asarray(real_durations, dtype=np.float64)
    n = real.size
    if total < n:
        raise ValueError(f"cannot fit {n} phonemes into {total} frames at >= 1 frame each")
    base = np.maximum(np.floor(real).astype(np.int64), 1)
    remainder = real - np.floor(real)
    diff = int(total - base.sum())
    if diff > 0:
        order = np.argsort(-remainder, kind="stable")
        for k in range(diff):
            base[order[k % n]] += 1
    elif diff < 0:
        order = np.argsort(remainder, kind="stable")
        i = 0
        while diff < 0:
            j = order[i % n]
            if base[j] > 1:
                base[j] -= 1
                diff += 1
            i += 1
            if i > 10 * n and diff < 0:
                raise ValueError("cannot reconcile durations to total frames")
    return base


# -- Griffin-Lim (demonstration-quality audio) -------------------------------------


def griffin_lim(mel_log, cfg: DspConfig, n_iter=60, seed=0):
    """Reconstruct audio from a log-mel spectrogram via a pseudo-inverse
    mel-to-linear mapping and iterative phase estimation. Demonstration only.
    """
    mel = np.exp(np.asarray(mel_log, dtype=np.float64))
    fb = mel_filterbank(cfg)
    spec = np.maximum(mel @ np.linalg.pinv(fb).T, 0.0)   # [T, bins]
    t_frames = spec.shape[0]
    n = cfg.win_length
    window = _hann(n)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(spec.shape))

    def _istft(stft_mat):
        out_len = (t_frames - 1) * cfg.hop_length + n
        out = np.zeros(out_len)
        wsum = np.zeros(out_len)
        frames = np.fft.irfft(stft_mat, n=cfg.n_fft, axis=1)[:, :n]
        for i in range(t_frames):
            s = i * cfg.hop_length
            out[s:s + n] += frames[i] * window
            wsum[s:s + n] += window ** 2
        return out / np.maximum(wsum, 1e-8)

    def _stft(x):
        pads = max(0, (t_frames - 1) * cfg.hop_length + n - x.size)
        x = np.pad(x, (0, pads))
        idx = np.arange(n)[None, :] + cfg.hop_length * np.arange(t_frames)[:, None]
        return np.fft.rfft(x[idx] * window, n=cfg.n_fft, axis=1)

    for _ in range(n_iter):
        x = _istft(spec * angles)
        re = _stft(x)
        angles = re / np.maximum(np.abs(re), 1e-12)
    x = _istft(spec * angles)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak * 0.95
    return x.astype(np.float32)
