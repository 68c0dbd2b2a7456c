"""Reference prosody encoder: turns a reference utterance into a prosody
vector, combines it with the target-speaker embedding, and emits the
gamma/beta sets conditioning the core acoustic model.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .dsp import interpolate_unvoiced


class ProsodyEncoder(nn.Module):
    """Mel, pitch and energy sequences in; one 128-ish vector out.

    The spectrogram passes three conv+ReLU+layernorm stages at a wide
    channel count, then projects down to the hidden size; pitch and energy
    project through one conv each. The summed sequence runs through
    unconditioned FFT blocks and is averaged over time.
    """

    def __init__(self, n_mels, hidden, conv_channels, n_blocks, heads, dropout_p, rng, drop_rng):
        super().__init__()
        from .model import FFTBlock  # shared block implementation

        self.n_mels = n_mels
        self.hidden = hidden
        self.conv1 = nn.Conv1dSame(n_mels, conv_channels, rng)
        self.ln1 = nn.LayerNorm(conv_channels)
        self.conv2 = nn.Conv1dSame(conv_channels, conv_channels, rng)
        self.ln2 = nn.LayerNorm(conv_channels)
        self.conv3 = nn.Conv1dSame(conv_channels, conv_channels, rng)
        self.ln3 = nn.LayerNorm(conv_channels)
        self.proj = nn.Linear(conv_channels, hidden, rng)
        self.pitch_conv = nn.Conv1dSame(1, hidden, rng)
        self.energy_conv = nn.Conv1dSame(1, hidden, rng)
        self.blocks = nn.ModuleList([
            FFTBlock(hidden, heads, rng, drop_rng, dropout_p, conditioned=False)
            for _ in range(n_blocks)
        ])
        self.dropout = nn.Dropout(dropout_p, drop_rng)

    def forward(self, mel, pitch=None, energy=None, mask=None, mode="full", bypass_blocks=False):
        """mel: [.., T, n_mels]; pitch/energy: [.., T] dense standardized
        contours (ignored in spectrogram_only mode); mask: [.., T] bool."""
        if mode not in ("full", "spectrogram_only"):
            raise ValueError(f"unknown prosody encoder mode {mode!r}")
        mel = mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel, dtype=ad.default_dtype()))
        if mel.shape[-1] != self.n_mels:
            raise ValueError(f"reference mel has {mel.shape[-1]} bins, expected {self.n_mels}")
        t = mel.shape[-2]
        if t < 1:
            raise ValueError("reference must contain at least one frame")

        def gate(x):
            if mask is None:
                return x
            return ad.mul(x, Tensor(np.asarray(mask, dtype=x.dtype)[..., None]))

        h = self.ln1(ad.relu(self.conv1(gate(mel))))
        h = self.ln2(ad.relu(self.conv2(gate(h))))
        h = self.ln3(ad.relu(self.conv3(gate(h))))
        h = self.proj(h)
        if mode == "full":
            if pitch is None or energy is None:
                raise ValueError("full mode requires pitch and energy contours")
            pitch = pitch if isinstance(pitch, Tensor) else Tensor(np.asarray(pitch, dtype=ad.default_dtype()))
            energy = energy if isinstance(energy, Tensor) else Tensor(np.asarray(energy, dtype=ad.default_dtype()))
            if pitch.shape[-1] != t or energy.shape[-1] != t:
                raise ValueError("pitch/energy contour length must match mel frame count")
            h = h + self.pitch_conv(gate(ad.reshape(pitch, pitch.shape + (1,))))
            h = h + self.energy_conv(gate(ad.reshape(energy, energy.shape + (1,))))
        if not bypass_blocks:
            for block in self.blocks:
                h = block(h, None, mask)
        return ad.temporal_mean(h, mask)


class SpeakerEmbedding(nn.Module):
    def __init__(self, n_speakers, hidden, rng):
        super().__init__()
        self.n_speakers = n_speakers
        self.embed = nn.Embedding(n_speakers, hidden, rng)

    def forward(self, speaker_ids):
        return self.embed(np.asarray(speaker_ids))


def combine_speaker(prosody_vec, speaker_emb):
    """Target-voice identity enters as a plain elementwise sum."""
    return prosody_vec + speaker_emb


class FilmGenerator(nn.Module):
    """One shared linear head that emits gamma and beta for every registered
    FiLM site of the core model, in registry order."""

    def __init__(self, hidden, site_registry, rng):
        super().__init__()
        self.sites = list(site_registry)
        self.total = 2 * sum(w for _, w in self.sites)
        self.head = nn.Linear(hidden, self.total, rng)

    def forward(self, conditioning):
        flat = self.head(conditioning)
        params = []
        off = 0
        for _, width in self.sites:
            gamma = flat[(Ellipsis, slice(off, off + width))]
            beta = flat[(Ellipsis, slice(off + width, off + 2 * width))]
            params.append((gamma, beta))
            off += 2 * width
        return params

    def check_registry(self, registry):
        if [tuple(s) for s in self.sites] != [tuple(s) for s in registry]:
            raise ValueError("film generator site registry drifted from the core model")


def identity_film(site_registry, batch_shape=(), dtype=None):
    """All-zero gamma/beta for every site: conditioning becomes the identity."""
    dtype = dtype or ad.default_dtype()
    out = []
    for _, width in site_registry:
        z = np.zeros(batch_shape + (width,), dtype=dtype)
        out.append((Tensor(z.copy()), Tensor(z.copy())))
    return out


def reference_inputs(record, stats):
    """Dense standardized pitch and energy contours for a reference record."""
    dense = interpolate_unvoiced(record.pitch_contour())
    pitch = stats.standardize_pitch(dense, record.speaker_id)
    energy = stats.standardize_energy(record.frame_energy, record.speaker_id)
    return (
        record.mel.astype(ad.default_dtype()),
        pitch.astype(ad.default_dtype()),
        energy.astype(ad.default_dtype()),
    )
