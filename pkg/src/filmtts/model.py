"""FiLM-conditioned core acoustic model: phoneme encoder, shared low-level
prosody predictor, Gaussian upsampling, and frame decoder, plus the combined
transfer model that ties in the prosody encoder and conditioning generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn, sections
from .autodiff import Tensor
from .prosody import ProsodyEncoder, SpeakerEmbedding, FilmGenerator, combine_speaker


@dataclass
class ModelConfig:
    hidden: int = 128
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    heads: int = 8
    n_mels: int = 80
    phoneme_inventory: int = 64
    n_speakers: int = 13
    dropout: float = 0.1
    sigma_floor: float = 1e-3
    duration_log_domain: bool = True
    prosody_conv_channels: int = 1024
    prosody_blocks: int = 4

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


class FilmLayer(nn.Module):
    """Per-site feature-wise affine conditioning with learned scalar scales.

    output = (1 + s_gamma * gamma) * h + s_beta * beta. Zero gamma/beta, or
    zero scales, leave h untouched, so an unconditioned run is the exact
    identity of this layer being skipped.
    """

    def __init__(self, width):
        super().__init__()
        self.width = width
        self.s_gamma = nn.Parameter(np.ones((), dtype=ad.default_dtype()))
        self.s_beta = nn.Parameter(np.ones((), dtype=ad.default_dtype()))

    def apply(self, h, gamma, beta):
        if gamma.shape[-1] != self.width or beta.shape[-1] != self.width:
            raise ValueError(f"film width mismatch: site expects {self.width}, got {gamma.shape[-1]}")
        if gamma.ndim == h.ndim - 1:
            gamma = ad.reshape(gamma, gamma.shape[:-1] + (1, self.width))
            beta = ad.reshape(beta, beta.shape[:-1] + (1, self.width))
        gain = ad.mul(self.s_gamma, gamma) + 1.0
        return ad.mul(gain, h) + ad.mul(self.s_beta, beta)


def _gate(x, mask):
    """Zero padded time steps so convolutions cannot bleed across padding."""
    if mask is None:
        return x
    return ad.mul(x, Tensor(np.asarray(mask).astype(x.dtype)[..., None]))


class FFTBlock(nn.Module):
    """Self-attention -> residual+layernorm -> FiLM -> two width-3 convs
    (ReLU between) -> residual+layernorm -> FiLM. Dropout follows the
    attention and the second convolution."""

    def __init__(self, dim, heads, rng, drop_rng, dropout_p, conditioned=True):
        super().__init__()
        self.attn = nn.MultiHeadSelfAttention(dim, heads, rng)
        self.ln_attn = nn.LayerNorm(dim)
        self.conv1 = nn.Conv1dSame(dim, dim, rng)
        self.conv2 = nn.Conv1dSame(dim, dim, rng)
        self.ln_conv = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout_p, drop_rng)
        self.conditioned = conditioned
        if conditioned:
            self.film_attn = FilmLayer(dim)
            self.film_conv = FilmLayer(dim)

    def forward(self, x, film_pairs=None, mask=None):
        if film_pairs is not None and not self.conditioned:
            raise ValueError("film parameters passed to an unconditioned block")
        a = self.dropout(self.attn(x, mask))
        x = self.ln_attn(x + a)
        if film_pairs is not None:
            x = self.film_attn.apply(x, *film_pairs[0])
        c = self.conv2(_gate(ad.relu(self.conv1(_gate(x, mask))), mask))
        c = self.dropout(c)
        x = self.ln_conv(x + c)
        if film_pairs is not None:
            x = self.film_conv.apply(x, *film_pairs[1])
        return x


def gaussian_upsample(h, durations, sigma, phoneme_mask=None, total_frames=None):
    """Differentiable phoneme-to-frame expansion.

    Phoneme i acts as a Gaussian centered at c_i = cumsum(d)_i - d_i/2 with
    spread sigma_i; frame t sits at position t + 0.5. Per-frame weights are
    normalized to sum to one, so output frame t is a convex combination of
    the phoneme vectors. Returns (frames [.., T, d], weights [.., T, N]).
    """
    d = np.asarray(durations)
    if phoneme_mask is None:
        if np.any(d < 1):
            raise ValueError("durations must be positive integers")
    else:
        if np.any(d[np.asarray(phoneme_mask, dtype=bool)] < 1):
            raise ValueError("durations must be positive integers")
    row_totals = d.sum(axis=-1)
    t_total = int(total_frames) if total_frames is not None else int(np.max(row_totals))
    if t_total < 1:
        raise ValueError("total duration must be at least one frame")

    dtype = h.dtype if isinstance(h, Tensor) else ad.default_dtype()
    centers = np.cumsum(d, axis=-1) - d / 2.0
    positions = np.arange(t_total, dtype=np.float64) + 0.5
    dist2 = (positions.reshape((1,) * (centers.ndim - 1) + (t_total, 1)) -
             np.expand_dims(centers, -2)) ** 2          # [.., T, N]
    neg_half_dist2 = Tensor((-0.5 * dist2).astype(dtype))

    sigma_t = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=dtype))
    inv_var = ad.reshape(sigma_t, sigma_t.shape[:-1] + (1, sigma_t.shape[-1])) ** -2.0
    log_w = ad.mul(neg_half_dist2, inv_var)
    if phoneme_mask is not None:
        block = np.where(np.asarray(phoneme_mask, dtype=bool), 0.0, -1e30).astype(dtype)
        log_w = log_w + Tensor(np.expand_dims(block, -2))
    # Row-max shift: constant w.r.t. the tape, exact for the normalized weights.
    shifted = log_w - log_w.data.max(axis=-1, keepdims=True)
    w = ad.exp(shifted)
    w = ad.div(w, ad.reduce_sum(w, axis=-1, keepdims=True))
    return ad.matmul(w, h), w


def repeat_upsample(h, durations):
    """Hard length-regulator oracle: repeat phoneme i exactly d_i times."""
    d = np.asarray(durations)
    idx = np.repeat(np.arange(d.size), d)
    data = h.data if isinstance(h, Tensor) else np.asarray(h)
    return data[idx]


class CoreAcousticModel(nn.Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.embedding = nn.Embedding(cfg.phoneme_inventory, d, rng)
        self.encoder_blocks = nn.ModuleList([
            FFTBlock(d, cfg.heads, rng, drop_rng, cfg.dropout) for _ in range(cfg.encoder_blocks)])
        # shared-trunk prosody predictor: two rounds of conv/relu/norm/dropout/FiLM
        self.pred_conv1 = nn.Conv1dSame(d, d, rng)
        self.pred_ln1 = nn.LayerNorm(d)
        self.pred_film1 = FilmLayer(d)
        self.pred_conv2 = nn.Conv1dSame(d, d, rng)
        self.pred_ln2 = nn.LayerNorm(d)
        self.pred_film2 = FilmLayer(d)
        self.pred_head = nn.Linear(d, 3, rng)
        self.dropout = nn.Dropout(cfg.dropout, drop_rng)
        # prosody-to-hidden projections and the range head
        self.proj_duration = nn.Conv1dSame(1, d, rng)
        self.proj_energy = nn.Conv1dSame(1, d, rng)
        self.proj_pitch = nn.Conv1dSame(1, d, rng)
        self.range_head = nn.Linear(d, 1, rng)
        self.decoder_blocks = nn.ModuleList([
            FFTBlock(d, cfg.heads, rng, drop_rng, cfg.dropout) for _ in range(cfg.decoder_blocks)])
        self.mel_head = nn.Linear(d, cfg.n_mels, rng)

    # -- FiLM registry -----------------------------------------------------

    def film_registry(self):
        sites = []
        for b in range(self.cfg.encoder_blocks):
            sites += [(f"encoder.{b}.attn", self.cfg.hidden), (f"encoder.{b}.conv", self.cfg.hidden)]
        sites += [("predictor.0", self.cfg.hidden), ("predictor.1", self.cfg.hidden)]
        for b in range(self.cfg.decoder_blocks):
            sites += [(f"decoder.{b}.attn", self.cfg.hidden), (f"decoder.{b}.conv", self.cfg.hidden)]
        return sites

    def split_film(self, film):
        if film is None:
            return None, None, None
        n_enc = 2 * self.cfg.encoder_blocks
        expected = n_enc + 2 + 2 * self.cfg.decoder_blocks
        if len(film) != expected:
            raise ValueError(f"film parameter set has {len(film)} sites, model registers {expected}")
        return film[:n_enc], film[n_enc:n_enc + 2], film[n_enc + 2:]

    # -- submodules ----------------------------------------------------------

    def encode_phonemes(self, phoneme_ids, film_enc=None, mask=None):
        ids = np.asarray(phoneme_ids)
        h = self.embedding(ids)
        pe = nn.sinusoid_positions(ids.shape[-1], self.cfg.hidden, h.dtype)
        h = h + Tensor(pe)
        for b, block in enumerate(self.encoder_blocks):
            pairs = (film_enc[2 * b], film_enc[2 * b + 1]) if film_enc is not None else None
            h = block(h, pairs, mask)
        return h

    def predict_low_level_prosody(self, enc, film_pred=None, mask=None):
        h = self.pred_ln1(ad.relu(self.pred_conv1(_gate(enc, mask))))
        h = self.dropout(h)
        if film_pred is not None:
            h = self.pred_film1.apply(h, *film_pred[0])
        h = self.pred_ln2(ad.relu(self.pred_conv2(_gate(h, mask))))
        h = self.dropout(h)
        if film_pred is not None:
            h = self.pred_film2.apply(h, *film_pred[1])
        out = self.pred_head(h)
        log_duration = out[(Ellipsis, 0)]
        energy = out[(Ellipsis, 1)]
        pitch = out[(Ellipsis, 2)]
        return log_duration, energy, pitch

    def project_prosody(self, durations, energy, pitch, mask=None):
        def conv1(layer, v):
            v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=ad.default_dtype()))
            v = ad.reshape(v, v.shape + (1,))
            return layer(_gate(v, mask))
        return (conv1(self.proj_duration, durations),
                conv1(self.proj_energy, energy),
                conv1(self.proj_pitch, pitch))

    def predict_ranges(self, enc, proj_dur, proj_energy, proj_pitch):
        summed = enc + proj_dur + proj_energy + proj_pitch
        raw = self.range_head(summed)
        raw = ad.reshape(raw, raw.shape[:-1])
        return ad.maximum(ad.softplus(raw), self.cfg.sigma_floor)

    def decode_frames(self, upsampled, film_dec=None, mask=None):
        pe = nn.sinusoid_positions(upsampled.shape[-2], self.cfg.hidden, upsampled.dtype)
        h = upsampled + Tensor(pe)
        for b, block in enumerate(self.decoder_blocks):
            pairs = (film_dec[2 * b], film_dec[2 * b + 1]) if film_dec is not None else None
            h = block(h, pairs, mask)
        return self.mel_head(h)

    # -- teacher-forced training forward -------------------------------------

    def forward_train(self, phoneme_ids, durations, energy_targets, pitch_targets,
                      film=None, phoneme_mask=None, frame_mask=None, total_frames=None):
        """Ground-truth durations/energy/pitch drive upsampling (teacher
        forcing); the predictor's outputs are returned for the loss only."""
        film_enc, film_pred, film_dec = self.split_film(film)
        enc = self.encode_phonemes(phoneme_ids, film_enc, phoneme_mask)
        prosody_pred = self.predict_low_level_prosody(enc, film_pred, phoneme_mask)
        d = np.asarray(durations)
        dtype = enc.dtype
        pj_d, pj_e, pj_p = self.project_prosody(
            d.astype(dtype), np.asarray(energy_targets, dtype=dtype),
            np.asarray(pitch_targets, dtype=dtype), phoneme_mask)
        sigma = self.predict_ranges(enc, pj_d, pj_e, pj_p)
        h_aug = enc + pj_e + pj_p
        up, _ = gaussian_upsample(h_aug, d, sigma, phoneme_mask, total_frames)
        mel = self.decode_frames(up, film_dec, frame_mask)
        return mel, prosody_pred, sigma


def durations_from_log(log_durations, scale=1.0):
    """round(exp(.)) clamped to >= 1 frame."""
    return np.maximum(np.round(scale * np.exp(np.asarray(log_durations, dtype=np.float64))), 1.0).astype(np.int64)


class ProsodyTransferModel(nn.Module):
    """Core acoustic model + prosody encoder + speaker embedding + FiLM generator."""

    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.drop_rng = ad.CounterRNG(seed + 1)
        self.core = CoreAcousticModel(cfg, rng, self.drop_rng)
        self.prosody_encoder = ProsodyEncoder(
            cfg.n_mels, cfg.hidden, cfg.prosody_conv_channels, cfg.prosody_blocks,
            cfg.heads, cfg.dropout, rng, self.drop_rng)
        self.speaker_embedding = SpeakerEmbedding(cfg.n_speakers, cfg.hidden, rng)
        self.film_generator = FilmGenerator(cfg.hidden, self.core.film_registry(), rng)

    def encode_reference(self, mel, pitch=None, energy=None, mask=None, mode="full"):
        return self.prosody_encoder(mel, pitch, energy, mask, mode)

    def condition(self, prosody_vec, speaker_ids):
        self.film_generator.check_registry(self.core.film_registry())
        combined = combine_speaker(prosody_vec, self.speaker_embedding(speaker_ids))
        return self.film_generator(combined)

    def infer(self, phoneme_ids, reference_mel, reference_pitch, reference_energy,
              target_speaker, overrides=None):
        """Synthesize a mel for `phoneme_ids` in the reference's prosody and
        the target speaker's voice. Returns (mel [T, n_mels], info dict).

        overrides: optional dict with any of `durations` (int [N]),
        `pitch` / `energy` (float [N], standardized domain), and
        `duration_scale` / `pitch_scale` / `energy_scale` floats.
        """
        overrides = dict(overrides or {})
        ids = np.asarray(phoneme_ids)
        n = ids.shape[-1]
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                pvec = self.encode_reference(reference_mel, reference_pitch, reference_energy)
                film = self.condition(pvec, int(target_speaker))
                film_enc, film_pred, film_dec = self.core.split_film(film)
                enc = self.core.encode_phonemes(ids, film_enc)
                log_dur, energy, pitch = self.core.predict_low_level_prosody(enc, film_pred)

                dur_scale = float(overrides.pop("duration_scale", 1.0))
                pitch_scale = float(overrides.pop("pitch_scale", 1.0))
                energy_scale = float(overrides.pop("energy_scale", 1.0))
                if "durations" in overrides:
                    durations = np.asarray(overrides.pop("durations"), dtype=np.int64)
                    if durations.shape != (n,):
                        raise ValueError(f"duration override length {durations.shape} != phoneme count {n}")
                    if np.any(durations < 1):
                        raise ValueError("duration override must be >= 1 frame everywhere")
                else:
                    durations = durations_from_log(log_dur.data, dur_scale)
                if "pitch" in overrides:
                    pitch_vals = np.asarray(overrides.pop("pitch"), dtype=np.float64)
                    if pitch_vals.shape != (n,):
                        raise ValueError("pitch override length mismatch")
                else:
                    pitch_vals = pitch.data.astype(np.float64) * pitch_scale
                if "energy" in overrides:
                    energy_vals = np.asarray(overrides.pop("energy"), dtype=np.float64)
                    if energy_vals.shape != (n,):
                        raise ValueError("energy override length mismatch")
                else:
                    energy_vals = energy.data.astype(np.float64) * energy_scale
                if overrides:
                    raise ValueError(f"unknown infer overrides: {sorted(overrides)}")

                dtype = enc.dtype
                pj_d, pj_e, pj_p = self.core.project_prosody(
                    durations.astype(dtype), energy_vals.astype(dtype), pitch_vals.astype(dtype))
                sigma = self.core.predict_ranges(enc, pj_d, pj_e, pj_p)
                h_aug = enc + pj_e + pj_p
                up, _ = gaussian_upsample(h_aug, durations, sigma)
                mel = self.core.decode_frames(up, film_dec)
        finally:
            self.train(was_training)
        info = {
            "durations": durations,
            "pitch": pitch_vals,
            "energy": energy_vals,
            "log_duration_pred": log_dur.data.copy(),
        }
        return mel.data.copy(), info


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, model: ProsodyTransferModel, classifier=None, meta=None):
    cfg_payload = json.dumps({"model_config": model.cfg.to_json(), "meta": meta or {}},
                             sort_keys=True).encode("utf-8")
    secs = [("config", cfg_payload)]
    for name, p in model.named_parameters():
        secs.append((f"model/{name}", sections.encode_array(p.data)))
    if classifier is not None:
        for name, p in classifier.named_parameters():
            secs.append((f"classifier/{name}", sections.encode_array(p.data)))
    sections.write_container(path, secs)


def load_checkpoint(path, classifier=None):
    secs = sections.read_container(path)
    if "config" not in secs:
        raise sections.ContainerError(f"{path}: missing 'config' section")
    header = json.loads(secs["config"].decode("utf-8"))
    cfg = ModelConfig.from_json(header["model_config"])
    model = ProsodyTransferModel(cfg, seed=0)
    state = {name[len("model/"):]: sections.decode_array(payload, name)
             for name, payload in secs.items() if name.startswith("model/")}
    model.load_state_dict(state)
    if classifier is not None:
        cstate = {name[len("classifier/"):]: sections.decode_array(payload, name)
                  for name, payload in secs.items() if name.startswith("classifier/")}
        if cstate:
            classifier.load_state_dict(cstate)
    return model, cfg, header.get("meta", {})
