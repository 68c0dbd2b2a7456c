"""Training objective and loop: the four-term loss with adversarial
speaker disentanglement via gradient reversal, Adam with warmup/decay,
and deterministic batch assembly with padding masks.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .dsp import interpolate_unvoiced
from .model import ProsodyTransferModel, ModelConfig, save_checkpoint


class NumericError(RuntimeError):
    """Raised when training hits NaNs or diverges; maps to CLI exit code 3."""


@dataclass
class TrainConfig:
    batch_size: int = 48
    total_steps: int = 10000
    warmup_steps: int = 10000
    lr_start: float = 1e-4
    lr_peak: float = 1e-3
    lambda_f: float = 1e-3
    lambda_r: float = 1e-6
    lambda_a_max: float = 1e-2
    lambda_a_ramp_steps: int = 10000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0
    checkpoint_every: int = 0        # 0 disables periodic checkpoints
    log_every: int = 1
    divergence_factor: float = 10.0
    divergence_patience: int = 500

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        for name in ("lambda_f", "lambda_r", "lambda_a_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def lr_schedule(step, cfg: TrainConfig = None):
    """Linear warmup then inverse-square-root decay, continuous at the knee."""
    cfg = cfg or TrainConfig()
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step <= cfg.warmup_steps:
        return cfg.lr_start + (step / cfg.warmup_steps) * (cfg.lr_peak - cfg.lr_start)
    return cfg.lr_peak * float(np.sqrt(cfg.warmup_steps / step))


def lambda_a_schedule(step, cfg: TrainConfig = None):
    cfg = cfg or TrainConfig()
    if step < 0:
        raise ValueError("step must be nonnegative")
    return min(step / cfg.lambda_a_ramp_steps, 1.0) * cfg.lambda_a_max


@dataclass
class LossBreakdown:
    mel_mse: float
    mel_mae: float
    dur_mse: float
    energy_mse: float
    pitch_mse: float
    l_e: float
    l_f: float
    l_a: float
    l_r: float
    lambda_f: float
    lambda_a: float
    lambda_r: float
    total: float

    FIELDS = ("mel_mse", "mel_mae", "dur_mse", "energy_mse", "pitch_mse",
              "l_e", "l_f", "l_a", "l_r", "total")


class SpeakerClassifier(nn.Module):
    """Three linear layers with ReLU activations, all at the hidden width."""

    def __init__(self, hidden, n_speakers, rng):
        super().__init__()
        self.fc1 = nn.Linear(hidden, hidden, rng)
        self.fc2 = nn.Linear(hidden, hidden, rng)
        self.fc3 = nn.Linear(hidden, n_speakers, rng)

    def forward(self, x):
        h = ad.relu(self.fc1(x))
        h = ad.relu(self.fc2(h))
        return self.fc3(h)


def regularization_terms(named_params):
    """(l_f, l_r): squared L2 of FiLM scales, and of weight matrices
    excluding scales, biases, and layer-norm gains."""
    l_f = None
    l_r = None
    for name, p in named_params:
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("s_gamma", "s_beta"):
            term = ad.reduce_sum(ad.mul(p, p))
            l_f = term if l_f is None else l_f + term
        elif leaf in ("weight", "kernel", "table"):
            term = ad.reduce_sum(ad.mul(p, p))
            l_r = term if l_r is None else l_r + term
    zero = Tensor(np.zeros((), dtype=ad.default_dtype()))
    return l_f if l_f is not None else zero, l_r if l_r is not None else zero


def compute_loss(mel_pred, prosody_pred, batch, named_params, adversarial_ce,
                 lambda_f, lambda_a, lambda_r, literal_eq1=False):
    """Assemble the four-term objective.

    In training mode the adversarial cross-entropy arrives already routed
    through gradient reversal, so adding it makes the classifier descend
    while the prosody encoder ascends -- the encoder-side sign of the
    published objective. With `literal_eq1` the term enters as written
    (minus lambda_a times the unreversed cross-entropy), which is the form
    a finite-difference check can verify end to end.
    """
    log_dur_pred, energy_pred, pitch_pred = prosody_pred
    ph_mask = batch["phoneme_mask"]
    fr_mask = batch["frame_mask"]
    mel_mse = ad.mse(mel_pred, Tensor(batch["mel"]), fr_mask)
    mel_mae = ad.mae(mel_pred, Tensor(batch["mel"]), fr_mask)
    dur_mse = ad.mse(log_dur_pred, Tensor(batch["log_duration_target"]), ph_mask)
    energy_mse = ad.mse(energy_pred, Tensor(batch["energy_target"]), ph_mask)
    pitch_mse = ad.mse(pitch_pred, Tensor(batch["pitch_target"]), ph_mask)
    l_e = mel_mse + mel_mae + dur_mse + energy_mse + pitch_mse
    l_f, l_r = regularization_terms(named_params)
    if literal_eq1:
        total = l_e + lambda_f * l_f - lambda_a * adversarial_ce + lambda_r * l_r
    else:
        total = l_e + lambda_f * l_f + lambda_r * l_r + adversarial_ce
    values = [float(x.data) for x in
              (mel_mse, mel_mae, dur_mse, energy_mse, pitch_mse, l_e, l_f, adversarial_ce, l_r)]
    if not all(np.isfinite(values)):
        names = ("mel_mse", "mel_mae", "dur_mse", "energy_mse", "pitch_mse", "l_e", "l_f", "l_a", "l_r")
        bad = [n for n, v in zip(names, values) if not np.isfinite(v)]
        raise NumericError(f"non-finite loss component(s): {', '.join(bad)}")
    breakdown = LossBreakdown(*values, lambda_f, lambda_a, lambda_r, float(total.data))
    return total, breakdown


# -- batch assembly -----------------------------------------------------------


def collate(records, stats, dtype=None):
    """Right-pad a list of records into dense arrays with validity masks."""
    dtype = dtype or ad.default_dtype()
    b = len(records)
    n_max = max(r.n_phonemes for r in records)
    t_max = max(r.n_frames for r in records)
    n_mels = records[0].mel.shape[1]
    ids = np.zeros((b, n_max), dtype=np.int64)
    ph_mask = np.zeros((b, n_max), dtype=bool)
    durations = np.zeros((b, n_max), dtype=np.int64)
    log_dur = np.zeros((b, n_max), dtype=dtype)
    pitch_t = np.zeros((b, n_max), dtype=dtype)
    energy_t = np.zeros((b, n_max), dtype=dtype)
    mel = np.zeros((b, t_max, n_mels), dtype=dtype)
    fr_mask = np.zeros((b, t_max), dtype=bool)
    ref_pitch = np.zeros((b, t_max), dtype=dtype)
    ref_energy = np.zeros((b, t_max), dtype=dtype)
    speakers = np.zeros(b, dtype=np.int64)
    for i, r in enumerate(records):
        n, t = r.n_phonemes, r.n_frames
        ids[i, :n] = r.phoneme_ids
        ph_mask[i, :n] = True
        durations[i, :n] = r.durations
        log_dur[i, :n] = np.log(r.durations.astype(np.float64))
        pitch_t[i, :n] = r.phoneme_pitch
        energy_t[i, :n] = r.phoneme_energy
        mel[i, :t] = r.mel
        fr_mask[i, :t] = True
        dense = interpolate_unvoiced(r.pitch_contour())
        ref_pitch[i, :t] = stats.standardize_pitch(dense, r.speaker_id)
        ref_energy[i, :t] = stats.standardize_energy(r.frame_energy, r.speaker_id)
        speakers[i] = r.speaker_id
    return {
        "phoneme_ids": ids, "phoneme_mask": ph_mask, "durations": durations,
        "log_duration_target": log_dur, "pitch_target": pitch_t, "energy_target": energy_t,
        "mel": mel, "frame_mask": fr_mask, "ref_pitch": ref_pitch, "ref_energy": ref_energy,
        "speaker_ids": speakers, "total_frames": t_max,
    }


# -- optimizer ------------------------------------------------------------------


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- the loop ---------------------------------------------------------------------


METRICS_HEADER = ["step", "mel_mse", "mel_mae", "dur_mse", "energy_mse", "pitch_mse",
                  "l_e", "l_f", "l_a", "l_r", "total", "lr", "lambda_a"]


class Trainer:
    """One optimizer over every trainable tensor: core model, prosody
    encoder, speaker embeddings, FiLM scales, and the adversarial classifier.
    During training the reference utterance is the target utterance."""

    def __init__(self, model: ProsodyTransferModel, classifier: SpeakerClassifier,
                 records, stats, cfg: TrainConfig):
        if not records:
            raise ValueError("training corpus is empty")
        self.model = model
        self.classifier = classifier
        self.records = list(records)
        self.stats = stats
        self.cfg = cfg
        self.named = list(model.named_parameters()) + \
            [(f"classifier.{n}", p) for n, p in classifier.named_parameters()]
        self.opt = Adam([p for _, p in self.named], cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.step_idx = 0
        self.initial_l_e = None
        self._diverged_for = 0
        self.history = []

    def _sample_batch(self):
        rng = np.random.Generator(np.random.Philox(
            key=np.array([self.cfg.seed, self.step_idx], dtype=np.uint64)))
        n = len(self.records)
        k = min(self.cfg.batch_size, n)
        idx = rng.choice(n, size=k, replace=n < self.cfg.batch_size)
        return [self.records[i] for i in sorted(idx)]

    def forward_batch(self, batch, lambda_a):
        model = self.model
        pvec = model.encode_reference(
            Tensor(batch["mel"]), Tensor(batch["ref_pitch"]), Tensor(batch["ref_energy"]),
            batch["frame_mask"])
        film = model.condition(pvec, batch["speaker_ids"])
        mel_pred, prosody_pred, sigma = model.core.forward_train(
            batch["phoneme_ids"], batch["durations"], batch["energy_target"],
            batch["pitch_target"], film, batch["phoneme_mask"], batch["frame_mask"],
            batch["total_frames"])
        logits = self.classifier(ad.grad_reverse(pvec, lambda_a))
        l_a = ad.cross_entropy_with_logits(logits, batch["speaker_ids"])
        return mel_pred, prosody_pred, pvec, l_a

    def train_step(self):
        step = self.step_idx
        lr = lr_schedule(step, self.cfg)
        lam_a = lambda_a_schedule(step, self.cfg)
        batch = collate(self._sample_batch(), self.stats)
        self.model.drop_rng.counter = (step + 1) * 1_000_003
        self.opt.zero_grad()
        ad.reset_tape()
        try:
            mel_pred, prosody_pred, pvec, l_a = self.forward_batch(batch, lam_a)
            total, breakdown = compute_loss(
                mel_pred, prosody_pred, batch, self.named, l_a,
                self.cfg.lambda_f, lam_a, self.cfg.lambda_r)
            total.backward()
        finally:
            ad.reset_tape()
        self.opt.step(lr)
        self.step_idx += 1

        if self.initial_l_e is None:
            self.initial_l_e = max(breakdown.l_e, 1e-12)
        if breakdown.l_e > self.cfg.divergence_factor * self.initial_l_e:
            self._diverged_for += 1
            if self._diverged_for >= self.cfg.divergence_patience:
                raise NumericError(
                    f"l_e stayed above {self.cfg.divergence_factor}x its initial value "
                    f"for {self._diverged_for} steps")
        else:
            self._diverged_for = 0
        row = {"step": step, **{f: getattr(breakdown, f) for f in LossBreakdown.FIELDS},
               "lr": lr, "lambda_a": lam_a}
        self.history.append(row)
        return row

    def run(self, metrics_path=None, checkpoint_path=None):
        writer = None
        fh = None
        if metrics_path:
            os.makedirs(os.path.dirname(metrics_path) or ".", exist_ok=True)
            fh = open(metrics_path, "w", newline="", encoding="utf-8")
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
        try:
            for _ in range(self.cfg.total_steps):
                row = self.train_step()
                if writer and (row["step"] % self.cfg.log_every == 0 or
                               row["step"] == self.cfg.total_steps - 1):
                    writer.writerow([_fmt(row[h]) for h in METRICS_HEADER])
                if (checkpoint_path and self.cfg.checkpoint_every and
                        self.step_idx % self.cfg.checkpoint_every == 0):
                    _atomic_checkpoint(checkpoint_path, self.model, self.classifier,
                                       {"step": self.step_idx})
            if checkpoint_path:
                _atomic_checkpoint(checkpoint_path, self.model, self.classifier,
                                   {"step": self.step_idx})
        finally:
            if fh:
                fh.close()
        return self.history


def _fmt(v):
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".10g")


def _atomic_checkpoint(path, model, classifier, meta):
    tmp = path + ".tmp"
    save_checkpoint(tmp, model, classifier, meta)
    os.replace(tmp, path)


def train_model(records, stats, model_cfg: ModelConfig, train_cfg: TrainConfig,
                metrics_path=None, checkpoint_path=None):
    """Convenience wrapper: build, train, and return (model, classifier, history)."""
    model = ProsodyTransferModel(model_cfg, seed=train_cfg.seed)
    classifier = SpeakerClassifier(model_cfg.hidden, model_cfg.n_speakers,
                                   np.random.default_rng(train_cfg.seed + 7919))
    trainer = Trainer(model, classifier, records, stats, train_cfg)
    trainer.run(metrics_path, checkpoint_path)
    return model, classifier, trainer.history
