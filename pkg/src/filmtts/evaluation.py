"""Objective evaluation: pitch-contour correlation for prosody transfer,
low-anchor construction, and the target-speaker classification protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .corpus import recover_pitch_from_mel
from .dsp import PitchContour
from .model import ProsodyTransferModel
from .prosody import ProsodyEncoder, reference_inputs
from .training import Adam, SpeakerClassifier, collate


def pearson(x, y):
    """Product-moment correlation; constant inputs are an error, not NaN."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson expects two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson is undefined for a constant sequence")
    return float((xc * yc).sum() / (sx * sy))


def align_contours(ref: PitchContour, gen: PitchContour):
    """Drop unvoiced frames from each contour, then linearly resample both
    voiced-only sequences to the longer one's length on a shared [0, 1] axis."""
    a = ref.log_f0[ref.voiced]
    b = gen.log_f0[gen.voiced]
    if a.size < 2 or b.size < 2:
        raise ValueError("align_contours needs at least two voiced frames per side")
    m = max(a.size, b.size)
    target = np.linspace(0.0, 1.0, m)

    def resample(v):
        return np.interp(target, np.linspace(0.0, 1.0, v.size), v)

    return resample(a), resample(b)


def f0_pcc(ref: PitchContour, gen: PitchContour):
    a, b = align_contours(ref, gen)
    return pearson(a, b)


def make_low_anchor(record, seed):
    """Override set for a robotic-sounding anchor: the record's durations in
    a seeded random permutation, and a pitch curve flattened to the
    utterance's voiced mean (standardized domain)."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x10c], dtype=np.uint64)))
    perm = rng.permutation(record.n_phonemes)
    durations = record.durations[perm]
    weights = record.durations.astype(np.float64)
    flat = float(np.average(record.phoneme_pitch.astype(np.float64), weights=weights))
    pitch = np.full(record.n_phonemes, flat)
    return {"durations": durations, "pitch": pitch}


@dataclass
class TransferTask:
    reference_id: str
    target_text_id: str
    phoneme_ids: np.ndarray
    target_speaker: int
    reference_speaker: int
    reference_seen: bool = True


def build_transfer_tasks(references, text_pool, n_speakers, seed, max_tasks=None):
    """Inter-text cross-speaker tasks: for each reference pick a text line and
    a target speaker that both differ from the reference's."""
    tasks = []
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x7a5c], dtype=np.uint64)))
    for ref in references:
        others = [r for r in text_pool if r.utterance_id != ref.utterance_id and
                  not np.array_equal(r.phoneme_ids, ref.phoneme_ids)]
        if not others:
            continue
        donor = others[int(rng.integers(len(others)))]
        choices = [s for s in range(n_speakers) if s != ref.speaker_id]
        if not choices:
            raise ValueError("cross-speaker tasks need at least two speakers")
        target = int(choices[int(rng.integers(len(choices)))])
        tasks.append(TransferTask(
            reference_id=ref.utterance_id,
            target_text_id=donor.utterance_id,
            phoneme_ids=donor.phoneme_ids.copy(),
            target_speaker=target,
            reference_speaker=int(ref.speaker_id),
        ))
        if max_tasks and len(tasks) >= max_tasks:
            break
    if not tasks:
        raise ValueError("no inter-text cross-speaker tasks could be built")
    return tasks


def run_transfer(model: ProsodyTransferModel, task: TransferTask, reference_record, stats,
                 overrides=None):
    mel_ref, pitch_ref, energy_ref = reference_inputs(reference_record, stats)
    mel, info = model.infer(task.phoneme_ids, mel_ref, pitch_ref, energy_ref,
                            task.target_speaker, overrides)
    return mel, info


def evaluate_pcc(model, tasks, records_by_id, stats, pitch_recovery=recover_pitch_from_mel,
                 shuffled_baseline=True):
    """Mean F0 PCC of generated transfers against their true references,
    plus a shuffled-reference baseline over the same generated contours."""
    per_task = []
    gen_contours = []
    refs = []
    for task in tasks:
        ref = records_by_id[task.reference_id]
        mel, _ = run_transfer(model, task, ref, stats)
        gen = pitch_recovery(mel)
        refs.append(ref)
        gen_contours.append(gen)
        try:
            r = f0_pcc(ref.pitch_contour(), gen)
        except ValueError:
            r = None
        per_task.append({
            "reference_id": task.reference_id,
            "target_text_id": task.target_text_id,
            "target_speaker": task.target_speaker,
            "r": r,
        })
    rs = np.array([e["r"] for e in per_task if e["r"] is not None])
    if rs.size == 0:
        raise ValueError("no task produced a measurable pitch contour")
    result = {
        "tasks": per_task,
        "mean_r": float(rs.mean()),
        "n": int(rs.size),
        "ci95": _ci95_mean(rs),
    }
    if shuffled_baseline and len(tasks) >= 2:
        shuffled = []
        for i, gen in enumerate(gen_contours):
            ref = refs[(i + 1) % len(refs)]
            try:
                shuffled.append(f0_pcc(ref.pitch_contour(), gen))
            except ValueError:
                continue
        if shuffled:
            result["shuffled_mean_r"] = float(np.mean(shuffled))
    return result


def _ci95_mean(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return [float(v.mean()), float(v.mean())]
    half = 1.96 * float(v.std(ddof=1)) / float(np.sqrt(v.size))
    return [float(v.mean() - half), float(v.mean() + half)]


# -- target-speaker classification protocol ------------------------------------------


class EvalSpeakerClassifier(nn.Module):
    """Spectrogram-only prosody encoder feeding the three-layer classifier;
    trained on ground-truth mels, used to judge generated transfers."""

    def __init__(self, n_mels, n_speakers, hidden=64, conv_channels=64, blocks=1, heads=4, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        drop_rng = ad.CounterRNG(seed + 11)
        self.encoder = ProsodyEncoder(n_mels, hidden, conv_channels, blocks, heads, 0.0, rng, drop_rng)
        self.head = SpeakerClassifier(hidden, n_speakers, rng)

    def forward(self, mel, mask=None):
        vec = self.encoder(mel, mask=mask, mode="spectrogram_only")
        return self.head(vec)

    def classify(self, mel):
        with ad.no_grad():
            logits = self.forward(Tensor(np.asarray(mel, dtype=ad.default_dtype())))
        return int(np.argmax(logits.data))

    def accuracy(self, records):
        correct = 0
        for r in records:
            correct += self.classify(r.mel) == r.speaker_id
        return correct / len(records)


def train_eval_speaker_classifier(train_records, test_records, n_speakers, n_mels,
                                  seed=0, max_steps=4000, target_accuracy=0.99,
                                  batch_size=16, lr=5e-4, check_every=100):
    """Fit the ground-truth speaker classifier; error out if it cannot reach
    the required held-out accuracy."""
    clf = EvalSpeakerClassifier(n_mels, n_speakers, seed=seed)
    clf.train()
    opt = Adam([p for _, p in clf.named_parameters()])
    for step in range(max_steps):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed + 31, step], dtype=np.uint64)))
        idx = rng.choice(len(train_records), size=min(batch_size, len(train_records)),
                         replace=len(train_records) < batch_size)
        batch = [train_records[i] for i in sorted(idx)]
        t_max = max(r.n_frames for r in batch)
        mel = np.zeros((len(batch), t_max, n_mels), dtype=ad.default_dtype())
        mask = np.zeros((len(batch), t_max), dtype=bool)
        labels = np.zeros(len(batch), dtype=np.int64)
        for i, r in enumerate(batch):
            mel[i, :r.n_frames] = r.mel
            mask[i, :r.n_frames] = True
            labels[i] = r.speaker_id
        opt.zero_grad()
        ad.reset_tape()
        try:
            logits = clf(Tensor(mel), mask)
            loss = ad.cross_entropy_with_logits(logits, labels)
            loss.backward()
        finally:
            ad.reset_tape()
        opt.step(lr)
        if (step + 1) % check_every == 0:
            clf.eval()
            acc = clf.accuracy(test_records)
            clf.train()
            if acc >= target_accuracy:
                clf.eval()
                return clf, acc
    clf.eval()
    acc = clf.accuracy(test_records)
    if acc >= target_accuracy:
        return clf, acc
    raise ValueError(
        f"ground-truth speaker classifier reached only {acc:.1%} held-out accuracy "
        f"(needs >= {target_accuracy:.0%})")


def eval_speaker_accuracy(model, tasks, records_by_id, stats, classifier: EvalSpeakerClassifier):
    """Fraction of generated inter-text cross-speaker mels classified as the
    intended target speaker."""
    per_task = []
    hits = 0
    for task in tasks:
        ref = records_by_id[task.reference_id]
        mel, _ = run_transfer(model, task, ref, stats)
        pred = classifier.classify(mel)
        hit = pred == task.target_speaker
        hits += hit
        per_task.append({
            "reference_id": task.reference_id,
            "target_speaker": task.target_speaker,
            "classified_speaker": pred,
            "hit": bool(hit),
        })
    n = len(tasks)
    p = hits / n
    half = 1.96 * float(np.sqrt(max(p * (1 - p), 1e-12) / n))
    return {
        "tasks": per_task,
        "accuracy": p,
        "n": n,
        "ci95": [max(0.0, p - half), min(1.0, p + half)],
    }


def write_report(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
