"""Gradient oracles used by both the CLI grad-check command and the
acceptance suite: per-primitive finite-difference checks and the full
four-term objective on a tiny model, all in 64-bit mode.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import corpus, nn
from . import model as model_mod
from . import training as training_mod
from .autodiff import Tensor

# Check-time loss weights: every term contributes a numerically visible
# gradient (with the production lambda_r of 1e-6 a weight's decay gradient
# sits at the 1e-8 denominator floor of the relative-error formula, where
# double-precision central differences are pure noise).
CHECK_LAMBDAS = {"lambda_f": 0.1, "lambda_a": 0.05, "lambda_r": 0.01}

TINY = {"hidden": 8, "blocks": 1, "heads": 2, "n_mels": 8, "n_phonemes": 3,
        "frames": 6, "n_speakers": 3}


def tiny_fixture(seed=0):
    """Tiny model + single-record batch (hidden 8, 1+1 blocks, N=3, T=6, S=3)."""
    with ad.use_dtype("float64"):
        spec = corpus.SyntheticSpec(
            n_speakers=TINY["n_speakers"], n_styles=2, utterances_per_pair=2, seed=seed,
            min_phonemes=TINY["n_phonemes"], max_phonemes=TINY["n_phonemes"],
            base_duration=2.0, n_mels=TINY["n_mels"])
        records, _, stats = corpus.generate_synthetic_corpus(spec)
        cfg = model_mod.ModelConfig(
            hidden=TINY["hidden"], encoder_blocks=TINY["blocks"], decoder_blocks=TINY["blocks"],
            heads=TINY["heads"], n_mels=TINY["n_mels"], phoneme_inventory=spec.phoneme_inventory,
            n_speakers=TINY["n_speakers"], dropout=0.0,
            prosody_conv_channels=TINY["hidden"], prosody_blocks=1)
        model = model_mod.ProsodyTransferModel(cfg, seed=seed)
        classifier = training_mod.SpeakerClassifier(
            cfg.hidden, cfg.n_speakers, np.random.default_rng(seed + 7919))
        model.eval()
        rec = next(r for r in records if int(r.durations.sum()) == TINY["frames"])
        batch = training_mod.collate([rec], stats)
    return model, classifier, batch


def full_loss_gradcheck(seed=0, epsilon=1e-5):
    """Finite-difference the literal four-term objective (the adversarial
    term entering as written, minus lambda_a times the cross-entropy) with
    respect to every parameter of model and classifier."""
    model, classifier, batch = tiny_fixture(seed)
    named = list(model.named_parameters()) + \
        [("classifier." + n, p) for n, p in classifier.named_parameters()]
    params = [p for _, p in named]

    def loss():
        with ad.use_dtype("float64"):
            pvec = model.encode_reference(
                Tensor(batch["mel"]), Tensor(batch["ref_pitch"]), Tensor(batch["ref_energy"]),
                batch["frame_mask"])
            film = model.condition(pvec, batch["speaker_ids"])
            mel_pred, prosody_pred, _ = model.core.forward_train(
                batch["phoneme_ids"], batch["durations"], batch["energy_target"],
                batch["pitch_target"], film, batch["phoneme_mask"], batch["frame_mask"],
                batch["total_frames"])
            l_a = ad.cross_entropy_with_logits(classifier(pvec), batch["speaker_ids"])
            total, _ = training_mod.compute_loss(
                mel_pred, prosody_pred, batch, named, l_a,
                CHECK_LAMBDAS["lambda_f"], CHECK_LAMBDAS["lambda_a"], CHECK_LAMBDAS["lambda_r"],
                literal_eq1=True)
        return total

    return ad.finite_diff_check(loss, params, epsilon)


def primitive_gradchecks(n_seeds=20, epsilon=1e-5):
    """Per-primitive finite-difference checks on randomized small shapes.

    Returns the worst relative error across primitives and seeds.
    """
    worst = 0.0
    with ad.use_dtype("float64"):
        for seed in range(n_seeds):
            rng = np.random.default_rng(1000 + seed)
            worst = max(worst, _one_primitive_round(rng, epsilon))
    return worst


def _one_primitive_round(rng, epsilon):
    worst = 0.0

    def chk(f, params):
        nonlocal worst
        worst = max(worst, ad.finite_diff_check(f, params, epsilon))

    x = nn.Parameter(rng.normal(size=(4, 5)))
    y = nn.Parameter(rng.normal(size=(4, 5)) + 3.0)
    chk(lambda: ad.reduce_sum(ad.mul(x, y) + x / y - ad.exp(x * 0.3) + ad.log(y)), [x, y])
    chk(lambda: ad.reduce_sum(ad.softplus(x) ** 2.0), [x])
    chk(lambda: ad.reduce_sum(ad.relu(x + 0.05)), [x])
    chk(lambda: ad.reduce_mean(ad.softmax(x, axis=-1) * y), [x, y])

    w = nn.Parameter(rng.normal(size=(5, 3)))
    chk(lambda: ad.reduce_sum(ad.matmul(x, w) ** 2.0), [x, w])

    conv = nn.Conv1dSame(2, 3, rng)
    xc = nn.Parameter(rng.normal(size=(6, 2)))
    chk(lambda: ad.reduce_sum(conv(xc) ** 2.0), [xc, conv.kernel, conv.bias])

    ln = nn.LayerNorm(5)
    chk(lambda: ad.reduce_sum(nn.layer_norm(x, ln.gain, ln.bias) ** 2.0), [x, ln.gain, ln.bias])

    att = nn.MultiHeadSelfAttention(4, 2, rng)
    xa = nn.Parameter(rng.normal(size=(5, 4)))
    chk(lambda: ad.reduce_sum(att(xa) ** 2.0), [xa] + att.parameters())

    table = nn.Parameter(rng.normal(size=(7, 4)))
    ids = rng.integers(0, 7, size=6)
    chk(lambda: ad.reduce_sum(table[ids] ** 2.0), [table])

    logits = nn.Parameter(rng.normal(size=(4, 5)))
    targets = rng.integers(0, 5, size=4)
    chk(lambda: ad.cross_entropy_with_logits(logits, targets), [logits])

    seq = nn.Parameter(rng.normal(size=(6, 4)))
    chk(lambda: ad.reduce_sum(ad.temporal_mean(seq) ** 2.0), [seq])
    chk(lambda: ad.mse(seq, np.ones((6, 4))) + ad.mae(seq, np.zeros((6, 4))), [seq])

    h = nn.Parameter(rng.normal(size=(3, 4)))
    sig = nn.Parameter(rng.uniform(0.4, 1.5, size=3))
    d = rng.integers(1, 4, size=3)

    def upsample_loss():
        out, _ = model_mod.gaussian_upsample(h, d, sig)
        return ad.reduce_sum(out ** 2.0)

    chk(upsample_loss, [h, sig])

    gr = nn.Parameter(rng.normal(size=(4,)))
    # grad_reverse is excluded here: it intentionally decouples analytic and
    # numeric gradients. Its contract is verified directly in the tests.
    chk(lambda: ad.reduce_sum(ad.maximum(gr, -0.2) * 2.0), [gr])
    return worst
