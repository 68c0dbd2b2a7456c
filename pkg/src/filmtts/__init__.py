"""FiLM-conditioned non-autoregressive acoustic model for cross-speaker
prosody transfer, with adversarial speaker disentanglement, a self-contained
autodiff engine, and the feature/evaluation pipeline around it."""

from .autodiff import Tensor, grad_reverse, finite_diff_check, use_dtype, no_grad
from .dsp import DspConfig, Waveform, stft_mel, estimate_pitch, frame_energy, SpeakerStats
from .corpus import (SyntheticSpec, UtteranceRecord, SpeakerTable,
                     generate_synthetic_corpus, save_record, load_record,
                     save_corpus, load_corpus, split_corpus, ingest_real)
from .model import (ModelConfig, ProsodyTransferModel, gaussian_upsample,
                    save_checkpoint, load_checkpoint)
from .training import TrainConfig, Trainer, SpeakerClassifier, train_model, lr_schedule, lambda_a_schedule
from .evaluation import pearson, align_contours, f0_pcc, make_low_anchor

__version__ = "0.1.0"

__all__ = [
    "Tensor", "grad_reverse", "finite_diff_check", "use_dtype", "no_grad",
    "DspConfig", "Waveform", "stft_mel", "estimate_pitch", "frame_energy", "SpeakerStats",
    "SyntheticSpec", "UtteranceRecord", "SpeakerTable", "generate_synthetic_corpus",
    "save_record", "load_record", "save_corpus", "load_corpus", "split_corpus", "ingest_real",
    "ModelConfig", "ProsodyTransferModel", "gaussian_upsample", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "Trainer", "SpeakerClassifier", "train_model", "lr_schedule", "lambda_a_schedule",
    "pearson", "align_contours", "f0_pcc", "make_low_anchor",
]
