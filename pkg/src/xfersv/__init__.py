"""Teacher-student transfer learning for embedding-based verification
under enrollment/test domain mismatch.

Core pieces: five transfer losses with analytical gradients (losses), a
small trainable embedding extractor with explicit backprop (model), a
synthetic near/far-field parallel corpus (data), the frozen-teacher
training pipeline (train), verification metrics (evaluate), and the
`xfersv` CLI wiring it all together (cli).
"""

from .config import ExperimentConfig, load_config
from .data import CorpusConfig, ParallelPair, Utterance, synth_corpus
from .evaluate import ScoreSet, compare_report, eer, min_dcf, score_trials
from .losses import (
    LabeledBatch,
    LossOutput,
    LossWeights,
    ce_loss,
    combined_loss,
    contrastive_ts_loss,
    feat_cosine_loss,
    feat_mmd_loss,
    feat_mse_loss,
    grad_check,
    instance_pairwise_loss,
    kl_ts_loss,
)
from .model import ExtractorConfig, ModelParams, backward, forward, init_params
from .numerics import Rng, derive_seed
from .train import TrainConfig, train_baseline, train_student, train_teacher

__version__ = "0.1.0"

__all__ = [
    "CorpusConfig", "ExperimentConfig", "ExtractorConfig", "LabeledBatch",
    "LossOutput", "LossWeights", "ModelParams", "ParallelPair", "Rng",
    "ScoreSet", "TrainConfig", "Utterance", "backward", "ce_loss",
    "combined_loss", "compare_report", "contrastive_ts_loss", "derive_seed",
    "eer", "feat_cosine_loss", "feat_mmd_loss", "feat_mse_loss", "forward",
    "grad_check", "init_params", "instance_pairwise_loss", "kl_ts_loss",
    "load_config", "min_dcf", "score_trials", "synth_corpus",
    "train_baseline", "train_student", "train_teacher",
]
