"""Desk-scale iterative masked-prediction pretraining for speech.

Synthetic corpus, MFCC features, streaming k-means pseudo-labels, a numpy
transformer encoder trained by masked prediction, iteration schedulers,
layerwise PWCCA analysis and a CTC probe.
"""

from .analysis import LinearProbe, SimilarityReport, layerwise_report, linear_probe, pool_words, pwcca
from .clustering import Codebook, StreamingKMeans, assign, dead_cluster_repair, init_codebook, partial_fit
from .corpus import CorpusConfig, Lexicon, PhoneInventory, Utterance, build_corpus, generate_corpus
from .encoder import EncoderConfig, MaskSpec, backward, extract_embeddings, forward, init_params, sample_mask
from .errors import (ConfigError, DivergenceError, EmptyFeatureError, HubertLabError, IngestionError,
                     ShapeError)
from .features import MFCC, FeatureSequence, MfccConfig, frame_labels, mfcc
from .probe_asr import (ErrorRateReport, FinetuneConfig, ctc_loss_and_grad, edit_distance,
                        finetune_and_score, greedy_decode)
from .scheduler import IterationPlan, IterationSpec, make_plan, run_plan
from .training import MaskedPredictionPretrainer, TrainConfig, load_checkpoint, pretrain_iteration, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Codebook", "ConfigError", "CorpusConfig", "DivergenceError", "EmptyFeatureError", "EncoderConfig",
    "ErrorRateReport", "FeatureSequence", "FinetuneConfig", "HubertLabError", "IngestionError",
    "IterationPlan", "IterationSpec", "Lexicon", "LinearProbe", "MFCC", "MaskSpec",
    "MaskedPredictionPretrainer", "MfccConfig", "PhoneInventory", "ShapeError", "SimilarityReport",
    "StreamingKMeans", "TrainConfig", "Utterance", "assign", "backward", "build_corpus",
    "ctc_loss_and_grad", "dead_cluster_repair", "edit_distance", "extract_embeddings",
    "finetune_and_score", "forward", "frame_labels", "generate_corpus", "greedy_decode", "init_codebook",
    "init_params", "layerwise_report", "linear_probe", "load_checkpoint", "make_plan", "mfcc",
    "partial_fit", "pool_words", "pretrain_iteration", "pwcca", "run_plan", "sample_mask",
    "save_checkpoint",
]
