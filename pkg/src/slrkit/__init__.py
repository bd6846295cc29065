"""slrkit: similarity-based label reuse for semi-supervised segmentation of
temporally evolving image corpora."""

__version__ = "0.1.0"

from .corpus import (Corpus, ImageRecord, LabelMask, load_manifest,
                     neighboring_days, save_manifest, split_counts)
from .errors import (FeatureError, ManifestError, PairingError, PcaError,
                     SlrkitError, TrainingError, ValidationError)
from .features import (FeatureVector, PcaModel, compute_descriptor,
                       cosine_similarity, fit_pca, load_features, project,
                       save_features)
from .losses import (TrainClock, cross_entropy, eta, lambda_weight, pair_loss,
                     supervised_loss, total_loss)
from .metrics import ConfusionMatrix, accumulate, emit_report, mask_iou, metrics
from .model import ToyNet
from .pairing import (MatchState, Pair, PairingConfig, PairSet, build_pairs,
                      compare, evaluate_pairs, load_pairs, pair_iou_histogram,
                      random_pairs, save_pairs)
from .synth import Oracle, SynthConfig, generate, load_oracle, oracle_lookup
from .trainer import (GradCheckReport, OptimizerState, TrainConfig, TrainResult,
                      grad_check, load_checkpoint, poly_lr, sgd_step, train)
