"""Learnable binarization thresholds for segmentation-based text detection.

A numpy autodiff core, dataset/image-level thresholds with a differentiable
step, the threshold-aware loss, an attention block carrying a threshold
token, a synthetic scene generator, a toy detector, and an IoU@0.5
evaluation harness.
"""

from .tensor import Tensor, backward, no_grad
from .threshold import DEFAULT_K, ThresholdParams, binarize, dataset_threshold, image_threshold, step
from .loss import LossWeights, ath_loss, dice, instance_ath_loss, scel
from .ge import GEConfig, ge_forward, init_ge_params
from .postprocess import TextInstance, extract_instances
from .synth import Corpus, Scene, SceneSpec, generate_corpus, generate_scene, preset, read_corpus, write_corpus
from .detector import DetectorConfig, TrainState, forward, infer, load_checkpoint, predict, save_checkpoint, train
from .evaluation import EvalReport, SweepCurve, evaluate_maps, iou, match_and_score, sweep

__version__ = "0.1.0"
