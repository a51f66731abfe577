"""Experiment runners shared by scripts/ and the acceptance tests.

Three experiments:

* threshold learning: does the learned dataset threshold land on the best
  fixed threshold found by brute-force sweep?
* threshold sweep: fixed thresholds on a 0.1 grid against per-image learned
  thresholds, on a corpus with per-image contrast changes.
* ablation: baseline (fixed 0.5), DTH only, DTH + ITH, DTH + ITH + GE.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import detector as det
from .evaluation import EvalReport, SweepCurve, evaluate_maps, sweep
from .synth import Corpus, generate_corpus, preset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "hetero"
    gamma: float | None = None
    n_scenes: int = 500
    corpus_seed: int = 1000
    canvas: tuple[int, int] = (64, 64)
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    instance_weight: float = 0.0
    min_area: int = 20
    split: str = "val"

    def detector_config(self, variant: str) -> det.DetectorConfig:
        return det.DetectorConfig(canvas=tuple(self.canvas), variant=variant, epochs=self.epochs,
                                  batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                                  instance_weight=self.instance_weight)

    def to_json(self) -> dict:
        return asdict(self)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    return generate_corpus(cfg.n_scenes, cfg.corpus_seed, preset(cfg.preset, tuple(cfg.canvas), cfg.gamma))


@dataclass
class TrainedVariant:
    variant: str
    state: det.TrainState
    maps: np.ndarray
    t_D: float
    ith: np.ndarray
    seconds: float


def train_variant(corpus: Corpus, cfg: ExperimentConfig, variant: str) -> TrainedVariant:
    start = time.perf_counter()
    state = det.train(corpus, cfg.detector_config(variant)).final
    maps, t_D, ith = det.predict(state, corpus.split(cfg.split))
    seconds = time.perf_counter() - start
    log.info("%s trained in %.1fs, t_D %.4f", variant, seconds, t_D)
    return TrainedVariant(variant, state, maps, t_D, ith, seconds)


def _gts(corpus: Corpus, cfg: ExperimentConfig):
    return [s.gt_instances for s in corpus.split(cfg.split)]


@dataclass
class ThresholdLearningResult:
    t_D: float
    oracle_threshold: float
    oracle_f: float
    f_at_t_D: float
    curve: SweepCurve
    history: list[dict]
    seconds: float

    @property
    def gap(self) -> float:
        return abs(self.t_D - self.oracle_threshold)


def threshold_learning(cfg: ExperimentConfig, variant: str = "dth_ith_ge", corpus: Corpus | None = None) -> ThresholdLearningResult:
    start = time.perf_counter()
    corpus = build_corpus(cfg) if corpus is None else corpus
    run = train_variant(corpus, cfg, variant)
    gts = _gts(corpus, cfg)
    curve = sweep(run.maps, gts, run.ith, min_area=cfg.min_area)
    f_at = evaluate_maps(run.maps, gts, run.t_D, cfg.min_area).fmeasure
    return ThresholdLearningResult(run.t_D, curve.oracle_threshold, curve.oracle_f, f_at, curve,
                                   run.state.history, time.perf_counter() - start)


@dataclass
class SweepResult:
    curve: SweepCurve
    ith_mean: float
    ith_std: float
    t_D: float
    run: TrainedVariant

    @property
    def ith_f(self) -> float:
        return self.curve.ith_point[1]


def threshold_sweep(cfg: ExperimentConfig, corpus: Corpus | None = None, run: TrainedVariant | None = None) -> SweepResult:
    corpus = build_corpus(cfg) if corpus is None else corpus
    run = train_variant(corpus, cfg, "dth_ith_ge") if run is None else run
    curve = sweep(run.maps, _gts(corpus, cfg), run.ith, min_area=cfg.min_area)
    return SweepResult(curve, float(run.ith.mean()), float(run.ith.std()), run.t_D, run)


@dataclass
class AblationResult:
    reports: dict[str, EvalReport] = field(default_factory=dict)
    runs: dict[str, TrainedVariant] = field(default_factory=dict)

    def f(self, variant: str) -> float:
        return self.reports[variant].fmeasure

    def inversions(self, tolerance: float = 0.005) -> list[tuple[str, str, float]]:
        """Adjacent pairs where the later variant scores lower by more than ``tolerance``."""
        order = [v for v in det.VARIANTS if v in self.reports]
        out = []
        for a, b in zip(order, order[1:]):
            drop = self.f(a) - self.f(b)
            if drop > tolerance:
                out.append((a, b, drop))
        return out


def ablation(cfg: ExperimentConfig, corpus: Corpus | None = None, runs: dict[str, TrainedVariant] | None = None) -> AblationResult:
    """Train every variant with the same corpus, seed and schedule; score at each variant's own thresholds."""
    corpus = build_corpus(cfg) if corpus is None else corpus
    runs = dict(runs or {})
    result = AblationResult()
    gts = _gts(corpus, cfg)
    for variant in det.VARIANTS:
        run = runs.get(variant) or train_variant(corpus, cfg, variant)
        result.runs[variant] = run
        result.reports[variant] = evaluate_maps(run.maps, gts, run.ith, cfg.min_area)
    return result


def with_changes(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
