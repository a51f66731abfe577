"""Toy segmentation detector trained with the Adaptive Threshold Loss.

    input (B x 1 x H x W)
      -> conv3x3(1->c1) relu                      f1   (H x W)
      -> conv3x3/2(c1->c2) relu                        (H/2)
      -> conv3x3/2(c2->C) relu                    c5   (H/4)
      -> GE block with threshold token            o5, t_out
      -> logits = up4(conv1x1(o5)) + conv3x3(f1)  (bilinear, align_corners=False)
      -> sigmoid                                  prob map

The full-resolution lateral term stands in for the FPN merge; without it a
stride-4 map cannot resolve 3-pixel-wide strokes. Both head convolutions start
at zero, so an untrained model predicts 0.5 everywhere.

Ablation variants switch the threshold machinery:
    baseline     SCEL only, fixed threshold 0.5
    dth          + dataset threshold (both dice terms use t_D)
    dth_ith      + image threshold from mean-pooled coarse features
    dth_ith_ge   + GE block, image threshold from the token embedding
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .ge import GEConfig, ge_forward, init_ge_params
from .loss import LossWeights, ath_loss, instance_ath_loss, scel
from .postprocess import DEFAULT_MIN_AREA, TextInstance, extract_instances
from .rng import SplitMix64
from .tensor import Tensor, conv2d, no_grad, relu, reshape, resize_bilinear, sigmoid, zero_grads
from .threshold import DEFAULT_K, ThresholdParams, binarize, dataset_threshold, image_threshold

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "dth", "dth_ith", "dth_ith_ge")
CHECKPOINT_FORMAT = "athresh-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    canvas: tuple[int, int] = (128, 128)
    channels: tuple[int, int, int] = (8, 16, 16)
    heads: int = 4
    ge_repeats: int = 2
    ffn_ratio: int = 4
    variant: str = "dth_ith_ge"
    alpha: float = 0.5
    beta: float = 0.5
    k: float = DEFAULT_K
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lateral_kernel: int = 3
    instance_weight: float = 0.0
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        H, W = self.canvas
        if H % 4 or W % 4:
            raise ConfigError(f"canvas {self.canvas} must be divisible by 4")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("lr must be > 0, epochs >= 0 and batch_size >= 1")
        if self.k <= 0:
            raise ConfigError(f"k must be positive, got {self.k}")
        LossWeights(self.alpha, self.beta)
        self.ge_config  # validates heads/channels

    @property
    def ge_config(self) -> GEConfig:
        H, W = self.canvas
        return GEConfig(channels=self.channels[2], heads=self.heads, repeats=self.ge_repeats,
                        ffn_ratio=self.ffn_ratio, h=H // 4, w=W // 4)

    @property
    def weights(self) -> LossWeights:
        if self.variant == "baseline":
            return LossWeights(0.0, 0.0)
        return LossWeights(self.alpha, self.beta)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        for key in ("canvas", "channels", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# --------------------------------------------------------------------------
# parameters


def _he_uniform(rng: SplitMix64, shape) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform_array(int(np.prod(shape)), -bound, bound).reshape(shape), requires_grad=True)


def init_params(cfg: DetectorConfig, rng: SplitMix64) -> dict[str, Tensor]:
    c1, c2, C = cfg.channels
    p = {
        "enc1.w": _he_uniform(rng, (c1, 1, 3, 3)),
        "enc1.b": Tensor(np.zeros(c1), requires_grad=True),
        "enc2.w": _he_uniform(rng, (c2, c1, 3, 3)),
        "enc2.b": Tensor(np.zeros(c2), requires_grad=True),
        "enc3.w": _he_uniform(rng, (C, c2, 3, 3)),
        "enc3.b": Tensor(np.zeros(C), requires_grad=True),
    }
    p.update({f"ge.{k}": v for k, v in init_ge_params(cfg.ge_config, rng).items()})
    p["head.w"] = Tensor(np.zeros((1, C, 1, 1)), requires_grad=True)
    p["head.b"] = Tensor(np.zeros(1), requires_grad=True)
    p["lat.w"] = Tensor(np.zeros((1, c1, cfg.lateral_kernel, cfg.lateral_kernel)), requires_grad=True)
    thr = ThresholdParams.init(C, rng, k=cfg.k)
    p.update({f"thr.{k}": v for k, v in thr.named().items()})
    return p


def threshold_params(params: dict[str, Tensor], k: float) -> ThresholdParams:
    return ThresholdParams(params["thr.t_d"], params["thr.t_in"], params["thr.proj_w"], params["thr.proj_b"], k=k)


# --------------------------------------------------------------------------
# forward


def forward(params: dict[str, Tensor], x: np.ndarray, cfg: DetectorConfig):
    """x: B x H x W input maps. Returns (prob B x H x W, t_D scalar, t_I (B,))."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B, H, W = x.shape
    if (H, W) != tuple(cfg.canvas):
        raise ConfigError(f"input canvas {(H, W)} does not match configured {tuple(cfg.canvas)}")
    inp = Tensor(x.reshape(B, 1, H, W))
    f1 = relu(conv2d(inp, params["enc1.w"], params["enc1.b"], padding=1))
    f2 = relu(conv2d(f1, params["enc2.w"], params["enc2.b"], stride=2, padding=1))
    c5 = relu(conv2d(f2, params["enc3.w"], params["enc3.b"], stride=2, padding=1))
    thr = threshold_params(params, cfg.k)
    if cfg.variant == "dth_ith_ge":
        ge = {k[3:]: v for k, v in params.items() if k.startswith("ge.")}
        o5, t_out = ge_forward(c5, thr.t_in, ge, cfg.ge_config)
    else:
        o5 = c5
        t_out = c5.mean(axis=(2, 3))
    low = conv2d(o5, params["head.w"], params["head.b"])
    logits = resize_bilinear(low, (H, W)) + conv2d(f1, params["lat.w"], padding=cfg.lateral_kernel // 2)
    prob = sigmoid(reshape(logits, (B, H, W)))
    if cfg.variant == "baseline":
        t_D = Tensor(0.5)
        t_I = Tensor(np.full(B, 0.5))
    elif cfg.variant == "dth":
        t_D = dataset_threshold(thr)
        t_I = t_D
    else:
        t_D = dataset_threshold(thr)
        t_I = image_threshold(thr, t_out)
    return prob, t_D, t_I


def _per_image(t: Tensor, B: int) -> np.ndarray:
    return np.broadcast_to(t.data, (B,)).astype(np.float64)


def batch_loss(params, x, gt, cfg: DetectorConfig, labels=None) -> Tensor:
    """Full-map loss, plus the mean per-instance crop loss when instance_weight > 0."""
    prob, t_D, t_I = forward(params, x, cfg)
    loss = ath_loss(prob, np.asarray(gt, dtype=np.float64), t_D, t_I, cfg.weights, cfg.k)
    if cfg.instance_weight and labels is not None:
        terms = []
        for b, lab in enumerate(labels):
            masks = [lab == i for i in range(1, int(lab.max()) + 1)]
            if masks:
                t_b = t_I if t_I.ndim == 0 else t_I[b]
                terms.append(instance_ath_loss(prob[b], masks, t_D, t_b, cfg.weights, cfg.k))
        if terms:
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            loss = loss + cfg.instance_weight * total / float(len(terms))
    return loss


# --------------------------------------------------------------------------
# optimizer + state


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainState:
    config: DetectorConfig
    params: dict[str, Tensor]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    rng_state: int = 0

    @classmethod
    def initial(cls, cfg: DetectorConfig) -> "TrainState":
        root = SplitMix64(cfg.seed)
        params = init_params(cfg, root.fork("init"))
        return cls(cfg, params, rng_state=root.fork("shuffle").state)

    def copy(self) -> "TrainState":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return TrainState(self.config, params, copy.deepcopy(self.adam_m), copy.deepcopy(self.adam_v),
                          self.adam_t, self.epoch, copy.deepcopy(self.history), self.rng_state)

    @property
    def dataset_threshold(self) -> float:
        if self.config.variant == "baseline":
            return 0.5
        return float(1.0 / (1.0 + np.exp(-self.params["thr.t_d"].data)))

    def param_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v.data)) for k, v in self.params.items()}


@dataclass
class TrainResult:
    final: TrainState
    best: TrainState


def _stack(scenes):
    x = np.stack([s.input_map for s in scenes]).astype(np.float64)
    y = np.stack([s.gt for s in scenes]).astype(np.float64)
    return x, y, np.stack([s.labels for s in scenes])


def mean_loss(state: TrainState, scenes, batch_size: int = 16, fn=None) -> float:
    """Pixel-weighted mean of ``fn`` (default: the training loss) over scenes."""
    if not scenes:
        return float("nan")
    total = 0.0
    with no_grad():
        for i in range(0, len(scenes), batch_size):
            x, y, lab = _stack(scenes[i:i + batch_size])
            if fn is None:
                v = batch_loss(state.params, x, y, state.config, lab).item()
            else:
                v = fn(state, x, y)
            total += v * len(x)
    return total / len(scenes)


def mean_scel(state: TrainState, scenes, batch_size: int = 16) -> float:
    def fn(st, x, y):
        prob, _, _ = forward(st.params, x, st.config)
        return scel(prob, y).item()

    return mean_loss(state, scenes, batch_size, fn)


def train(corpus, cfg: DetectorConfig, state: TrainState | None = None, on_epoch=None) -> TrainResult:
    """Minimize the Adaptive Threshold Loss on the train split.

    History entry 0 is the untrained model; entries 1..epochs follow each
    pass. The best state is the one with the lowest validation loss.
    """
    train_scenes = corpus.split("train")
    val_scenes = corpus.split("val") or train_scenes
    if not train_scenes:
        raise ConfigError("corpus has an empty train split")
    if tuple(corpus.canvas) != tuple(cfg.canvas):
        raise ConfigError(f"corpus canvas {corpus.canvas} does not match configured {tuple(cfg.canvas)}")
    state = TrainState.initial(cfg) if state is None else state
    if cfg.epochs == 0:
        return TrainResult(state, state)
    opt = Adam(state.params, cfg.lr, cfg.betas, cfg.adam_eps)
    if state.adam_m:
        opt.m, opt.v, opt.t = state.adam_m, state.adam_v, state.adam_t
    X, Y, L = _stack(train_scenes)
    shuffler = SplitMix64(0)
    shuffler.state = state.rng_state

    if not state.history:
        state.history.append(_epoch_record(state, 0, None, val_scenes))
    best = state.copy()
    best_val = state.history[-1]["val_loss"]

    for _ in range(cfg.epochs):
        epoch = state.epoch + 1
        order = list(range(len(X)))
        shuffler.shuffle(order)
        running = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            zero_grads(state.params.values())
            loss = batch_loss(state.params, X[idx], Y[idx], cfg, L[idx])
            value = loss.item()
            if not math.isfinite(value):
                norms = state.param_norms()
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}; parameter norms {norms}")
            loss.backward()
            opt.step()
            running += value * len(idx)
        state.epoch = epoch
        state.rng_state = shuffler.state
        state.adam_m, state.adam_v, state.adam_t = opt.m, opt.v, opt.t
        record = _epoch_record(state, epoch, running / len(X), val_scenes)
        state.history.append(record)
        log.info("epoch %d train %.5f val %.5f t_D %.4f", epoch, record["train_loss"], record["val_loss"], record["t_D"])
        if on_epoch is not None:
            on_epoch(state, record)
        if record["val_loss"] < best_val:
            best_val = record["val_loss"]
            best = state.copy()
    return TrainResult(state, best)


def _epoch_record(state: TrainState, epoch: int, train_loss: float | None, val_scenes) -> dict:
    return {"epoch": epoch, "train_loss": train_loss, "val_loss": mean_loss(state, val_scenes),
            "t_D": state.dataset_threshold}


# --------------------------------------------------------------------------
# inference


def predict(state: TrainState, scenes, batch_size: int = 16):
    """Probability maps (N x H x W), t_D, and per-image t_I (N,)."""
    maps, ith = [], []
    t_D = state.dataset_threshold
    with no_grad():
        for i in range(0, len(scenes), batch_size):
            x = np.stack([np.asarray(s.input_map if hasattr(s, "input_map") else s) for s in scenes[i:i + batch_size]])
            prob, _, t_I = forward(state.params, x, state.config)
            maps.append(prob.data)
            ith.append(_per_image(t_I, len(x)))
    return np.concatenate(maps), t_D, np.concatenate(ith)


def infer(state: TrainState, scene, min_area: int = DEFAULT_MIN_AREA) -> list[TextInstance]:
    """Binarize the predicted map at the image threshold and extract instances."""
    maps, _, ith = predict(state, [scene])
    return extract_instances(binarize(maps[0], ith[0]), maps[0], min_area)


# --------------------------------------------------------------------------
# checkpoint: manifest.json + weights.bin (little-endian float64, named tensors)


def _tensors(state: TrainState):
    for k, p in state.params.items():
        yield k, p.data
    for k in state.adam_m:
        yield f"adam.m.{k}", state.adam_m[k]
        yield f"adam.v.{k}", state.adam_v[k]


def save_checkpoint(path, state: TrainState, extra: dict | None = None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(out / "weights.bin", "wb") as fh:
        for name, arr in _tensors(state):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw)})
            offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_json(),
        "epoch": state.epoch,
        "history": state.history,
        "adam_t": state.adam_t,
        "rng_state": state.rng_state,
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_checkpoint(path) -> TrainState:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{root / 'manifest.json'} is not an {CHECKPOINT_FORMAT} manifest")
    blob = (root / "weights.bin").read_bytes()
    cfg = DetectorConfig.from_json(manifest["config"])
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if not k.startswith("adam.")}
    adam_m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")}
    adam_v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")}
    return TrainState(cfg, params, adam_m, adam_v, manifest["adam_t"], manifest["epoch"],
                      manifest["history"], manifest["rng_state"])


def with_overrides(cfg: DetectorConfig, **kw) -> DetectorConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
