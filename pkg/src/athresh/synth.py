"""Synthetic text-like scenes and the on-disk corpus format.

A scene is a set of non-overlapping rotated rectangles with extreme aspect
ratios. The ground truth is rendered as an instance label map; the model input
is the union mask degraded as

    input = clip((gaussian_blur(gt, sigma)) ** gamma + noise, 0, 1)

stored as float32. Gamma moves the half-intensity contour, so the best
binarization threshold of the raw input is roughly 0.5 ** gamma and differs
from image to image when gamma varies.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .postprocess import TextInstance, instances_from_labels
from .rng import SplitMix64

log = logging.getLogger(__name__)

CORPUS_FORMAT = "athresh-corpus"
CORPUS_VERSION = 1
MIN_INSTANCE_AREA = 20
MAX_PLACEMENT_ATTEMPTS = 1000
INSTANCE_GAP = 2
ASPECT_TOLERANCE = 0.10


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int] = (128, 128)
    n_instances: int = 3
    aspect_ratio_range: tuple[float, float] = (1.0, 20.0)
    rotation: tuple[float, float] = (-90.0, 90.0)
    blur_sigma: float = 1.0
    contrast_gamma: float = 1.0
    noise_std: float = 0.0

    def validate(self) -> None:
        h, w = self.canvas
        if h < 16 or w < 16:
            raise ValueError(f"canvas {self.canvas} too small (min 16x16)")
        if not 0 <= self.n_instances <= 6:
            raise ValueError(f"n_instances must be in [0, 6], got {self.n_instances}")
        lo, hi = self.aspect_ratio_range
        if not 1.0 <= lo <= hi:
            raise ValueError(f"aspect_ratio_range must satisfy 1 <= lo <= hi, got {self.aspect_ratio_range}")
        if not 0.0 <= self.blur_sigma <= 3.0:
            raise ValueError(f"blur_sigma must be in [0, 3], got {self.blur_sigma}")
        if not 0.4 <= self.contrast_gamma <= 2.5:
            raise ValueError(f"contrast_gamma must be in [0.4, 2.5], got {self.contrast_gamma}")
        if not 0.0 <= self.noise_std <= 0.08:
            raise ValueError(f"noise_std must be in [0, 0.08], got {self.noise_std}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("canvas", "aspect_ratio_range", "rotation"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SceneDistribution:
    """Ranges from which per-scene degradation parameters are drawn.

    Gamma is drawn log-uniformly so that gamma and 1/gamma are equally likely.
    """

    canvas: tuple[int, int] = (128, 128)
    n_instances: tuple[int, int] = (1, 6)
    blur_sigma: tuple[float, float] = (0.5, 3.0)
    contrast_gamma: tuple[float, float] = (0.4, 2.5)
    noise_std: tuple[float, float] = (0.0, 0.08)

    def to_json(self) -> dict:
        return asdict(self)


PRESETS = {
    "easy": dict(blur_sigma=(0.5, 1.0), contrast_gamma=(0.8, 1.25), noise_std=(0.0, 0.02)),
    "fixed": dict(blur_sigma=(0.5, 2.0), contrast_gamma=(2.0, 2.0), noise_std=(0.0, 0.05)),
    "hetero": dict(blur_sigma=(0.5, 2.0), contrast_gamma=(0.4, 2.5), noise_std=(0.0, 0.05)),
}


def preset(name: str, canvas: tuple[int, int] = (128, 128), gamma: float | None = None) -> SceneDistribution:
    if name not in PRESETS:
        raise ValueError(f"unknown scene preset {name!r}; choose from {sorted(PRESETS)}")
    dist = SceneDistribution(canvas=tuple(canvas), **PRESETS[name])
    if gamma is not None:
        dist = replace(dist, contrast_gamma=(gamma, gamma))
    return dist


def sample_spec(seed: int, dist: SceneDistribution) -> SceneSpec:
    rng = SplitMix64(seed).fork("spec")
    lo_n, hi_n = dist.n_instances
    g_lo, g_hi = dist.contrast_gamma
    return SceneSpec(
        seed=seed,
        canvas=tuple(dist.canvas),
        n_instances=lo_n + rng.below(hi_n - lo_n + 1),
        blur_sigma=rng.uniform(*dist.blur_sigma),
        contrast_gamma=math.exp(rng.uniform(math.log(g_lo), math.log(g_hi))),
        noise_std=rng.uniform(*dist.noise_std),
    )


@dataclass
class Scene:
    input_map: np.ndarray
    labels: np.ndarray
    meta: SceneSpec
    gt_instances: list[TextInstance] = field(default_factory=list)

    def __post_init__(self):
        if not self.gt_instances:
            self.gt_instances = instances_from_labels(self.labels)

    @property
    def gt(self) -> np.ndarray:
        return self.labels > 0


# --------------------------------------------------------------------------
# rendering


def rasterize_rect(canvas: tuple[int, int], center, length: float, width: float, angle_deg: float) -> np.ndarray:
    """Pixels whose centres fall inside the rotated rectangle."""
    H, W = canvas
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    ys, xs = np.mgrid[0:H, 0:W]
    dx = xs + 0.5 - center[0]
    dy = ys + 0.5 - center[1]
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def measured_aspect(mask: np.ndarray) -> float:
    """Long/short extent ratio from second moments, n = sqrt(12 var + 1) per axis."""
    ys, xs = np.nonzero(mask)
    cov = np.cov(np.stack([xs, ys]).astype(np.float64), bias=True)
    lam = np.sort(np.linalg.eigvalsh(cov))[::-1]
    ext = np.sqrt(12.0 * np.maximum(lam, 0.0) + 1.0)
    return float(ext[0] / ext[1])


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, kernel truncated at ceil(3 sigma), zero padding."""
    if sigma <= 0:
        return img.astype(np.float64)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = ndimage.convolve1d(img.astype(np.float64), kernel, axis=0, mode="constant")
    return ndimage.convolve1d(out, kernel, axis=1, mode="constant")


def _place(spec: SceneSpec, rng: SplitMix64) -> np.ndarray:
    H, W = spec.canvas
    labels = np.zeros((H, W), dtype=np.uint8)
    blocked = np.zeros((H, W), dtype=bool)
    a_lo, a_hi = spec.aspect_ratio_range
    r_lo, r_hi = spec.rotation
    w_hi = 3.0 + min(H, W) / 16.0
    max_len = 0.8 * min(H, W)
    attempts = 0
    for idx in range(1, spec.n_instances + 1):
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise PlacementError(
                    f"could not place instance {idx}/{spec.n_instances} on {H}x{W} canvas "
                    f"after {MAX_PLACEMENT_ATTEMPTS} attempts (seed {spec.seed})"
                )
            width = rng.uniform(3.0, w_hi)
            aspect = math.exp(rng.uniform(math.log(a_lo), math.log(a_hi)))
            length = min(width * aspect, max_len)
            angle = rng.uniform(r_lo, r_hi)
            th = math.radians(angle)
            ex = abs(length / 2 * math.cos(th)) + abs(width / 2 * math.sin(th))
            ey = abs(length / 2 * math.sin(th)) + abs(width / 2 * math.cos(th))
            if 2 * ex + 2 > W or 2 * ey + 2 > H:
                continue
            cx = rng.uniform(ex + 1, W - ex - 1)
            cy = rng.uniform(ey + 1, H - ey - 1)
            mask = rasterize_rect((H, W), (cx, cy), length, width, angle)
            if mask.sum() < MIN_INSTANCE_AREA or np.any(mask & blocked):
                continue
            ratio = measured_aspect(mask)
            if not a_lo * (1 - ASPECT_TOLERANCE) <= ratio <= a_hi * (1 + ASPECT_TOLERANCE):
                continue
            labels[mask] = idx
            blocked |= ndimage.binary_dilation(mask, iterations=INSTANCE_GAP, structure=np.ones((3, 3), bool))
            break
    return labels


def generate_scene(spec: SceneSpec) -> Scene:
    spec.validate()
    root = SplitMix64(spec.seed)
    labels = _place(spec, root.fork("geometry"))
    gt = (labels > 0).astype(np.float64)
    img = gaussian_blur(gt, spec.blur_sigma) ** spec.contrast_gamma
    if spec.noise_std > 0:
        img = img + spec.noise_std * root.fork("noise").normal_array(gt.size).reshape(gt.shape)
    input_map = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Scene(input_map=input_map, labels=labels, meta=spec)


# --------------------------------------------------------------------------
# corpus


def split_sizes(n: int) -> tuple[int, int, int]:
    n_val = int(0.15 * n)
    n_test = int(0.15 * n)
    return n - n_val - n_test, n_val, n_test


@dataclass
class Corpus:
    scenes: list[Scene]
    distribution: dict = field(default_factory=dict)

    @property
    def canvas(self) -> tuple[int, int]:
        return tuple(self.scenes[0].input_map.shape)

    def split(self, name: str) -> list[Scene]:
        n_train, n_val, _ = split_sizes(len(self.scenes))
        ordered = sorted(self.scenes, key=lambda s: s.meta.seed)
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val),
                  "test": (n_train + n_val, len(ordered)), "all": (0, len(ordered))}
        if name not in bounds:
            raise ValueError(f"unknown split {name!r}")
        lo, hi = bounds[name]
        return ordered[lo:hi]

    def save(self, out_dir) -> None:
        write_corpus(out_dir, self)


def generate_corpus(n: int, base_seed: int, dist: SceneDistribution, out_dir=None, threads: int = 1) -> Corpus:
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    specs = [sample_spec(base_seed + i, dist) for i in range(n)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = list(pool.map(generate_scene, specs))
    else:
        scenes = [generate_scene(s) for s in specs]
    corpus = Corpus(scenes=scenes, distribution=dist.to_json())
    if out_dir is not None:
        write_corpus(out_dir, corpus)
    return corpus


def write_corpus(out_dir, corpus: Corpus) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        with open(out / "data.bin", "wb") as fh:
            for scene in corpus.scenes:
                img = np.ascontiguousarray(scene.input_map, dtype="<f4").tobytes()
                lab = np.ascontiguousarray(scene.labels, dtype=np.uint8).tobytes()
                fh.write(img)
                fh.write(lab)
                entries.append({
                    "spec": scene.meta.to_json(),
                    "input_offset": offset,
                    "input_length": len(img),
                    "labels_offset": offset + len(img),
                    "labels_length": len(lab),
                    "n_instances": len(scene.gt_instances),
                })
                offset += len(img) + len(lab)
        n_train, n_val, n_test = split_sizes(len(corpus.scenes))
        seeds = sorted(s.meta.seed for s in corpus.scenes)
        manifest = {
            "format": CORPUS_FORMAT,
            "version": CORPUS_VERSION,
            "canvas": list(corpus.canvas),
            "distribution": corpus.distribution,
            "splits": {
                "train": seeds[:n_train],
                "val": seeds[n_train:n_train + n_val],
                "test": seeds[n_train + n_val:],
            },
            "scenes": entries,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing corpus to {out}: {exc}") from exc


def read_corpus(path) -> Corpus:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        blob = (root / "data.bin").read_bytes()
    except OSError as exc:
        raise OSError(f"failed reading corpus at {root}: {exc}") from exc
    if manifest.get("format") != CORPUS_FORMAT:
        raise ValueError(f"{root / 'manifest.json'} is not an {CORPUS_FORMAT} manifest")
    H, W = manifest["canvas"]
    scenes = []
    for entry in manifest["scenes"]:
        spec = SceneSpec.from_json(entry["spec"])
        img = np.frombuffer(blob, dtype="<f4", count=H * W, offset=entry["input_offset"]).reshape(H, W)
        lab = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=entry["labels_offset"]).reshape(H, W)
        scenes.append(Scene(input_map=img.astype(np.float32), labels=lab.copy(), meta=spec))
    return Corpus(scenes=scenes, distribution=manifest.get("distribution", {}))
