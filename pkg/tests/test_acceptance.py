"""End-to-end acceptance runs. Each test prints one pass/fail line via the
``criterion`` fixture; the terminal summary collects them."""

import json
import math
import time

import numpy as np
import pytest

from athresh import detector as det
from athresh.cli import main
from athresh.evaluation import greedy_matches
from athresh.experiments import ExperimentConfig, ablation, build_corpus, threshold_learning, threshold_sweep, train_variant
from athresh.gradsuite import run_suite
from athresh.loss import LossWeights, ath_loss, dice, scel
from athresh.synth import SceneSpec, generate_scene, read_corpus
from athresh.threshold import binarize, step
from oracles import exhaustive_tp, random_fixture

pytestmark = pytest.mark.slow

HETERO = ExperimentConfig(preset="hetero", n_scenes=500, epochs=20)
FIXED = ExperimentConfig(preset="fixed", gamma=2.0, n_scenes=500, epochs=20)


def test_gradient_suite(criterion):
    start = time.perf_counter()
    results = run_suite(100)
    elapsed = time.perf_counter() - start
    bad = [r.name for r in results if not r.ok]
    worst = max(results, key=lambda r: r.max_rel_error / r.tol)
    ok = not bad and elapsed <= 120 and all(r.trials >= 100 for r in results)
    criterion(1, ok, f"{len(results)} ops, worst {worst.name} {worst.max_rel_error:.2e}/{worst.tol:.0e}, "
                     f"failing {bad}, {elapsed:.0f}s")
    assert ok


def test_loss_identities(criterion):
    rng = np.random.default_rng(0)
    gt = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    half = scel(np.full((16, 16), 0.5), gt).item()
    x = np.zeros((4, 4))
    x[:2] = 1.0
    y = np.zeros((4, 4))
    y[1:3] = 1.0
    m = rng.uniform(0.01, 0.99, size=(16, 16))
    zero = LossWeights(alpha=0.0, beta=0.0)
    plain = scel(m, gt).item()
    ath = ath_loss(m, gt, 0.4, 0.6, zero).item()
    checks = {
        "scel(0.5)=ln2": abs(half - math.log(2)) <= 1e-9,
        "dice(x,x)=0": dice(x, x).item() == 0.0,
        "dice(half)=0.5": dice(x, y).item() == 0.5,
        "ath(0,0)==scel": np.float64(ath).tobytes() == np.float64(plain).tobytes(),
    }
    ok = all(checks.values())
    criterion(2, ok, ", ".join(f"{k}:{'ok' if v else 'no'}" for k, v in checks.items()))
    assert ok


def test_step_binarize_consistency(criterion):
    v = step(0.6, 0.5, 50).item()
    rng = np.random.default_rng(1)
    m = rng.uniform(size=(64, 64))
    t = 0.5
    keep = np.abs(m - t) > 0.05
    hard = binarize(m, t)
    gaps = [float(np.abs(step(m, t, k).data - hard)[keep].mean()) for k in (10, 50, 200)]
    ok = abs(v - 0.993307) <= 1e-6 and gaps[0] > gaps[1] > gaps[2]
    criterion(3, ok, f"step(0.6,0.5,50)={v:.7f}, mean gaps k=10/50/200: " + "/".join(f"{g:.2e}" for g in gaps))
    assert ok


def test_threshold_learning(criterion):
    res = threshold_learning(FIXED, variant="dth")
    ok = res.gap <= 0.05 and res.seconds <= 15 * 60
    criterion(4, ok, f"learned t_D {res.t_D:.3f}, oracle {res.oracle_threshold:.2f} (F {res.oracle_f:.4f}), "
                     f"F at t_D {res.f_at_t_D:.4f}, gap {res.gap:.3f}, {res.seconds:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def hetero_runs():
    corpus = build_corpus(HETERO)
    runs = {v: train_variant(corpus, HETERO, v) for v in det.VARIANTS}
    return corpus, runs


def test_image_threshold_vs_fixed_sweep(criterion, hetero_runs):
    corpus, runs = hetero_runs
    res = threshold_sweep(HETERO, corpus, runs["dth_ith_ge"])
    best, median = res.curve.best_coarse_f, res.curve.median_coarse_f
    ok = res.ith_f >= best - 0.01 and res.ith_f > median
    criterion(5, ok, f"ITH F {res.ith_f:.4f} (t_I mean {res.ith_mean:.3f} std {res.ith_std:.3f}), "
                     f"best coarse {best:.4f}, median coarse {median:.4f}")
    assert ok


def test_ablation_ordering(criterion, hetero_runs):
    corpus, runs = hetero_runs
    res = ablation(HETERO, corpus, runs)
    inv = res.inversions(0.005)
    ok = not inv
    scores = ", ".join(f"{v} {res.f(v):.4f}" for v in det.VARIANTS)
    criterion(6, ok, f"{scores}; inversions {[(a, b, round(d, 4)) for a, b, d in inv]}")
    assert ok


def test_image_thresholds_track_contrast(hetero_runs):
    corpus, runs = hetero_runs
    ith = runs["dth_ith_ge"].ith
    gammas = np.array([s.meta.contrast_gamma for s in corpus.split(HETERO.split)])
    i, j = np.triu_indices(len(ith), 1)
    differ = gammas[i] != gammas[j]
    spread = float(np.abs(ith[i] - ith[j])[differ].mean())
    print(f"mean |t_I difference| across images with different gamma: {spread:.4f}")
    assert spread >= 0.02


def test_greedy_matches_exhaustive(criterion):
    rng = np.random.default_rng(2024)
    n, mismatches = 1200, 0
    for _ in range(n):
        dets, gts = random_fixture(rng)
        if len(greedy_matches(dets, gts)) != exhaustive_tp(dets, gts):
            mismatches += 1
    criterion(7, mismatches == 0, f"{n} fixtures, {mismatches} mismatches")
    assert mismatches == 0


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    dirs = {k: root / k for k in ("synth", "train", "eval", "sweep", "gradcheck", "report")}
    start = time.perf_counter()
    codes = [
        main(["synth", "--n", "200", "--seed", "5", "--preset", "easy", "--canvas", "64", "64",
              "--out", str(dirs["synth"])]),
        main(["train", "--corpus", str(dirs["synth"]), "--epochs", "30", "--out", str(dirs["train"])]),
        main(["eval", "--corpus", str(dirs["synth"]), "--ckpt", str(dirs["train"] / "best.ckpt"),
              "--out", str(dirs["eval"])]),
    ]
    elapsed = time.perf_counter() - start
    codes += [
        main(["sweep", "--corpus", str(dirs["synth"]), "--ckpt", str(dirs["train"] / "best.ckpt"),
              "--out", str(dirs["sweep"])]),
        main(["gradcheck", "--trials", "3", "--out", str(dirs["gradcheck"])]),
        main(["report", str(dirs["eval"]), "--out", str(dirs["report"])]),
    ]
    return root, dirs, codes, elapsed


def test_end_to_end_smoke(criterion, smoke):
    _, dirs, codes, elapsed = smoke
    f = json.loads((dirs["eval"] / "report.json").read_text())["fmeasure"]
    ok = codes[:3] == [0, 0, 0] and f >= 0.90 and elapsed <= 20 * 60
    criterion(8, ok, f"exit codes {codes[:3]}, val F {f:.4f}, {elapsed:.0f}s")
    assert ok


def test_trained_easy_model(smoke):
    _, dirs, _, _ = smoke
    state = det.load_checkpoint(dirs["train"] / "best.ckpt")
    val = read_corpus(dirs["synth"]).split("val")
    maps, _, _ = det.predict(state, val)
    loss = np.mean([scel(m, s.gt.astype(float)).item() for m, s in zip(maps, val)])
    scene = generate_scene(SceneSpec(seed=77, canvas=(64, 64), n_instances=4, blur_sigma=0.0,
                                     contrast_gamma=1.0, noise_std=0.0))
    found = det.infer(state, scene.input_map)
    print(f"val scel {loss:.4f}; undegraded scene {len(found)} found / {len(scene.gt_instances)} gt")
    assert loss <= 0.08
    assert len(found) == len(scene.gt_instances)


# numeric artifacts per command; the gradcheck table's wall-clock line is dropped before comparing
OUTPUTS = {
    "synth": ["data.bin", "manifest.json"],
    "train": ["final.ckpt/weights.bin", "final.ckpt/manifest.json", "best.ckpt/weights.bin"],
    "eval": ["report.json", "report.csv"],
    "sweep": ["sweep.json", "sweep.csv", "sweep.svg"],
    "gradcheck": ["gradcheck.txt"],
    "report": ["ablation.csv", "ablation.md"],
}


def _numeric(path):
    data = path.read_bytes()
    return b"\n".join(l for l in data.split(b"\n") if not l.startswith(b"elapsed"))


def test_rerun_from_run_json(criterion, smoke):
    root, dirs, codes, _ = smoke
    differing = []
    for command, files in OUTPUTS.items():
        again = root / f"rerun_{command}"
        code = main([command, "--config", str(dirs[command] / "run.json"), "--out", str(again)])
        for name in files:
            if code != 0 or _numeric(again / name) != _numeric(dirs[command] / name):
                differing.append(f"{command}/{name}")
    ok = all(c == 0 for c in codes) and not differing
    criterion(9, ok, f"{len(OUTPUTS)} commands re-run, differing outputs {differing}")
    assert ok
