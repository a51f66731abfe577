import numpy as np
import pytest

from athresh import detector as det
from athresh.loss import ath_loss
from athresh.synth import generate_corpus, preset
from athresh.tensor import Tensor, sigmoid

CANVAS = (48, 48)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(30, 100, preset("easy", canvas=CANVAS))


def small_cfg(**kw):
    base = dict(canvas=CANVAS, epochs=2, batch_size=8, seed=0)
    base.update(kw)
    return det.DetectorConfig(**base)


def test_untrained_map_is_half():
    state = det.TrainState.initial(small_cfg())
    x = np.random.default_rng(0).uniform(size=(2,) + CANVAS)
    prob, t_D, t_I = det.forward(state.params, x, state.config)
    assert prob.shape == (2,) + CANVAS
    assert np.all(prob.data == 0.5)
    assert t_D.item() == 0.5 and t_I.shape == (2,)


def test_canvas_mismatch_is_config_error():
    state = det.TrainState.initial(small_cfg())
    with pytest.raises(det.ConfigError):
        det.forward(state.params, np.zeros((1, 32, 32)), state.config)


@pytest.mark.parametrize("kw", [dict(canvas=(50, 48)), dict(variant="nope"), dict(heads=3), dict(lr=0.0),
                                dict(optimizer="sgd"), dict(alpha=-1.0)])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)


def test_config_json_round_trip():
    cfg = small_cfg(variant="dth", lr=3e-3)
    assert det.DetectorConfig.from_json(cfg.to_json()) == cfg


def test_baseline_weights_are_zero():
    assert small_cfg(variant="baseline").weights.alpha == 0.0


def test_zero_epochs_returns_initial_state(corpus):
    result = det.train(corpus, small_cfg(epochs=0))
    fresh = det.TrainState.initial(small_cfg(epochs=0))
    for k, v in fresh.params.items():
        assert np.array_equal(result.final.params[k].data, v.data)
    assert result.final.epoch == 0


def test_training_is_deterministic(corpus):
    a = det.train(corpus, small_cfg()).final
    b = det.train(corpus, small_cfg()).final
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert a.history == b.history


def test_checkpoint_round_trip(corpus, tmp_path):
    state = det.train(corpus, small_cfg(epochs=1)).final
    det.save_checkpoint(tmp_path / "ck", state)
    back = det.load_checkpoint(tmp_path / "ck")
    x = np.stack([s.input_map for s in corpus.split("val")])
    a, tA, iA = det.forward(state.params, x, state.config)
    b, tB, iB = det.forward(back.params, x, back.config)
    assert a.data.tobytes() == b.data.tobytes()
    assert iA.data.tobytes() == iB.data.tobytes()
    assert back.history == state.history and back.epoch == 1


def test_resume_matches_uninterrupted(corpus, tmp_path):
    full = det.train(corpus, small_cfg(epochs=2)).final
    half = det.train(corpus, small_cfg(epochs=1)).final
    det.save_checkpoint(tmp_path / "half", half)
    resumed = det.train(corpus, small_cfg(epochs=1), state=det.load_checkpoint(tmp_path / "half")).final
    for k in full.params:
        assert full.params[k].data.tobytes() == resumed.params[k].data.tobytes()


def test_loss_drops_over_ten_epochs(corpus):
    history = det.train(corpus, small_cfg(epochs=10)).final.history
    assert history[10]["val_loss"] < history[0]["val_loss"]


def test_best_state_has_lowest_val_loss(corpus):
    result = det.train(corpus, small_cfg(epochs=3))
    best = min(r["val_loss"] for r in result.final.history)
    assert result.best.history[-1]["val_loss"] == best


def test_non_finite_loss_aborts_with_diagnostics(corpus, monkeypatch):
    real = det.batch_loss

    def poisoned(params, x, gt, cfg, labels=None):
        return real(params, x, gt, cfg, labels) * float("nan")

    monkeypatch.setattr(det, "batch_loss", poisoned)
    with pytest.raises(det.TrainingDiverged, match="epoch 1, batch 0; parameter norms"):
        det.train(corpus, small_cfg(epochs=1))


def test_dth_step_moves_towards_better_threshold():
    # soft false positives just above 0.5: the best threshold is higher than t_D = 0.5
    gt = np.zeros((8, 8))
    gt[2:6, 2:6] = 1.0
    m = np.where(gt == 1, 0.95, 0.02)
    m[0:2, :] = 0.53
    t_d = Tensor(0.0, requires_grad=True)
    opt = det.Adam({"t_d": t_d}, lr=1e-2)
    t = sigmoid(t_d)
    ath_loss(m, gt, t, t).backward()
    opt.step()
    assert t_d.item() > 0.0


def test_instance_loss_term_changes_objective(corpus):
    x, y, lab = det._stack(corpus.split("train")[:4])
    state = det.TrainState.initial(small_cfg())
    plain = det.batch_loss(state.params, x, y, small_cfg()).item()
    with_inst = det.batch_loss(state.params, x, y, small_cfg(instance_weight=1.0), lab).item()
    assert np.isfinite(with_inst) and with_inst > plain


def test_blank_scene_yields_no_instances():
    state = det.TrainState.initial(small_cfg())
    assert det.infer(state, np.zeros(CANVAS)) == []


@pytest.mark.parametrize("variant", det.VARIANTS)
def test_variants_run(corpus, variant):
    state = det.TrainState.initial(small_cfg(variant=variant))
    maps, t_D, ith = det.predict(state, corpus.split("val"))
    assert maps.shape[1:] == CANVAS and ith.shape == (len(maps),)
    if variant == "baseline":
        assert t_D == 0.5 and np.all(ith == 0.5)
    if variant == "dth":
        assert np.all(ith == t_D)
