import math

import numpy as np
import pytest

from gemkit import autodiff as ad
from gemkit import datasets, trainer
from gemkit.model import GemConfig, GemModel


def adamw_reference(w, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar AdamW written out step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * wd * w
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_zero_grads_no_decay_leave_params():
    p = {"w": ad.Tensor([[1.0, -2.0]], requires_grad=True)}
    p["w"].grad = np.zeros((1, 2))
    trainer.optimizer_step(p, trainer.OptimState(lr=0.1))
    np.testing.assert_array_equal(p["w"].data, [[1.0, -2.0]])


def test_first_step_on_quadratic_moves_by_lr():
    w = ad.Tensor(1.0, requires_grad=True)
    w.grad = np.array([[2.0]])
    trainer.optimizer_step({"w": w}, trainer.OptimState(lr=0.1))
    assert w.item() == pytest.approx(adamw_reference(1.0, [2.0], 0.1, 0.0), abs=1e-15)
    assert w.item() == pytest.approx(0.9, abs=1e-7)


def test_adamw_matches_scalar_recomputation():
    w = ad.Tensor(1.5, requires_grad=True)
    state = trainer.OptimState(lr=0.05, weight_decay=0.01)
    grads = []
    for _ in range(10):
        g = 2 * w.item()
        grads.append(g)
        w.grad = np.array([[g]])
        trainer.optimizer_step({"w": w}, state)
    assert w.item() == pytest.approx(adamw_reference(1.5, grads, 0.05, 0.01), abs=1e-14)


def test_non_finite_grad_skips_step():
    w = ad.Tensor(1.0, requires_grad=True)
    w.grad = np.array([[np.nan]])
    state = trainer.OptimState(lr=0.1)
    assert not trainer.optimizer_step({"w": w}, state)
    assert w.item() == 1.0 and state.skipped == 1 and state.step == 0


def test_cosine_schedule():
    assert trainer.cosine_lr(0, 100, 1e-3) == 1e-3
    assert trainer.cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert trainer.cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, rel=1e-12)
    lrs = [trainer.cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_global_norm():
    g = [np.array([0.3, 0.0]), np.array([[0.4]])]
    out, norm = trainer.clip_global_norm(g, 1.0)
    assert norm == pytest.approx(0.5)
    assert all(np.array_equal(a, b) for a, b in zip(g, out))
    g = [np.array([2.0, 0.0]), np.array([[2.0, 2.0, 2.0]])]
    out, norm = trainer.clip_global_norm(g, 1.0)
    assert norm == pytest.approx(4.0)
    assert abs(trainer.global_norm(out) - 1.0) < 1e-12
    np.testing.assert_allclose(out[0], g[0] * 0.25)


def test_clip_preserves_direction():
    g = [np.array([1e6, 1.0, -3.0])]
    out, _ = trainer.clip_global_norm(g)
    np.testing.assert_allclose(out[0] / np.linalg.norm(out[0]), g[0] / np.linalg.norm(g[0]), rtol=1e-12)


def test_stratified_split(rng):
    y = np.repeat([0, 1, 2], [50, 30, 20])
    tr, va = trainer.stratified_split(y, 0.1, rng)
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == 100
    assert np.bincount(y[va]).tolist() == [5, 3, 2]


def small_moons(seed=0, n=200):
    return datasets.gen_two_moons(n=n, n_test=0, n_ood=0, seed=seed).subset("train")


def test_epochs_zero_returns_untrained_model():
    x, y = small_moons()
    m = GemModel(GemConfig.preset("CORE"), 2, 2)
    before = {k: t.data.copy() for k, t in m.parameters().items()}
    res = trainer.fit(m, x, y, trainer.TrainSchedule(epochs=0))
    assert res.history == []
    assert all(np.array_equal(before[k], t.data) for k, t in m.parameters().items())
    assert m.density_ready and m.energy_calibration is not None


def test_history_bytes_identical_for_same_seed():
    x, y = small_moons()
    runs = []
    for _ in range(2):
        m = GemModel(GemConfig.preset("FI", vos_warmup_epochs=1), 2, 2, seed=3)
        res = trainer.fit(m, x, y, trainer.TrainSchedule(epochs=2, batch_size=32), seed=3)
        runs.append((res.history_csv(), m.predict(x).p_hat.tobytes()))
    assert runs[0] == runs[1]
    header = runs[0][0].splitlines()[0].split(",")
    assert tuple(header) == trainer.HISTORY_COLUMNS


def test_post_clip_norm_bounded(monkeypatch):
    seen = []
    real = trainer.clip_global_norm

    def spy(grads, max_norm=1.0):
        out, norm = real(grads, max_norm)
        seen.append(trainer.global_norm(out))
        return out, norm

    monkeypatch.setattr(trainer, "clip_global_norm", spy)
    x, y = small_moons()
    m = GemModel(GemConfig.preset("MIX"), 2, 2)
    trainer.fit(m, x, y, trainer.TrainSchedule(epochs=1, batch_size=16, base_lr=1e-2))
    assert seen and max(seen) <= 1.0 + 1e-9


def test_density_refit_cadence(monkeypatch):
    calls = []
    x, y = small_moons()
    m = GemModel(GemConfig.preset("CORE"), 2, 2)
    real = m.fit_density
    monkeypatch.setattr(m, "fit_density", lambda *a, **k: calls.append(1) or real(*a, **k))
    trainer.fit(m, x, y, trainer.TrainSchedule(epochs=6, batch_size=64, density_refit_every=5))
    # epochs 1 and 6, plus the final refit
    assert len(calls) == 3


def test_nan_parameters_abort_training():
    x, y = small_moons()
    m = GemModel(GemConfig.preset("EDL_BASELINE"), 2, 2)
    m.heads[0].layers[-1].b.data[...] = np.nan
    with pytest.raises((trainer.TrainingDiverged, ad.NumericError)):
        trainer.fit(m, x, y, trainer.TrainSchedule(epochs=1))


def test_schedule_validation():
    with pytest.raises(ValueError):
        trainer.TrainSchedule(batch_size=0)
    with pytest.raises(ValueError):
        trainer.TrainSchedule(epochs=-1)


def test_rng_streams_are_independent():
    a = trainer.rng_streams(0)
    b = trainer.rng_streams(0)
    assert a["init"].random() == b["init"].random()
    assert a["vos"].random() != a["data"].random()


@pytest.mark.slow
def test_core_reaches_high_train_accuracy():
    x, y = datasets.gen_two_moons(n_test=0, n_ood=0, seed=0).subset("train")
    m = GemModel(GemConfig.preset("CORE", gmm_components=8), 2, 2)
    trainer.fit(m, x, y, trainer.TrainSchedule(epochs=50), seed=0)
    assert (m.predict(x).p_hat.argmax(axis=1) == y).mean() >= 0.99
