import functools
import json
from pathlib import Path

import numpy as np
import pytest

from gemkit import autodiff as ad
from gemkit import datasets, experiments
from gemkit.model import GemConfig, GemModel

import oracles

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def load_config(name):
    cfg, _ = experiments.load_run_config(CONFIGS / name)
    return cfg


def moons(n=200, seed=0):
    ds = datasets.gen_two_moons(n=n, n_test=0, n_ood=0, seed=seed)
    return ds.subset("train")


def fitted(variant="FI", seed=0, **kw):
    x, y = moons()
    m = GemModel(GemConfig.preset(variant, **kw), 2, 2, seed=seed)
    if m.config.uses_density or m.config.vos_active:
        m.fit_density(x, y)
    return m, x, y


def full_loss_grad_error(variant, seed=0, n_coords=12, **kw):
    m, x, y = fitted(variant, seed=seed, ebm_backbone_grad=True, **kw)
    xb, yb = x[:8], y[:8]
    rho = m.rho(m.features(xb))
    fi = np.random.default_rng(seed).uniform(0.05, 0.5, size=(8, m.config.K))
    neg = m.sample_negatives(8, np.random.default_rng(seed)) if m.config.vos_active else None

    def loss():
        t, _ = m.objective(xb, yb, epoch=20, rng=np.random.default_rng(7), rho=rho, fi=fi,
                           negatives=neg, update_sn=False)
        return t

    m.zero_grad()
    ad.backward(loss())
    params = m.parameters()
    r = np.random.default_rng(seed + 1)
    coords, tape, arrays = [], [], []
    for t in params.values():
        c = r.choice(t.data.size, size=min(n_coords, t.data.size), replace=False)
        coords.append(c)
        tape.append((t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)[c])
        arrays.append(t.data)
    with ad.no_grad():
        fd = oracles.central_diff(lambda: loss().item(), arrays, coords=dict(enumerate(coords)))
    return oracles.rel_err(np.concatenate(tape), np.concatenate(fd))


@functools.lru_cache(maxsize=None)
def moons_run(variant, seed):
    """Train and evaluate one two-moons model (with the near-OOD ring); cached per session."""
    cfg = load_config("two_moons_fi.json")
    if variant != "FI":
        # plain baseline: same optimiser, data and architecture, every GEM switch off
        cfg = experiments.RunConfig(
            model=GemConfig.preset(variant, sn=False, gmm_components=cfg.model.gmm_components),
            train=cfg.train, data=cfg.data, eval=cfg.eval, seeds=cfg.seeds, raw=cfg.raw)
    ds = experiments.build_dataset(cfg.data, seed)
    model, fit = experiments.train_model(cfg, ds, seed)
    rows, _ = experiments.evaluate(model, ds, seed, cfg.eval)
    return model, ds, {m: v for _, _, _, m, v in rows}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quick_config(tmp_path):
    d = json.loads((CONFIGS / "two_moons_core_quick.json").read_text())
    p = tmp_path / "quick.json"
    p.write_text(json.dumps(d))
    return p


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
