import csv
import json
import math

import numpy as np
import pytest

from gemkit import cli, datasets, experiments, metrics, plotting
from gemkit.model import ConfigError, GemConfig, GemModel

from conftest import CONFIGS


def write_cfg(tmp_path, name="cfg.json", **sections):
    d = json.loads((CONFIGS / "two_moons_core_quick.json").read_text())
    for k, v in sections.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    p = tmp_path / name
    p.write_text(json.dumps(d, indent=2))
    return p


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_eval_heatmap_quick(quick_config, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", quick_config, "--out", out) == 0
    assert run("eval", "--config", quick_config, "--out", out) == 0
    assert run("heatmap", "--config", quick_config, "--out", out) == 0
    for f in ("config.json", "manifest_train.json", "manifest_eval.json", "history_seed0.csv",
              "checkpoint_seed0.json", "metrics.csv", "scores_seed0.csv", "reliability_seed0.svg",
              "heatmap_entropy_seed0.csv", "heatmap_entropy_seed0.svg"):
        assert (out / f).exists(), f
    rows = read_csv(out / "metrics.csv")
    assert tuple(rows[0]) == experiments.METRIC_COLUMNS
    names = {r[3] for r in rows[1:]}
    assert {"acc", "ece", "nll"} <= names
    assert all(math.isfinite(float(r[4])) for r in rows[1:])
    hist = read_csv(out / "history_seed0.csv")
    assert len(hist) == 1 + 3
    man = json.loads((out / "manifest_train.json").read_text())
    assert man["seeds"] == [0] and "git_hash" in man


def test_unknown_key_exit_2(tmp_path, capsys):
    p = write_cfg(tmp_path, model={"bogus": 1})
    assert run("train", "--config", p, "--out", tmp_path / "o") == 2
    assert "model.bogus" in capsys.readouterr().err


@pytest.mark.parametrize("section", ["train", "data", "eval"])
def test_unknown_key_in_other_sections(tmp_path, section):
    p = write_cfg(tmp_path, **{section: {"nope": 1}})
    with pytest.raises(ConfigError, match=f"{section}.nope"):
        experiments.load_run_config(p)


def test_bad_json_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "model": {"variant": "CORE"},\n  "train": {epochs: 3}\n}\n')
    assert run("train", "--config", p, "--out", tmp_path / "o") == 2
    assert "line 3" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert run("train", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == 2


def test_epochs_zero_warns_and_exits_0(tmp_path, caplog):
    p = write_cfg(tmp_path, train={"epochs": 0})
    out = tmp_path / "o"
    assert run("train", "--config", p, "--out", out) == 0
    assert any("epochs = 0" in r.getMessage() for r in caplog.records)
    assert (out / "checkpoint_seed0.json").exists()
    assert run("eval", "--config", p, "--out", out) == 0


def test_nan_input_exit_3(tmp_path, monkeypatch, capsys):
    real = experiments.build_dataset

    def poisoned(data, seed):
        ds = real(data, seed)
        ds.X[0, 0] = np.nan
        return ds

    monkeypatch.setattr(experiments, "build_dataset", poisoned)
    p = write_cfg(tmp_path)
    assert run("train", "--config", p, "--out", tmp_path / "o") == 3
    assert "training aborted" in capsys.readouterr().err


def test_eval_is_deterministic(quick_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("train", "--config", quick_config, "--out", out) == 0
        assert run("eval", "--config", quick_config, "--out", out) == 0
    for f in ("history_seed0.csv", "metrics.csv", "scores_seed0.csv", "reliability_seed0.svg"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_single_head_reports_mi_zero(tmp_path):
    p = write_cfg(tmp_path, model={"variant": "CORE", "K": 1})
    out = tmp_path / "o"
    assert run("train", "--config", p, "--out", out) == 0
    assert run("eval", "--config", p, "--out", out) == 0
    rows = {r[3]: r[4] for r in read_csv(out / "metrics.csv")[1:]}
    assert float(rows["mi_is_zero"]) == 1.0
    scores = read_csv(out / "scores_seed0.csv")
    mi = scores[0].index("mi")
    assert all(float(r[mi]) == 0.0 for r in scores[1:])


def test_heatmap_rows_and_score_flag(quick_config, tmp_path):
    out = tmp_path / "o"
    assert run("train", "--config", quick_config, "--out", out) == 0
    assert run("heatmap", "--config", quick_config, "--out", out, "--score", "alpha0",
               "--resolution", 20) == 0
    rows = read_csv(out / "heatmap_alpha0_seed0.csv")
    assert rows[0] == ["x", "y", "value"] and len(rows) == 1 + 20 * 20


def test_uniform_model_heatmap_is_log_c():
    m = GemModel(GemConfig.preset("EDL_BASELINE"), 2, 3)
    m.fit_density(np.random.default_rng(0).normal(size=(64, 2)), np.arange(64) % 3)
    for head in m.heads.heads:
        head.layers[-1].W.data[...] = 0.0
        head.layers[-1].b.data[...] = 0.0
    g = experiments.heatmap_grid(m, "entropy", resolution=16)
    np.testing.assert_allclose(g.values, math.log(3), atol=1e-12)
    assert len(g.rows()) == 256


def test_heatmap_rejects_non_2d_model():
    m = GemModel(GemConfig.preset("CORE"), 3, 2)
    with pytest.raises(ValueError, match="2D"):
        experiments.heatmap_grid(m)


def test_heatmap_on_non_2d_config_fails_cleanly(tmp_path):
    p = write_cfg(tmp_path, data={"name": "toy1d", "n_per_segment": 40, "n_ood": 20})
    for k in ("n", "n_test"):
        d = json.loads(p.read_text())
        d["data"].pop(k, None)
        p.write_text(json.dumps(d))
    out = tmp_path / "o"
    assert run("train", "--config", p, "--out", out) == 0
    with pytest.raises(ValueError, match="2D"):
        run("heatmap", "--config", p, "--out", out)


def test_sweep_two_switches_two_seeds(tmp_path):
    p = write_cfg(tmp_path, model={"variant": "FI", "K": 2, "gmm_components": 4},
                  train={"epochs": 1}, seeds=[0, 1])
    out = tmp_path / "o"
    assert run("sweep", "--config", p, "--out", out, "--axes", "core,mix") == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 1 + 8
    assert all(len(r) == len(rows[0]) for r in rows)
    h = rows[0]
    cells = {(r[h.index("core")], r[h.index("mix")]) for r in rows[1:]}
    assert cells == {("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")}
    assert all(math.isfinite(float(r[h.index("acc")])) for r in rows[1:])


def test_sweep_empty_axes_is_single_run():
    assert experiments.sweep_cells([]) == [{}]
    assert len(experiments.sweep_cells(None)) == len(experiments.ABLATION_ROWS) == 10
    with pytest.raises(ConfigError):
        experiments.sweep_cells(["sn", "warp"])


def test_ablation_all_off_is_baseline():
    base = GemConfig.preset("FI", gmm_components=8)
    off = experiments.ablation_config(base, experiments.ABLATION_ROWS[0])
    ref = GemConfig.preset("EDL_BASELINE", sn=False, gmm_components=8)
    assert off.variant == "EDL_BASELINE" and off.K == 1
    assert not (off.sn or off.gated or off.uses_density or off.fi_reg or off.fi_mod or off.ebm or off.unc)
    # the preset leaves gate/density unset, which resolves to off for this variant
    a, b = off.to_dict(), ref.to_dict()
    for k in ("gate", "density"):
        a.pop(k), b.pop(k)
    assert a == b and ref.gated == off.gated and ref.uses_density == off.uses_density


def test_svg_bytes_deterministic(rng):
    m = GemModel(GemConfig.preset("CORE"), 2, 2)
    m.fit_density(rng.normal(size=(64, 2)), np.arange(64) % 2)
    svgs = [plotting.heatmap_svg(experiments.heatmap_grid(m, "alpha0", resolution=16)) for _ in range(2)]
    assert svgs[0] == svgs[1] and svgs[0].startswith(b"<?xml")
    assert b"<dc:date>" not in svgs[0]
    p = rng.dirichlet(np.ones(2), size=100)
    bins = metrics.ece_bins(p.max(axis=1), rng.random(100) < 0.7)
    assert plotting.reliability_svg(bins) == plotting.reliability_svg(bins)


def test_build_dataset_matches_generator():
    cfg = experiments.run_config_from_dict({"data": {"name": "blobs", "n_per_class": 10}})
    ds = experiments.build_dataset(cfg.data, 4)
    assert ds.to_csv() == datasets.gen_blobs(n_per_class=10, seed=4).to_csv()


def test_idx_config_roundtrip(tmp_path, rng):
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    datasets.write_idx(ip, lp, rng.integers(0, 256, size=(150, 3, 3)), rng.integers(0, 10, size=150))
    cfg = experiments.run_config_from_dict(
        {"data": {"name": "idx", "train_images": str(ip), "train_labels": str(lp), "limit": 100}})
    ds = experiments.build_dataset(cfg.data, 0)
    assert ds.X.shape == (100, 9) and ds.n_classes == 10


def test_seeds_validation():
    with pytest.raises(ConfigError):
        experiments.run_config_from_dict({"seeds": []})
    with pytest.raises(ConfigError):
        experiments.run_config_from_dict({"eval": {"heatmap_resolution": 8}})
