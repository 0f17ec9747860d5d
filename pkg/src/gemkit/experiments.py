"""Run configs, dataset construction, evaluation tables, heatmap grids and ablation sweeps.

Everything here is plain data in / plain data out; the CLI only adds file I/O.
"""

import csv
import dataclasses
import inspect
import io
import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from gemkit import datasets, metrics, trainer
from gemkit.dirichlet import entropy, mutual_information
from gemkit.model import ConfigError, GemConfig, GemModel

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("dataset", "variant", "seed", "metric", "value")
HEATMAP_SCORES = ("entropy", "mi", "alpha0", "energy")
ABLATION_AXES = ("sn", "core", "mix", "fi_reg", "fi_mod", "ebm", "unc")

# Switch matrix of the ablation table, in row order. The last row is the
# full model without SN.
ABLATION_ROWS = (
    dict(sn=0, core=0, mix=0, fi_reg=0, fi_mod=0, ebm=0, unc=0),
    dict(sn=1, core=0, mix=0, fi_reg=0, fi_mod=0, ebm=0, unc=0),
    dict(sn=1, core=1, mix=0, fi_reg=0, fi_mod=0, ebm=0, unc=0),
    dict(sn=1, core=1, mix=1, fi_reg=0, fi_mod=0, ebm=0, unc=0),
    dict(sn=1, core=1, mix=1, fi_reg=1, fi_mod=0, ebm=0, unc=0),
    dict(sn=1, core=1, mix=1, fi_reg=0, fi_mod=1, ebm=0, unc=0),
    dict(sn=1, core=1, mix=1, fi_reg=1, fi_mod=1, ebm=0, unc=0),
    dict(sn=1, core=1, mix=1, fi_reg=1, fi_mod=1, ebm=1, unc=0),
    dict(sn=1, core=1, mix=1, fi_reg=1, fi_mod=1, ebm=1, unc=1),
    dict(sn=0, core=1, mix=1, fi_reg=1, fi_mod=1, ebm=1, unc=1),
)

GENERATORS = {
    "two_moons": datasets.gen_two_moons,
    "blobs": datasets.gen_blobs,
    "toy1d": datasets.gen_toy1d,
}


# ------------------------------------------------------------------ config

def _schedule_fields():
    return {f.name for f in dataclasses.fields(trainer.TrainSchedule)}


@dataclass
class EvalSpec:
    temperature_scaling: bool = True
    corruption_severities: tuple = ()
    heatmap_score: str = "entropy"
    heatmap_xlim: tuple = (-2.0, 3.5)
    heatmap_ylim: tuple = (-1.5, 3.0)
    heatmap_resolution: int = 64

    def __post_init__(self):
        if self.heatmap_score not in HEATMAP_SCORES:
            raise ConfigError(f"eval.heatmap_score must be one of {HEATMAP_SCORES}")
        if self.heatmap_resolution < 16:
            raise ConfigError("eval.heatmap_resolution must be >= 16")
        for s in self.corruption_severities:
            if s not in datasets.SEVERITY_SIGMA:
                raise ConfigError(f"eval.corruption_severities: unknown severity {s}")
        self.corruption_severities = tuple(int(s) for s in self.corruption_severities)
        self.heatmap_xlim = tuple(float(v) for v in self.heatmap_xlim)
        self.heatmap_ylim = tuple(float(v) for v in self.heatmap_ylim)


@dataclass
class RunConfig:
    model: GemConfig
    train: trainer.TrainSchedule
    data: dict
    eval: EvalSpec
    seeds: tuple = (0,)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def variant(self):
        return self.model.variant


def _reject_unknown(section, given, known):
    unknown = sorted(set(given) - set(known))
    if unknown:
        keys = ", ".join(f"{section}.{k}" if section else k for k in unknown)
        raise ConfigError(f"unknown config key(s): {keys}")


def _check_data(data):
    if not isinstance(data, dict) or "name" not in data:
        raise ConfigError("data.name is required")
    name = data["name"]
    params = {k: v for k, v in data.items() if k != "name"}
    if name == "idx":
        _reject_unknown("data", params, ("train_images", "train_labels", "test_images", "test_labels",
                                         "limit", "n_classes", "ood_images", "ood_labels"))
        for k in ("train_images", "train_labels"):
            if k not in params:
                raise ConfigError(f"data.{k} is required for idx data")
        return
    if name not in GENERATORS:
        raise ConfigError(f"data.name must be one of {sorted(GENERATORS) + ['idx']}, got {name!r}")
    sig = inspect.signature(GENERATORS[name]).parameters
    _reject_unknown("data", params, [p for p in sig if p != "seed"])


def run_config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("", d, ("model", "train", "data", "eval", "seeds"))
    model_d = dict(d.get("model", {}))
    variant = model_d.pop("variant", "FI")
    preset = bool(model_d.pop("preset", True))
    try:
        if preset:
            _reject_unknown("model", model_d, [f.name for f in dataclasses.fields(GemConfig)])
            model = GemConfig.preset(variant, **model_d)
        else:
            model = GemConfig.from_dict({"variant": variant, **model_d})
    except ConfigError as exc:
        raise ConfigError(str(exc).replace("unknown model config key(s): ", "unknown config key(s): model.")) from None
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None
    train_d = d.get("train", {})
    _reject_unknown("train", train_d, _schedule_fields())
    try:
        schedule = trainer.TrainSchedule(**train_d)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    data = dict(d.get("data", {"name": "two_moons"}))
    _check_data(data)
    eval_d = d.get("eval", {})
    _reject_unknown("eval", eval_d, [f.name for f in dataclasses.fields(EvalSpec)])
    ev = EvalSpec(**eval_d)
    seeds = d.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    return RunConfig(model=model, train=schedule, data=data, eval=ev, seeds=tuple(seeds), raw=d)


def load_run_config(path):
    """Parse and validate a JSON run config; errors carry the line or key."""
    text = open(path, encoding="utf-8").read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return run_config_from_dict(d), text


# ---------------------------------------------------------------- datasets

def build_dataset(data, seed):
    name = data["name"]
    params = {k: v for k, v in data.items() if k != "name"}
    if name == "idx":
        n_classes = params.get("n_classes", 10)
        tr = datasets.load_idx(params["train_images"], params["train_labels"], params.get("limit"),
                               "train", n_classes)
        parts = [tr]
        if params.get("test_images"):
            parts.append(datasets.load_idx(params["test_images"], params["test_labels"], params.get("limit"),
                                           "test", n_classes))
        X = np.concatenate([p.X for p in parts])
        y = np.concatenate([p.y for p in parts])
        split = np.concatenate([p.split for p in parts])
        return datasets.Dataset(X, y, split, n_classes, {"name": "idx", **params})
    return GENERATORS[name](seed=seed, **params)


def ood_sets(ds):
    """(name, X) pairs for every OOD kind present in the dataset."""
    Xo, _ = ds.subset("ood")
    if len(Xo) == 0:
        return []
    kinds = ds.meta.get("ood_kind")
    if not kinds:
        return [("ood", Xo)]
    kinds = np.asarray(kinds)
    return [(k, Xo[kinds == k]) for k in dict.fromkeys(kinds.tolist())]


# -------------------------------------------------------------- training

def train_model(cfg, ds, seed):
    X, y = ds.subset("train")
    model = GemModel(cfg.model, ds.dim, ds.n_classes, seed=seed)
    if cfg.train.epochs == 0:
        log.warning("epochs = 0: writing an untrained checkpoint")
    result = trainer.fit(model, X, y, cfg.train, seed=seed)
    return model, result


# -------------------------------------------------------------- evaluation

def score_table(model, X, diag=None):
    diag = diag if diag is not None else model.predict(X)
    ev = model.energy_values(X, diag)
    return diag, metrics.uncertainty_scores(diag, model.energy_calibration, ev)


def evaluate(model, ds, seed, spec=None, val_idx=None):
    """Metric rows (dataset, variant, seed, metric, value) plus per-sample score dumps."""
    spec = spec or EvalSpec()
    name = ds.meta.get("name", "data")
    variant = model.config.variant
    rows = []

    def put(metric, value):
        rows.append((name, variant, seed, metric, float(value)))

    Xt, yt = ds.subset("test")
    dumps = []
    if len(yt) == 0:
        log.warning("no test split; evaluation skipped")
        return rows, dumps
    diag_t, sc_t = score_table(model, Xt)
    rep = metrics.calibration_report(diag_t.p_hat, yt)
    put("acc", rep.accuracy)
    put("ece", rep.ece)
    put("brier_x100", rep.brier_x100)
    put("nll", rep.nll)
    put("misclass_aupr", metrics.misclassification_aupr(diag_t.p_hat, yt))
    put("mi_is_zero", 1.0 if sc_t.mi_is_zero else 0.0)
    dumps.extend(_dump_rows("test", sc_t))

    for kind, Xo in ood_sets(ds):
        _, sc_o = score_table(model, Xo)
        dumps.extend(_dump_rows(kind, sc_o))
        pos = np.r_[np.zeros(len(Xt), dtype=bool), np.ones(len(Xo), dtype=bool)]
        for score in metrics.SCORE_NAMES:
            s = np.r_[getattr(sc_t, score), getattr(sc_o, score)]
            put(f"ood.{kind}.{score}.auroc", metrics.auroc(s, pos))
            put(f"ood.{kind}.{score}.aupr", metrics.aupr(s, pos))
        for role, arr_t, arr_o in (("aleatoric", sc_t.aleatoric, sc_o.aleatoric),
                                   ("epistemic", sc_t.epistemic, sc_o.epistemic)):
            s = np.r_[arr_t, arr_o]
            put(f"ood.{kind}.{role}.auroc", metrics.auroc(s, pos))
            put(f"ood.{kind}.{role}.aupr", metrics.aupr(s, pos))
    if not ood_sets(ds):
        log.info("no OOD split; OOD rows skipped")

    for sev in spec.corruption_severities:
        sh = datasets.corrupt(ds, datasets.CorruptionSpec(severity=sev), seed=seed)
        d = model.predict(sh.X)
        r = metrics.calibration_report(d.p_hat, sh.y)
        put(f"shift.s{sev}.acc", r.accuracy)
        put(f"shift.s{sev}.ece", r.ece)
        put(f"shift.s{sev}.nll", r.nll)

    if spec.temperature_scaling and val_idx is not None and len(val_idx):
        Xtr, ytr = ds.subset("train")
        Xv, yv = Xtr[val_idx], ytr[val_idx]
        logit_v = np.log(np.maximum(model.predict(Xv).p_mix, 1e-300))
        t = metrics.fit_temperature(logit_v, yv)
        logit_t = np.log(np.maximum(diag_t.p_mix, 1e-300))
        before = metrics.calibration_report(metrics.apply_temperature(logit_t, 1.0), yt)
        after = metrics.calibration_report(metrics.apply_temperature(logit_t, t), yt)
        put("ts.temperature", t)
        put("ts.ece_before", before.ece)
        put("ts.ece_after", after.ece)
        put("ts.nll_before", before.nll)
        put("ts.nll_after", after.nll)
    return rows, dumps


DUMP_COLUMNS = ("split", "index") + metrics.SCORE_NAMES


def _dump_rows(split, sc):
    cols = [getattr(sc, n) for n in metrics.SCORE_NAMES]
    return [(split, i, *(float(c[i]) for c in cols)) for i in range(len(cols[0]))]


def rows_to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# --------------------------------------------------------------- heatmaps

@dataclass
class HeatmapGrid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # (len(ys), len(xs))
    score: str

    def rows(self):
        return [(float(x), float(y), float(self.values[j, i]))
                for j, y in enumerate(self.ys) for i, x in enumerate(self.xs)]

    def to_csv(self):
        return rows_to_csv(("x", "y", "value"), self.rows())


def heatmap_grid(model, score="entropy", xlim=(-2.0, 3.5), ylim=(-1.5, 3.0), resolution=64):
    """Evaluate a frozen 2D-input model on a regular grid."""
    if model.input_dim != 2:
        raise ValueError(f"heatmaps need a 2D-input model, this one takes {model.input_dim} inputs")
    if score not in HEATMAP_SCORES:
        raise ValueError(f"score must be one of {HEATMAP_SCORES}")
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    xs = np.linspace(xlim[0], xlim[1], resolution)
    ys = np.linspace(ylim[0], ylim[1], resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    diag = model.predict(pts)
    if score == "entropy":
        v = entropy(diag.p_hat)
    elif score == "mi":
        v = np.zeros(len(pts)) if diag.n_heads == 1 else mutual_information(diag.pi, diag.head_probs)
    elif score == "alpha0":
        v = diag.alpha0_mix
    else:
        v = model.energy_values(pts, diag)
    v = np.asarray(v, dtype=np.float64).reshape(resolution, resolution)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite heatmap values")
    return HeatmapGrid(xs, ys, v, score)


# ----------------------------------------------------------------- sweeps

def ablation_config(base, switches):
    """GemConfig for one cell of the switch matrix; missing switches count as off."""
    sw = {k: bool(switches.get(k, False)) for k in ABLATION_AXES}
    if sw["mix"]:
        extra = sw["fi_reg"] or sw["fi_mod"] or sw["ebm"] or sw["unc"]
        variant = "FI" if extra else "MIX"
    else:
        variant = "CORE" if sw["core"] else "EDL_BASELINE"
    d = base.to_dict()
    d.update(variant=variant, sn=sw["sn"], gate=sw["core"], density=sw["core"],
             fi_reg=sw["fi_reg"], fi_mod=sw["fi_mod"], ebm=sw["ebm"], unc=sw["unc"],
             vos=sw["ebm"] or sw["unc"])
    if sw["mix"]:
        d["K"] = base.K if base.K > 1 else 3
    return GemConfig.from_dict(d)


def sweep_cells(axes=None):
    """Switch dicts for the cross product of ``axes`` or the named table rows."""
    if axes in (None, "ablation"):
        return [dict(r) for r in ABLATION_ROWS]
    axes = list(axes)
    bad = sorted(set(axes) - set(ABLATION_AXES))
    if bad:
        raise ConfigError(f"unknown ablation axis/axes: {', '.join(bad)}")
    if not axes:
        return [{}]
    return [dict(zip(axes, bits)) for bits in itertools.product((0, 1), repeat=len(axes))]


SWEEP_METRICS = ("acc", "ece", "nll", "brier_x100")


def sweep_row_metrics(rows):
    """Pick the headline numbers for a sweep row out of evaluate() rows."""
    by = {m: v for _, _, _, m, v in rows}
    out = {m: by.get(m, float("nan")) for m in SWEEP_METRICS}
    for key in sorted(by):
        if key.startswith("ood.") and key.split(".")[2] in ("aleatoric", "epistemic"):
            out[key] = by[key]
    return out


def run_sweep(cfg, ds_for_seed, cells, seeds, on_row=None):
    """Train and evaluate every cell for every seed; returns (header, rows)."""
    results = []
    for ci, cell in enumerate(cells):
        mcfg = ablation_config(cfg.model, cell)
        for seed in seeds:
            ds = ds_for_seed(seed)
            run = dataclasses.replace(cfg, model=mcfg)
            model, fit = train_model(run, ds, seed)
            rows, _ = evaluate(model, ds, seed, dataclasses.replace(cfg.eval, temperature_scaling=False))
            m = sweep_row_metrics(rows)
            row = {"cell": ci + 1, **{k: int(bool(cell.get(k, 0))) for k in ABLATION_AXES},
                   "variant": mcfg.variant, "seed": seed, **m}
            results.append(row)
            if on_row is not None:
                on_row(row)
    keys = []
    for r in results:
        for k in r:
            if k not in keys:
                keys.append(k)
    return keys, [[r.get(k, float("nan")) for k in keys] for r in results]
