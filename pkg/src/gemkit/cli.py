"""gemkit command line: train, eval, heatmap, sweep.

Exit codes: 0 ok, 2 invalid config, 3 training aborted on a non-finite loss.
"""

import argparse
import json
import logging
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from gemkit import autodiff, experiments, metrics, plotting, trainer
from gemkit.model import ConfigError, GemModel

log = logging.getLogger("gemkit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8")


def _manifest(out, command, args, seeds, started, extra=None):
    m = {
        "command": command,
        "argv": sys.argv[1:],
        "config": str(args.config),
        "seeds": list(seeds),
        "git_hash": _git_hash(),
        "wall_time_s": round(time.time() - started, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    m.update(extra or {})
    _write(Path(out) / f"manifest_{command}.json", json.dumps(m, indent=2) + "\n")


def _load(args):
    cfg, text = experiments.load_run_config(args.config)
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", text)
    return cfg, seeds, out


def _checkpoint_path(args, out, seed):
    if args.checkpoint is None:
        return out / f"checkpoint_seed{seed}.json"
    p = Path(args.checkpoint)
    return p / f"checkpoint_seed{seed}.json" if p.is_dir() else p


# ----------------------------------------------------------------- commands

def cmd_train(args):
    started = time.time()
    cfg, seeds, out = _load(args)
    for seed in seeds:
        ds = experiments.build_dataset(cfg.data, seed)
        model, fit = experiments.train_model(cfg, ds, seed)
        _write(out / f"history_seed{seed}.csv", fit.history_csv())
        model.save(out / f"checkpoint_seed{seed}.json", extra={"val_idx": fit.val_idx.tolist()})
        last = fit.history[-1] if fit.history else {}
        print(f"seed {seed}: epochs={len(fit.history)} val_acc={last.get('val_acc', float('nan')):.4f}")
    _manifest(out, "train", args, seeds, started)
    return EXIT_OK


def cmd_eval(args):
    started = time.time()
    cfg, seeds, out = _load(args)
    all_rows = []
    for seed in seeds:
        model, meta = GemModel.load(_checkpoint_path(args, out, seed))
        ds = experiments.build_dataset(cfg.data, seed)
        val_idx = np.asarray(meta.get("val_idx", []), dtype=int)
        rows, dumps = experiments.evaluate(model, ds, seed, cfg.eval, val_idx)
        all_rows.extend(rows)
        _write(out / f"scores_seed{seed}.csv", experiments.rows_to_csv(experiments.DUMP_COLUMNS, dumps))
        Xt, yt = ds.subset("test")
        if len(yt):
            p = model.predict(Xt).p_hat
            bins = metrics.ece_bins(p.max(axis=1), p.argmax(axis=1) == yt)
            _write(out / f"reliability_seed{seed}.svg", plotting.reliability_svg(bins))
    _write(out / "metrics.csv", experiments.rows_to_csv(experiments.METRIC_COLUMNS, all_rows))
    for r in all_rows:
        if r[3] in ("acc", "ece", "nll") or r[3].endswith("epistemic.aupr"):
            print(f"{r[2]} {r[3]} {r[4]:.4f}")
    _manifest(out, "eval", args, seeds, started)
    return EXIT_OK


def cmd_heatmap(args):
    started = time.time()
    cfg, seeds, out = _load(args)
    ev = cfg.eval
    score = args.score or ev.heatmap_score
    res = args.resolution or ev.heatmap_resolution
    for seed in seeds:
        model, _ = GemModel.load(_checkpoint_path(args, out, seed))
        grid = experiments.heatmap_grid(model, score, ev.heatmap_xlim, ev.heatmap_ylim, res)
        ds = experiments.build_dataset(cfg.data, seed)
        X, y = ds.subset("train")
        Xo, _ = ds.subset("ood")
        _write(out / f"heatmap_{score}_seed{seed}.csv", grid.to_csv())
        _write(out / f"heatmap_{score}_seed{seed}.svg",
               plotting.heatmap_svg(grid, X, y, Xo if len(Xo) else None))
        print(f"seed {seed}: {score} grid {res}x{res}, range [{grid.values.min():.4g}, {grid.values.max():.4g}]")
    _manifest(out, "heatmap", args, seeds, started)
    return EXIT_OK


def cmd_sweep(args):
    started = time.time()
    cfg, seeds, out = _load(args)
    axes = None if args.axes in (None, "ablation") else [a for a in args.axes.split(",") if a]
    cells = experiments.sweep_cells(axes)

    def show(row):
        print(f"cell {row['cell']} seed {row['seed']} {row['variant']}: acc={row['acc']:.4f}")

    header, rows = experiments.run_sweep(cfg, lambda s: experiments.build_dataset(cfg.data, s), cells,
                                         seeds, on_row=show)
    _write(out / "sweep.csv", experiments.rows_to_csv(header, rows))
    _manifest(out, "sweep", args, seeds, started, {"axes": args.axes or "ablation"})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap, "sweep": cmd_sweep}


def build_parser():
    p = argparse.ArgumentParser(prog="gemkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="run only this seed")
        if name in ("eval", "heatmap"):
            sp.add_argument("--checkpoint", default=None,
                            help="checkpoint file or train output dir (default: --out)")
        if name == "heatmap":
            sp.add_argument("--score", choices=experiments.HEATMAP_SCORES, default=None)
            sp.add_argument("--resolution", type=int, default=None)
        if name == "sweep":
            sp.add_argument("--axes", default=None,
                            help="comma-separated switches, or 'ablation' for the named rows")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.TrainingDiverged, autodiff.NumericError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
