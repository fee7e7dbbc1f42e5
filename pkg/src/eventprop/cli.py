"""Command line entry point: ``eventprop <command> [options]``.

Commands: train, xval, eval, gradcheck, encode-mnist, pathology. Each run
directory receives ``config.ini`` (the fully resolved configuration),
``run.json`` (command, profile, seed, package version) and ``walltime.txt``.
Timing lives in its own file so metrics files stay byte-identical between
repeated runs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_USAGE = 0, 1, 2, 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value overrides")
    common.add_argument("--profile", help="named default set, e.g. mnist-base")
    common.add_argument("--seed", type=int, help="overrides training.seed")
    common.add_argument("--dt", type=float, help="overrides training.dt (ms)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="BLAS threads (default: available cores)")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eventprop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train and write metrics and checkpoints")
    t.add_argument("--plot", action="store_true", help="also write learning_curve.svg")
    x = sub.add_parser("xval", parents=[common], help="cross-validation")
    x.add_argument("--folds", default="loso", help="'loso' or a number k")
    x.add_argument("--plot", action="store_true")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test set")
    e.add_argument("--checkpoint", required=True)
    sub.add_parser("gradcheck", parents=[common], help="adjoint vs finite differences")
    m = sub.add_parser("encode-mnist", parents=[common], help="grey-level digits to event file")
    m.add_argument("--images", required=True, help="IDX (optionally .gz) or CSV image file")
    m.add_argument("--labels", help="IDX label file (CSV files carry labels in column 0)")
    m.add_argument("--duration", type=float, default=20.0)
    m.add_argument("--output", required=True, help="dataset file to write")
    sub.add_parser("pathology", parents=[common],
                   help="single-class cross-entropy training and weight/activity table")
    return p


def _resolve(args):
    from . import config as C
    text = ""
    if args.config:
        with open(args.config) as f:
            text = f.read()
    over = {}
    if args.seed is not None:
        over.setdefault("training", {})["seed"] = args.seed
    if args.dt is not None:
        over.setdefault("training", {})["dt"] = args.dt
    return C.resolve(args.profile, text, over)


def _prepare_out(args, cfg):
    from . import __version__
    from .config import dump
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.ini"), "w") as f:
        f.write(dump(cfg))
    stamp = {"command": args.command, "profile": args.profile, "config_file": args.config,
             "seed": cfg["training"]["seed"], "version": __version__,
             "python": sys.version.split()[0]}
    with open(os.path.join(args.out, "run.json"), "w") as f:
        json.dump(stamp, f, indent=2, sort_keys=True)
        f.write("\n")


def _walltime(args, t0):
    with open(os.path.join(args.out, "walltime.txt"), "w") as f:
        f.write(f"{time.perf_counter() - t0:.3f}\n")


def write_svg(path, history, keys=("train_acc", "val_acc"), width=480, height=300):
    """Plain SVG line plot of metric columns against epoch."""
    pad = 40
    ep = [h["epoch"] for h in history]
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad}" y="{pad // 2}" width="{width - 1.5 * pad}" height="{height - 1.5 * pad}" '
             'fill="none" stroke="black"/>']
    x_of = lambda e: pad + (e - ep[0]) / max(ep[-1] - ep[0], 1) * (width - 1.5 * pad)
    y_of = lambda v: pad // 2 + (1.0 - v) * (height - 1.5 * pad)
    for k, col in zip(keys, colours):
        pts = [(x_of(h["epoch"]), y_of(h[k])) for h in history
               if isinstance(h.get(k), float) and h[k] == h[k]]
        if pts:
            parts.append('<polyline fill="none" stroke="%s" points="%s"/>'
                         % (col, " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)))
            parts.append(f'<text x="{pts[-1][0] - 60:.1f}" y="{pts[-1][1] - 4:.1f}" '
                         f'font-size="11" fill="{col}">{k}</text>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="11">epoch</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def cmd_train(args, cfg):
    from .experiments import build_data, config_for
    from .training import evaluate, save_checkpoint, train
    tr, te, n_classes, n_ch = build_data(cfg)
    tc = config_for(cfg, n_classes, n_ch)
    res = train(tr, tc, te or None, metrics_path=os.path.join(args.out, "metrics.csv"))
    save_checkpoint(os.path.join(args.out, "best.npz"), res.params, epoch=res.best_epoch)
    save_checkpoint(os.path.join(args.out, "final.npz"), res.final_params, res.optimizer,
                    epoch=tc.epochs - 1)
    if te:
        ev = evaluate(res.final_params, te, tc.loss_spec, tc.dt, tc.batch_size, tc.augment, tc.n_in)
        print(f"final test accuracy {ev.accuracy:.4f}")
    if getattr(args, "plot", False) and res.history:
        write_svg(os.path.join(args.out, "learning_curve.svg"), res.history)
    return EXIT_OK


def cmd_xval(args, cfg):
    import numpy as np
    from .data import kfold, loso_folds
    from .experiments import build_data, config_for
    from .training import cross_validate
    tr, te, n_classes, n_ch = build_data(cfg)
    tc = config_for(cfg, n_classes, n_ch)
    trials = list(tr) + list(te)
    if args.folds == "loso":
        folds = loso_folds(trials)
    else:
        folds = kfold(trials, int(args.folds), np.random.default_rng([tc.seed, 9]))
    rows = cross_validate(trials, tc, folds, args.out)
    keys = ["fold", "n_train", "n_val", "best_epoch", "train_acc", "val_acc"]
    with open(os.path.join(args.out, "summary.csv"), "w") as f:
        f.write(",".join(keys) + "\n")
        for r in rows:
            f.write(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")
        accs = np.array([r["val_acc"] for r in rows], float)
        f.write(f"mean,,,,,{accs.mean()!r}\nstd,,,,,{accs.std()!r}\n")
    print(f"{len(rows)} folds, validation accuracy {accs.mean():.4f} +- {accs.std():.4f}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .experiments import build_data, config_for
    from .training import evaluate, load_checkpoint
    params, _, _ = load_checkpoint(args.checkpoint)
    tr, te, n_classes, n_ch = build_data(cfg)
    tc = config_for(cfg, n_classes, n_ch)
    ev = evaluate(params, te or tr, tc.loss_spec, tc.dt, tc.batch_size, tc.augment, tc.n_in)
    with open(os.path.join(args.out, "eval.csv"), "w") as f:
        f.write("n_trials,accuracy,mean_loss,hidden_rate\n")
        f.write(f"{len(ev.predictions)},{ev.accuracy!r},{ev.loss!r},{ev.hidden_rate!r}\n")
    print(f"accuracy {ev.accuracy:.4f} on {len(ev.predictions)} trials")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import FAIL, INCONCLUSIVE, run_suite, suite_verdict
    from .losses import LossSpec
    g, lo = cfg["gradcheck"], cfg["loss"]
    kinds = [k.strip() for k in str(g["losses"]).split(",") if k.strip()]
    specs = [LossSpec(k, float(lo["tau0"]), float(lo["tau1"]), float(lo["alpha"])) for k in kinds]
    if g["include_tau"]:
        tols = [float(g["tolerance_tau"])] * len(specs)
    else:
        tols = [float(g["tolerance_max"]) if s.kind == "max" else float(g["tolerance"]) for s in specs]
    reports = {}
    for mode in sorted({s.output_mode for s in specs}):
        group = [(s, t) for s, t in zip(specs, tols) if s.output_mode == mode]
        reports.update(run_suite([s for s, _ in group], [t for _, t in group],
                                 seeds=range(int(g["seeds"])), dt=float(g["dt"]),
                                 include_tau=bool(g["include_tau"]), network=str(g["network"])))
    for s in specs:
        reports[s].to_csv(os.path.join(args.out, f"gradcheck_{s.kind}.csv"))
        print(reports[s].summary())
    verdict = suite_verdict(reports.values())
    print(f"overall: {verdict}")
    return {FAIL: EXIT_FAIL, INCONCLUSIVE: EXIT_INCONCLUSIVE}.get(verdict, EXIT_OK)


def cmd_encode_mnist(args):
    from .data import encode_digits, read_digits, write_dataset
    X, y = read_digits(args.images, args.labels)
    trials = encode_digits(X.reshape(len(X), -1), y, args.duration)
    write_dataset(args.output, trials)
    print(f"wrote {len(trials)} trials to {args.output}")
    return EXIT_OK


def cmd_pathology(args, cfg):
    from .experiments import build_data, config_for, pathology_run
    tr, _, n_classes, n_ch = build_data(cfg)
    tc = config_for(cfg, n_classes, n_ch)
    pc = cfg["pathology"]
    res = pathology_run(tr, tc, int(pc["train_class"]), int(pc["top_neurons"]),
                        metrics_path=os.path.join(args.out, "metrics.csv"))
    with open(os.path.join(args.out, "pathology.csv"), "w") as f:
        f.write(res.to_csv())
    with open(os.path.join(args.out, "transport.csv"), "w") as f:
        f.write("neuron,initial_transport_sum\n")
        for i in res.top_neurons:
            f.write(f"{i},{res.initial_transport[i]!r}\n")
    print(f"Pearson correlation (spike count vs weight to output {res.train_class}): "
          f"{res.correlation:.3f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    for var in _THREAD_VARS:
        os.environ[var] = str(max(1, args.threads))
    import logging
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .errors import ConfigError, DatasetParseError
    try:
        if args.command == "encode-mnist":
            os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
            return cmd_encode_mnist(args)
        profile_default = {"gradcheck": "chain-sum", "pathology": "pathology"}
        if args.profile is None and args.config is None:
            args.profile = profile_default.get(args.command, "synthetic")
        cfg = _resolve(args)
        _prepare_out(args, cfg)
        t0 = time.perf_counter()
        handler = {"train": cmd_train, "xval": cmd_xval, "eval": cmd_eval,
                   "gradcheck": cmd_gradcheck, "pathology": cmd_pathology}[args.command]
        code = handler(args, cfg)
        _walltime(args, t0)
        return code
    except (ConfigError, DatasetParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
