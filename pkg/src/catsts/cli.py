"""Command-line front end: gen, train, eval, table, params, plot."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ABLATIONS, apply_ablation, frame_digest, load_config, load_dataset, prepare
from .data import gen_multi, gen_multix, gen_shifting_toy, make_windows, multix_offsets, save_csv
from .errors import CatsError, ConfigError, DataError
from .evaluation import comparison_table, evaluate, read_results_csv, write_results_csv
from .model import CatsModel, ModelConfig, count_params
from .training import load_checkpoint, save_checkpoint, train, write_history

log = logging.getLogger("catsts")


def _ensure_free(path, force):
    path = Path(path)
    if path.exists() and not force:
        if path.is_file() or any(path.iterdir()):
            raise ConfigError(f"{path} already exists; pass --force to overwrite")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args):
    if args.multix is not None:
        frame = gen_multix(args.multix, args.T, args.seed)
        default = f"multix{args.multix}.csv"
    elif args.shifting_toy:
        frame = gen_shifting_toy(args.T, args.seed)
        default = "shifting_toy.csv"
    else:
        frame = gen_multi(args.T, args.seed)
        default = "multi.csv"
    out = Path(args.out or default)
    _ensure_free(out, args.force)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(frame, out)
    extra = ""
    if args.multix is not None:
        extra = f", offsets {multix_offsets(args.multix)}"
    print(f"wrote {out} ({frame.T} rows x {frame.C} channels{extra})")
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _run_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output = args.out
    if getattr(args, "predictor", None):
        cfg.model.predictor = args.predictor
    if getattr(args, "lp", None):
        cfg.horizons = list(args.lp)
    if getattr(args, "epochs", None) is not None:
        cfg.train["epochs"] = args.epochs
        cfg.train["patience"] = min(cfg.train.get("patience", 30), args.epochs)
    if getattr(args, "ablate", None):
        cfg = apply_ablation(cfg, args.ablate)
    return cfg.validate()


def _ckpt_name(L_P):
    return f"model_L{L_P}.ckpt"


def run_training(cfg, out_dir, echo_text=None, verbose=False):
    """Train one model per horizon and write the run directory. Returns the report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if echo_text is not None:
        (out_dir / "config.yaml").write_text(echo_text)
    (out_dir / "resolved_config.yaml").write_text(cfg.dump())
    (out_dir / "seed").write_text(f"{cfg.seed}\n")
    frame, scaler = prepare(cfg)
    manifest = {
        "dataset": cfg.dataset.label,
        "values_sha256": frame_digest(frame),
        "dataset_manifest": frame.manifest,
        "standardizer": {"mean": scaler.mean.tolist(), "std": scaler.std.tolist()},
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    models = {}
    for L_P in cfg.horizons:
        tcfg = cfg.train_config(L_P)
        model = CatsModel(frame.C, tcfg.L_I, L_P, cfg.model, seed=cfg.seed)
        model, hist = train(model, frame, tcfg, log=log.info if verbose else None)
        save_checkpoint(model, out_dir / _ckpt_name(L_P), extra={"dataset": cfg.dataset.label})
        write_history(hist, out_dir / f"history_L{L_P}.csv")
        models[L_P] = model
    report = evaluate(
        models, frame, cfg.horizons, dataset=cfg.dataset.label, model_id=model_label(cfg), seed=cfg.seed,
        stride=cfg.eval_stride,
    )
    write_results_csv([report], out_dir / "results.csv")
    return report


def model_label(cfg):
    names = {"twolayer": "2L", "indlin": "IndLin", "mean": "Mean", "dlinear": "DLinear"}
    return f"{names.get(cfg.model.predictor, cfg.model.predictor)}+CATS"


def cmd_train(args):
    cfg = _run_config(args)
    _ensure_free(cfg.output, args.force)
    echo = Path(args.config).read_text()
    report = run_training(cfg, cfg.output, echo_text=echo, verbose=args.verbose)
    for L_P, (m, a) in report.horizons.items():
        rm = report.repeat[L_P][0]
        print(f"{report.dataset} L_P={L_P}: mse {m:.4f} mae {a:.4f} (repeat mse {rm:.4f})")
    print(f"run written to {cfg.output}")
    return 0


def _load_run(run_dir):
    run_dir = Path(run_dir)
    cfg_path = run_dir / "resolved_config.yaml"
    if not cfg_path.exists():
        raise DataError(f"{run_dir} is not a run directory (no resolved_config.yaml)")
    return load_config(cfg_path)


def cmd_eval(args):
    cfg = _load_run(args.run)
    frame, _ = prepare(cfg)
    models = {}
    for L_P in cfg.horizons:
        path = Path(args.run) / _ckpt_name(L_P)
        if not path.exists():
            raise DataError(f"missing checkpoint {path}")
        models[L_P], _ = load_checkpoint(path)
    report = evaluate(
        models, frame, cfg.horizons, dataset=cfg.dataset.label, model_id=model_label(cfg), seed=cfg.seed,
        stride=cfg.eval_stride,
    )
    out = Path(args.out) if args.out else Path(args.run) / "results.csv"
    write_results_csv([report], out)
    for L_P, (m, a) in report.horizons.items():
        print(f"{report.dataset} L_P={L_P}: mse {m:.4f} mae {a:.4f} (repeat mse {report.repeat[L_P][0]:.4f})")
    return 0


# ---------------------------------------------------------------------------
# table / params
# ---------------------------------------------------------------------------


def _result_files(paths):
    for p in map(Path, paths):
        if p.is_dir():
            yield from sorted(p.rglob("results.csv"))
        elif p.exists():
            yield p
        else:
            raise DataError(f"{p} does not exist")


def cmd_table(args):
    reports = []
    for path in _result_files(args.paths):
        reports.extend(read_results_csv(path))
    if not reports:
        raise DataError("no results found")
    merged = {}
    for r in reports:
        key = (r.dataset, r.model)
        if key in merged:
            merged[key].horizons.update(r.horizons)
        else:
            merged[key] = r
    table = comparison_table(list(merged.values()))
    sys.stdout.write(table.to_text())
    if args.out:
        table.write_csv(args.out)
    return 0


def cmd_params(args):
    if args.config:
        cfg = load_config(args.config)
        if args.predictor:
            cfg.model.predictor = args.predictor
        C = args.channels or load_dataset(cfg.dataset, cfg.seed).C
        L_I, L_P, mcfg = cfg.L_I, (args.lp or cfg.horizons)[0], cfg.model
    else:
        if not args.channels:
            raise ConfigError("params needs --config or --channels")
        C, L_I, L_P = args.channels, args.L_I, (args.lp or [96])[0]
        mcfg = ModelConfig(predictor=args.predictor or "twolayer")
    model = CatsModel(C, L_I, L_P, mcfg, seed=0)
    counts = count_params(model)
    total = counts["total"]
    print(f"C={C} L_I={L_I} L_P={L_P} N={model.N}")
    for name, n in counts.items():
        if name != "total":
            print(f"  {name:<24}{n:>12,d}  {100.0 * n / max(total, 1):6.2f}%")
    print(f"  {'total':<24}{total:>12,d}")
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

DIAG_COLUMNS = ("channel_kind", "channel_index", "t", "input_value", "gate", "mask", "first_stage", "final", "truth")


def diagnostics_rows(model, X_I, X_P):
    """Long-format rows for a single window (X_I (L_I, C), X_P (L_P, C))."""
    out, diag = model.forward(X_I[None])
    N, C, L_I = model.N, model.C, model.L_I
    masks = diag.masks[0] if diag.masks is not None else np.ones((N + C, L_I))
    Q_in = np.concatenate([diag.ats[0], (X_I - diag.anchors[0]).T], axis=0)
    rows = []
    for ch in range(N + C):
        kind, idx = ("ATS", ch) if ch < N else ("OTS", ch - N)
        gate = diag.gamma[0, ch] if (diag.gamma is not None and ch < N) else ""
        for t in range(L_I):
            rows.append((kind, idx, t - L_I, Q_in[ch, t], gate, masks[ch, t], "", "", ""))
        for t in range(model.L_P):
            final = out.data[0, t, idx] if kind == "OTS" else ""
            truth = X_P[t, idx] if kind == "OTS" else ""
            rows.append((kind, idx, t, "", gate, "", diag.first_stage[0, ch, t], final, truth))
    return rows, diag


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _load_run(args.run)
    L_P = args.lp[0] if args.lp else cfg.horizons[0]
    model, _ = load_checkpoint(Path(args.run) / _ckpt_name(L_P))
    frame, _ = prepare(cfg)
    w = make_windows(frame, "test", model.L_I, L_P)
    if not 0 <= args.window < len(w):
        raise ConfigError(f"window {args.window} outside [0, {len(w)})")
    X_I, X_P = w.X_I[args.window], w.X_P[args.window]
    rows, diag = diagnostics_rows(model, X_I, X_P)
    out = Path(args.out or Path(args.run) / "plots")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"diagnostics_w{args.window}.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(DIAG_COLUMNS)
        wr.writerows(rows)

    channels = args.channels if args.channels else list(range(model.C))
    t_in = np.arange(-model.L_I, 0)
    t_out = np.arange(L_P)
    anchors = diag.anchors[0, 0]
    for c in channels:
        if not 0 <= c < model.C:
            raise ConfigError(f"channel {c} outside [0, {model.C})")
        fig, ax = plt.subplots(figsize=(9, 3))
        ax.plot(t_in, X_I[:, c], color="0.3", lw=0.8, label="input")
        ax.plot(t_out, X_P[:, c], color="0.3", lw=0.8, ls="--", label="truth")
        ax.plot(t_out, diag.first_stage[0, model.N + c] + anchors[c], lw=1.0, label="first stage")
        ax.plot(t_out, diag.final[0, :, c], lw=1.2, label="final")
        if diag.masks is not None:
            kept = np.flatnonzero(diag.masks[0, model.N + c])
            if kept.size and kept.size < model.L_I:
                ax.axvspan(t_in[kept[0]], 0, color="tab:green", alpha=0.12, label="kept by cutoff")
        ax.set_title(f"{cfg.dataset.label}  window {args.window}  channel {frame.channel_names[c]}")
        ax.legend(loc="upper left", fontsize=7, ncol=5)
        fig.tight_layout()
        fig.savefig(out / f"window{args.window}_ch{c}.svg")
        plt.close(fig)
    print(f"wrote diagnostics and {len(channels)} SVG file(s) to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="catsts", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset as CSV + manifest")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--multi", action="store_true", help="eight lag-linked channels (default)")
    kind.add_argument("--multix", type=int, metavar="X", help="X chained channels with accumulating noise")
    kind.add_argument("--shifting-toy", action="store_true", help="two channels, the second lagging by 96")
    p.add_argument("--T", type=int, default=15000, help="number of rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", help="output CSV path")
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train per configured horizon, write a run directory")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (overrides config output)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.add_argument("--predictor", choices=("twolayer", "indlin", "mean", "dlinear"))
    p.add_argument("--lp", type=_int_list, help="comma-separated horizons")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a run directory on its test split")
    p.add_argument("run")
    p.add_argument("--out", help="results CSV path (default: RUN/results.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("table", help="comparison table from results CSVs or run directories")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("params", help="parameter counts per module")
    p.add_argument("--config")
    p.add_argument("--channels", type=int, help="number of channels C")
    p.add_argument("--L-I", dest="L_I", type=int, default=720)
    p.add_argument("--lp", type=_int_list)
    p.add_argument("--predictor", choices=("twolayer", "indlin", "mean", "dlinear"))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("plot", help="per-channel SVG plots and a diagnostics CSV for one test window")
    p.add_argument("run")
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--channels", type=_int_list)
    p.add_argument("--lp", type=_int_list)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CatsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
