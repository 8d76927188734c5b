"""Command line interface: ``gtm <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import (
    ConfigError,
    DataError,
    FitError,
    GtmError,
    MetricError,
    ModelFormatError,
    ParameterError,
    SamplingError,
)
from .io import atomic_write_text, matrix_to_csv, read_csv_matrix

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_FPR_GRID = (0.01, 0.02, 0.05, 0.10, 0.20)


class UsageError(GtmError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, allow_nan=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _manifest(args, outputs, extra=None) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "_argv")}
    return {
        "tool": "gtm",
        "version": __version__,
        "subcommand": args.command,
        "argv": args._argv,
        "config": cfg,
        "seed": cfg.get("seed"),
        "threads": torch.get_num_threads(),
        "outputs": [str(p) for p in outputs],
        **(extra or {}),
    }


def _write_manifest(args, primary, outputs, extra=None) -> None:
    path = args.manifest or f"{primary}.manifest.json"
    _write_json(path, _manifest(args, outputs, extra))


def _check_input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


# --------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    from .model import save
    from .training import FitConfig, ModelConfig, PenaltyConfig, fit, fit_adaptive, hyperparameter_search

    data, header = read_csv_matrix(_check_input(args.input), args.drop_col)
    mcfg = ModelConfig(args.layers, args.marginal_basis, args.conditioner_basis, tuple(args.span), args.linear)
    fcfg = FitConfig(
        max_iters=args.max_iters,
        grad_tol=args.grad_tol,
        validation_fraction=args.validation_fraction,
        patience=args.patience,
        seed=args.seed,
    )
    callback = None
    if args.verbose:
        def callback(it, x, f):
            _log(f"iter {it:5d}  objective {f:.10g}")
            return False

    extra = {}
    if args.search:
        space = {
            "tau1": tuple(args.tau1_range),
            "tau2": tuple(args.tau2_range),
            "tau3": tuple(args.tau3_range) if args.mode != "none" else None,
            "tau4": tuple(args.tau4_range),
        }
        mode = "lasso" if args.mode == "adaptive" else args.mode
        res = hyperparameter_search(data, space, args.search, args.seed, model_config=mcfg, fit_config=fcfg, mode=mode)
        model, report, pen = res.best_model, res.best_report, res.best_penalties
        report.extra["search_trials"] = res.trials
        extra["penalties"] = pen.to_dict()
        extra["search_trials"] = res.trials
    else:
        mode = "lasso" if args.mode == "adaptive" else args.mode
        pen = PenaltyConfig(args.tau1, args.tau2, args.tau3 if mode != "none" else 0.0, mode, args.tau4)
        if args.mode == "adaptive":
            res = fit_adaptive(data, mcfg, pen, fcfg)
            model, report = res.model, res.report
            extra["stage1_penalties"] = report.extra["stage1"]["penalties"]
            extra["stage2_penalties"] = report.extra["stage2_penalties"]
        else:
            model, report = fit(data, mcfg, pen, fcfg, callback=callback)
            extra["penalties"] = pen.to_dict()
    if header is not None:
        model.meta["columns"] = header
    model.meta["version"] = __version__
    report_path = args.report or f"{args.output}.report.json"
    rep = report.to_dict()
    for k in ("train_index", "validation_index"):
        rep["extra"].pop(k, None)
    save(model, args.output)
    _write_json(report_path, rep)
    _write_manifest(args, args.output, [args.output, report_path], extra)
    _log(f"fit: {report.stop_reason} after {report.n_iter} iterations; model written to {args.output}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .model import load

    if args.n < 0:
        raise UsageError("--n must be non-negative")
    model = load(_check_input(args.model))
    y = model.sample(args.n, seed=args.seed)
    header = model.meta.get("columns") or [f"y{j + 1}" for j in range(model.dim)]
    atomic_write_text(args.output, matrix_to_csv(y, header))
    _write_manifest(args, args.output, [args.output])
    return EXIT_OK


def cmd_density(args) -> int:
    from .model import load

    model = load(_check_input(args.model))
    data, header = read_csv_matrix(_check_input(args.input), args.drop_col)
    if data.shape[1] != model.dim:
        raise DataError(f"input has {data.shape[1]} columns, model expects {model.dim}")
    ld = model.log_density(data)
    header = (header or [f"y{j + 1}" for j in range(model.dim)]) + ["log_density"]
    atomic_write_text(args.output, matrix_to_csv(np.column_stack([data, ld]), header))
    _write_manifest(args, args.output, [args.output])
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .independence import ci_metrics, graph_extract
    from .model import load

    model = load(_check_input(args.model))
    report = ci_metrics(model, args.samples, args.quad_n, args.space, args.seed)
    dot = args.dot or f"{args.output}.dot"
    atomic_write_text(args.output, report.to_csv())
    atomic_write_text(dot, graph_extract(report, args.threshold, model.meta.get("columns")).to_dot())
    _write_manifest(args, args.output, [args.output, dot], {"status": report.status})
    if report.status != "ok":
        _log("metrics: some samples were excluded because of non-finite densities")
    return EXIT_OK


def _read_metrics_csv(path):
    from .independence import IndependenceReport, PairMetrics

    data, header = read_csv_matrix(_check_input(path))
    need = ["u", "v", "kld", "iae", "mean_abs_p", "mean_abs_rho"]
    if header is None or any(c not in header for c in need):
        raise DataError(f"{path}: expected columns {','.join(need)}")
    idx = [header.index(c) for c in need]
    pairs = [PairMetrics(int(r[idx[0]]), int(r[idx[1]]), *(float(r[i]) for i in idx[2:])) for r in data]
    return IndependenceReport(pairs, 0, 0, "unknown")


def cmd_graph(args) -> int:
    from .independence import graph_extract

    report = _read_metrics_csv(args.metrics)
    g = graph_extract(report, args.threshold)
    atomic_write_text(args.output, g.to_dot())
    outs = [args.output]
    if args.edges:
        atomic_write_text(args.edges, g.to_csv())
        outs.append(args.edges)
    _write_manifest(args, args.output, outs)
    return EXIT_OK


def tpr_at_fpr(scores, labels, fpr_grid=DEFAULT_FPR_GRID):
    """Largest true positive rate whose false positive rate stays within each target."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes in the labels")
    thresholds = np.unique(scores)[::-1]
    # predictions are "score >= t"
    tp = np.array([np.sum(scores[labels] >= t) for t in thresholds]) / n_pos
    fp = np.array([np.sum(scores[~labels] >= t) for t in thresholds]) / n_neg
    out = []
    for a in fpr_grid:
        ok = fp <= a + 1e-12
        out.append(float(tp[ok].max()) if np.any(ok) else 0.0)
    return out


def posterior_log_odds(log_a, log_b, prior: float) -> np.ndarray:
    return np.log(prior) - np.log1p(-prior) + np.asarray(log_a) - np.asarray(log_b)


def cmd_classify(args) -> int:
    from .model import load

    if not 0.0 < args.prior < 1.0:
        raise UsageError("--prior must lie strictly between 0 and 1")
    ma, mb = load(_check_input(args.model_a)), load(_check_input(args.model_b))
    if ma.dim != mb.dim:
        raise DataError(f"models have different dimensions ({ma.dim} vs {mb.dim})")
    data, header = read_csv_matrix(_check_input(args.input), args.drop_col)
    labels = None
    if args.label_col is not None:
        col = args.label_col
        j = int(col) if col.lstrip("-").isdigit() else (header.index(col) if header and col in header else None)
        if j is None:
            raise DataError(f"label column {col!r} not found")
        labels = data[:, j] > 0.5
        data = np.delete(data, j, axis=1)
    if data.shape[1] != ma.dim:
        raise DataError(f"input has {data.shape[1]} feature columns, models expect {ma.dim}")
    lo = posterior_log_odds(ma.log_density(data), mb.log_density(data), args.prior)
    post = 1.0 / (1.0 + np.exp(-lo))
    outs = []
    if args.posterior:
        atomic_write_text(args.posterior, matrix_to_csv(post[:, None], ["posterior_a"]))
        outs.append(args.posterior)
    grid = tuple(args.fpr) if args.fpr else DEFAULT_FPR_GRID
    if labels is not None:
        tpr = tpr_at_fpr(lo, labels, grid)
        text = ",".join(f"tpr@fpr={a:g}" for a in grid) + "\n" + ",".join(repr(t) for t in tpr) + "\n"
        atomic_write_text(args.output, text)
        outs.append(args.output)
        _log(text.strip())
    elif not args.posterior:
        raise UsageError("classify needs --label-col for a ROC table or --posterior for posteriors")
    _write_manifest(args, outs[-1], outs)
    return EXIT_OK


def bundled_spec_path() -> Path:
    return Path(str(resources.files("gtm") / "data" / "sparse5.json"))


def cmd_benchmark(args) -> int:
    from .benchmark import SyntheticSpec, run_ci_benchmark
    from .training import FitConfig, ModelConfig, PenaltyConfig

    spec = SyntheticSpec.load(_check_input(args.spec) if args.spec else bundled_spec_path())
    mcfg = ModelConfig(args.layers, args.marginal_basis, args.conditioner_basis, tuple(args.span))
    fcfg = FitConfig(max_iters=args.max_iters, patience=args.patience)
    configs = {
        "gtm_none": (mcfg, PenaltyConfig(args.tau1, args.tau2), fcfg),
        "gtm_lasso": (mcfg, PenaltyConfig(args.tau1, args.tau2, args.tau3, "lasso"), fcfg),
        "gtm_adaptive": (mcfg, PenaltyConfig(args.tau1, args.tau2, args.tau3), fcfg, "adaptive"),
    }
    if args.methods:
        configs = {k: v for k, v in configs.items() if k in args.methods}
    res = run_ci_benchmark(spec, args.n_train, configs, args.seed, n_test=args.n_test,
                           n_samples=args.samples, quad_n=args.quad_n)
    atomic_write_text(args.output, res.to_csv())
    _write_manifest(args, args.output, [args.output], {"errors": res.errors, "spec": spec.to_dict()})
    for e in res.errors:
        _log(f"benchmark cell failed: {e['method']}/{e['metric']}: {e['error']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p, seed=True):
    p.add_argument("--threads", type=int, default=None, help="torch threads (default $GTM_THREADS or 1)")
    p.add_argument("--manifest", default=None, help="manifest path (default <output>.manifest.json)")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _model_opts(p):
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--marginal-basis", type=int, default=15)
    p.add_argument("--conditioner-basis", type=int, default=40)
    p.add_argument("--span", type=float, nargs=2, default=(-15.0, 15.0), metavar=("LOW", "HIGH"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtm", description="Graphical transformation models")
    parser.add_argument("--version", action="version", version=f"gtm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a CSV file")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="model JSON path")
    p.add_argument("--report", default=None)
    p.add_argument("--drop-col", action="append", default=[])
    _model_opts(p)
    p.add_argument("--linear", action="store_true", help="constant conditioners (Gaussian copula)")
    for t in ("tau1", "tau2", "tau3", "tau4"):
        p.add_argument(f"--{t}", type=float, default=0.0)
    p.add_argument("--mode", choices=("none", "lasso", "adaptive"), default="none")
    p.add_argument("--search", type=int, default=0, metavar="TRIALS", help="random penalty search")
    p.add_argument("--tau1-range", type=float, nargs=2, default=(1e-4, 1e3))
    p.add_argument("--tau2-range", type=float, nargs=2, default=(1e-4, 1e3))
    p.add_argument("--tau3-range", type=float, nargs=2, default=(1e-4, 1e3))
    p.add_argument("--tau4-range", type=float, nargs=2, default=(1e-4, 1e2))
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--grad-tol", type=float, default=1e-6)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--validation-fraction", type=float, default=0.2)
    p.add_argument("-v", "--verbose", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample", help="draw from a fitted model")
    p.add_argument("model")
    p.add_argument("-n", "--n", type=int, required=True)
    p.add_argument("-o", "--output", required=True)
    _common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("density", help="append log-densities to a CSV file")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--drop-col", action="append", default=[])
    _common(p, seed=False)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("metrics", help="pairwise conditional-independence metrics")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True, help="pair metrics CSV")
    p.add_argument("--dot", default=None, help="graph DOT path (default <output>.dot)")
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--quad-n", type=int, default=40)
    p.add_argument("--space", choices=("latent", "data"), default="latent")
    p.add_argument("--threshold", type=float, default=0.1)
    _common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("graph", help="threshold a pair metrics CSV into a graph")
    p.add_argument("metrics")
    p.add_argument("-o", "--output", required=True, help="DOT path")
    p.add_argument("--edges", default=None, help="edge list CSV path")
    p.add_argument("--threshold", type=float, default=0.1)
    _common(p, seed=False)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("classify", help="two-class Bayes classifier from two models")
    p.add_argument("model_a", help="model of the positive class")
    p.add_argument("model_b")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="roc.csv")
    p.add_argument("--prior", type=float, default=0.5, help="prior probability of class a")
    p.add_argument("--label-col", default=None, help="column holding 1 for class a, 0 for class b")
    p.add_argument("--drop-col", action="append", default=[])
    p.add_argument("--posterior", default=None, help="write per-row posteriors here")
    p.add_argument("--fpr", type=float, nargs="+", default=None)
    _common(p, seed=False)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("benchmark", help="conditional-independence benchmark on synthetic data")
    p.add_argument("--spec", default=None, help="spec JSON (default: bundled 5-dimensional spec)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=10000)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--quad-n", type=int, default=30)
    _model_opts(p)
    p.set_defaults(conditioner_basis=20)
    p.add_argument("--tau1", type=float, default=1.0)
    p.add_argument("--tau2", type=float, default=1.0)
    p.add_argument("--tau3", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--methods", nargs="+", default=None, choices=("gtm_none", "gtm_lasso", "gtm_adaptive"))
    _common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def _threads(args) -> int:
    n = args.threads
    if n is None:
        env = os.environ.get("GTM_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"GTM_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    args._argv = argv
    try:
        torch.set_num_threads(_threads(args))
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _log(f"gtm {args.command}: {exc}")
        return EXIT_USAGE
    except (FileNotFoundError, DataError, ModelFormatError, OSError) as exc:
        _log(f"gtm {args.command}: {exc}")
        return EXIT_DATA
    except (FitError, ParameterError, SamplingError, MetricError, FloatingPointError, ValueError, RuntimeError) as exc:
        _log(f"gtm {args.command}: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
