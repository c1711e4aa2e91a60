"""Command-line driver.

Subcommands: ``train``, ``sample``, ``predict``, ``reconstruct``,
``precondition`` and ``demo``. Settings come from built-in defaults, then a
JSON file given by ``--config``, then command-line flags (later wins).
Relative paths inside a config file are resolved against its directory.

Exit status is 0 on success, 1 for usage, configuration or data errors and
2 for numerical failures.
"""

import argparse
import csv
import json
import logging
import math
import statistics
import sys
from pathlib import Path

import numpy as np

from .basis import build_basis, build_grid
from .errors import ConfigError, NumericalError
from .experiments import (
    precondition_study,
    reconstruction_grief_only,
    reconstruction_study,
    sinsin_data,
)
from .inference import (
    ChainConfig,
    default_priors,
    grief_builder,
    init_hypers,
    mala_sample,
    optimize_type2,
    predict_type1,
)
from .io import (
    ModelArtifact,
    check_features,
    grief2_default_p,
    ingest_csv,
    load_config,
    load_model,
    read_table,
    save_model,
)
from .model import ModelState, orthogonalize, precompute, predict

logger = logging.getLogger("gpgrief")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
GRIEF1_P = 1000
PATH_KEYS = ("data", "test_data", "model", "out", "draws")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for numerical failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="grief", description="GRIEF Gaussian-process regression")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="fit a model to a CSV")
    p.add_argument("--data", help="training CSV")
    p.add_argument("--target", help="target column name or index (default: last)")
    p.add_argument("--test", dest="test_data", help="optional test CSV for RMSE")
    p.add_argument("--no-header", dest="header", action="store_const", const=False)
    p.add_argument("--mode", choices=["grief2", "grief1"])
    p.add_argument("--mbar", type=int, help="grid points per dimension")
    p.add_argument("--p", type=int, help="number of eigenfunctions")
    p.add_argument("--isotropic", dest="ard", action="store_const", const=False,
                   help="share one lengthscale across inputs")

    p = sub.add_parser("sample", parents=[common], help="MALA over weights and noise")
    p.add_argument("--model", help="model file from train")
    p.add_argument("--iters", type=int)
    p.add_argument("--burn", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--draws", help="CSV of retained draws (default: <out>.draws.csv)")

    p = sub.add_parser("predict", parents=[common], help="predictive mean and variance")
    p.add_argument("--model", help="model file")
    p.add_argument("--data", help="CSV of inputs")
    p.add_argument("--target", help="target column to drop (and score) if present")
    p.add_argument("--no-header", dest="header", action="store_const", const=False)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruction error vs p")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--mbar", type=int)
    p.add_argument("--p", dest="ps", type=_int_list, help="comma-separated p values")
    p.add_argument("--nystrom-seeds", type=int)
    p.add_argument("--lengthscale", type=float)
    p.add_argument("--large-scale", action="store_const", const=True,
                   help="GRIEF-only run at d=100, mbar=100")

    p = sub.add_parser("precondition", parents=[common], help="plain vs preconditioned CG")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--mbar", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--lengthscale", type=float)
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")

    sub.add_parser("demo", parents=[common],
                   help="write the 2-D sin*sin task and its config to --out (a directory)")
    return parser


def _resolve_config(args):
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "verbose")}
    cfg = load_config(args.config, overrides)
    if args.config:
        base = Path(args.config).resolve().parent
        for key in PATH_KEYS:
            val = cfg.values.get(key)
            # flags are relative to the working directory, config entries to the file
            if val is not None and overrides.get(key) is None and not Path(val).is_absolute():
                cfg.values[key] = str(base / val)
    return cfg


def _require(cfg, *keys):
    missing = [f"{k}: required" for k in keys if cfg.values.get(k) is None]
    if missing:
        raise ConfigError(missing)


# train / sample / predict -----------------------------------------------------

def fit_model(ds, cfg) -> tuple:
    """Initialization, grid and basis for either inference mode.

    Returns ``(ModelArtifact, info)``.
    """
    mbar = cfg.mbar or 10
    seed = cfg.seed
    kernel0, s20 = init_hypers(ds.X, ds.y, cfg.kernel, seed, cfg.max_init_points,
                               cfg.restarts, cfg.ard)
    grid = build_grid(ds.X, mbar)
    m = math.prod(grid.mbar)
    default_p = grief2_default_p(ds.n) if cfg.mode == "grief2" else GRIEF1_P
    p = cfg.p or default_p
    if p > m:
        logger.warning("p=%d exceeds the %d grid points; using p=%d", p, m, m)
        p = m
    info = {"p": p, "log10_m": grid.log10_m, "sigma2_0": s20,
            "init_lengthscales": kernel0.lengthscales.tolist(),
            "init_variance": kernel0.variance}
    if cfg.mode == "grief2":
        kernel, s2, report = optimize_type2(grief_builder(ds.X, grid, p), ds.X, ds.y,
                                            (kernel0, s20), seed, cfg.restarts,
                                            cfg.max_iter, ard=cfg.ard)
        basis = build_basis(ds.X, kernel, mbar, p, grid=grid)
        stats = precompute(basis.phi, ds.y)
        state = ModelState(np.ones(p), s2)
        transform = None
        info.update(best_lml=report.best_lml, converged=report.converged)
    else:
        basis = build_basis(ds.X, kernel0, mbar, p, grid=grid)
        transform, stats = orthogonalize(basis.phi, ds.y)
        state = ModelState(np.ones(stats.p), s20)
        info.update(effective_p=stats.p)
    art = ModelArtifact(cfg.mode, basis, stats, state, ds.n, ds.x_std, ds.y_std, transform,
                        None, ds.feature_names, ds.target_name,
                        {"sigma2_0": s20, "seed": seed})
    return art, info


def predict_artifact(art: ModelArtifact, X_raw):
    """Mean and variance in original target units for raw (unscaled) inputs."""
    X = art.x_std.forward(check_features(art, X_raw))
    if art.samples is not None:
        mean, var = predict_type1(art.basis, art.stats, art.samples, X, art.transform)
    else:
        mean, var = predict(art.basis, art.stats, art.state, X, art.transform)
    scale = float(art.y_std.scale)
    return mean * scale + float(art.y_std.mean), var * scale * scale


def _split_inputs(path, header, target, art):
    """Features (and target, if present) of a prediction CSV."""
    names, values, rejected = read_table(path, header)
    if rejected:
        logger.info("dropped %d row(s) with missing values", rejected)
    if target is None and header and art.target_name in names and len(names) == art.d + 1:
        target = art.target_name
    if target is None:
        return values, None
    if isinstance(target, str) and not target.lstrip("-").isdigit():
        if target not in names:
            raise ValueError(f"target column {target!r} not found; columns are {names}")
        t = names.index(target)
    else:
        t = int(target) % len(names)
    keep = [j for j in range(len(names)) if j != t]
    return values[:, keep], values[:, t]


def _rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def cmd_train(cfg):
    _require(cfg, "data")
    ds = ingest_csv(cfg.data, cfg.target, cfg.header)
    if ds.n_rejected:
        print(f"rejected {ds.n_rejected} row(s) with missing values")
    art, info = fit_model(ds, cfg)
    out = cfg.out or "model.grief"
    save_model(art, out)
    print(f"trained {cfg.mode} on n={ds.n}, d={ds.d}: p={info['p']}, "
          f"log10(m)={info['log10_m']:.2f}, sigma2={art.state.sigma2:.6g} (standardized)")
    print(f"model written to {out}")
    if cfg.test_data:
        X, y = _split_inputs(cfg.test_data, cfg.header, cfg.target or ds.target_name, art)
        mean, _ = predict_artifact(art, X)
        print(f"test RMSE: {_rmse(mean, y):.6f}")
    return EXIT_OK


def cmd_sample(cfg):
    _require(cfg, "model")
    art = load_model(cfg.model)
    chain = ChainConfig(cfg.iters, cfg.burn, cfg.thin, float(cfg.step_size))
    s20 = art.metadata.get("sigma2_0", art.state.sigma2)
    samples = mala_sample(art.stats, art.n_train, default_priors(s20), chain, cfg.seed)
    art.samples = samples
    out = cfg.out or cfg.model
    save_model(art, out)
    draws = cfg.draws or str(Path(out).with_suffix(".draws.csv"))
    with open(draws, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma2"] + [f"w{j}" for j in range(art.stats.p)])
        for k in range(len(samples)):
            w.writerow([repr(float(samples.sigma2[k]))] + [repr(float(v)) for v in samples.w[k]])
    print(f"retained {len(samples)} draws, acceptance rate {samples.acceptance_rate:.3f}, "
          f"step size {samples.step_size:.4g}")
    print(f"model written to {out}; draws written to {draws}")
    return EXIT_OK


def cmd_predict(cfg):
    _require(cfg, "model", "data")
    art = load_model(cfg.model)
    X, y = _split_inputs(cfg.data, cfg.header, cfg.target, art)
    mean, var = predict_artifact(art, X)
    out = cfg.out or "predictions.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mean", "variance"])
        w.writerows([repr(float(m)), repr(float(v))] for m, v in zip(mean, var))
    print(f"wrote {mean.size} predictions to {out}")
    if y is not None:
        print(f"RMSE: {_rmse(mean, y):.6f}")
    return EXIT_OK


# studies ----------------------------------------------------------------------

def cmd_reconstruct(cfg):
    ps = cfg.ps
    if cfg.large_scale:
        rows = reconstruction_grief_only(n_train=cfg.n_train or 2500, d=cfg.d or 100,
                                         mbar=cfg.mbar or 100, ps=tuple(ps or (8, 32, 128)),
                                         lengthscale=cfg.lengthscale, seed=cfg.seed)
    else:
        rows = reconstruction_study(n_train=cfg.n_train or 1000,
                                    n_test=1000 if cfg.n_test is None else cfg.n_test,
                                    d=cfg.d or 10, mbar=cfg.mbar or 20,
                                    ps=tuple(ps or (8, 32, 128, 512)),
                                    lengthscale=cfg.lengthscale, seed=cfg.seed,
                                    n_nystrom=cfg.nystrom_seeds)
    out = cfg.out or "reconstruction.csv"
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["p", "method", "block", "error"],
                           extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"p={r['p']:<6d} {r['method']:<15s} {r['block']:<6s} {r['error']:.6e}")
    print(f"table written to {out}")
    return EXIT_OK


def cmd_precondition(cfg):
    seeds = tuple(cfg.seeds) if cfg.seeds is not None else (0, 1, 2, 3, 4)
    res = precondition_study(n=cfg.n or 1000, d=cfg.d or 5, p=cfg.p or 200,
                             mbar=cfg.mbar or 10, tol=cfg.tol, seeds=seeds,
                             lengthscale=cfg.lengthscale, sigma2=cfg.sigma2 or 1e-2)
    out = cfg.out or "precondition.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "method", "iteration", "relative_residual"])
        for r in res:
            for method in ("plain", "grief"):
                for it, val in enumerate(r[f"{method}_residuals"]):
                    w.writerow([r["seed"], method, it, repr(float(val))])
    for r in res:
        print(f"seed {r['seed']}: plain CG {r['plain_iters']} iterations, "
              f"preconditioned {r['grief_iters']}")
    print(f"median: plain {statistics.median(r['plain_iters'] for r in res)}, "
          f"preconditioned {statistics.median(r['grief_iters'] for r in res)}")
    print(f"residual histories written to {out}")
    return EXIT_OK


def cmd_demo(cfg):
    out = Path(cfg.out or "demo")
    out.mkdir(parents=True, exist_ok=True)
    X, y, Xt, yt = sinsin_data(seed=cfg.seed)
    for name, A, b in (("train.csv", X, y), ("test.csv", Xt, yt)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "y"])
            w.writerows([repr(float(a0)), repr(float(a1)), repr(float(t))]
                        for (a0, a1), t in zip(A, b))
    config = {"data": "train.csv", "test_data": "test.csv", "target": "y", "mode": "grief2",
              "mbar": 5, "p": 4, "ard": False, "seed": cfg.seed, "out": "model.grief"}
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"demo data and config written to {out}/")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "predict": cmd_predict,
    "reconstruct": cmd_reconstruct,
    "precondition": cmd_precondition,
    "demo": cmd_demo,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
