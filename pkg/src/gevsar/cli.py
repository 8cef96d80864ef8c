"""Command-line interface.

Subcommands cover the full pipeline: simulate fields, build datasets,
train the estimator, estimate parameters (neural and MLE), fit and
evaluate uncertainty models, compute diagnostics, and run tiled
estimation over large grids. Every command takes --seed where randomness
is involved and re-runs byte-identically. Errors print one JSON line on
stderr; exit codes: 0 success, 2 usage, 3 format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import ParamRanges, load_dataset, make_dataset, save_dataset
from .diagnostics import BiasCorrector, fit_bias_corrector, qq_data, stack_madogram
from .errors import (
    DegenerateDesignError,
    DegenerateFieldError,
    DomainError,
    FitFailureError,
    FormatError,
    GevsarError,
    InputShapeError,
    ConfigurationError,
    SingularMatrixError,
    TrainingAbortError,
)
from .lattice import FieldStack, LatticeConfig, ModelParams, synthesize_field
from .mle import MleConfig, fit_mle
from .network import load_weights, save_weights
from .quantile_uq import QuantileModel, coverage_eval, fit_interval_models
from .rng import substream
from .stackio import load_stack, save_stack
from .tiling import GridStack, estimate_tiles, ingest_grid, make_tiles, smooth_surface, write_grid
from .training import TrainConfig, estimate_batch, train, write_history_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4

_NUMERICAL_ERRORS = (
    SingularMatrixError,
    DegenerateFieldError,
    DegenerateDesignError,
    FitFailureError,
    TrainingAbortError,
)
_FORMAT_ERRORS = (FormatError, InputShapeError, ConfigurationError)


def _lattice_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, default=16, help="observation grid dimension")
    p.add_argument("--buffer", type=int, default=4, help="basis nodes beyond each edge")
    p.add_argument("--support-radius", type=float, default=2.5, help="basis support radius (spacings)")
    p.add_argument("--stencil", choices=["tridiagonal-1d", "lattice-2d"], default="tridiagonal-1d")


def _cfg_from(args) -> LatticeConfig:
    return LatticeConfig(
        grid_dim=args.d,
        buffer=args.buffer,
        support_radius=args.support_radius,
        stencil=args.stencil,
    )


def _cmd_simulate(args) -> int:
    theta = ModelParams(args.xi, args.kappa2, args.tau2)
    stack = synthesize_field(theta, _cfg_from(args), args.r, substream(args.seed))
    stack.meta["seed"] = args.seed
    save_stack(stack, args.out)
    return EXIT_OK


def _cmd_dataset(args) -> int:
    ranges = ParamRanges(
        xi_range=tuple(args.xi_range),
        kappa2_range=tuple(args.kappa2_range),
        tau2_range=tuple(args.tau2_range),
        kappa2_scale="linear" if args.linear_scales else "log",
        tau2_scale="linear" if args.linear_scales else "log",
    )
    ds = make_dataset(args.n, args.r, _cfg_from(args), ranges, args.seed, workers=args.workers)
    save_dataset(ds, args.out)
    return EXIT_OK


def _cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        epochs=args.epochs,
        plateau_patience=args.patience,
        seed=args.seed,
    )
    result = train(ds, cfg)
    save_weights(result.weights, args.out)
    if args.history:
        write_history_csv(result.history, args.history)
    return EXIT_OK


def _cmd_estimate(args) -> int:
    weights = load_weights(args.weights)
    if weights.norm is None:
        raise FormatError("weights file carries no normalization stats; re-train with this toolkit")
    rows = []
    for path in args.stacks:
        stack = load_stack(path)
        if stack.replicates != weights.spec.r_channels:
            raise InputShapeError(
                f"{path}: stack has {stack.replicates} replicates, network expects "
                f"{weights.spec.r_channels}"
            )
        est = estimate_batch(weights, stack.values[None, ...], weights.norm)[0]
        rows.append([path, est[0], est[1], est[2]])
    _write_csv(args.out, ["case", "xi", "kappa2", "tau2"], rows)
    return EXIT_OK


def _cmd_mle(args) -> int:
    rows = []
    for path in args.stacks:
        stack = load_stack(path)
        cfg = MleConfig(
            grid_dim=stack.grid_dim,
            support_radius=args.support_radius,
            stencil=args.stencil,
            max_iter=args.max_iter,
            seed=args.seed,
        )
        fit = fit_mle(stack, cfg)
        rows.append([path, fit.xi, fit.kappa2, fit.nll, fit.iterations, fit.wall_time])
    _write_csv(args.out, ["case", "xi", "kappa2", "nll", "iterations", "wall_time"], rows)
    return EXIT_OK


def _cmd_uq_fit(args) -> int:
    weights = load_weights(args.weights)
    ds = load_dataset(args.dataset)
    if ds.r != weights.spec.r_channels:
        raise InputShapeError(f"dataset r={ds.r} does not match network channels {weights.spec.r_channels}")
    # dataset stacks are already standardized, so run the network directly
    from .network import forward_batch
    from .dataset import denormalize_params

    estimates = np.empty((ds.n, 3))
    for lo in range(0, ds.n, 256):
        chunk = forward_batch(weights, ds.fields[lo : lo + 256])
        for i, row in enumerate(chunk):
            estimates[lo + i] = denormalize_params(row, ds.norm).as_array()
    qmodel = fit_interval_models(estimates, ds.params)
    Path(args.out_qmodel).write_text(qmodel.to_json())
    if args.out_corrector:
        corrector = fit_bias_corrector(ds.params, estimates)
        Path(args.out_corrector).write_text(corrector.to_json())
    return EXIT_OK


def _parse_grid_values(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _cmd_uq_coverage(args) -> int:
    weights = load_weights(args.weights)
    if weights.norm is None:
        raise FormatError("weights file carries no normalization stats")
    qmodel = QuantileModel.from_json(Path(args.qmodel).read_text())
    xi_vals = _parse_grid_values(args.xi)
    k2_vals = _parse_grid_values(args.kappa2)
    t2_vals = _parse_grid_values(args.tau2)
    grid = np.array([[x, k, t] for x in xi_vals for k in k2_vals for t in t2_vals])
    cfg = _cfg_from(args)
    cells = coverage_eval(grid, args.reps, weights, weights.norm, qmodel, cfg, seed=args.seed)
    rows = []
    for c in cells:
        rows.append(
            [
                c.xi,
                c.kappa2,
                c.tau2,
                c.coverage.get("xi", ""),
                c.coverage.get("kappa2", ""),
                c.coverage.get("tau2", ""),
                c.reps,
                c.error or "",
            ]
        )
    _write_csv(
        args.out,
        ["xi", "kappa2", "tau2", "coverage_xi", "coverage_kappa2", "coverage_tau2", "reps", "error"],
        rows,
    )
    return EXIT_OK


def _cmd_madogram(args) -> int:
    stack = load_stack(args.stack)
    curve = stack_madogram(stack, max_h=args.max_h, n_bins=args.n_bins)
    rows = [[h, v, c] for h, v, c in zip(curve.distances, curve.values, curve.pair_counts)]
    _write_csv(args.out, ["h", "value", "pairs"], rows)
    return EXIT_OK


def _cmd_qq(args) -> int:
    obs = load_stack(args.obs).values.ravel()
    sims = [load_stack(p).values.ravel() for p in args.sims]
    probs = np.linspace(args.prob_lo, args.prob_hi, args.prob_count)
    res = qq_data(obs, sims if len(sims) > 1 else sims[0], probs)
    rows = []
    for i, p in enumerate(res.probs):
        lo = res.sim_lo[i] if res.sim_lo is not None else ""
        hi = res.sim_hi[i] if res.sim_hi is not None else ""
        rows.append([p, res.obs_q[i], res.sim_q[i], lo, hi])
    _write_csv(args.out, ["prob", "obs_q", "sim_q_median", "lo", "hi"], rows)
    return EXIT_OK


def _cmd_tiles(args) -> int:
    grid = ingest_grid(args.grid)
    weights = load_weights(args.weights)
    if weights.norm is None:
        raise FormatError("weights file carries no normalization stats")
    corrector = BiasCorrector.from_json(Path(args.corrector).read_text()) if args.corrector else None
    qmodel = QuantileModel.from_json(Path(args.qmodel).read_text()) if args.qmodel else None
    results = estimate_tiles(
        grid,
        weights,
        weights.norm,
        corrector=corrector,
        qmodel=qmodel,
        tile_size=args.tile_size,
        min_valid_fraction=args.min_valid_fraction,
    )
    rows = []
    for r in results:
        raw = list(r.raw) if r.raw is not None else ["", "", ""]
        corr = list(r.corrected) if r.corrected is not None else ["", "", ""]
        iv = []
        for name in ("xi", "kappa2", "tau2"):
            if r.intervals and name in r.intervals:
                iv.extend(r.intervals[name])
            else:
                iv.extend(["", ""])
        rows.append(
            [r.tile.tile_id, r.tile.row_off, r.tile.col_off, r.tile.center[0], r.tile.center[1]]
            + raw
            + corr
            + iv
            + [";".join(r.flags), r.error or ""]
        )
    _write_csv(
        args.out,
        [
            "tile_id",
            "row_off",
            "col_off",
            "center_y",
            "center_x",
            "raw_xi",
            "raw_kappa2",
            "raw_tau2",
            "xi",
            "kappa2",
            "tau2",
            "xi_lo",
            "xi_hi",
            "kappa2_lo",
            "kappa2_hi",
            "tau2_lo",
            "tau2_hi",
            "flags",
            "error",
        ],
        rows,
    )
    return EXIT_OK


def _cmd_surface(args) -> int:
    from .tiling import Tile, TileResult

    results = []
    with open(args.tiles, newline="") as fh:
        for row in csv.DictReader(fh):
            tile = Tile(
                tile_id=int(row["tile_id"]),
                row_off=int(row["row_off"]),
                col_off=int(row["col_off"]),
                size=args.tile_size,
            )
            res = TileResult(tile=tile)
            if row["xi"]:
                res.corrected = np.array([float(row["xi"]), float(row["kappa2"]), float(row["tau2"])])
            res.flags = [f for f in row.get("flags", "").split(";") if f]
            res.error = row.get("error") or None
            results.append(res)
    surf = smooth_surface(results, args.bandwidth)
    rows_off = sorted({r.tile.row_off for r in results})
    cols_off = sorted({r.tile.col_off for r in results})
    ny, nx = len(rows_off), len(cols_off)
    values = np.full((ny, nx, 3), np.nan, dtype=float)
    row_index = {v: i for i, v in enumerate(rows_off)}
    col_index = {v: i for i, v in enumerate(cols_off)}
    for i, r in enumerate(results):
        values[row_index[r.tile.row_off], col_index[r.tile.col_off]] = [
            surf["xi"][i],
            surf["kappa2"][i],
            surf["tau2"][i],
        ]
    mask = ~np.any(np.isnan(values), axis=2)
    values = np.where(mask[:, :, None], values, 0.0)
    write_grid(GridStack(values=values, mask=mask), args.out)
    return EXIT_OK


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return v

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gevsar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one field stack")
    p.add_argument("--xi", type=float, required=True)
    p.add_argument("--kappa2", type=float, required=True)
    p.add_argument("--tau2", type=float, required=True)
    p.add_argument("--r", type=int, default=30, help="replicates")
    _lattice_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("dataset", help="generate a training dataset directory")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    _lattice_args(p)
    p.add_argument("--xi-range", type=float, nargs=2, default=[0.01, 0.9])
    p.add_argument("--kappa2-range", type=float, nargs=2, default=[0.001, 2.0])
    p.add_argument("--tau2-range", type=float, nargs=2, default=[0.0001, 0.1])
    p.add_argument("--linear-scales", action="store_true", help="sample kappa2/tau2 linearly instead of log-uniformly")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("train", help="train the neural estimator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None, help="path for the epoch history CSV")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("estimate", help="neural estimates for stack files")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("stacks", nargs="+")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("mle", help="no-nugget maximum likelihood estimates for stack files")
    p.add_argument("--support-radius", type=float, default=2.5)
    p.add_argument("--stencil", choices=["tridiagonal-1d", "lattice-2d"], default="tridiagonal-1d")
    p.add_argument("--max-iter", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("stacks", nargs="+")
    p.set_defaults(func=_cmd_mle)

    p = sub.add_parser("uq-fit", help="fit quantile-regression intervals (and bias corrector)")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-qmodel", required=True)
    p.add_argument("--out-corrector", default=None)
    p.set_defaults(func=_cmd_uq_fit)

    p = sub.add_parser("uq-coverage", help="empirical interval coverage on a parameter grid")
    p.add_argument("--weights", required=True)
    p.add_argument("--qmodel", required=True)
    p.add_argument("--xi", required=True, help="comma-separated xi values")
    p.add_argument("--kappa2", required=True, help="comma-separated kappa2 values")
    p.add_argument("--tau2", required=True, help="comma-separated tau2 values")
    p.add_argument("--reps", type=int, default=200)
    _lattice_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_uq_coverage)

    p = sub.add_parser("madogram", help="madogram curve of a stack file")
    p.add_argument("--stack", required=True)
    p.add_argument("--max-h", type=float, default=None)
    p.add_argument("--n-bins", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_madogram)

    p = sub.add_parser("qq", help="QQ comparison of observed vs simulated stacks")
    p.add_argument("--obs", required=True)
    p.add_argument("--prob-lo", type=float, default=0.05)
    p.add_argument("--prob-hi", type=float, default=0.95)
    p.add_argument("--prob-count", type=int, default=19)
    p.add_argument("--out", required=True)
    p.add_argument("sims", nargs="+")
    p.set_defaults(func=_cmd_qq)

    p = sub.add_parser("tiles", help="tiled estimation over a grid directory")
    p.add_argument("--grid", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--corrector", default=None)
    p.add_argument("--qmodel", default=None)
    p.add_argument("--tile-size", type=int, default=16)
    p.add_argument("--min-valid-fraction", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tiles)

    p = sub.add_parser("surface", help="smoothed parameter surfaces from a tiles CSV")
    p.add_argument("--tiles", required=True)
    p.add_argument("--tile-size", type=int, default=16)
    p.add_argument("--bandwidth", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_surface)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERICAL_ERRORS as exc:
        _report_error(exc)
        return EXIT_NUMERICAL
    except _FORMAT_ERRORS as exc:
        _report_error(exc)
        return EXIT_FORMAT
    except DomainError as exc:
        _report_error(exc)
        return EXIT_USAGE
    except GevsarError as exc:
        _report_error(exc)
        return 1


def _report_error(exc: Exception) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
