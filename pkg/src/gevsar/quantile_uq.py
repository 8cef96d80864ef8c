"""Quantile-regression confidence intervals for the neural estimates.

Linear quantile planes at the 2.5% and 97.5% levels are fit per
parameter, with covariates (xi-hat, ln kappa2-hat, ln tau2-hat) and
responses (xi, ln kappa2, ln tau2): this mirrors fitting the interval
models on the estimator's own training configurations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import NormStats
from .errors import DegenerateDesignError, DomainError
from .lattice import LatticeConfig, ModelParams, synthesize_field
from .rng import substream
from .training import estimate_batch

RESPONSES = ("xi", "log_kappa2", "log_tau2")
DEFAULT_LEVELS = (0.025, 0.975)


def pinball_loss(u: np.ndarray, level: float) -> float:
    """Sum of rho_level(u) = u * (level - 1[u < 0]) over residuals."""
    u = np.asarray(u, dtype=float)
    return float(np.sum(u * (level - (u < 0))))


def _exact_quantile_intercept(y: np.ndarray, level: float) -> float:
    """Exact minimizer of the intercept-only pinball loss.

    The minimizer set is an order statistic, or the interval between two
    adjacent ones when n * level is an integer; the midpoint is returned
    in that case, matching the usual sample-median convention.
    """
    ys = np.sort(y)
    n = ys.size
    t = n * level
    k = math.ceil(t)
    if abs(t - round(t)) < 1e-12 and 1 <= round(t) < n:
        k = int(round(t))
        return 0.5 * (ys[k - 1] + ys[k])
    k = min(max(k, 1), n)
    return float(ys[k - 1])


def fit_qr(X: np.ndarray, y: np.ndarray, level: float, n_min: int = 20) -> np.ndarray:
    """Linear quantile regression: intercept plus one slope per column of X.

    Fits by iteratively reweighted least squares on a smoothed pinball
    loss, annealing the smoothing toward zero. A zero-column X gives the
    exact sample quantile as the intercept.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if y.shape != (n,):
        raise DomainError(f"response length {y.shape} does not match design rows {n}")
    if n < n_min:
        raise DomainError(f"need at least {n_min} observations, got {n}")
    if not 0.0 < level < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {level}")

    if p == 0:
        return np.array([_exact_quantile_intercept(y, level)])

    A = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(A) < p + 1:
        raise DegenerateDesignError("design matrix (with intercept) is rank deficient")

    beta = np.linalg.lstsq(A, y, rcond=None)[0]
    spread = float(np.std(y - A @ beta))
    if spread == 0.0:
        return beta  # interpolating fit is optimal at every level
    for delta in spread * 10.0 ** np.arange(0.0, -9.0, -1.0):
        for _ in range(60):
            u = y - A @ beta
            w = np.where(u >= 0, level, 1.0 - level) / np.maximum(np.abs(u), delta)
            sw = np.sqrt(w)
            new_beta = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)[0]
            step = np.max(np.abs(new_beta - beta))
            beta = new_beta
            if step < 1e-11 * (1.0 + np.max(np.abs(beta))):
                break
    return beta


@dataclass
class QuantileModel:
    """Per-response, per-level linear quantile coefficients."""

    levels: tuple[float, float] = DEFAULT_LEVELS
    coef: dict[str, dict[float, np.ndarray]] = field(default_factory=dict)
    n_train: int = 0
    pinball: dict[str, dict[float, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "levels": list(self.levels),
            "n_train": self.n_train,
            "coef": {r: {str(l): list(map(float, c)) for l, c in by_level.items()} for r, by_level in self.coef.items()},
            "pinball": {r: {str(l): v for l, v in by_level.items()} for r, by_level in self.pinball.items()},
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QuantileModel":
        d = json.loads(text)
        return cls(
            levels=tuple(d["levels"]),
            coef={
                r: {float(l): np.asarray(c, dtype=float) for l, c in by_level.items()}
                for r, by_level in d["coef"].items()
            },
            n_train=d["n_train"],
            pinball={
                r: {float(l): v for l, v in by_level.items()} for r, by_level in d.get("pinball", {}).items()
            },
        )


def _covariates(estimates: np.ndarray) -> np.ndarray:
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 2 or est.shape[1] != 3:
        raise DomainError(f"estimates must be (n, 3), got {est.shape}")
    if np.any(est[:, 1:] <= 0):
        raise DomainError("kappa2 and tau2 estimates must be positive to take logs")
    return np.column_stack([est[:, 0], np.log(est[:, 1]), np.log(est[:, 2])])


def _responses(truths: np.ndarray) -> np.ndarray:
    t = np.asarray(truths, dtype=float)
    if t.ndim != 2 or t.shape[1] != 3:
        raise DomainError(f"truths must be (n, 3), got {t.shape}")
    return np.column_stack([t[:, 0], np.log(t[:, 1]), np.log(t[:, 2])])


def fit_interval_models(
    estimates: np.ndarray, truths: np.ndarray, levels: tuple[float, float] = DEFAULT_LEVELS
) -> QuantileModel:
    """Six quantile-plane fits: three responses at two levels each."""
    X = _covariates(estimates)
    Y = _responses(truths)
    model = QuantileModel(levels=levels, n_train=X.shape[0])
    for j, name in enumerate(RESPONSES):
        model.coef[name] = {}
        model.pinball[name] = {}
        for level in levels:
            beta = fit_qr(X, Y[:, j], level)
            model.coef[name][level] = beta
            resid = Y[:, j] - np.column_stack([np.ones(X.shape[0]), X]) @ beta
            model.pinball[name][level] = pinball_loss(resid, level)
    return model


def predict_interval(model: QuantileModel, theta_hat: ModelParams) -> dict[str, tuple[float, float]]:
    """95% intervals in natural units; crossed bounds are swapped."""
    if theta_hat.kappa2 <= 0 or theta_hat.tau2 <= 0:
        raise DomainError("interval prediction needs positive kappa2 and tau2 estimates")
    cov = np.array([1.0, theta_hat.xi, math.log(theta_hat.kappa2), math.log(theta_hat.tau2)])
    lo_level, hi_level = min(model.levels), max(model.levels)
    out: dict[str, tuple[float, float]] = {}
    for name in RESPONSES:
        lo = float(model.coef[name][lo_level] @ cov)
        hi = float(model.coef[name][hi_level] @ cov)
        if lo > hi:
            lo, hi = hi, lo
        if name != "xi":
            lo, hi = math.exp(lo), math.exp(hi)
        key = {"xi": "xi", "log_kappa2": "kappa2", "log_tau2": "tau2"}[name]
        out[key] = (lo, hi)
    return out


@dataclass
class CoverageCell:
    xi: float
    kappa2: float
    tau2: float
    reps: int
    coverage: dict[str, float] = field(default_factory=dict)
    error: str | None = None


def coverage_eval(
    grid: np.ndarray,
    reps: int,
    weights,
    norm: NormStats,
    model: QuantileModel,
    cfg: LatticeConfig,
    seed: int = 0,
) -> list[CoverageCell]:
    """Empirical interval coverage over a grid of true parameter points.

    Per grid point: simulate `reps` stacks, estimate each, and record the
    fraction of repetitions whose interval contains the truth. Per-cell
    failures are recorded without aborting the sweep.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.shape[1] != 3:
        raise DomainError(f"grid must be (k, 3), got {grid.shape}")
    cells: list[CoverageCell] = []
    for idx, (xi, kappa2, tau2) in enumerate(grid):
        cell = CoverageCell(xi=float(xi), kappa2=float(kappa2), tau2=float(tau2), reps=reps)
        if reps == 0:
            cells.append(cell)
            continue
        r = weights.spec.r_channels
        try:
            theta = ModelParams(float(xi), float(kappa2), float(tau2))
            stacks = np.empty((reps, cfg.grid_dim, cfg.grid_dim, r), dtype=np.float32)
            for rep in range(reps):
                rng = substream(seed, idx, rep)
                stacks[rep] = synthesize_field(theta, cfg, r, rng).values
            est = estimate_batch(weights, stacks, norm)
            hits = {"xi": 0, "kappa2": 0, "tau2": 0}
            truth = {"xi": theta.xi, "kappa2": theta.kappa2, "tau2": theta.tau2}
            for row in est:
                intervals = predict_interval(model, ModelParams(*row))
                for key, (lo, hi) in intervals.items():
                    if lo <= truth[key] <= hi:
                        hits[key] += 1
            cell.coverage = {k: v / reps for k, v in hits.items()}
        except Exception as exc:  # per-cell isolation is the contract
            cell.error = f"{type(exc).__name__}: {exc}"
        cells.append(cell)
    return cells
