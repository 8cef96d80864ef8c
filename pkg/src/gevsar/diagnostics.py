"""Model-fit diagnostics: madogram curves, QQ comparisons, quantile
mapping, absolute relative error summaries, and the smoothing-spline
bias corrector for raw neural estimates.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import DomainError
from .lattice import FieldStack, ModelParams, median_iqr_standardize  # noqa: F401 (re-export)

__all__ = [
    "MadogramCurve",
    "empirical_madogram",
    "stack_madogram",
    "median_iqr_standardize",
    "QqResult",
    "qq_data",
    "quantile_map",
    "AreResult",
    "are",
    "SmoothingSpline1D",
    "BiasCorrector",
    "fit_bias_corrector",
]


@dataclass
class MadogramCurve:
    """Binned first-order variogram: 2 gamma(h) = mean |Y(s_i) - Y(s_j)|."""

    distances: np.ndarray
    values: np.ndarray
    pair_counts: np.ndarray

    def __post_init__(self):
        if not np.all(np.diff(self.distances) > 0):
            raise DomainError("madogram distances must be strictly increasing")
        if np.any(self.pair_counts <= 0):
            raise DomainError("every reported bin needs at least one pair")


@functools.lru_cache(maxsize=32)
def _pair_structure(d: int, max_h: float, n_bins: int | None):
    """Pair indices and bin assignment for a d x d unit grid.

    Pairs are grouped by exact attainable lattice distance; when there are
    more distinct distances than n_bins, adjacent groups merge into
    n_bins equal-width distance bins.
    """
    g = np.arange(d)
    yy, xx = np.meshgrid(g, g, indexing="ij")
    coords = np.column_stack([yy.ravel(), xx.ravel()])
    n = coords.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    sq = np.sum((coords[ii] - coords[jj]) ** 2, axis=1)
    keep = sq <= max_h * max_h + 1e-9
    ii, jj, sq = ii[keep], jj[keep], sq[keep]

    uniq, inverse = np.unique(sq, return_inverse=True)
    distances = np.sqrt(uniq.astype(float))
    if n_bins is not None and distances.size > n_bins:
        edges = np.linspace(0.0, max_h, n_bins + 1)
        group_of_dist = np.clip(np.searchsorted(edges, distances, side="left") - 1, 0, n_bins - 1)
        bin_ids = group_of_dist[inverse]
        counts = np.bincount(bin_ids, minlength=n_bins)
        sums = np.bincount(bin_ids, weights=np.sqrt(sq.astype(float)), minlength=n_bins)
        nonempty = counts > 0
        remap = -np.ones(n_bins, dtype=int)
        remap[nonempty] = np.arange(nonempty.sum())
        bin_ids = remap[bin_ids]
        distances = (sums[nonempty] / counts[nonempty])
        counts = counts[nonempty]
    else:
        bin_ids = inverse
        counts = np.bincount(inverse, minlength=distances.size)
    return ii, jj, bin_ids, distances, counts


def empirical_madogram(field: np.ndarray, max_h: float | None = None, n_bins: int | None = None) -> MadogramCurve:
    """Madogram of one d x d field over pairs binned by pixel distance."""
    field = np.asarray(field, dtype=float)
    if field.ndim != 2 or field.shape[0] != field.shape[1]:
        raise DomainError(f"madogram expects a square 2-D field, got shape {field.shape}")
    d = field.shape[0]
    if d < 2:
        raise DomainError("madogram needs a grid of at least 2 x 2")
    if n_bins is not None and n_bins == 0:
        raise DomainError("n_bins must be positive")
    if max_h is None:
        max_h = d / 2
    if max_h > d * math.sqrt(2.0) + 1e-9:
        raise DomainError(f"max_h {max_h} exceeds the grid diameter")
    ii, jj, bin_ids, distances, counts = _pair_structure(d, float(max_h), n_bins)
    flat = field.ravel()
    absdiff = np.abs(flat[ii] - flat[jj])
    sums = np.bincount(bin_ids, weights=absdiff, minlength=distances.size)
    return MadogramCurve(distances=distances.copy(), values=sums / counts, pair_counts=counts.copy())


def stack_madogram(stack: FieldStack, max_h: float | None = None, n_bins: int | None = None) -> MadogramCurve:
    """Mean madogram curve over the replicates of a stack."""
    curves = [
        empirical_madogram(stack.values[:, :, j], max_h=max_h, n_bins=n_bins)
        for j in range(stack.replicates)
    ]
    values = np.mean([c.values for c in curves], axis=0)
    return MadogramCurve(
        distances=curves[0].distances,
        values=values,
        pair_counts=curves[0].pair_counts * stack.replicates,
    )


@dataclass
class QqResult:
    """Empirical quantile pairs, with a pointwise envelope when the
    simulated side is a collection of repetitions."""

    probs: np.ndarray
    obs_q: np.ndarray
    sim_q: np.ndarray  # per-prob median across repetitions (or the single curve)
    sim_lo: np.ndarray | None = None
    sim_hi: np.ndarray | None = None


def qq_data(obs: np.ndarray, sim, probs: np.ndarray) -> QqResult:
    """Quantile pairs of observed vs simulated samples.

    `sim` may be a single sample or a sequence of repetition samples; in
    the latter case the pointwise 2.5%/97.5% envelope across repetitions
    is returned alongside the median curve. Quantiles use linear
    interpolation of order statistics.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0 or np.any((probs <= 0) | (probs >= 1)):
        raise DomainError("probs must be a nonempty array inside (0, 1)")
    obs = np.asarray(obs, dtype=float).ravel()
    if obs.size == 0:
        raise DomainError("observed sample is empty")
    obs_q = np.quantile(obs, probs)

    if isinstance(sim, np.ndarray) and sim.ndim == 1:
        reps = [sim]
        single = True
    else:
        reps = [np.asarray(s, dtype=float).ravel() for s in sim]
        single = len(reps) == 1
    if not reps or any(s.size == 0 for s in reps):
        raise DomainError("simulated sample is empty")
    q = np.vstack([np.quantile(s, probs) for s in reps])
    if single:
        return QqResult(probs=probs, obs_q=obs_q, sim_q=q[0])
    return QqResult(
        probs=probs,
        obs_q=obs_q,
        sim_q=np.median(q, axis=0),
        sim_lo=np.quantile(q, 0.025, axis=0),
        sim_hi=np.quantile(q, 0.975, axis=0),
    )


def quantile_map(sim: np.ndarray, obs_reference: np.ndarray) -> np.ndarray:
    """Monotone transform aligning sim's empirical quantiles with obs.

    Each simulated value is replaced by the observed quantile at its own
    plotting position in the simulated sample; ranks are preserved.
    """
    sim = np.asarray(sim, dtype=float).ravel()
    obs = np.asarray(obs_reference, dtype=float).ravel()
    if sim.size == 0 or obs.size == 0:
        raise DomainError("quantile mapping needs nonempty samples")
    n = sim.size
    order = np.argsort(sim, kind="stable")
    ranks = np.empty(n, dtype=float)
    ranks[order] = np.arange(n)
    p = ranks / (n - 1) if n > 1 else np.full(1, 0.5)
    return np.quantile(obs, p)


@dataclass
class AreResult:
    """Elementwise |sim - obs| / |obs| with zero-observation flagging."""

    values: np.ndarray  # nan where the observation is zero
    log_values: np.ndarray  # nan where flagged
    flagged: np.ndarray  # zero observations and exact-zero errors


def are(observed: np.ndarray, simulated: np.ndarray) -> AreResult:
    obs = np.asarray(observed, dtype=float).ravel()
    sim = np.asarray(simulated, dtype=float).ravel()
    if obs.shape != sim.shape:
        raise DomainError(f"length mismatch: {obs.shape} vs {sim.shape}")
    zero_obs = obs == 0.0
    values = np.full(obs.shape, np.nan)
    values[~zero_obs] = np.abs(sim[~zero_obs] - obs[~zero_obs]) / np.abs(obs[~zero_obs])
    flagged = zero_obs | (values == 0.0)
    log_values = np.full(obs.shape, np.nan)
    ok = ~flagged
    log_values[ok] = np.log(values[ok])
    return AreResult(values=values, log_values=log_values, flagged=flagged)


class SmoothingSpline1D:
    """Cubic penalized regression spline with GCV-chosen smoothing.

    A second-difference penalty on the B-spline coefficients is annealed
    over a wide grid; generalized cross-validation picks the smoothing,
    subject to a floor on effective degrees of freedom. Evaluation beyond
    the training range continues linearly from the endpoints.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, df_floor: float = 4.0, max_knots: int = 20):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise DomainError("x and y must be matching 1-D arrays")
        if x.size < 10:
            raise DomainError("need at least 10 points to fit a smoothing spline")
        spread = float(np.std(x))
        if spread < 1e-12 * (abs(float(np.mean(x))) + 1.0):
            raise DomainError("covariate spread is degenerate")

        order = np.argsort(x, kind="stable")
        x, y = x[order], y[order]
        self.x_lo, self.x_hi = float(x[0]), float(x[-1])

        n_int = min(max_knots, max(2, x.size // 10))
        interior = np.quantile(x, np.linspace(0.0, 1.0, n_int + 2)[1:-1])
        interior = np.unique(interior[(interior > self.x_lo) & (interior < self.x_hi)])
        t = np.r_[[self.x_lo] * 4, interior, [self.x_hi] * 4]
        nb = len(t) - 4

        Xd = BSpline.design_matrix(x, t, 3).toarray()
        D = np.diff(np.eye(nb), n=2, axis=0)
        XtX = Xd.T @ Xd
        P = D.T @ D
        Xty = Xd.T @ y
        scale = np.trace(XtX) / max(np.trace(P), 1e-300)
        ridge = 1e-12 * np.trace(XtX) / nb * np.eye(nb)

        best = None
        n = x.size
        for lam in scale * np.geomspace(1e-7, 1e7, 29):
            M = XtX + lam * P + ridge
            try:
                beta = np.linalg.solve(M, Xty)
                df = float(np.trace(np.linalg.solve(M, XtX)))
            except np.linalg.LinAlgError:
                continue
            rss = float(np.sum((y - Xd @ beta) ** 2))
            denom = max(n - df, 1e-9)
            gcv = n * rss / denom ** 2
            if df >= df_floor and (best is None or gcv < best[0]):
                best = (gcv, beta)
        if best is None:  # every candidate fell below the df floor
            M = XtX + scale * 1e-7 * P + ridge
            best = (math.inf, np.linalg.solve(M, Xty))
        self._spline = BSpline(t, best[1], 3, extrapolate=False)
        self._lo_val = float(self._spline(self.x_lo))
        self._hi_val = float(self._spline(self.x_hi))
        deriv = self._spline.derivative()
        self._lo_slope = float(deriv(self.x_lo))
        self._hi_slope = float(deriv(self.x_hi))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        out = np.empty_like(x)
        below = x < self.x_lo
        above = x > self.x_hi
        inside = ~(below | above)
        out[inside] = self._spline(x[inside])
        out[below] = self._lo_val + self._lo_slope * (x[below] - self.x_lo)
        out[above] = self._hi_val + self._hi_slope * (x[above] - self.x_hi)
        return float(out[0]) if scalar else out

    def state_dict(self) -> dict:
        return {
            "knots": list(map(float, self._spline.t)),
            "coefs": list(map(float, self._spline.c)),
            "x_lo": self.x_lo,
            "x_hi": self.x_hi,
        }

    @classmethod
    def from_state(cls, state: dict) -> "SmoothingSpline1D":
        obj = cls.__new__(cls)
        obj._spline = BSpline(np.asarray(state["knots"]), np.asarray(state["coefs"]), 3, extrapolate=False)
        obj.x_lo, obj.x_hi = state["x_lo"], state["x_hi"]
        obj._lo_val = float(obj._spline(obj.x_lo))
        obj._hi_val = float(obj._spline(obj.x_hi))
        deriv = obj._spline.derivative()
        obj._lo_slope = float(deriv(obj.x_lo))
        obj._hi_slope = float(deriv(obj.x_hi))
        return obj


PARAM_NAMES = ("xi", "kappa2", "tau2")


@dataclass
class BiasCorrector:
    """Per-parameter map from raw estimate to corrected estimate.

    Splines act on the transformed scales (xi, ln kappa2, ln tau2); the
    correction is exponentiated back for kappa2 and tau2.
    """

    splines: dict[str, SmoothingSpline1D] = field(default_factory=dict)

    def apply_array(self, estimates: np.ndarray) -> np.ndarray:
        est = np.asarray(estimates, dtype=float)
        if est.ndim != 2 or est.shape[1] != 3:
            raise DomainError(f"estimates must be (n, 3), got {est.shape}")
        if np.any(est[:, 1:] <= 0):
            raise DomainError("kappa2 and tau2 estimates must be positive")
        out = np.empty_like(est)
        out[:, 0] = self.splines["xi"](est[:, 0])
        out[:, 1] = np.exp(self.splines["kappa2"](np.log(est[:, 1])))
        out[:, 2] = np.exp(self.splines["tau2"](np.log(est[:, 2])))
        return out

    def apply(self, theta_hat: ModelParams) -> ModelParams:
        row = self.apply_array(theta_hat.as_array()[None, :])[0]
        return ModelParams(*row)

    def to_json(self) -> str:
        return json.dumps({name: s.state_dict() for name, s in self.splines.items()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BiasCorrector":
        d = json.loads(text)
        return cls(splines={name: SmoothingSpline1D.from_state(s) for name, s in d.items()})


def fit_bias_corrector(truths: np.ndarray, estimates: np.ndarray) -> BiasCorrector:
    """Fit truth-on-estimate smoothing splines, one per parameter."""
    truths = np.asarray(truths, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truths.shape != estimates.shape or truths.ndim != 2 or truths.shape[1] != 3:
        raise DomainError("truths and estimates must both be (n, 3)")
    if truths.shape[0] < 50:
        raise DomainError(f"need at least 50 pairs, got {truths.shape[0]}")
    if np.any(estimates[:, 1:] <= 0) or np.any(truths[:, 1:] <= 0):
        raise DomainError("kappa2 and tau2 columns must be positive")
    xt = [estimates[:, 0], np.log(estimates[:, 1]), np.log(estimates[:, 2])]
    yt = [truths[:, 0], np.log(truths[:, 1]), np.log(truths[:, 2])]
    splines = {name: SmoothingSpline1D(xt[i], yt[i]) for i, name in enumerate(PARAM_NAMES)}
    return BiasCorrector(splines=splines)
