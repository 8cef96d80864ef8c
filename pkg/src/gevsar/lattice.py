"""SAR lattice model: sparse precision factor, Wendland basis, and the
spatial-field simulator.

A field is built in three steps: innovations e ~ GEV(1, xi, xi) on the
node lattice, coefficients c from B c = e where B is the sparse SAR
matrix controlled by kappa^2, and observations g = Phi c through a
compactly supported radial basis, multiplied by a lognormal nugget.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.spatial.distance import cdist

from . import _banded
from .distributions import GevParams, NuggetSpec, gev_sample, nugget_sample
from .errors import ConfigurationError, DegenerateFieldError, DomainError, SingularMatrixError

STENCILS = ("tridiagonal-1d", "lattice-2d")

# Relative pivot threshold below which a factorization is reported singular.
PIVOT_RTOL = 1e-12
# Required relative infinity-norm residual of coefficient solves.
SOLVE_RTOL = 1e-9


@dataclass(frozen=True)
class LatticeConfig:
    """Geometry of the observation grid and the basis-node lattice.

    The observation grid is grid_dim x grid_dim at unit spacing; basis
    nodes sit on the same lattice extended by `buffer` nodes beyond each
    edge, so there are (grid_dim + 2*buffer)^2 of them.
    """

    grid_dim: int
    buffer: int = 4
    support_radius: float = 2.5
    stencil: str = "tridiagonal-1d"

    def __post_init__(self):
        if self.grid_dim < 4:
            raise ConfigurationError(f"grid_dim must be >= 4, got {self.grid_dim}")
        if self.buffer < 0:
            raise ConfigurationError(f"buffer must be >= 0, got {self.buffer}")
        if not self.support_radius > 0:
            raise ConfigurationError(f"support_radius must be positive, got {self.support_radius}")
        if self.stencil not in STENCILS:
            raise ConfigurationError(f"unknown stencil {self.stencil!r}; expected one of {STENCILS}")

    @property
    def side(self) -> int:
        return self.grid_dim + 2 * self.buffer

    @property
    def node_count(self) -> int:
        return self.side ** 2


@dataclass(frozen=True)
class ModelParams:
    """The inference target theta = (xi, kappa2, tau2).

    Values are only checked for finiteness here; simulation additionally
    requires xi in (0, 1), kappa2 > 0 and tau2 >= 0 (see
    `validate_for_simulation`). Estimator outputs may fall outside that
    box and are carried as-is so downstream code can flag rather than
    clamp them.
    """

    xi: float
    kappa2: float
    tau2: float

    def __post_init__(self):
        for name, v in (("xi", self.xi), ("kappa2", self.kappa2), ("tau2", self.tau2)):
            if not math.isfinite(v):
                raise DomainError(f"{name} must be finite, got {v}")

    def validate_for_simulation(self) -> "ModelParams":
        if not 0.0 < self.xi < 1.0:
            raise DomainError(f"simulation requires xi in (0, 1), got {self.xi}")
        if not self.kappa2 > 0.0:
            raise DomainError(f"simulation requires kappa2 > 0, got {self.kappa2}")
        if self.tau2 < 0.0:
            raise DomainError(f"simulation requires tau2 >= 0, got {self.tau2}")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.xi, self.kappa2, self.tau2])


@dataclass
class FieldStack:
    """A grid_dim x grid_dim x r stack of field replicates."""

    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[0] != v.shape[1]:
            raise DomainError(f"field stack must have shape (d, d, r), got {v.shape}")
        if v.shape[2] < 1:
            raise DomainError("field stack needs at least one replicate")
        if not np.all(np.isfinite(v)):
            raise DomainError("field stack contains non-finite values")
        self.values = v

    @property
    def grid_dim(self) -> int:
        return self.values.shape[0]

    @property
    def replicates(self) -> int:
        return self.values.shape[2]


def wendland(dist_ratio):
    """Compactly supported C^2 Wendland kernel on [0, 1].

    Equals (1-u)^6 (35 u^2 + 18 u + 3) / 3 for u in [0, 1] and 0 beyond;
    1 at the origin, 0 at u = 1.
    """
    u, scalar = np.atleast_1d(np.asarray(dist_ratio, dtype=float)), np.ndim(dist_ratio) == 0
    if np.any(u < 0):
        raise DomainError("distance ratio must be nonnegative")
    uc = np.minimum(u, 1.0)
    out = (1.0 - uc) ** 6 * (35.0 * uc ** 2 + 18.0 * uc + 3.0) / 3.0
    out[u >= 1.0] = 0.0
    return float(out[0]) if scalar else out


def basis_matrix(obs_xy: np.ndarray, node_xy: np.ndarray, support_radius: float) -> sparse.csr_matrix:
    """Sparse matrix of wendland(distance / support_radius) entries.

    Rows are observation locations, columns basis nodes; entries at or
    beyond the support radius are structurally zero.
    """
    dist = cdist(obs_xy, node_xy)
    rows, cols = np.nonzero(dist < support_radius)
    vals = wendland(dist[rows, cols] / support_radius)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(obs_xy.shape[0], node_xy.shape[0]))


def _unit_lattice(lo: int, hi: int) -> np.ndarray:
    """Row-major (y, x) coordinates of an integer lattice [lo, hi)^2."""
    g = np.arange(lo, hi)
    yy, xx = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([yy.ravel(), xx.ravel()]).astype(float)


@functools.lru_cache(maxsize=32)
def build_basis(cfg: LatticeConfig) -> sparse.csr_matrix:
    """Basis evaluation matrix Phi (grid_dim^2 rows, node_count columns)."""
    obs = _unit_lattice(0, cfg.grid_dim)
    nodes = _unit_lattice(-cfg.buffer, cfg.grid_dim + cfg.buffer)
    return basis_matrix(obs, nodes, cfg.support_radius)


class SarFactor:
    """LU factorization of a SAR matrix with solve and log|det| access."""

    def __init__(self, solve_fn, logabsdet: float):
        self._solve = solve_fn
        self._logabsdet = logabsdet

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve B x = rhs; rhs may be a vector or an (m, k) matrix."""
        one_dim = rhs.ndim == 1
        b = rhs[:, None] if one_dim else rhs
        x = self._solve(np.ascontiguousarray(b, dtype=float))
        return x[:, 0] if one_dim else x

    def logabsdet(self) -> float:
        return self._logabsdet


class SarMatrix:
    """Sparse SAR precision factor B for one of the two stencils.

    tridiagonal-1d: diagonal kappa^2, first sub/super-diagonals -1, nodes
    ordered row-major over the node lattice. lattice-2d: diagonal
    4 + kappa^2 with -1 at 4-neighbor pairs of a side x side lattice.
    """

    def __init__(self, order: int, kappa2: float, stencil: str = "tridiagonal-1d", side: int | None = None):
        if not kappa2 > 0:
            raise DomainError(f"kappa2 must be positive, got {kappa2}")
        if stencil not in STENCILS:
            raise ConfigurationError(f"unknown stencil {stencil!r}")
        if order < 1:
            raise DomainError(f"order must be >= 1, got {order}")
        self.order = order
        self.kappa2 = float(kappa2)
        self.stencil = stencil
        if stencil == "lattice-2d":
            if side is None:
                side = math.isqrt(order)
            if side * side != order:
                raise ConfigurationError(f"lattice-2d needs a square order, got {order}")
            self._sparse = _lattice2d_matrix(side, self.kappa2)
        else:
            self._sparse = None

    def to_dense(self) -> np.ndarray:
        if self._sparse is not None:
            return self._sparse.toarray()
        m, k2 = self.order, self.kappa2
        a = np.zeros((m, m))
        np.fill_diagonal(a, k2)
        idx = np.arange(m - 1)
        a[idx, idx + 1] = -1.0
        a[idx + 1, idx] = -1.0
        return a

    def matvec(self, v: np.ndarray) -> np.ndarray:
        one_dim = v.ndim == 1
        b = v[:, None] if one_dim else v
        if self._sparse is not None:
            out = self._sparse @ b
        else:
            dl, d, du = self._bands()
            out = _banded.tridiag_matvec(dl, d, du, np.ascontiguousarray(b, dtype=float))
        return out[:, 0] if one_dim else out

    def _bands(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = self.order
        dl = np.full(m, -1.0)
        dl[0] = 0.0
        d = np.full(m, self.kappa2)
        du = np.full(m, -1.0)
        du[-1] = 0.0
        return dl, d, du

    def factor(self) -> SarFactor:
        if self._sparse is not None:
            try:
                lu = splu(self._sparse.tocsc())
            except RuntimeError as exc:
                raise SingularMatrixError(
                    f"lattice-2d SAR matrix is singular for kappa2={self.kappa2}: {exc}"
                ) from exc
            logdet = float(np.sum(np.log(np.abs(lu.U.diagonal()))))
            return SarFactor(lambda b: lu.solve(b), logdet)
        dl, d, du = self._bands()
        row_scale = abs(self.kappa2) + 2.0
        dlf, df, duf, du2, ipiv = _banded.gttrf(dl, d, du)
        if np.min(np.abs(df)) < PIVOT_RTOL * row_scale:
            raise SingularMatrixError(
                f"tridiagonal SAR matrix is numerically singular for kappa2={self.kappa2}"
            )
        logdet = float(np.sum(np.log(np.abs(df))))
        return SarFactor(lambda b: _banded.gtts2(dlf, df, duf, du2, ipiv, b), logdet)


def _lattice2d_matrix(side: int, kappa2: float) -> sparse.csr_matrix:
    m = side * side
    diag = np.full(m, 4.0 + kappa2)
    idx = np.arange(m).reshape(side, side)
    right = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    down = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    pairs = np.vstack([right, down])
    rows = np.concatenate([np.arange(m), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(m), pairs[:, 1], pairs[:, 0]])
    vals = np.concatenate([diag, -np.ones(2 * pairs.shape[0])])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(m, m))


def build_sar(kappa2: float, cfg: LatticeConfig) -> SarMatrix:
    """SAR matrix over the node lattice of `cfg`."""
    return SarMatrix(cfg.node_count, kappa2, cfg.stencil, side=cfg.side)


def solve_coefficients(B: SarMatrix, e: np.ndarray) -> np.ndarray:
    """Solve B c = e to a relative residual of SOLVE_RTOL (inf norm)."""
    e = np.asarray(e, dtype=float)
    if e.shape[0] != B.order:
        raise DomainError(f"rhs length {e.shape[0]} does not match order {B.order}")
    fac = B.factor()
    c = fac.solve(e)
    scale = np.max(np.abs(e)) if e.size else 0.0
    if scale > 0.0:
        resid = np.max(np.abs(B.matvec(c) - e))
        if resid > SOLVE_RTOL * scale:
            c = c + fac.solve(e - B.matvec(c))  # one step of iterative refinement
            resid = np.max(np.abs(B.matvec(c) - e))
            if resid > SOLVE_RTOL * scale:
                raise SingularMatrixError(
                    f"solve residual {resid:.3e} exceeds tolerance for kappa2={B.kappa2}"
                )
    return c


def synthesize_field(
    params: ModelParams, cfg: LatticeConfig, r: int, rng: np.random.Generator
) -> FieldStack:
    """Simulate r independent field replicates at `params`.

    Each replicate owns a child stream spawned from `rng`, so results do
    not depend on whether replicates are generated serially or in
    parallel.
    """
    if r < 1:
        raise DomainError(f"replicate count must be >= 1, got {r}")
    params.validate_for_simulation()
    d, m = cfg.grid_dim, cfg.node_count
    phi = build_basis(cfg)
    B = build_sar(params.kappa2, cfg)
    fac = B.factor()

    innov = GevParams.innovation(params.xi)
    nugget = NuggetSpec(params.tau2)
    E = np.empty((m, r))
    EPS = np.empty((d * d, r))
    for j, child in enumerate(rng.spawn(r)):
        E[:, j] = gev_sample(innov, m, child)
        EPS[:, j] = nugget_sample(nugget, d * d, child)
    C = fac.solve(E)
    G = phi @ C
    Y = (G * EPS).reshape(d, d, r)
    return FieldStack(Y, meta={"params": params, "cfg": cfg})


def standardize_stack(stack: FieldStack) -> FieldStack:
    """Center by the joint median and scale by the joint SD of the stack."""
    v = stack.values
    med = float(np.median(v))
    sd = float(np.std(v))
    if sd < 1e-12 * (abs(med) + 1.0):
        raise DegenerateFieldError(f"stack spread {sd:.3e} too small to standardize (median {med:.3e})")
    out = (v - med) / sd
    meta = dict(stack.meta)
    meta["standardized"] = True
    return FieldStack(out, meta=meta)


def median_iqr_standardize(stack: FieldStack) -> FieldStack:
    """Center by the joint median and scale by the joint IQR of the stack."""
    v = stack.values
    med = float(np.median(v))
    q25, q75 = np.percentile(v, [25.0, 75.0])
    iqr = float(q75 - q25)
    if iqr <= 1e-12 * (abs(med) + 1.0):
        raise DegenerateFieldError(f"stack IQR {iqr:.3e} too small to standardize")
    meta = dict(stack.meta)
    meta["standardized"] = "median-iqr"
    return FieldStack((v - med) / iqr, meta=meta)
