"""Tiled estimation over large rectangular grids.

A grid stack (n_y x n_x x years, with an optional validity mask) is cut
into non-overlapping square tiles matching the estimator's input size;
each tile gets a raw estimate, a bias-corrected estimate, confidence
intervals, and a plausibility flag. Parameter surfaces over the tile
centers are smoothed with a Gaussian kernel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import NormStats, ParamRanges
from .diagnostics import BiasCorrector
from .errors import (
    ChecksumError,
    DomainError,
    FormatError,
    InputShapeError,
    TruncatedPayloadError,
    VersionError,
)
from .lattice import FieldStack, LatticeConfig, ModelParams, synthesize_field
from .network import NetworkWeights
from .quantile_uq import QuantileModel, predict_interval
from .training import estimate

GRID_FORMAT_MARKER = "gevsar-grid"
GRID_FORMAT_VERSION = 1


@dataclass
class GridStack:
    """n_y x n_x x years values with a per-cell validity mask."""

    values: np.ndarray
    mask: np.ndarray  # bool (n_y, n_x), True = valid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[2] < 1:
            raise DomainError(f"grid values must have shape (n_y, n_x, years), got {v.shape}")
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != v.shape[:2]:
            raise DomainError(f"mask shape {m.shape} does not match grid {v.shape[:2]}")
        if not np.all(np.isfinite(v[m])):
            raise DomainError("grid contains non-finite unmasked values")
        self.values, self.mask = v, m

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def years(self) -> int:
        return self.values.shape[2]


def write_grid(grid: GridStack, path) -> None:
    """Write the documented grid directory format."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n_y, n_x, years = grid.shape
    mask_present = not np.all(grid.mask)
    manifest = {
        "format": GRID_FORMAT_MARKER,
        "format_version": GRID_FORMAT_VERSION,
        "n_y": n_y,
        "n_x": n_x,
        "years": years,
        "mask_present": mask_present,
    }
    values = np.where(grid.mask[:, :, None], grid.values, 0.0)
    (path / "values.bin").write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
    if mask_present:
        (path / "mask.bin").write_bytes(grid.mask.astype(np.uint8).tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def ingest_grid(path) -> GridStack:
    """Read and validate a grid directory; NaN cells become masked."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no manifest.json under {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("format") != GRID_FORMAT_MARKER:
        raise FormatError(f"not a grid directory: format marker {manifest.get('format')!r}")
    if manifest.get("format_version") != GRID_FORMAT_VERSION:
        raise VersionError(
            f"grid format version {manifest.get('format_version')} unsupported "
            f"(reader supports {GRID_FORMAT_VERSION})"
        )
    n_y, n_x, years = manifest["n_y"], manifest["n_x"], manifest["years"]
    raw = (path / "values.bin").read_bytes()
    if len(raw) != n_y * n_x * years * 4:
        raise TruncatedPayloadError(f"values.bin holds {len(raw)} bytes, expected {n_y * n_x * years * 4}")
    values = np.frombuffer(raw, dtype="<f4").reshape(n_y, n_x, years).astype(float)
    if manifest.get("mask_present"):
        mraw = (path / "mask.bin").read_bytes()
        if len(mraw) != n_y * n_x:
            raise TruncatedPayloadError(f"mask.bin holds {len(mraw)} bytes, expected {n_y * n_x}")
        mask = np.frombuffer(mraw, dtype=np.uint8).reshape(n_y, n_x) == 1
    else:
        mask = np.ones((n_y, n_x), dtype=bool)
    nan_cells = np.any(np.isnan(values), axis=2)
    mask = mask & ~nan_cells
    values = np.where(mask[:, :, None], values, 0.0)
    if not np.all(np.isfinite(values[mask])):
        raise DomainError("grid contains non-finite unmasked values")
    return GridStack(values=values, mask=mask, meta={"path": str(path)})


@dataclass(frozen=True)
class Tile:
    tile_id: int
    row_off: int
    col_off: int
    size: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.row_off + self.size / 2, self.col_off + self.size / 2)


def make_tiles(grid: GridStack, tile_size: int = 16, min_valid_fraction: float = 1.0) -> list[Tile]:
    """Non-overlapping tiles anchored at multiples of tile_size.

    Remainder strips narrower than tile_size are excluded, as are tiles
    whose valid-cell fraction falls below the threshold.
    """
    n_y, n_x = grid.mask.shape
    if tile_size > min(n_y, n_x):
        raise DomainError(f"tile_size {tile_size} exceeds grid extent ({n_y}, {n_x})")
    tiles = []
    tile_id = 0
    for row in range(0, n_y - tile_size + 1, tile_size):
        for col in range(0, n_x - tile_size + 1, tile_size):
            frac = float(np.mean(grid.mask[row : row + tile_size, col : col + tile_size]))
            if frac >= min_valid_fraction:
                tiles.append(Tile(tile_id=tile_id, row_off=row, col_off=col, size=tile_size))
                tile_id += 1
    return tiles


@dataclass
class TileResult:
    tile: Tile
    raw: np.ndarray | None = None  # (xi, kappa2, tau2)
    corrected: np.ndarray | None = None
    intervals: dict[str, tuple[float, float]] | None = None
    flags: list[str] = field(default_factory=list)
    error: str | None = None


def _plausibility_box(ranges: ParamRanges, margin: float = 0.1) -> list[tuple[float, float]]:
    """Training box widened by `margin` on the transformed scales."""
    box = []
    for name in ("xi", "kappa2", "tau2"):
        lo, hi = getattr(ranges, f"{name}_range")
        if getattr(ranges, f"{name}_scale") == "log":
            llo, lhi = math.log(lo), math.log(hi)
            pad = margin * (lhi - llo)
            box.append((math.exp(llo - pad), math.exp(lhi + pad)))
        else:
            pad = margin * (hi - lo)
            box.append((lo - pad, hi + pad))
    return box


def _tile_stack(grid: GridStack, tile: Tile) -> tuple[FieldStack, bool]:
    """Extract a tile; masked cells are filled with the per-year median."""
    sl = (slice(tile.row_off, tile.row_off + tile.size), slice(tile.col_off, tile.col_off + tile.size))
    values = grid.values[sl].copy()
    mask = grid.mask[sl]
    filled = False
    if not np.all(mask):
        filled = True
        for year in range(values.shape[2]):
            layer = values[:, :, year]
            layer[~mask] = np.median(layer[mask])
    return FieldStack(values, meta={"tile": tile}), filled


def estimate_tiles(
    grid: GridStack,
    weights: NetworkWeights,
    norm: NormStats,
    corrector: BiasCorrector | None = None,
    qmodel: QuantileModel | None = None,
    tiles: list[Tile] | None = None,
    tile_size: int = 16,
    min_valid_fraction: float = 1.0,
    ranges: ParamRanges | None = None,
) -> list[TileResult]:
    """Per-tile estimation with bias correction, intervals, and flagging.

    Per-tile failures are recorded in the result rather than aborting the
    run; estimates whose corrected value leaves the plausibility box are
    flagged, never clamped.
    """
    if grid.years != weights.spec.r_channels:
        raise InputShapeError(
            f"grid has {grid.years} years but the network expects {weights.spec.r_channels} "
            "channels; re-train the estimator for this replicate count or select matching years"
        )
    if tiles is None:
        tiles = make_tiles(grid, tile_size=tile_size, min_valid_fraction=min_valid_fraction)
    box = _plausibility_box(ranges or ParamRanges())
    results = []
    for tile in tiles:
        res = TileResult(tile=tile)
        try:
            stack, filled = _tile_stack(grid, tile)
            if filled:
                res.flags.append("masked-fill")
            theta = estimate(weights, stack, norm)
            res.raw = theta.as_array()
            corrected = corrector.apply(theta) if corrector is not None else theta
            res.corrected = corrected.as_array()
            for value, (lo, hi), name in zip(res.corrected, box, ("xi", "kappa2", "tau2")):
                if not lo <= value <= hi:
                    res.flags.append(f"implausible-{name}")
            if qmodel is not None:
                res.intervals = predict_interval(qmodel, corrected)
        except Exception as exc:
            res.error = f"{type(exc).__name__}: {exc}"
        results.append(res)
    return results


def simulate_at_tile(
    result: TileResult,
    cfg: LatticeConfig,
    reps: int,
    years: int,
    rng: np.random.Generator,
) -> list[FieldStack]:
    """Independent simulated stacks at a tile's corrected estimate."""
    if result.corrected is None:
        raise DomainError(f"tile {result.tile.tile_id} has no corrected estimate")
    theta = ModelParams(*result.corrected).validate_for_simulation()
    return [synthesize_field(theta, cfg, years, child) for child in rng.spawn(reps)]


def smooth_surface(results: list[TileResult], bandwidth: float) -> dict[str, np.ndarray]:
    """Gaussian-kernel smoother of corrected estimates over tile centers.

    Flagged or failed tiles are excluded from the kernel weights; the
    surface is evaluated at every tile center. Returns per-parameter
    arrays aligned with `results`, plus the center coordinates.
    """
    if not bandwidth > 0:
        raise DomainError("bandwidth must be positive")
    centers = np.array([r.tile.center for r in results])
    good = [r for r in results if r.error is None and not r.flags and r.corrected is not None]
    if not good:
        raise DomainError("no unflagged tiles to smooth")
    good_centers = np.array([r.tile.center for r in good])
    good_values = np.array([r.corrected for r in good])

    d2 = np.sum((centers[:, None, :] - good_centers[None, :, :]) ** 2, axis=2)
    w = np.exp(-0.5 * d2 / bandwidth ** 2)
    wsum = w.sum(axis=1, keepdims=True)
    degenerate = wsum[:, 0] <= 0.0
    if np.any(degenerate):
        # all weights underflowed: fall back to the nearest unflagged tile
        nearest = np.argmin(d2[degenerate], axis=1)
        w[degenerate] = 0.0
        w[np.nonzero(degenerate)[0], nearest] = 1.0
        wsum = w.sum(axis=1, keepdims=True)
    smoothed = (w @ good_values) / wsum
    return {
        "centers": centers,
        "xi": smoothed[:, 0],
        "kappa2": smoothed[:, 1],
        "tau2": smoothed[:, 2],
    }
