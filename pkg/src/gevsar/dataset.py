"""Training corpora: parameter sampling, field generation, normalization
statistics, and a documented on-disk format.

A dataset directory holds manifest.json plus two raw little-endian
arrays: fields.bin (float32, n x d x d x r) and params.bin (float64,
n x 3 in (xi, kappa2, tau2) order).
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    DegenerateFieldError,
    DomainError,
    FormatError,
    TruncatedPayloadError,
    VersionError,
)
from .lattice import FieldStack, LatticeConfig, ModelParams, standardize_stack, synthesize_field
from .rng import substream

FORMAT_MARKER = "gevsar-dataset"
FORMAT_VERSION = 1

# Sub-stream path prefixes: parameter draws vs field synthesis.
_PARAMS_STREAM = 0
_FIELD_STREAM = 1


@dataclass(frozen=True)
class ParamRanges:
    """Sampling box for theta with per-parameter sampling scale."""

    xi_range: tuple[float, float] = (0.01, 0.9)
    kappa2_range: tuple[float, float] = (0.001, 2.0)
    tau2_range: tuple[float, float] = (0.0001, 0.1)
    xi_scale: str = "linear"
    kappa2_scale: str = "log"
    tau2_scale: str = "log"

    def __post_init__(self):
        for name in ("xi", "kappa2", "tau2"):
            lo, hi = getattr(self, f"{name}_range")
            scale = getattr(self, f"{name}_scale")
            if scale not in ("linear", "log"):
                raise DomainError(f"{name}_scale must be 'linear' or 'log', got {scale!r}")
            if not lo < hi:
                raise DomainError(f"{name}_range must satisfy lo < hi, got ({lo}, {hi})")
            if scale == "log" and lo <= 0:
                raise DomainError(f"log-scaled {name}_range needs a positive lower bound")

    def as_dict(self) -> dict:
        return {
            "xi": list(self.xi_range),
            "kappa2": list(self.kappa2_range),
            "tau2": list(self.tau2_range),
            "scales": {"xi": self.xi_scale, "kappa2": self.kappa2_scale, "tau2": self.tau2_scale},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamRanges":
        s = d["scales"]
        return cls(
            xi_range=tuple(d["xi"]),
            kappa2_range=tuple(d["kappa2"]),
            tau2_range=tuple(d["tau2"]),
            xi_scale=s["xi"],
            kappa2_scale=s["kappa2"],
            tau2_scale=s["tau2"],
        )


@dataclass(frozen=True)
class NormStats:
    """Training means/SDs of (xi, ln kappa2, ln tau2)."""

    xi_mean: float
    xi_sd: float
    log_kappa2_mean: float
    log_kappa2_sd: float
    log_tau2_mean: float
    log_tau2_sd: float

    def __post_init__(self):
        for name in ("xi_sd", "log_kappa2_sd", "log_tau2_sd"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    @classmethod
    def from_params(cls, params: np.ndarray) -> "NormStats":
        """Compute from an (n, 3) array of sampled parameters."""
        xi, lk, lt = params[:, 0], np.log(params[:, 1]), np.log(params[:, 2])
        return cls(
            xi_mean=float(np.mean(xi)),
            xi_sd=float(np.std(xi, ddof=1)),
            log_kappa2_mean=float(np.mean(lk)),
            log_kappa2_sd=float(np.std(lk, ddof=1)),
            log_tau2_mean=float(np.mean(lt)),
            log_tau2_sd=float(np.std(lt, ddof=1)),
        )

    def as_dict(self) -> dict:
        return {
            "xi_mean": self.xi_mean,
            "xi_sd": self.xi_sd,
            "log_kappa2_mean": self.log_kappa2_mean,
            "log_kappa2_sd": self.log_kappa2_sd,
            "log_tau2_mean": self.log_tau2_mean,
            "log_tau2_sd": self.log_tau2_sd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**d)


def normalize_params(theta: ModelParams, norm: NormStats) -> np.ndarray:
    """Map theta to the normalized triple (Xi, log K2, log T2)."""
    if theta.kappa2 <= 0 or theta.tau2 <= 0:
        raise DomainError("normalization takes logs; kappa2 and tau2 must be positive")
    return np.array(
        [
            (theta.xi - norm.xi_mean) / norm.xi_sd,
            (math.log(theta.kappa2) - norm.log_kappa2_mean) / norm.log_kappa2_sd,
            (math.log(theta.tau2) - norm.log_tau2_mean) / norm.log_tau2_sd,
        ]
    )


def denormalize_params(triple: np.ndarray, norm: NormStats) -> ModelParams:
    """Inverse of `normalize_params`."""
    t = np.asarray(triple, dtype=float)
    return ModelParams(
        xi=float(t[0] * norm.xi_sd + norm.xi_mean),
        kappa2=float(math.exp(t[1] * norm.log_kappa2_sd + norm.log_kappa2_mean)),
        tau2=float(math.exp(t[2] * norm.log_tau2_sd + norm.log_tau2_mean)),
    )


def normalize_param_array(params: np.ndarray, norm: NormStats) -> np.ndarray:
    """Vectorized `normalize_params` on an (n, 3) array."""
    out = np.empty_like(params, dtype=float)
    out[:, 0] = (params[:, 0] - norm.xi_mean) / norm.xi_sd
    out[:, 1] = (np.log(params[:, 1]) - norm.log_kappa2_mean) / norm.log_kappa2_sd
    out[:, 2] = (np.log(params[:, 2]) - norm.log_tau2_mean) / norm.log_tau2_sd
    return out


def sample_params(n: int, ranges: ParamRanges, rng: np.random.Generator) -> np.ndarray:
    """Sample n parameter triples; log-scaled parameters are log-uniform."""
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    cols = []
    for name in ("xi", "kappa2", "tau2"):
        lo, hi = getattr(ranges, f"{name}_range")
        if getattr(ranges, f"{name}_scale") == "log":
            cols.append(np.exp(rng.uniform(math.log(lo), math.log(hi), size=n)))
        else:
            cols.append(rng.uniform(lo, hi, size=n))
    return np.column_stack(cols)


@dataclass
class Dataset:
    """In-memory training corpus of standardized stacks and their thetas."""

    fields: np.ndarray  # (n, d, d, r) float32, each stack standardized
    params: np.ndarray  # (n, 3) float64
    norm: NormStats
    cfg: LatticeConfig
    ranges: ParamRanges
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.fields.shape[0]

    @property
    def d(self) -> int:
        return self.fields.shape[1]

    @property
    def r(self) -> int:
        return self.fields.shape[3]

    def stack(self, i: int) -> FieldStack:
        return FieldStack(self.fields[i].astype(float), meta={"index": i})


MAX_RETRIES = 5


def _make_one(i: int, params_row: np.ndarray, cfg: LatticeConfig, r: int, seed: int) -> np.ndarray:
    theta = ModelParams(*params_row)
    for attempt in range(MAX_RETRIES + 1):
        rng = substream(seed, _FIELD_STREAM, i, attempt)
        stack = synthesize_field(theta, cfg, r, rng)
        try:
            return standardize_stack(stack).values.astype(np.float32)
        except DegenerateFieldError:
            if attempt == MAX_RETRIES:
                raise DegenerateFieldError(
                    f"configuration {i} produced degenerate fields in {MAX_RETRIES + 1} attempts"
                )
    raise AssertionError("unreachable")


def make_dataset(
    n: int,
    r: int,
    cfg: LatticeConfig,
    ranges: ParamRanges,
    seed: int,
    workers: int = 1,
) -> Dataset:
    """Sample n configurations and simulate a standardized stack for each.

    Per-configuration sub-streams make the result identical whatever the
    worker count.
    """
    if n < 1 or r < 1:
        raise DomainError("n and r must both be >= 1")
    params = sample_params(n, ranges, substream(seed, _PARAMS_STREAM))
    fields = np.empty((n, cfg.grid_dim, cfg.grid_dim, r), dtype=np.float32)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, values in enumerate(
                pool.map(lambda i: _make_one(i, params[i], cfg, r, seed), range(n))
            ):
                fields[i] = values
    else:
        for i in range(n):
            fields[i] = _make_one(i, params[i], cfg, r, seed)

    norm = NormStats.from_params(params)
    return Dataset(fields=fields, params=params, norm=norm, cfg=cfg, ranges=ranges, seed=seed)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(ds: Dataset, path) -> None:
    """Write the dataset directory format (manifest.json + raw arrays)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    fields_bytes = np.ascontiguousarray(ds.fields, dtype="<f4").tobytes()
    params_bytes = np.ascontiguousarray(ds.params, dtype="<f8").tobytes()
    manifest = {
        "format": FORMAT_MARKER,
        "format_version": FORMAT_VERSION,
        "n": ds.n,
        "d": ds.d,
        "r": ds.r,
        "buffer": ds.cfg.buffer,
        "stencil": ds.cfg.stencil,
        "support_radius": ds.cfg.support_radius,
        "ranges": ds.ranges.as_dict(),
        "seed": ds.seed,
        "norm_stats": ds.norm.as_dict(),
        "checksums": {"fields.bin": _sha256(fields_bytes), "params.bin": _sha256(params_bytes)},
    }
    (path / "fields.bin").write_bytes(fields_bytes)
    (path / "params.bin").write_bytes(params_bytes)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    """Read a dataset directory, verifying version and checksums."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no manifest.json under {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_MARKER:
        raise FormatError(f"not a dataset directory: format marker {manifest.get('format')!r}")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"dataset format version {version} unsupported (reader supports {FORMAT_VERSION})")

    n, d, r = manifest["n"], manifest["d"], manifest["r"]
    fields_bytes = (path / "fields.bin").read_bytes()
    params_bytes = (path / "params.bin").read_bytes()
    if len(fields_bytes) != n * d * d * r * 4:
        raise TruncatedPayloadError(
            f"fields.bin holds {len(fields_bytes)} bytes, expected {n * d * d * r * 4}"
        )
    if len(params_bytes) != n * 3 * 8:
        raise TruncatedPayloadError(f"params.bin holds {len(params_bytes)} bytes, expected {n * 3 * 8}")
    sums = manifest["checksums"]
    if _sha256(fields_bytes) != sums["fields.bin"]:
        raise ChecksumError("fields.bin does not match its checksum")
    if _sha256(params_bytes) != sums["params.bin"]:
        raise ChecksumError("params.bin does not match its checksum")

    fields = np.frombuffer(fields_bytes, dtype="<f4").reshape(n, d, d, r).copy()
    params = np.frombuffer(params_bytes, dtype="<f8").reshape(n, 3).copy()
    cfg = LatticeConfig(
        grid_dim=d,
        buffer=manifest["buffer"],
        support_radius=manifest["support_radius"],
        stencil=manifest["stencil"],
    )
    return Dataset(
        fields=fields,
        params=params,
        norm=NormStats.from_dict(manifest["norm_stats"]),
        cfg=cfg,
        ranges=ParamRanges.from_dict(manifest["ranges"]),
        seed=manifest["seed"],
    )


def train_val_split(n: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split by configuration index: last fraction is validation."""
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    idx = np.arange(n)
    return idx[: n - n_val], idx[n - n_val :]
