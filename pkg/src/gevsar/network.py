"""From-scratch convolutional estimator.

Architecture: two valid 3x3 convolutions (64 then 32 filters, LeakyReLU),
global average pooling, dense 512 and dense 10 with ReLU, and a linear
3-unit head producing the normalized triple (Xi, log K2, log T2).
Replicates of a field enter as input channels, so a trained network is
specific to its replicate count.

Forward and reverse passes are written directly on numpy; convolutions go
through an im2col layout so the heavy lifting is a single matmul per
layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import NormStats
from .errors import DomainError, FormatError, InputShapeError
from .lattice import FieldStack
from .storage import read_container, write_container

WEIGHTS_MAGIC = b"GSNW"
WEIGHTS_VERSION = 1

# Known per-layer trainable parameter counts for the 30-channel flagship
# configuration, used as a build-time audit.
AUDIT_COUNTS_R30 = (17_344, 18_464, 16_896, 5_130, 33)


@dataclass(frozen=True)
class NetworkSpec:
    """Shapes and activation constants of the estimator."""

    grid_dim: int = 16
    r_channels: int = 30
    leaky_slope: float = 0.01
    conv_filters: tuple[int, int] = (64, 32)
    kernel_size: int = 3
    dense_units: tuple[int, int] = (512, 10)
    n_outputs: int = 3

    def __post_init__(self):
        if self.r_channels < 1:
            raise DomainError("r_channels must be >= 1")
        if self.grid_dim < 2 * (self.kernel_size - 1) + 1:
            raise DomainError(
                f"grid_dim {self.grid_dim} too small for two valid {self.kernel_size}x{self.kernel_size} convolutions"
            )
        canonical = (
            self.r_channels == 30
            and self.conv_filters == (64, 32)
            and self.kernel_size == 3
            and self.dense_units == (512, 10)
            and self.n_outputs == 3
        )
        if canonical:
            counts = tuple(self.layer_param_counts())
            assert counts == AUDIT_COUNTS_R30, f"parameter-count audit failed: {counts}"

    @property
    def conv1_out(self) -> int:
        return self.grid_dim - (self.kernel_size - 1)

    @property
    def conv2_out(self) -> int:
        return self.conv1_out - (self.kernel_size - 1)

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel_size
        f1, f2 = self.conv_filters
        d1, d2 = self.dense_units
        return {
            "conv1_k": (k, k, self.r_channels, f1),
            "conv1_b": (f1,),
            "conv2_k": (k, k, f1, f2),
            "conv2_b": (f2,),
            "dense1_w": (f2, d1),
            "dense1_b": (d1,),
            "dense2_w": (d1, d2),
            "dense2_b": (d2,),
            "out_w": (d2, self.n_outputs),
            "out_b": (self.n_outputs,),
        }

    def layer_param_counts(self) -> list[int]:
        shapes = self.layer_shapes()
        names = ["conv1", "conv2", "dense1", "dense2", "out"]
        counts = []
        for name in names:
            kernel = shapes.get(f"{name}_k", shapes.get(f"{name}_w"))
            bias = shapes[f"{name}_b"]
            counts.append(int(np.prod(kernel)) + int(np.prod(bias)))
        return counts

    def total_params(self) -> int:
        return sum(self.layer_param_counts())


LAYER_KEYS = (
    "conv1_k",
    "conv1_b",
    "conv2_k",
    "conv2_b",
    "dense1_w",
    "dense1_b",
    "dense2_w",
    "dense2_b",
    "out_w",
    "out_b",
)


@dataclass
class NetworkWeights:
    """Per-layer kernel and bias tensors for a `NetworkSpec`."""

    spec: NetworkSpec
    arrays: dict[str, np.ndarray]
    norm: Optional[NormStats] = None

    def __post_init__(self):
        shapes = self.spec.layer_shapes()
        for key in LAYER_KEYS:
            if key not in self.arrays:
                raise FormatError(f"weights missing layer {key!r}")
            if tuple(self.arrays[key].shape) != shapes[key]:
                raise InputShapeError(
                    f"layer {key!r} has shape {self.arrays[key].shape}, spec requires {shapes[key]}"
                )
        for key, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise DomainError(f"layer {key!r} contains non-finite values")

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.spec, {k: v.copy() for k, v in self.arrays.items()}, self.norm)

    @property
    def dtype(self):
        return self.arrays["conv1_k"].dtype

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights(self.spec, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.norm)


def init_weights(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> NetworkWeights:
    """He-uniform kernels (symmetric, fan-in scaled), zero biases."""
    arrays = {}
    for key, shape in spec.layer_shapes().items():
        if key.endswith("_b"):
            arrays[key] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            arrays[key] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return NetworkWeights(spec, arrays)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N * OH * OW, k * k * C) patch matrix."""
    windows = sliding_window_view(x, (k, k), axis=(1, 2))  # (N, OH, OW, C, k, k)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))  # (N, OH, OW, k, k, C)
    n, oh, ow = cols.shape[:3]
    return cols.reshape(n * oh * ow, k * k * x.shape[3])


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int) -> np.ndarray:
    """Scatter-add the patch-matrix gradient back to input layout."""
    n, h, w, c = x_shape
    oh, ow = h - k + 1, w - k + 1
    dcols = dcols.reshape(n, oh, ow, k, k, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for kh in range(k):
        for kw in range(k):
            dx[:, kh : kh + oh, kw : kw + ow, :] += dcols[:, :, :, kh, kw, :]
    return dx


def _leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    # for slope < 1, max(x, slope * x) is exactly the leaky rectifier
    return np.maximum(x, slope * x)


def _apply_leaky_grad(upstream: np.ndarray, pre: np.ndarray, slope: float) -> np.ndarray:
    return np.where(pre > 0, upstream, upstream * slope)


def _check_input(spec: NetworkSpec, x: np.ndarray) -> None:
    expected = (spec.grid_dim, spec.grid_dim, spec.r_channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise InputShapeError(f"expected input batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")


def _forward_batch(w: NetworkWeights, x: np.ndarray, want_cache: bool = False):
    spec = w.spec
    _check_input(spec, x)
    a = w.arrays
    k = spec.kernel_size
    x = np.ascontiguousarray(x, dtype=w.dtype)
    slope = spec.leaky_slope

    cols1 = _im2col(x, k)
    pre1 = cols1 @ a["conv1_k"].reshape(-1, a["conv1_k"].shape[-1]) + a["conv1_b"]
    act1 = _leaky_relu(pre1, slope)
    n = x.shape[0]
    o1 = spec.conv1_out
    act1_img = act1.reshape(n, o1, o1, -1)

    cols2 = _im2col(act1_img, k)
    pre2 = cols2 @ a["conv2_k"].reshape(-1, a["conv2_k"].shape[-1]) + a["conv2_b"]
    act2 = _leaky_relu(pre2, slope)
    o2 = spec.conv2_out
    pooled = act2.reshape(n, o2 * o2, -1).mean(axis=1)

    pre3 = pooled @ a["dense1_w"] + a["dense1_b"]
    act3 = np.maximum(pre3, 0)
    pre4 = act3 @ a["dense2_w"] + a["dense2_b"]
    act4 = np.maximum(pre4, 0)
    out = act4 @ a["out_w"] + a["out_b"]

    if not want_cache:
        return out
    cache = {
        "x_shape": x.shape,
        "cols1": cols1,
        "pre1": pre1,
        "act1_shape": act1_img.shape,
        "cols2": cols2,
        "pre2": pre2,
        "pooled": pooled,
        "pre3": pre3,
        "act3": act3,
        "pre4": pre4,
        "act4": act4,
    }
    return out, cache


def forward_batch(w: NetworkWeights, x: np.ndarray) -> np.ndarray:
    """Normalized parameter triples for a batch of standardized stacks."""
    return _forward_batch(w, x, want_cache=False)


def forward(w: NetworkWeights, stack: FieldStack) -> np.ndarray:
    """Normalized parameter triple for one standardized stack."""
    return forward_batch(w, stack.values[None, ...])[0]


def mae_loss(preds: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of the l1 norm of the residual triple."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.ndim != 2 or preds.shape != targets.shape:
        raise DomainError(f"prediction/target shapes differ: {preds.shape} vs {targets.shape}")
    if preds.shape[0] == 0:
        raise DomainError("loss of an empty batch is undefined")
    return float(np.mean(np.sum(np.abs(targets - preds), axis=1)))


def _backward_from_cache(w: NetworkWeights, cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
    spec = w.spec
    a = w.arrays
    k = spec.kernel_size
    slope = spec.leaky_slope
    grads = {}

    grads["out_w"] = cache["act4"].T @ dout
    grads["out_b"] = dout.sum(axis=0)
    d4 = (dout @ a["out_w"].T) * (cache["pre4"] > 0)

    grads["dense2_w"] = cache["act3"].T @ d4
    grads["dense2_b"] = d4.sum(axis=0)
    d3 = (d4 @ a["dense2_w"].T) * (cache["pre3"] > 0)

    grads["dense1_w"] = cache["pooled"].T @ d3
    grads["dense1_b"] = d3.sum(axis=0)
    dpool = d3 @ a["dense1_w"].T

    n = dpool.shape[0]
    o2 = spec.conv2_out
    f2 = spec.conv_filters[1]
    dact2 = np.broadcast_to(dpool[:, None, :] / (o2 * o2), (n, o2 * o2, f2)).reshape(-1, f2)
    d2 = _apply_leaky_grad(dact2, cache["pre2"], slope)

    grads["conv2_k"] = (cache["cols2"].T @ d2).reshape(a["conv2_k"].shape)
    grads["conv2_b"] = d2.sum(axis=0)
    dcols2 = d2 @ a["conv2_k"].reshape(-1, f2).T
    dact1 = _col2im(dcols2, cache["act1_shape"], k).reshape(-1, spec.conv_filters[0])
    d1 = _apply_leaky_grad(dact1, cache["pre1"], slope)

    grads["conv1_k"] = (cache["cols1"].T @ d1).reshape(a["conv1_k"].shape)
    grads["conv1_b"] = d1.sum(axis=0)
    return grads


def loss_and_gradients(
    w: NetworkWeights, inputs: np.ndarray, targets: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """MAE loss and its exact reverse-mode gradients for one batch."""
    if inputs.shape[0] == 0:
        raise DomainError("cannot take gradients of an empty batch")
    preds, cache = _forward_batch(w, inputs, want_cache=True)
    targets = np.ascontiguousarray(targets, dtype=preds.dtype)
    resid = preds - targets
    loss = float(np.mean(np.sum(np.abs(resid), axis=1)))
    # l1 subgradient with sign(0) = 0, averaged over the batch
    dout = np.sign(resid) / inputs.shape[0]
    grads = _backward_from_cache(w, cache, dout.astype(preds.dtype))
    return loss, grads


def backward(w: NetworkWeights, inputs: np.ndarray, targets: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of `mae_loss` with respect to every weight tensor."""
    return loss_and_gradients(w, inputs, targets)[1]


@dataclass
class AdamState:
    """First/second moment accumulators for `adam_step`."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, w: NetworkWeights, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        zeros = {k: np.zeros_like(a) for k, a in w.arrays.items()}
        return cls(
            m=zeros,
            v={k: np.zeros_like(a) for k, a in w.arrays.items()},
            t=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    w: NetworkWeights, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[NetworkWeights, AdamState]:
    """One ADAM update with bias correction; mutates w and state in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w.arrays[key] -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return w, state


def save_weights(w: NetworkWeights, path) -> None:
    """Versioned container: spec echo, shapes, float32 payload, checksum."""
    spec = w.spec
    payload = b"".join(
        np.ascontiguousarray(w.arrays[key], dtype="<f4").tobytes() for key in LAYER_KEYS
    )
    header = {
        "spec": {
            "grid_dim": spec.grid_dim,
            "r_channels": spec.r_channels,
            "leaky_slope": spec.leaky_slope,
            "conv_filters": list(spec.conv_filters),
            "kernel_size": spec.kernel_size,
            "dense_units": list(spec.dense_units),
            "n_outputs": spec.n_outputs,
        },
        "layer_shapes": {key: list(w.arrays[key].shape) for key in LAYER_KEYS},
        "payload_bytes": len(payload),
        "norm_stats": w.norm.as_dict() if w.norm is not None else None,
    }
    write_container(path, WEIGHTS_MAGIC, WEIGHTS_VERSION, header, payload)


def load_weights(path) -> NetworkWeights:
    """Read a weights container, verifying checksum, version, and shapes."""
    header, payload = read_container(path, WEIGHTS_MAGIC, WEIGHTS_VERSION)
    s = header["spec"]
    spec = NetworkSpec(
        grid_dim=s["grid_dim"],
        r_channels=s["r_channels"],
        leaky_slope=s["leaky_slope"],
        conv_filters=tuple(s["conv_filters"]),
        kernel_size=s["kernel_size"],
        dense_units=tuple(s["dense_units"]),
        n_outputs=s["n_outputs"],
    )
    shapes = spec.layer_shapes()
    for key in LAYER_KEYS:
        stored = tuple(header["layer_shapes"][key])
        if stored != shapes[key]:
            raise InputShapeError(f"stored shape {stored} for {key!r} conflicts with spec {shapes[key]}")
    arrays = {}
    offset = 0
    buf = np.frombuffer(payload, dtype="<f4")
    for key in LAYER_KEYS:
        size = int(np.prod(shapes[key]))
        arrays[key] = buf[offset : offset + size].reshape(shapes[key]).copy()
        offset += size
    if offset != buf.size:
        raise FormatError(f"payload holds {buf.size} floats, expected {offset}")
    norm = NormStats.from_dict(header["norm_stats"]) if header.get("norm_stats") else None
    return NetworkWeights(spec, arrays, norm)
