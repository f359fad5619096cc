"""Layer operators and backpropagation for the convolutional feature networks.

Conventions, fixed across the package:

* feature maps are (height, width, channel) float64 tensors;
* convolution is *true* convolution with no padding: the kernel is indexed
  as input[x-a, y-b, c] * weights[a, b, c, z], which the vectorized kernels
  realize as cross-correlation with a spatially flipped copy of the weights;
* the activation g is the rectifier max(0, x), also used by the FC head;
* pooling takes non-overlapping s x s window maxima (window == stride).

The gradient-check harness compares backprop against central finite
differences of a fixed random projection of the network output, skipping
coordinates whose pre-activations sit within 10*epsilon of the rectifier
kink (there the two-sided difference quotient is meaningless).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, TensorError


class ShapeError(TensorError):
    """Layer input does not fit the layer's declared geometry."""


# ---------------------------------------------------------------------------
# layer types


class ConvLayer:
    """Convolution weights (kh x kw x c_in x c_out) with a per-channel bias."""

    __slots__ = ("weights", "bias", "frozen")

    def __init__(self, weights: Tensor, bias: Tensor, frozen: bool = False):
        if len(weights.shape) != 4:
            raise ShapeError(
                f"conv weights must be rank 4 (kh, kw, c_in, c_out), "
                f"got shape {weights.shape}"
            )
        if len(bias.shape) != 1 or bias.shape[0] != weights.shape[3]:
            raise ShapeError(
                f"conv bias must have length c_out={weights.shape[3]}, "
                f"got shape {bias.shape}"
            )
        self.weights = weights
        self.bias = bias
        self.frozen = bool(frozen)

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    @classmethod
    def initialize(cls, kernel: int, in_channels: int, out_channels: int,
                   rng: np.random.Generator) -> "ConvLayer":
        fan_in = kernel * kernel * in_channels
        fan_out = kernel * kernel * out_channels
        w = glorot_uniform(rng, (kernel, kernel, in_channels, out_channels),
                           fan_in, fan_out)
        return cls(Tensor.from_array(w),
                   Tensor.from_array(np.zeros(out_channels)))


@dataclass(frozen=True)
class PoolSpec:
    """Max-pooling window size s; the stride always equals the window."""

    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ShapeError(f"pool window must be >= 1, got {self.window}")


class FCLayer:
    """Fully-connected head: weights (d_in x m), bias (m), rectified output."""

    __slots__ = ("weights", "bias", "frozen")

    def __init__(self, weights: Tensor, bias: Tensor, frozen: bool = False):
        if len(weights.shape) != 2:
            raise ShapeError(
                f"fc weights must be rank 2 (d_in, m), got {weights.shape}"
            )
        if len(bias.shape) != 1 or bias.shape[0] != weights.shape[1]:
            raise ShapeError(
                f"fc bias must have length m={weights.shape[1]}, "
                f"got shape {bias.shape}"
            )
        self.weights = weights
        self.bias = bias
        self.frozen = bool(frozen)

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(cls, d_in: int, out_dim: int,
                   rng: np.random.Generator) -> "FCLayer":
        w = glorot_uniform(rng, (d_in, out_dim), d_in, out_dim)
        return cls(Tensor.from_array(w), Tensor.from_array(np.zeros(out_dim)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """Conv+pool stages terminated by one FC head.

    `input_size` is the (square) spatial edge the network expects;
    `in_channels` is the channel count at entry (1 for raw images, the
    shared stage's channel count for networks that consume preprocessed
    data).  Construction verifies that the whole shape chain closes.
    """

    __slots__ = ("stages", "head", "input_size", "in_channels", "output_dim")

    def __init__(self, stages: Sequence[tuple[ConvLayer, PoolSpec]],
                 head: FCLayer, input_size: int, in_channels: int = 1):
        stages = [(conv, pool) for conv, pool in stages]
        edge, channels = int(input_size), int(in_channels)
        for i, (conv, pool) in enumerate(stages):
            if conv.in_channels != channels:
                raise ShapeError(
                    f"stage {i} expects {conv.in_channels} input channels "
                    f"but receives {channels}"
                )
            kh, kw = conv.kernel
            if kh > edge or kw > edge:
                raise ShapeError(
                    f"stage {i} kernel {kh}x{kw} exceeds input edge {edge}"
                )
            edge = edge - kh + 1
            if edge % pool.window:
                raise ShapeError(
                    f"stage {i} pool window {pool.window} does not divide "
                    f"feature edge {edge}"
                )
            edge //= pool.window
            channels = conv.out_channels
        flat = edge * edge * channels
        if head.d_in != flat:
            raise ShapeError(
                f"fc head expects {head.d_in} inputs but the last feature "
                f"map flattens to {flat}"
            )
        self.stages = stages
        self.head = head
        self.input_size = int(input_size)
        self.in_channels = int(in_channels)
        self.output_dim = head.out_dim


# ---------------------------------------------------------------------------
# array kernels (everything below the public API works on bare ndarrays)


def _conv_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    kh, kw, _, c_out = w.shape
    oh, ow = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    # true convolution == cross-correlation with the spatially flipped kernel
    wf = w[::-1, ::-1].reshape(kh * kw * w.shape[2], c_out)
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))       # oh,ow,c,kh,kw
    col = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, -1)   # (a,b,c) order
    return (col @ wf).reshape(oh, ow, c_out) + b


def _conv_bwd(x: np.ndarray, w: np.ndarray, g: np.ndarray,
              need_dx: bool) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    kh, kw, c_in, c_out = w.shape
    oh, ow = g.shape[0], g.shape[1]
    gm = g.reshape(oh * ow, c_out)
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))
    col = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, -1)
    dwf = (col.T @ gm).reshape(kh, kw, c_in, c_out)
    dw = dwf[::-1, ::-1]
    db = gm.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wf = w[::-1, ::-1].reshape(kh * kw * c_in, c_out)
    dcol = (gm @ wf.T).reshape(oh, ow, kh, kw, c_in)
    dx = np.zeros_like(x)
    for a in range(kh):
        for b_ in range(kw):
            dx[a:a + oh, b_:b_ + ow] += dcol[:, :, a, b_]
    return dx, dw, db


def _pool_fwd(x: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    h, w, c = x.shape
    oh, ow = h // s, w // s
    blocks = x.reshape(oh, s, ow, s, c).transpose(0, 2, 1, 3, 4)
    flat = blocks.reshape(oh, ow, s * s, c)
    idx = flat.argmax(axis=2)  # first max wins on ties: deterministic routing
    out = np.take_along_axis(flat, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def _pool_bwd(g: np.ndarray, idx: np.ndarray, s: int,
              in_shape: tuple[int, int, int]) -> np.ndarray:
    oh, ow, c = g.shape
    flat = np.zeros((oh, ow, s * s, c))
    np.put_along_axis(flat, idx[:, :, None, :], g[:, :, None, :], axis=2)
    blocks = flat.reshape(oh, ow, s, s, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(in_shape)


def _stage_params(net: Network) -> list[tuple[np.ndarray, np.ndarray, int]]:
    return [(conv.weights.array, conv.bias.array, pool.window)
            for conv, pool in net.stages]


def _forward_cached(stage_params, head_w, head_b, x: np.ndarray):
    """Run the full network on one array, keeping what backprop needs."""
    caches = []
    for w, b, s in stage_params:
        pre = _conv_fwd(x, w, b)
        act = np.maximum(pre, 0.0)
        out, idx = _pool_fwd(act, s)
        caches.append({"x": x, "pre": pre, "idx": idx,
                       "act_shape": act.shape})
        x = out
    flat = x.reshape(-1)
    fc_pre = flat @ head_w + head_b
    out = np.maximum(fc_pre, 0.0)
    caches.append({"flat": flat, "pre": fc_pre, "map_shape": x.shape})
    return out, caches


def _backward_cached(stage_params, head_w, caches, g_out: np.ndarray):
    """Gradients of g_out . output w.r.t. all parameters, frozen or not.

    Returns (stage_grads, head_grads) where stage_grads is a list of
    (dw, db) in stage order and head_grads is (dw, db).
    """
    fc = caches[-1]
    dpre = g_out * (fc["pre"] > 0)
    head_grads = (np.outer(fc["flat"], dpre), dpre.copy())
    g = (head_w @ dpre).reshape(fc["map_shape"])
    stage_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(stage_params)
    for i in range(len(stage_params) - 1, -1, -1):
        w, _, s = stage_params[i]
        cache = caches[i]
        g_act = _pool_bwd(g, cache["idx"], s, cache["act_shape"])
        g_pre = g_act * (cache["pre"] > 0)
        dx, dw, db = _conv_bwd(cache["x"], w, g_pre, need_dx=i > 0)
        stage_grads[i] = (dw, db)
        g = dx
    return stage_grads, head_grads


# ---------------------------------------------------------------------------
# public operations


def conv_forward(input: Tensor, layer: ConvLayer) -> Tensor:
    """Valid (no padding) true convolution plus per-channel bias."""
    x = input.array
    if x.ndim != 3:
        raise ShapeError(f"conv input must be h x w x c, got {input.shape}")
    kh, kw = layer.kernel
    if x.shape[2] != layer.in_channels:
        raise ShapeError(
            f"conv expects {layer.in_channels} channels, got {x.shape[2]}"
        )
    if kh > x.shape[0] or kw > x.shape[1]:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than input {x.shape[0]}x{x.shape[1]}"
        )
    return Tensor.from_array(_conv_fwd(x, layer.weights.array,
                                       layer.bias.array))


def activation(input: Tensor) -> Tensor:
    """Elementwise rectifier max(0, x)."""
    return Tensor.from_array(np.maximum(input.array, 0.0))


def maxpool(input: Tensor, spec: PoolSpec) -> Tensor:
    """Non-overlapping window maxima; spatial extents shrink by the window."""
    x = input.array
    if x.ndim != 3:
        raise ShapeError(f"pool input must be h x w x c, got {input.shape}")
    s = spec.window
    for axis in (0, 1):
        if x.shape[axis] % s:
            raise ShapeError(
                f"pool window {s} does not divide extent {x.shape[axis]} "
                f"on axis {axis}"
            )
    out, _ = _pool_fwd(x, s)
    return Tensor.from_array(out)


def layer_forward(input: Tensor, conv: ConvLayer, spec: PoolSpec) -> Tensor:
    """One full stage: maxpool(activation(conv_forward(input)))."""
    return maxpool(activation(conv_forward(input, conv)), spec)


def fc_forward(input: Tensor, layer: FCLayer) -> Tensor:
    """Affine map followed by the rectifier; input is flattened row-major."""
    flat = input.array.reshape(-1)
    if flat.shape[0] != layer.d_in:
        raise ShapeError(
            f"fc expects {layer.d_in} inputs, got {flat.shape[0]}"
        )
    pre = flat @ layer.weights.array + layer.bias.array
    return Tensor.from_array(np.maximum(pre, 0.0))


def network_forward(net: Network, patch: Tensor) -> Tensor:
    """Apply every stage then the head; returns the length-m representation."""
    x = patch.array
    if x.ndim != 3 or x.shape[0] != net.input_size \
            or x.shape[1] != net.input_size or x.shape[2] != net.in_channels:
        raise ShapeError(
            f"network expects {net.input_size}x{net.input_size}"
            f"x{net.in_channels} input, got {patch.shape}"
        )
    out, _ = _forward_cached(_stage_params(net), net.head.weights.array,
                             net.head.bias.array, x)
    return Tensor.from_array(out)


def network_backward(net: Network, patch: Tensor,
                     output_grad) -> dict[str, np.ndarray]:
    """Gradient of output_grad . f(patch) for every non-frozen parameter.

    Keys are "conv<i>.weights" / "conv<i>.bias" per stage and
    "head.weights" / "head.bias"; frozen layers contribute no entries.
    """
    g_out = np.asarray(output_grad, dtype=np.float64).reshape(-1)
    if g_out.shape[0] != net.output_dim:
        raise ShapeError(
            f"output_grad must have length {net.output_dim}, "
            f"got {g_out.shape[0]}"
        )
    x = patch.array
    if x.ndim != 3 or x.shape[0] != net.input_size \
            or x.shape[1] != net.input_size or x.shape[2] != net.in_channels:
        raise ShapeError(
            f"network expects {net.input_size}x{net.input_size}"
            f"x{net.in_channels} input, got {patch.shape}"
        )
    params = _stage_params(net)
    _, caches = _forward_cached(params, net.head.weights.array,
                                net.head.bias.array, x)
    stage_grads, head_grads = _backward_cached(params, net.head.weights.array,
                                               caches, g_out)
    grads: dict[str, np.ndarray] = {}
    for i, ((conv, _), (dw, db)) in enumerate(zip(net.stages, stage_grads)):
        if not conv.frozen:
            grads[f"conv{i}.weights"] = dw
            grads[f"conv{i}.bias"] = db
    if not net.head.frozen:
        grads["head.weights"] = head_grads[0]
        grads["head.bias"] = head_grads[1]
    return grads


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class BlockCheck:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


@dataclass
class GradCheckReport:
    blocks: list[BlockCheck]
    epsilon: float
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(b.passed(self.tol) for b in self.blocks)

    @property
    def flagged(self) -> list[str]:
        return [b.name for b in self.blocks if not b.passed(self.tol)]


def _rel_err(a: float, f: float) -> float:
    m = max(abs(a), abs(f))
    if m < 1e-10:
        return 0.0
    return abs(a - f) / m


def gradient_check(net: Network, patch: Tensor, epsilon: float = 1e-5,
                   tol: float = 1e-4) -> GradCheckReport:
    """Compare backprop against central finite differences, block by block.

    The scalar under test is u . f(patch) for a fixed random projection u.
    A coordinate is skipped when any rectifier pre-activation it feeds lies
    within 10*epsilon of zero, where the kink makes the central difference
    quotient unreliable: for a stage's own parameters that is the affected
    output channel's pre-activation map, and every pre-activation of later
    stages (which the perturbation reaches indirectly) must clear the same
    margin.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    u = np.random.default_rng(0x5EED).standard_normal(net.output_dim)
    params = [(w.copy(), b.copy(), s) for w, b, s in _stage_params(net)]
    head_w = net.head.weights.array.copy()
    head_b = net.head.bias.array.copy()
    x = patch.array

    out, caches = _forward_cached(params, head_w, head_b, x)
    stage_grads, head_grads = _backward_cached(params, head_w, caches, u)

    margin = 10.0 * epsilon
    stage_pre_min = [np.abs(c["pre"]).min() for c in caches[:-1]]
    head_pre = caches[-1]["pre"]

    def scalar() -> float:
        o, _ = _forward_cached(params, head_w, head_b, x)
        return float(u @ o)

    def fd(arr: np.ndarray, index: tuple) -> float:
        orig = arr[index]
        arr[index] = orig + epsilon
        hi = scalar()
        arr[index] = orig - epsilon
        lo = scalar()
        arr[index] = orig
        return (hi - lo) / (2.0 * epsilon)

    def check_block(name: str, arr: np.ndarray, ana: np.ndarray,
                    coord_ok) -> BlockCheck:
        worst, checked, skipped = 0.0, 0, 0
        for index in np.ndindex(arr.shape):
            if not coord_ok(index):
                skipped += 1
                continue
            worst = max(worst, _rel_err(ana[index], fd(arr, index)))
            checked += 1
        return BlockCheck(name, worst, checked, skipped)

    blocks: list[BlockCheck] = []
    n_stages = len(params)
    for i, ((w, b, s), (conv, _)) in enumerate(zip(params, net.stages)):
        if conv.frozen:
            continue
        downstream = min(
            [stage_pre_min[j] for j in range(i + 1, n_stages)]
            + [np.abs(head_pre).min()]
        )
        if downstream < margin:
            blocks.append(BlockCheck(f"conv{i}.weights", 0.0, 0, w.size))
            blocks.append(BlockCheck(f"conv{i}.bias", 0.0, 0, b.size))
            continue
        chan_min = np.abs(caches[i]["pre"]).min(axis=(0, 1))
        dw, db = stage_grads[i]
        blocks.append(check_block(
            f"conv{i}.weights", w, dw,
            lambda idx: chan_min[idx[3]] >= margin))
        blocks.append(check_block(
            f"conv{i}.bias", b, db,
            lambda idx: chan_min[idx[0]] >= margin))
    if not net.head.frozen:
        out_ok = np.abs(head_pre) >= margin
        blocks.append(check_block(
            "head.weights", head_w, head_grads[0],
            lambda idx: out_ok[idx[1]]))
        blocks.append(check_block(
            "head.bias", head_b, head_grads[1],
            lambda idx: out_ok[idx[0]]))
    return GradCheckReport(blocks, epsilon, tol)
