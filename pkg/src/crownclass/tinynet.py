"""Minimal neural-network core: depthwise 3x3 convolutions, 2x2 max
pooling, dense layers, softmax cross-entropy, exact reverse-mode
gradients, and the Adam optimizer.

Three architectures share the code path:

  dsm            4x128x128 input, six conv/pool pairs -> 4x2x2 -> 16,
                 crown area through dense 2 -> 2; concat 18 -> 25 -> 10 -> 2
  views          four 1x64x64 images, five conv/pool pairs each -> 2x2
                 -> 16 total, (width, height) through dense 4 -> 2;
                 concat 18 -> 25 -> 10 -> 2
  views_reduced  as views with two images (-> 8) and head sizes 16 / 8

Every convolution is depthwise: one 3x3 kernel per channel, zero padding
1, stride 1, so channel count is preserved through the stack. Runtime
arithmetic is float32; passing float64 parameters switches the whole
graph to float64 (used by gradient checks).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import derive_seed

ADAM_LR = 0.01
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
BATCH_SIZE = 32

MAGIC = b"TNET"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    tag: str
    branch_channels: tuple[int, ...]
    conv_pairs: int
    image_hw: int
    scalar_dim: int
    side_dims: tuple[int, int]
    head_dims: tuple[int, int]

    @property
    def input_channels(self) -> int:
        return sum(self.branch_channels)

    @property
    def final_hw(self) -> int:
        return self.image_hw >> self.conv_pairs

    @property
    def flatten_dim(self) -> int:
        return self.input_channels * self.final_hw * self.final_hw

    @property
    def concat_dim(self) -> int:
        return self.flatten_dim + self.side_dims[1]


ARCHITECTURES = {
    "dsm": ArchSpec("dsm", (4,), 6, 128, 1, (2, 2), (25, 10)),
    "views": ArchSpec("views", (1, 1, 1, 1), 5, 64, 2, (4, 2), (25, 10)),
    "views_reduced": ArchSpec("views_reduced", (1, 1), 5, 64, 2, (4, 2), (16, 8)),
}


@dataclass
class NetworkParams:
    tag: str
    tensors: dict[str, np.ndarray]

    @property
    def spec(self) -> ArchSpec:
        return ARCHITECTURES[self.tag]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.tag, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    epsilon: float
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def _branch_prefix(spec: ArchSpec, branch: int) -> str:
    return f"img{branch}." if len(spec.branch_channels) > 1 else ""


def _layer_plan(spec: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (and file) order."""
    plan: list[tuple[str, tuple[int, ...]]] = []
    for branch, channels in enumerate(spec.branch_channels):
        prefix = _branch_prefix(spec, branch)
        for i in range(spec.conv_pairs):
            plan.append((f"{prefix}conv{i}.kernel", (channels, 3, 3)))
            plan.append((f"{prefix}conv{i}.bias", (channels,)))
    side0, side1 = spec.side_dims
    head0, head1 = spec.head_dims
    for name, shape in (
        ("side0.weight", (side0, spec.scalar_dim)),
        ("side0.bias", (side0,)),
        ("side1.weight", (side1, side0)),
        ("side1.bias", (side1,)),
        ("head0.weight", (head0, spec.concat_dim)),
        ("head0.bias", (head0,)),
        ("head1.weight", (head1, head0)),
        ("head1.bias", (head1,)),
        ("out.weight", (2, head1)),
        ("out.bias", (2,)),
    ):
        plan.append((name, shape))
    return plan


def init_params(tag: str, seed: int, dtype=np.float32) -> NetworkParams:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases zero."""
    spec = ARCHITECTURES[tag]
    rng = np.random.default_rng(derive_seed(seed, "init", tag))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _layer_plan(spec):
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if ".conv" in name or name.startswith("conv"):
            fan_in = fan_out = 9
        else:
            fan_out, fan_in = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return NetworkParams(tag, tensors)


def _check_shape(name: str, arr: np.ndarray, expected: tuple[int, ...]) -> None:
    if tuple(arr.shape) != tuple(expected):
        raise AssertionError(f"{name}: shape {arr.shape}, expected {expected}")


def conv3x3_depthwise(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 cross-correlation, zero padding 1, stride 1."""
    *lead, c, h, w = x.shape
    _check_shape("conv kernels", kernels, (c, 3, 3))
    padded = np.zeros((*lead, c, h + 2, w + 2), dtype=x.dtype)
    padded[..., 1 : h + 1, 1 : w + 1] = x
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += kernels[:, di, dj][:, None, None] * padded[
                ..., di : di + h, dj : dj + w
            ]
    return out + biases[:, None, None]


def conv3x3_depthwise_backward(
    x: np.ndarray, grad: np.ndarray, kernels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_kernels, d_biases, d_input) of the depthwise conv."""
    *lead, c, h, w = x.shape
    lead_axes = tuple(range(len(lead)))
    spatial_axes = tuple(range(len(lead) + 1, len(lead) + 3))
    padded = np.zeros((*lead, c, h + 2, w + 2), dtype=x.dtype)
    padded[..., 1 : h + 1, 1 : w + 1] = x
    d_padded = np.zeros_like(padded)
    d_kernels = np.zeros_like(kernels)
    for di in range(3):
        for dj in range(3):
            window = padded[..., di : di + h, dj : dj + w]
            d_kernels[:, di, dj] = (grad * window).sum(axis=lead_axes + spatial_axes)
            d_padded[..., di : di + h, dj : dj + w] += (
                kernels[:, di, dj][:, None, None] * grad
            )
    d_biases = grad.sum(axis=lead_axes + spatial_axes)
    return d_kernels, d_biases, d_padded[..., 1 : h + 1, 1 : w + 1]


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over disjoint 2x2 windows; also returns the argmax index per
    window (first in row-major order on ties) for backward routing."""
    *lead, c, h, w = x.shape
    if h % 2 or w % 2:
        raise AssertionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(*lead, c, h // 2, 2, w // 2, 2)
    windows = np.moveaxis(windows, -3, -2)
    flat = windows.reshape(*lead, c, h // 2, w // 2, 4)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(
    grad: np.ndarray, idx: np.ndarray, input_shape: tuple[int, ...]
) -> np.ndarray:
    *lead, c, h, w = input_shape
    flat = np.zeros((*lead, c, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(flat, idx[..., None], grad[..., None], axis=-1)
    windows = flat.reshape(*lead, c, h // 2, w // 2, 2, 2)
    windows = np.moveaxis(windows, -2, -3)
    return windows.reshape(*lead, c, h, w)


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, relu: bool) -> np.ndarray:
    out = x @ weight.T + bias
    return np.maximum(out, 0) if relu else out


def softmax_xent(
    logits: np.ndarray, onehot: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stable softmax probabilities and per-sample cross-entropy loss.

    The gradient of the loss at the logits is probs - onehot.
    """
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    loss = -(onehot * log_probs).sum(axis=-1)
    return probs, loss


def _forward(
    params: NetworkParams,
    images: np.ndarray,
    scalars: np.ndarray,
    trace: "list | None" = None,
    cache: "dict | None" = None,
) -> np.ndarray:
    """Forward pass to logits; shapes asserted at every layer."""
    spec = params.spec
    dtype = params.dtype
    images = np.asarray(images, dtype=dtype)
    scalars = np.asarray(scalars, dtype=dtype)
    if images.ndim != 4:
        raise AssertionError(f"images must be batched 4-d, got {images.shape}")
    batch = images.shape[0]
    _check_shape(
        "images", images, (batch, spec.input_channels, spec.image_hw, spec.image_hw)
    )
    _check_shape("scalars", scalars, (batch, spec.scalar_dim))

    def note(name, arr):
        if trace is not None:
            trace.append((name, tuple(arr.shape)))

    note("input.images", images)
    note("input.scalars", scalars)

    flats = []
    offset = 0
    for branch, channels in enumerate(spec.branch_channels):
        prefix = _branch_prefix(spec, branch)
        x = images[:, offset : offset + channels]
        offset += channels
        hw = spec.image_hw
        for i in range(spec.conv_pairs):
            pre = conv3x3_depthwise(
                x,
                params.tensors[f"{prefix}conv{i}.kernel"],
                params.tensors[f"{prefix}conv{i}.bias"],
            )
            _check_shape(f"{prefix}conv{i}", pre, (batch, channels, hw, hw))
            note(f"{prefix}conv{i}", pre)
            act = np.maximum(pre, 0)
            pooled, idx = maxpool2x2(act)
            hw //= 2
            _check_shape(f"{prefix}pool{i}", pooled, (batch, channels, hw, hw))
            note(f"{prefix}pool{i}", pooled)
            if cache is not None:
                cache[f"{prefix}layer{i}"] = (x, pre, act.shape, idx)
            x = pooled
        flats.append(x.reshape(batch, -1))

    flat = np.concatenate(flats, axis=1) if len(flats) > 1 else flats[0]
    _check_shape("flatten", flat, (batch, spec.flatten_dim))
    note("flatten", flat)

    side0 = dense(
        scalars, params.tensors["side0.weight"], params.tensors["side0.bias"], relu=True
    )
    _check_shape("side0", side0, (batch, spec.side_dims[0]))
    note("side0", side0)
    side1 = dense(
        side0, params.tensors["side1.weight"], params.tensors["side1.bias"], relu=True
    )
    _check_shape("side1", side1, (batch, spec.side_dims[1]))
    note("side1", side1)

    concat = np.concatenate([flat, side1], axis=1)
    _check_shape("concat", concat, (batch, spec.concat_dim))
    note("concat", concat)

    head0 = dense(
        concat, params.tensors["head0.weight"], params.tensors["head0.bias"], relu=True
    )
    _check_shape("head0", head0, (batch, spec.head_dims[0]))
    note("head0", head0)
    head1 = dense(
        head0, params.tensors["head1.weight"], params.tensors["head1.bias"], relu=True
    )
    _check_shape("head1", head1, (batch, spec.head_dims[1]))
    note("head1", head1)
    logits = dense(
        head1, params.tensors["out.weight"], params.tensors["out.bias"], relu=False
    )
    _check_shape("logits", logits, (batch, 2))
    note("logits", logits)

    if cache is not None:
        cache["dense"] = (scalars, side0, side1, flat, concat, head0, head1)
    return logits


def network_forward(
    params: NetworkParams,
    images: np.ndarray,
    scalars: np.ndarray,
    trace: "list | None" = None,
) -> np.ndarray:
    """Class probabilities, shape (batch, 2)."""
    logits = _forward(params, images, scalars, trace=trace)
    probs, _ = softmax_xent(logits, np.zeros_like(logits))
    if trace is not None:
        trace.append(("probs", tuple(probs.shape)))
    if not np.isfinite(probs).all():
        raise AssertionError("non-finite probabilities")
    return probs


def _dense_backward(grad, x, weight, activated=None):
    """activated: post-ReLU output when the layer had a ReLU."""
    if activated is not None:
        grad = grad * (activated > 0)
    d_weight = grad.T @ x
    d_bias = grad.sum(axis=0)
    d_x = grad @ weight
    return d_weight, d_bias, d_x


def network_gradients(
    params: NetworkParams,
    images: np.ndarray,
    scalars: np.ndarray,
    onehot: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Exact gradients of the mean cross-entropy over the batch.

    Returns (grads, probs, per-sample losses).
    """
    spec = params.spec
    cache: dict = {}
    logits = _forward(params, images, scalars, cache=cache)
    onehot = np.asarray(onehot, dtype=logits.dtype)
    probs, losses = softmax_xent(logits, onehot)
    batch = logits.shape[0]

    grads: dict[str, np.ndarray] = {}
    d_logits = (probs - onehot) / batch

    scalars_in, side0, side1, flat, concat, head0, head1 = cache["dense"]
    grads["out.weight"], grads["out.bias"], d_head1 = _dense_backward(
        d_logits, head1, params.tensors["out.weight"]
    )
    grads["head1.weight"], grads["head1.bias"], d_head0 = _dense_backward(
        d_head1, head0, params.tensors["head1.weight"], activated=head1
    )
    grads["head0.weight"], grads["head0.bias"], d_concat = _dense_backward(
        d_head0, concat, params.tensors["head0.weight"], activated=head0
    )
    d_flat = d_concat[:, : spec.flatten_dim]
    d_side1 = d_concat[:, spec.flatten_dim :]
    grads["side1.weight"], grads["side1.bias"], d_side0 = _dense_backward(
        d_side1, side0, params.tensors["side1.weight"], activated=side1
    )
    grads["side0.weight"], grads["side0.bias"], _ = _dense_backward(
        d_side0, scalars_in, params.tensors["side0.weight"], activated=side0
    )

    final = spec.final_hw
    offset = 0
    for branch, channels in enumerate(spec.branch_channels):
        prefix = _branch_prefix(spec, branch)
        width = channels * final * final
        d_x = d_flat[:, offset : offset + width].reshape(batch, channels, final, final)
        offset += width
        for i in reversed(range(spec.conv_pairs)):
            x_in, pre, act_shape, idx = cache[f"{prefix}layer{i}"]
            d_act = maxpool2x2_backward(d_x, idx, act_shape)
            d_pre = d_act * (pre > 0)
            d_kernel, d_bias, d_x = conv3x3_depthwise_backward(
                x_in, d_pre, params.tensors[f"{prefix}conv{i}.kernel"]
            )
            grads[f"{prefix}conv{i}.kernel"] = d_kernel
            grads[f"{prefix}conv{i}.bias"] = d_bias

    ordered = {name: grads[name] for name in params.tensors}
    return ordered, probs, losses


def init_adam(
    params: NetworkParams,
    lr: float = ADAM_LR,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> AdamState:
    zeros = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        t=0,
        m=zeros,
        v={name: np.zeros_like(t) for name, t in params.tensors.items()},
    )


def adam_step(
    params: NetworkParams, grads: dict[str, np.ndarray], state: AdamState
) -> tuple[NetworkParams, AdamState]:
    t = state.t + 1
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    tensors = {}
    new_m = {}
    new_v = {}
    for name, theta in params.tensors.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        tensors[name] = (theta - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(
            theta.dtype
        )
        new_m[name] = m.astype(theta.dtype)
        new_v[name] = v.astype(theta.dtype)
    return (
        NetworkParams(params.tag, tensors),
        AdamState(state.lr, state.beta1, state.beta2, state.epsilon, t, new_m, new_v),
    )


def predict_probs(
    params: NetworkParams,
    images: np.ndarray,
    scalars: np.ndarray,
    chunk: int = 256,
) -> np.ndarray:
    parts = [
        network_forward(params, images[i : i + chunk], scalars[i : i + chunk])
        for i in range(0, len(images), chunk)
    ]
    return np.concatenate(parts, axis=0)


def train_network(
    params: NetworkParams,
    images: np.ndarray,
    scalars: np.ndarray,
    onehots: np.ndarray,
    epochs: int,
    batch_size: int = BATCH_SIZE,
    seed: int = 0,
    lr: float = ADAM_LR,
) -> tuple[NetworkParams, float]:
    """Mini-batch Adam training over shuffled epochs.

    Returns the trained parameters and the training accuracy measured
    over all supplied (augmented) samples after the final epoch.
    """
    n = len(images)
    if n == 0:
        raise ValueError("no training samples")
    state = init_adam(params, lr=lr)
    rng = np.random.default_rng(derive_seed(seed, "train-shuffle"))
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            grads, _, _ = network_gradients(
                params, images[take], scalars[take], onehots[take]
            )
            params, state = adam_step(params, grads, state)
    probs = predict_probs(params, images, scalars)
    accuracy = float(
        np.mean(np.argmax(probs, axis=1) == np.argmax(onehots, axis=1))
    )
    return params, accuracy


def save_params(path: "str | Path", params: NetworkParams) -> None:
    """Snapshot: magic, version, architecture tag, then per-tensor name,
    dims, and float32 little-endian values in declaration order."""
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        tag_bytes = params.tag.encode("utf-8")
        handle.write(struct.pack("<HBH", SNAPSHOT_VERSION, len(tag_bytes), len(params.tensors)))
        handle.write(tag_bytes)
        for name, tensor in params.tensors.items():
            name_bytes = name.encode("utf-8")
            handle.write(struct.pack("<B", len(name_bytes)))
            handle.write(name_bytes)
            handle.write(struct.pack("<B", tensor.ndim))
            handle.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            handle.write(tensor.astype("<f4").tobytes())


def load_params(path: "str | Path") -> NetworkParams:
    with open(path, "rb") as handle:
        if handle.read(4) != MAGIC:
            raise ValueError("not a parameter snapshot")
        version, tag_len, n_tensors = struct.unpack("<HBH", handle.read(5))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        tag = handle.read(tag_len).decode("utf-8")
        if tag not in ARCHITECTURES:
            raise ValueError(f"unknown architecture tag {tag!r}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<B", handle.read(1))
            name = handle.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", handle.read(1))
            shape = struct.unpack(f"<{ndim}I", handle.read(4 * ndim))
            count = int(np.prod(shape))
            blob = handle.read(4 * count)
            if len(blob) != 4 * count:
                raise ValueError("truncated parameter snapshot")
            tensors[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return NetworkParams(tag, tensors)
