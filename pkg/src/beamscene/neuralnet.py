"""3-D CNN beam predictor written directly in numpy.

Two valid-padding 3-D convolutions feed a dense trunk and two softmax heads
(transmit and receive beam). Everything runs in float64 with hand-written
backward passes; training uses RMSProp on the summed cross-entropy of both
heads.

Tensors are channels-last: a batch of inputs has shape ``(B, a, b, c, C)``
and conv weights have shape ``(k1, k2, k3, C_in, C_out)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NumericError",
    "ConvSpec",
    "Architecture",
    "Conv3dLayer",
    "DenseLayer",
    "ModelParams",
    "RmspropState",
    "Schedule",
    "TrainResult",
    "conv_output_shape",
    "conv3d_forward",
    "conv3d_backward",
    "dense_forward",
    "dense_backward",
    "relu",
    "softmax",
    "dual_head_loss",
    "init_params",
    "model_forward",
    "forward_backward",
    "rmsprop_step",
    "train",
    "predict_top_m",
    "pair_ranks",
    "save_checkpoint",
    "load_checkpoint",
    "write_loss_csv",
]


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int, int]
    filters: int
    stride: tuple[int, int, int]


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int, int] = (40, 32, 6, 3)
    convs: tuple[ConvSpec, ...] = (
        ConvSpec((5, 5, 2), 6, (2, 2, 1)),
        ConvSpec((3, 3, 2), 12, (2, 2, 1)),
    )
    hidden: tuple[int, ...] = (1600, 1000, 500, 100)
    n_beams: int = 30

    def conv_shapes(self) -> list[tuple[int, int, int, int]]:
        shapes = [tuple(self.input_shape)]
        for c in self.convs:
            spatial = conv_output_shape(shapes[-1][:3], c.kernel, c.stride)
            shapes.append((*spatial, c.filters))
        return shapes

    @property
    def flatten_width(self) -> int:
        return int(np.prod(self.conv_shapes()[-1]))

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = self.input_shape[3]
        for i, c in enumerate(self.convs):
            shapes[f"conv{i}.w"] = (*c.kernel, c_in, c.filters)
            shapes[f"conv{i}.b"] = (c.filters,)
            c_in = c.filters
        fan_in = self.flatten_width
        for i, width in enumerate(self.hidden):
            shapes[f"dense{i}.w"] = (fan_in, width)
            shapes[f"dense{i}.b"] = (width,)
            fan_in = width
        for head in ("head_t", "head_r"):
            shapes[f"{head}.w"] = (fan_in, self.n_beams)
            shapes[f"{head}.b"] = (self.n_beams,)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            input_shape=tuple(d["input_shape"]),
            convs=tuple(ConvSpec(tuple(c["kernel"]), c["filters"], tuple(c["stride"])) for c in d["convs"]),
            hidden=tuple(d["hidden"]),
            n_beams=d["n_beams"],
        )


@dataclass
class Conv3dLayer:
    weights: np.ndarray  # (k1, k2, k3, C_in, C_out)
    bias: np.ndarray
    stride: tuple[int, int, int] = (1, 1, 1)

    @property
    def kernel(self) -> tuple[int, int, int]:
        return self.weights.shape[:3]


@dataclass
class DenseLayer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]

    def conv(self, i: int) -> Conv3dLayer:
        return Conv3dLayer(self.tensors[f"conv{i}.w"], self.tensors[f"conv{i}.b"], self.arch.convs[i].stride)

    def dense(self, name: str) -> DenseLayer:
        return DenseLayer(self.tensors[f"{name}.w"], self.tensors[f"{name}.b"])

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class RmspropState:
    learning_rate: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-8
    cache: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class Schedule:
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    state: RmspropState
    epoch_loss: list[float]


# --- layers ------------------------------------------------------------------


def conv_output_shape(spatial, kernel, stride) -> tuple[int, int, int]:
    out = tuple((n - k) // s + 1 for n, k, s in zip(spatial, kernel, stride))
    if min(out) < 1 or any(n < k for n, k in zip(spatial, kernel)):
        raise ValueError(f"kernel {kernel} does not fit input extents {tuple(spatial)}")
    return out


def _im2col(x: np.ndarray, kernel, stride) -> np.ndarray:
    win = sliding_window_view(x, kernel, axis=(1, 2, 3))
    win = win[:, :: stride[0], :: stride[1], :: stride[2]]
    B, o1, o2, o3 = win.shape[:4]
    return win.reshape(B * o1 * o2 * o3, -1), (B, o1, o2, o3)


def _flat_weights(w: np.ndarray) -> np.ndarray:
    # (k1, k2, k3, Cin, Cout) -> rows ordered (Cin, k1, k2, k3) to match the window layout
    return w.transpose(3, 0, 1, 2, 4).reshape(-1, w.shape[4])


def conv3d_forward(x: np.ndarray, layer: Conv3dLayer, return_cols: bool = False):
    """Valid strided 3-D convolution. Accepts ``(a, b, c, C)`` or a batch ``(B, a, b, c, C)``."""
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.ndim != 5 or x.shape[4] != layer.weights.shape[3]:
        raise ValueError(f"input shape {x.shape} incompatible with weights {layer.weights.shape}")
    conv_output_shape(x.shape[1:4], layer.kernel, layer.stride)
    cols, (B, o1, o2, o3) = _im2col(x, layer.kernel, layer.stride)
    out = (cols @ _flat_weights(layer.weights) + layer.bias).reshape(B, o1, o2, o3, -1)
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv3d_backward(grad_out: np.ndarray, cached_input: np.ndarray, layer: Conv3dLayer, cols=None, need_input_grad=True):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of :func:`conv3d_forward`."""
    single = grad_out.ndim == 4
    if single:
        grad_out = grad_out[None]
        cached_input = cached_input[None]
    x = cached_input
    k1, k2, k3, cin, cout = layer.weights.shape
    s1, s2, s3 = layer.stride
    expect = (x.shape[0], *conv_output_shape(x.shape[1:4], layer.kernel, layer.stride), cout)
    if grad_out.shape != expect:
        raise ValueError(f"grad_out shape {grad_out.shape} != expected {expect}")
    if cols is None:
        cols, _ = _im2col(x, layer.kernel, layer.stride)
    B, o1, o2, o3, _ = grad_out.shape
    go = grad_out.reshape(-1, cout)
    gw = (cols.T @ go).reshape(cin, k1, k2, k3, cout).transpose(1, 2, 3, 0, 4)
    gb = go.sum(axis=0)
    gx = None
    if need_input_grad:
        gcols = (go @ _flat_weights(layer.weights).T).reshape(B, o1, o2, o3, cin, k1, k2, k3)
        gx = np.zeros_like(x, dtype=float)
        for i in range(k1):
            for j in range(k2):
                for k in range(k3):
                    gx[:, i : i + s1 * (o1 - 1) + 1 : s1, j : j + s2 * (o2 - 1) + 1 : s2, k : k + s3 * (o3 - 1) + 1 : s3, :] += gcols[..., i, j, k]
        if single:
            gx = gx[0]
    return gx, gw, gb


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.shape[-1] != layer.weights.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != fan_in {layer.weights.shape[0]}")
    return x @ layer.weights + layer.bias


def dense_backward(grad_out: np.ndarray, cached_input: np.ndarray, layer: DenseLayer):
    if grad_out.shape[-1] != layer.weights.shape[1]:
        raise ValueError("grad_out width does not match fan_out")
    x2 = cached_input.reshape(-1, cached_input.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return grad_out @ layer.weights.T, x2.T @ g2, g2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Per-row loss and gradient ``softmax - onehot``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(z))
    loss = logsum - z[rows, target]
    grad = np.exp(z - logsum[:, None])
    grad[rows, target] -= 1.0
    return loss, grad


def dual_head_loss(logits_t: np.ndarray, logits_r: np.ndarray, label):
    """Cross-entropy of both heads for one sample; ``label`` has ``t_opt``/``r_opt``.

    Returns ``(loss, (grad_t, grad_r))``.
    """
    n = logits_t.shape[-1]
    t, r = int(label.t_opt), int(label.r_opt)
    if not (0 <= t < n and 0 <= r < logits_r.shape[-1]):
        raise ValueError(f"label ({t}, {r}) out of range for {n} beams")
    lt, gt = _cross_entropy(np.atleast_2d(logits_t), np.array([t]))
    lr, gr = _cross_entropy(np.atleast_2d(logits_r), np.array([r]))
    return float(lt[0] + lr[0]), (gt[0], gr[0])


# --- model -------------------------------------------------------------------


def init_params(arch: Architecture | None = None, seed: int = 0) -> ModelParams:
    """He-normal weights, zero biases."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ModelParams(arch, tensors)


def _forward(x: np.ndarray, params: ModelParams, keep: bool):
    arch = params.arch
    cache = []
    h = x
    for i in range(len(arch.convs)):
        layer = params.conv(i)
        z, cols = conv3d_forward(h, layer, return_cols=True)
        if keep:
            cache.append((h, cols, z > 0))
        h = relu(z)
    h = h.reshape(len(h), -1)
    for i in range(len(arch.hidden)):
        z = dense_forward(h, params.dense(f"dense{i}"))
        if keep:
            cache.append((h, z > 0))
        h = relu(z)
    lt = dense_forward(h, params.dense("head_t"))
    lr = dense_forward(h, params.dense("head_r"))
    return lt, lr, h, cache


def _as_batch(g, arch: Architecture) -> np.ndarray:
    x = getattr(g, "g", g)
    x = np.asarray(x, dtype=float)
    if x.ndim == 4:
        x = x[None]
    if x.shape[1:] != tuple(arch.input_shape):
        raise ValueError(f"feature shape {x.shape[1:]} != model input {arch.input_shape}")
    return x


def model_forward(g, params: ModelParams):
    """Logits ``(transmit, receive)`` for one feature or a batch of features."""
    x = _as_batch(g, params.arch)
    lt, lr, _, _ = _forward(x, params, keep=False)
    if np.ndim(getattr(g, "g", g)) == 4:
        return lt[0], lr[0]
    return lt, lr


def forward_backward(x: np.ndarray, t: np.ndarray, r: np.ndarray, params: ModelParams):
    """Mean dual-head loss over a batch and its gradient for every tensor."""
    arch = params.arch
    x = _as_batch(x, arch)
    B = len(x)
    lt, lr, h, cache = _forward(x, params, keep=True)
    loss_t, g_t = _cross_entropy(lt, np.asarray(t))
    loss_r, g_r = _cross_entropy(lr, np.asarray(r))
    loss = float(np.mean(loss_t + loss_r))
    g_t /= B
    g_r /= B

    grads = {}
    gh = np.zeros_like(h)
    for head, g in (("head_t", g_t), ("head_r", g_r)):
        gx, gw, gb = dense_backward(g, h, params.dense(head))
        grads[f"{head}.w"], grads[f"{head}.b"] = gw, gb
        gh += gx
    n_conv = len(arch.convs)
    for i in reversed(range(len(arch.hidden))):
        h_in, mask = cache[n_conv + i]
        gz = gh * mask
        gh, grads[f"dense{i}.w"], grads[f"dense{i}.b"] = dense_backward(gz, h_in, params.dense(f"dense{i}"))
    gh = gh.reshape((B, *arch.conv_shapes()[-1]))
    for i in reversed(range(n_conv)):
        h_in, cols, mask = cache[i]
        gz = gh * mask
        gh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv3d_backward(
            gz, h_in, params.conv(i), cols=cols, need_input_grad=i > 0
        )
    return loss, grads


@numba.njit(cache=True)
def _rmsprop_kernel(p, g, cache, lr, decay, eps):
    # fused single pass; the dense trunk alone holds ~5.8M parameters
    for i in range(p.size):
        c = decay * cache[i] + (1.0 - decay) * g[i] * g[i]
        cache[i] = c
        p[i] -= lr * g[i] / (np.sqrt(c) + eps)


def rmsprop_step(params: ModelParams, grads: dict[str, np.ndarray], state: RmspropState):
    """In-place RMSProp update; returns ``(params, state)``.

    ``cache <- decay * cache + (1 - decay) * g**2``;
    ``p <- p - lr * g / (sqrt(cache) + eps)``.
    """
    for name, g in grads.items():
        p = params.tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        cache = state.cache.get(name)
        if cache is None:
            cache = state.cache[name] = np.zeros_like(p)
        _rmsprop_kernel(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=float).reshape(-1),
            cache.reshape(-1),
            state.learning_rate,
            state.decay,
            state.epsilon,
        )
    return params, state


def train(
    dataset: tuple,
    params: ModelParams,
    state: RmspropState | None = None,
    schedule: Schedule | None = None,
    indices: np.ndarray | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch RMSProp over ``dataset = (features, t_opt, r_opt)``.

    ``features`` may be any array-like supporting fancy indexing along the
    first axis (e.g. a memory-mapped record field); batches are cast to
    float64. ``indices`` restricts training to a subset of rows.
    """
    features, t_all, r_all = dataset
    state = state or RmspropState()
    schedule = schedule or Schedule()
    idx = np.arange(len(t_all)) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(schedule.seed)
    curve = []
    for epoch in range(schedule.epochs):
        perm = idx[rng.permutation(len(idx))]
        total = 0.0
        for start in range(0, len(perm), schedule.batch_size):
            batch = np.sort(perm[start : start + schedule.batch_size])
            x = np.asarray(features[batch], dtype=float)
            loss, grads = forward_backward(x, t_all[batch], r_all[batch], params)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            rmsprop_step(params, grads, state)
            total += loss * len(batch)
        curve.append(total / len(perm))
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return TrainResult(params, state, curve)


# --- ranking -----------------------------------------------------------------


def pair_scores(logits_t: np.ndarray, logits_r: np.ndarray) -> np.ndarray:
    """Product of head probabilities; ``[..., t, r]``."""
    return softmax(logits_t)[..., :, None] * softmax(logits_r)[..., None, :]


def predict_top_m(logits_t: np.ndarray, logits_r: np.ndarray, M: int) -> list[tuple[int, int]]:
    """The ``M`` best ``(t, r)`` pairs; equal scores fall back to lexicographic order."""
    n_t, n_r = logits_t.shape[-1], logits_r.shape[-1]
    if not 1 <= M <= n_t * n_r:
        raise ValueError(f"M={M} outside [1, {n_t * n_r}]")
    scores = pair_scores(logits_t, logits_r).ravel()
    order = np.argsort(-scores, kind="stable")[:M]
    return [divmod(int(k), n_r) for k in order]


def pair_ranks(logits_t: np.ndarray, logits_r: np.ndarray, t: np.ndarray, r: np.ndarray) -> np.ndarray:
    """0-based rank of the true pair under the :func:`predict_top_m` ordering, batched."""
    scores = pair_scores(logits_t, logits_r)
    B, n_t, n_r = scores.shape
    flat = scores.reshape(B, -1)
    true_k = np.asarray(t) * n_r + np.asarray(r)
    s_true = flat[np.arange(B), true_k][:, None]
    ahead = (flat > s_true) | ((flat == s_true) & (np.arange(n_t * n_r)[None] < true_k[:, None]))
    return ahead.sum(axis=1)


# --- persistence -------------------------------------------------------------

CHECKPOINT_MAGIC = b"BSNN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams) -> None:
    """Header (magic, version, JSON layer manifest) followed by little-endian float64 blocks."""
    manifest = {
        "architecture": params.arch.to_dict(),
        "tensors": [[name, list(t.shape)] for name, t in params.tensors.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for t in params.tensors.values():
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        version, n = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        manifest = json.loads(f.read(n))
        tensors = {}
        for name, shape in manifest["tensors"]:
            count = int(np.prod(shape))
            tensors[name] = np.frombuffer(f.read(8 * count), dtype="<f8").astype(float).reshape(shape)
    return ModelParams(Architecture.from_dict(manifest["architecture"]), tensors)


def write_loss_csv(path, curve: Sequence[float]) -> None:
    buf = io.StringIO()
    buf.write("epoch,mean_loss\n")
    for i, v in enumerate(curve):
        buf.write(f"{i},{v:.17g}\n")
    FsPath(path).write_text(buf.getvalue())


DEFAULT_FLATTEN_WIDTH = 2304

# valid padding is what makes the default trunk start at this width
if Architecture().flatten_width != DEFAULT_FLATTEN_WIDTH:
    raise ImportError(f"default network flattens to {Architecture().flatten_width}, expected {DEFAULT_FLATTEN_WIDTH}")
