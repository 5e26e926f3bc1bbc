"""Small deterministic sequence-model stack.

Dense, 1D convolution and LSTM layers with hand-written backward passes,
an Adam optimizer, a finite-difference gradient checker and a binary
checkpoint format. Everything runs in float64 on numpy arrays; a
"sequence tensor" here is simply an ``np.ndarray`` of rank <= 3.

Layers are batched over a leading axis:

    Dense   (..., in)        -> (..., out)
    Conv1d  (B, C_in, L)     -> (B, C_out, L_out)
    Lstm    (B, T, in)       -> (B, T, hidden)

Unbatched inputs (without the leading ``B``) are accepted for Conv1d and
Lstm and returned without it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Array shape does not match what a layer expects."""


class UsageError(RuntimeError):
    """A layer API was called out of order or with a foreign cache."""


class TrainingError(RuntimeError):
    """Non-finite values showed up during an optimizer step."""

    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name


class GradientCheckError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

@dataclass
class DenseCache:
    layer: "Dense"
    x: np.ndarray
    out_shape: tuple


class Dense:
    """Affine map ``y = x W^T + b`` over the last axis."""

    def __init__(self, in_dim, out_dim, rng=None):
        if in_dim < 1 or out_dim < 1:
            raise DimensionError("Dense dims must be positive")
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_dim)
        self.W = _uniform(rng, (out_dim, in_dim), bound)
        self.b = np.zeros(out_dim, dtype=DTYPE)

    def params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"Dense input feature axis (-1) has {x.shape[-1]}, expected {self.in_dim}")
        y = x @ self.W.T + self.b
        return y, DenseCache(self, x, y.shape)

    def backward(self, cache, dy):
        _check_cache(self, cache, dy, cache.out_shape)
        x2 = cache.x.reshape(-1, self.in_dim)
        dy2 = dy.reshape(-1, self.out_dim)
        grads = {"W": dy2.T @ x2, "b": dy2.sum(axis=0)}
        dx = (dy2 @ self.W).reshape(cache.x.shape)
        return grads, dx


# ---------------------------------------------------------------------------
# Conv1d
# ---------------------------------------------------------------------------

def conv_output_length(length, kernel_width, stride=1):
    if length < kernel_width:
        raise DimensionError(
            f"sequence length {length} shorter than kernel width {kernel_width}")
    return (length - kernel_width) // stride + 1


@dataclass
class Conv1dCache:
    layer: "Conv1d"
    x: np.ndarray
    batched: bool
    out_shape: tuple


class Conv1d:
    """Valid (unpadded) strided cross-correlation.

    The kernel is stored as ``W[out_channel, in_channel, tap]``.
    """

    def __init__(self, in_channels, out_channels, kernel_width, stride=1, rng=None):
        if min(in_channels, out_channels, kernel_width, stride) < 1:
            raise DimensionError("Conv1d extents must be positive")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_width = int(kernel_width)
        self.stride = int(stride)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_channels * kernel_width)
        self.W = _uniform(rng, (out_channels, in_channels, kernel_width), bound)
        self.b = np.zeros(out_channels, dtype=DTYPE)

    def params(self):
        return {"W": self.W, "b": self.b}

    def _windows(self, x):
        win = np.lib.stride_tricks.sliding_window_view(x, self.kernel_width, axis=-1)
        return win[:, :, :: self.stride, :]

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        batched = x.ndim == 3
        if not batched:
            if x.ndim != 2:
                raise DimensionError(f"Conv1d expects (C, L) or (B, C, L), got rank {x.ndim}")
            x = x[None]
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"Conv1d channel axis has {x.shape[1]}, expected {self.in_channels}")
        conv_output_length(x.shape[2], self.kernel_width, self.stride)
        y = np.einsum("bclk,ock->bol", self._windows(x), self.W, optimize=True)
        y += self.b[None, :, None]
        cache = Conv1dCache(self, x, batched, y.shape)
        return (y if batched else y[0]), cache

    def backward(self, cache, dy):
        dy = np.asarray(dy, dtype=DTYPE)
        if not cache.batched:
            dy = dy[None]
        _check_cache(self, cache, dy, cache.out_shape)
        x = cache.x
        l_out = dy.shape[2]
        grads = {
            "W": np.einsum("bclk,bol->ock", self._windows(x), dy, optimize=True),
            "b": dy.sum(axis=(0, 2)),
        }
        dx = np.zeros_like(x)
        span = self.stride * (l_out - 1) + 1
        for j in range(self.kernel_width):
            dx[:, :, j: j + span: self.stride] += np.einsum(
                "bol,oc->bcl", dy, self.W[:, :, j], optimize=True)
        return grads, (dx if cache.batched else dx[0])


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmCache:
    layer: "Lstm"
    x: np.ndarray
    h: np.ndarray        # (B, T+1, H), h[:, 0] is the initial state
    c: np.ndarray        # (B, T+1, H)
    gates: np.ndarray    # (B, T, 4H) post-activation, order i f o g
    tanh_c: np.ndarray   # (B, T, H)
    batched: bool
    out_shape: tuple


class Lstm:
    """Single-layer LSTM returning the hidden state at every step.

    Gate pre-activations are ``x_t Wx + h_{t-1} Wh + b`` split into
    input, forget, output and candidate blocks of width ``hidden_dim``.
    """

    def __init__(self, input_dim, hidden_dim, rng=None, forget_bias=1.0):
        if input_dim < 1 or hidden_dim < 1:
            raise DimensionError("Lstm dims must be positive")
        self.input_dim, self.hidden_dim = int(input_dim), int(hidden_dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(hidden_dim)
        H = self.hidden_dim
        self.Wx = _uniform(rng, (input_dim, 4 * H), bound)
        self.Wh = _uniform(rng, (H, 4 * H), bound)
        self.b = np.zeros(4 * H, dtype=DTYPE)
        self.b[H: 2 * H] = forget_bias

    def params(self):
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}

    def forward(self, x, initial_state=None):
        x = np.asarray(x, dtype=DTYPE)
        batched = x.ndim == 3
        if not batched:
            if x.ndim != 2:
                raise DimensionError(f"Lstm expects (T, D) or (B, T, D), got rank {x.ndim}")
            x = x[None]
        B, T, D = x.shape
        if T < 1:
            raise DimensionError("Lstm time axis (1) must have length >= 1")
        if D != self.input_dim:
            raise DimensionError(f"Lstm feature axis (-1) has {D}, expected {self.input_dim}")
        H = self.hidden_dim
        h = np.zeros((B, T + 1, H), dtype=DTYPE)
        c = np.zeros((B, T + 1, H), dtype=DTYPE)
        if initial_state is not None:
            h0, c0 = initial_state
            h[:, 0] = np.broadcast_to(h0, (B, H))
            c[:, 0] = np.broadcast_to(c0, (B, H))
        gates = np.empty((B, T, 4 * H), dtype=DTYPE)
        tanh_c = np.empty((B, T, H), dtype=DTYPE)
        xw = x @ self.Wx + self.b
        Wh = self.Wh
        for t in range(T):
            z = xw[:, t] + h[:, t] @ Wh
            g = gates[:, t]
            g[:, : 3 * H] = sigmoid(z[:, : 3 * H])
            g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            c[:, t + 1] = g[:, H: 2 * H] * c[:, t] + g[:, :H] * g[:, 3 * H:]
            tanh_c[:, t] = np.tanh(c[:, t + 1])
            h[:, t + 1] = g[:, 2 * H: 3 * H] * tanh_c[:, t]
        out = h[:, 1:]
        cache = LstmCache(self, x, h, c, gates, tanh_c, batched, out.shape)
        return (out if batched else out[0]), cache

    def backward(self, cache, dh_out, return_state_grad=False):
        dh_out = np.asarray(dh_out, dtype=DTYPE)
        if not cache.batched:
            dh_out = dh_out[None]
        _check_cache(self, cache, dh_out, cache.out_shape)
        B, T, H = dh_out.shape
        gates, c, tanh_c = cache.gates, cache.c, cache.tanh_c
        dz = np.empty((B, T, 4 * H), dtype=DTYPE)
        dh_next = np.zeros((B, H), dtype=DTYPE)
        dc_next = np.zeros((B, H), dtype=DTYPE)
        WhT = self.Wh.T
        for t in range(T - 1, -1, -1):
            g = gates[:, t]
            i, f, o, cand = g[:, :H], g[:, H: 2 * H], g[:, 2 * H: 3 * H], g[:, 3 * H:]
            dh = dh_out[:, t] + dh_next
            tc = tanh_c[:, t]
            dc = dh * o * (1.0 - tc * tc) + dc_next
            d = dz[:, t]
            d[:, :H] = dc * cand * i * (1.0 - i)
            d[:, H: 2 * H] = dc * c[:, t] * f * (1.0 - f)
            d[:, 2 * H: 3 * H] = dh * tc * o * (1.0 - o)
            d[:, 3 * H:] = dc * i * (1.0 - cand * cand)
            dc_next = dc * f
            dh_next = d @ WhT
        x2 = cache.x.reshape(B * T, -1)
        dz2 = dz.reshape(B * T, 4 * H)
        grads = {
            "Wx": x2.T @ dz2,
            "Wh": cache.h[:, :-1].reshape(B * T, H).T @ dz2,
            "b": dz2.sum(axis=0),
        }
        dx = dz @ self.Wx.T
        if not cache.batched:
            dx = dx[0]
        if return_state_grad:
            return grads, dx, (dh_next, dc_next)
        return grads, dx


def _check_cache(layer, cache, grad, expected_shape):
    if getattr(cache, "layer", None) is not layer:
        raise UsageError(f"cache does not belong to this {type(layer).__name__}")
    if tuple(grad.shape) != tuple(expected_shape):
        raise UsageError(
            f"output gradient shape {tuple(grad.shape)} does not match "
            f"forward output {tuple(expected_shape)}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """Apply one Adam update to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'", name)
        if params[name].shape != g.shape:
            raise DimensionError(
                f"gradient for '{name}' has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class Fragment:
    """A differentiable piece of a model exposed for gradient checking.

    ``loss()`` evaluates the scalar loss from the current contents of
    ``params``; ``loss_and_grads()`` also returns analytic gradients keyed
    like ``params``.
    """

    params: dict
    loss: Callable[[], float]
    loss_and_grads: Callable[[], tuple]


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    def __str__(self):
        lines = [f"{name:24s} {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(fragment, tolerance=1e-4, eps=1e-5, floor=1e-6):
    """Compare analytic gradients with central differences, per parameter block."""
    loss0, grads = fragment.loss_and_grads()
    if not np.isfinite(loss0):
        raise GradientCheckError(f"loss is not finite: {loss0}")
    errors = {}
    for name, p in fragment.params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            lp = fragment.loss()
            flat[k] = orig - eps
            lm = fragment.loss()
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise GradientCheckError(f"non-finite loss while perturbing '{name}'")
            nflat[k] = (lp - lm) / (2.0 * eps)
        errors[name] = float(relative_error(grads[name], numeric, floor).max()) if p.size else 0.0
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"IMULOC-CKPT"
FORMAT_VERSION = 1


def save_arrays(path, arrays: dict) -> None:
    """Write named float64 arrays: text header + little-endian payload."""
    head = io.StringIO()
    head.write(f"version {FORMAT_VERSION}\n")
    head.write(f"entries {len(arrays)}\n")
    for name, a in arrays.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"parameter name may not contain whitespace: {name!r}")
        shape = " ".join(str(s) for s in np.shape(a))
        head.write(f"{name} {np.ndim(a)} {shape}".rstrip() + "\n")
    head.write("end\n")
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(head.getvalue().encode("ascii"))
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = blob.split(b"\n", 64)
    if lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = lines[1].decode().split()
    if version != ["version", str(FORMAT_VERSION)]:
        raise CheckpointError(f"{path}: unsupported format {lines[1]!r}")
    n = int(lines[2].decode().split()[1])
    manifest = []
    for raw in lines[3: 3 + n]:
        parts = raw.decode().split()
        name, ndim = parts[0], int(parts[1])
        manifest.append((name, tuple(int(s) for s in parts[2: 2 + ndim])))
    if lines[3 + n] != b"end":
        raise CheckpointError(f"{path}: manifest not terminated")
    offset = sum(len(l) + 1 for l in lines[: 4 + n])
    out = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        chunk = blob[offset: offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at '{name}'")
        out[name] = np.frombuffer(chunk, dtype="<f8").astype(DTYPE).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return out

