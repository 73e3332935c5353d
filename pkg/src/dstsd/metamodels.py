"""Conv-LSTM and Conv-WaveNet mean-trend models.

Both predict the one-step increment of the mean field. A step takes the
current frame ``mu_t`` and the stimulus increment ``c_{t+1}`` arriving in the
next frame and returns ``g``; the prediction is ``mu_t + g + c_{t+1}``. The
stimulus is also fed to the network as a second input channel so that it
can learn the excitation the stimulus triggers beyond its direct addition.

Frames are handled with a leading batch axis internally: ``(B, p)``.
Every model exposes the same small protocol:

* ``start(frame0)`` returns a carry (hidden state or cached activations);
* ``step(carry, frame, stim)`` returns ``(carry, g)``.

Carries hold :class:`~dstsd.tensor.Tensor` values, so a step can run
under a tape for training or plain for inference.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import tensor as T
from .cable import SpatioTemporalField, StimulationSchedule, stimulus_field
from .tensor import Tensor

IN_CHANNELS = 2  # mean frame, stimulus increment


def receptive_field(depth: int) -> int:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return 2 ** depth


def _uniform(rng, shape, fan_in):
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def _batch(x) -> Tensor:
    x = T.as_tensor(x)
    return T.reshape(x, (1, x.shape[0])) if len(x.shape) == 1 else x


def _inputs(frame: Tensor, stim: Tensor) -> Tensor:
    return T.stack([frame, stim], axis=1)  # (B, 2, p)


class Metamodel:
    arch: str = ""
    params: dict[str, np.ndarray]

    def hyper(self) -> dict:
        raise NotImplementedError

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self):
        m = type(self)(**self.hyper())
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m

    def zero_(self):
        for v in self.params.values():
            v[...] = 0.0
        return self


# ---------------------------------------------------------------- Conv-LSTM


@dataclass
class LstmState:
    h: Tensor  # (B, H, p)
    c: Tensor  # (B, H, p)


class ConvLSTM(Metamodel):
    """Peephole Conv-LSTM cell followed by a two-layer conv head.

    Gate order in the stacked kernels is (f, i, c, o). Peepholes are
    per-channel weights on the previous cell state.
    """

    arch = "convlstm"

    def __init__(self, hidden: int = 10, kernel: int = 15, head_channels: int = 5,
                 head_kernel: int = 3, seed: int = 0):
        if kernel % 2 == 0 or head_kernel % 2 == 0:
            raise ValueError("kernel lengths must be odd")
        self.hidden, self.kernel = hidden, kernel
        self.head_channels, self.head_kernel = head_channels, head_kernel
        self.seed = seed
        rng = np.random.default_rng(seed)
        H, k, C, hk = hidden, kernel, head_channels, head_kernel
        fan = (IN_CHANNELS + H) * k
        self.params = {
            "W": _uniform(rng, (4 * H, IN_CHANNELS, k), fan),
            "U": _uniform(rng, (4 * H, H, k), fan),
            "V": _uniform(rng, (3, H, 1), 1),
            "b": _uniform(rng, (4 * H, 1), fan),
            "head1_w": _uniform(rng, (C, H, hk), H * hk),
            "head1_b": _uniform(rng, (C, 1), H * hk),
            "head2_w": _uniform(rng, (1, C, hk), C * hk),
            "head2_b": _uniform(rng, (1, 1), C * hk),
        }

    def hyper(self) -> dict:
        return dict(hidden=self.hidden, kernel=self.kernel, head_channels=self.head_channels,
                    head_kernel=self.head_kernel, seed=self.seed)

    def start(self, frame0, tp: dict | None = None) -> LstmState:
        B, p = _batch(frame0).shape
        z = np.zeros((B, self.hidden, p))
        return LstmState(Tensor(z), Tensor(z.copy()))

    def step(self, carry: LstmState, frame, stim, tp: dict | None = None):
        tp = tp or self.tensors()
        frame, stim = _batch(frame), _batch(stim)
        if frame.shape[1] != carry.h.shape[2] or stim.shape != frame.shape:
            raise ValueError("frame/stimulus shape does not match the state")
        H = self.hidden
        x = _inputs(frame, stim)
        a = T.conv1d(T.concat([x, carry.h], axis=1), T.concat([tp["W"], tp["U"]], axis=1))
        a = a + tp["b"]
        V = tp["V"]
        c_prev = carry.c
        zf = T.sigmoid(a[:, 0:H] + V[0] * c_prev)
        zi = T.sigmoid(a[:, H:2 * H] + V[1] * c_prev)
        zc = zf * c_prev + zi * T.tanh(a[:, 2 * H:3 * H])
        zo = T.sigmoid(a[:, 3 * H:4 * H] + V[2] * c_prev)
        zh = zo * T.tanh(zc)
        g = self._head(zh, tp)
        return LstmState(zh, zc), g

    def _head(self, zh: Tensor, tp) -> Tensor:
        z = T.relu(T.conv1d(zh, tp["head1_w"]) + tp["head1_b"])
        z = T.conv1d(z, tp["head2_w"]) + tp["head2_b"]
        return z[:, 0]


def convlstm_step(model: ConvLSTM, state: LstmState, frame, stim_next, tp=None):
    """One step: returns ``(state', mu_next)`` with ``mu_next = frame + g + stim``."""
    frame_b, stim_b = _batch(frame), _batch(stim_next)
    state, g = model.step(state, frame_b, stim_b, tp)
    return state, frame_b + g + stim_b


# ---------------------------------------------------------------- Conv-WaveNet


@dataclass
class WaveNetCarry:
    # cache[l] holds the inputs of layer l for its last 2**l frames, oldest first
    cache: list[list[Tensor]]


class ConvWaveNet(Metamodel):
    """Stack of causal temporal-dilated conv layers, kernel 2 (time) x 17 (space).

    Layer ``l`` (1-based) uses temporal dilation ``2**(l-1)`` and no temporal
    padding, so ``2**depth`` input frames produce exactly one output frame.
    Spatial padding is replication, sized to keep the cable length.
    """

    arch = "convwavenet"

    def __init__(self, depth: int = 7, channels: int = 6, kernel: int = 17, seed: int = 0):
        if kernel % 2 == 0:
            raise ValueError("spatial kernel must be odd")
        receptive_field(depth)
        self.depth, self.channels, self.kernel, self.seed = depth, channels, kernel, seed
        rng = np.random.default_rng(seed)
        self.params = {}
        for l in range(depth):
            c_in = IN_CHANNELS if l == 0 else channels
            c_out = 1 if l == depth - 1 else channels
            fan = 2 * c_in * kernel
            # w[0] acts on the older tap, w[1] on the newer
            self.params[f"w{l}"] = _uniform(rng, (2, c_out, c_in, kernel), fan)
            self.params[f"b{l}"] = _uniform(rng, (c_out, 1), fan)
            self.params[f"a{l}"] = np.full((1, 1), 1.0 if l == depth - 1 else 0.25)

    def hyper(self) -> dict:
        return dict(depth=self.depth, channels=self.channels, kernel=self.kernel, seed=self.seed)

    @property
    def window(self) -> int:
        return receptive_field(self.depth)

    def dilation(self, layer: int) -> int:
        return 2 ** layer

    def _kernel(self, l: int, tp) -> Tensor:
        # (c_out, 2*c_in, k): older-tap channels first
        w = tp[f"w{l}"]
        return T.concat([w[0], w[1]], axis=1)

    def _act(self, z: Tensor, l: int, tp) -> Tensor:
        return T.prelu(z + tp[f"b{l}"], tp[f"a{l}"])

    def start(self, frame0, tp: dict | None = None) -> WaveNetCarry:
        """Carry for a history consisting of ``frame0`` repeated forever
        (stimulus channel zero)."""
        tp = tp or self.tensors()
        f = _batch(frame0)
        x = _inputs(f, Tensor(np.zeros(f.shape)))
        cache = []
        for l in range(self.depth):
            cache.append([x] * self.dilation(l))
            x = self._act(T.conv1d(T.concat([x, x], axis=1), self._kernel(l, tp)), l, tp)
        return WaveNetCarry(cache)

    def step(self, carry: WaveNetCarry, frame, stim, tp: dict | None = None):
        tp = tp or self.tensors()
        frame, stim = _batch(frame), _batch(stim)
        x = _inputs(frame, stim)
        cache = []
        for l in range(self.depth):
            q = carry.cache[l]
            cache.append(q[1:] + [x])
            x = self._act(T.conv1d(T.concat([q[0], x], axis=1), self._kernel(l, tp)), l, tp)
        return WaveNetCarry(cache), x[:, 0]

    def forward_window(self, frames, stims, tp: dict | None = None) -> Tensor:
        """Direct evaluation on an explicit window of ``2**depth`` frames.

        ``frames``/``stims`` are ``(w_r, p)``; ``stims[j]`` is the increment
        that arrives right after ``frames[j]``. Returns ``g`` of shape ``(p,)``.
        """
        tp = tp or self.tensors()
        frames, stims = T.as_tensor(frames), T.as_tensor(stims)
        if frames.shape[0] != self.window or stims.shape != frames.shape:
            raise ValueError(f"window must hold {self.window} frames")
        x = _inputs(frames, stims)  # frames act as the batch axis here
        for l in range(self.depth):
            d = self.dilation(l)
            n = x.shape[0]
            pair = T.concat([x[0:n - d], x[d:n]], axis=1)
            x = self._act(T.conv1d(pair, self._kernel(l, tp)), l, tp)
        return x[0, 0]


def wavenet_forward(model: ConvWaveNet, window, stims, stim_next=None, tp=None) -> Tensor:
    """``mu_next = last frame + g(window) + stim_next``.

    ``stims`` carries the increment following each window frame, so its last
    row is ``stim_next``. Shorter histories are left-padded by repeating the
    earliest frame with zero stimulus.
    """
    window = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=float)
    stims = np.asarray(stims.data if isinstance(stims, Tensor) else stims, dtype=float)
    if window.ndim != 2 or stims.shape != window.shape:
        raise ValueError("window and stims must both be (n_frames, p)")
    if window.shape[0] > model.window:
        raise ValueError(f"window longer than receptive field {model.window}")
    short = model.window - window.shape[0]
    if short:
        window = np.vstack([np.repeat(window[:1], short, axis=0), window])
        stims = np.vstack([np.zeros((short, stims.shape[1])), stims])
    g = model.forward_window(window, stims, tp)
    return Tensor(window[-1]) + g + Tensor(stims[-1])


# ---------------------------------------------------------------- fast inference
#
# Plain-numpy twins of the two step functions, used whenever no gradient is
# needed. Same arithmetic, no graph objects, preallocated padding buffers.


class _Conv:
    """Replication-padded 'same' conv with a fixed ``(C_out, C_in, k)`` kernel.

    Scratch buffers and the strided im2col view are built once per input
    shape and reused across calls.
    """

    def __init__(self, w: np.ndarray, bias: np.ndarray | None = None):
        self.c_out, self.c_in, self.k = w.shape
        self.pad = (self.k - 1) // 2
        self.wm = np.ascontiguousarray(w.reshape(self.c_out, -1))
        self.bias = bias
        self._shape = None

    def _prepare(self, shape):
        B, C, p = shape
        self._buf = np.empty((B, C, p + 2 * self.pad))
        s0, s1, s2 = self._buf.strides
        self._view = as_strided(self._buf, (B, C, self.k, p), (s0, s1, s2, s2), writeable=False)
        self._cols = np.empty((B, C, self.k, p))
        self._cols2 = self._cols.reshape(B, C * self.k, p)
        self._shape = shape

    def __call__(self, x: np.ndarray, x2: np.ndarray | None = None) -> np.ndarray:
        """Conv of ``x``, or of ``concat([x, x2], axis=1)`` without building it."""
        B, C, p = x.shape
        shape = (B, C if x2 is None else C + x2.shape[1], p)
        if shape != self._shape:
            self._prepare(shape)
        pad, xp = self.pad, self._buf
        xp[:, :C, pad:pad + p] = x
        if x2 is not None:
            xp[:, C:, pad:pad + p] = x2
        if pad:
            xp[..., :pad] = xp[..., pad:pad + 1]
            xp[..., pad + p:] = xp[..., pad + p - 1:pad + p]
        np.copyto(self._cols, self._view)
        out = self.wm @ self._cols2
        if self.bias is not None:
            out += self.bias
        return out


class FastConvLSTM:
    def __init__(self, model: ConvLSTM):
        P = model.params
        self.H = model.hidden
        self.gates = _Conv(np.concatenate([P["W"], P["U"]], axis=1), P["b"])
        self.V = P["V"]
        self.scale = np.full((4 * self.H, 1), 0.5)
        self.scale[2 * self.H:3 * self.H] = 1.0
        self.head1 = _Conv(P["head1_w"], P["head1_b"])
        self.head2 = _Conv(P["head2_w"], P["head2_b"])
        self._x = None

    def start(self, frame0):
        f = np.atleast_2d(frame0)
        z = np.zeros((f.shape[0], self.H, f.shape[1]))
        return (z, z.copy())

    def step(self, carry, frame, stim):
        h, c_prev = carry
        frame, stim = np.atleast_2d(frame), np.atleast_2d(stim)
        B, p = frame.shape
        if self._x is None or self._x.shape != (B, 2 + self.H, p):
            self._x = np.empty((B, 2 + self.H, p))
        x = self._x
        x[:, 0], x[:, 1], x[:, 2:] = frame, stim, h
        a = self.gates(x)
        H, V = self.H, self.V
        a[:, 0:H] += V[0] * c_prev
        a[:, H:2 * H] += V[1] * c_prev
        a[:, 3 * H:] += V[2] * c_prev
        # one tanh pass: sigmoid(z) = 0.5 + 0.5 tanh(z / 2) for f, i, o
        a *= self.scale
        np.tanh(a, out=a)
        zf = 0.5 + 0.5 * a[:, 0:H]
        zi = 0.5 + 0.5 * a[:, H:2 * H]
        zo = 0.5 + 0.5 * a[:, 3 * H:]
        zc = zf * c_prev + zi * a[:, 2 * H:3 * H]
        zh = zo * np.tanh(zc)
        g = self.head2(np.maximum(self.head1(zh), 0.0))[:, 0]
        return (zh, zc), g


class FastConvWaveNet:
    """Inference twin of :class:`ConvWaveNet`.

    Each new layer input is convolved once with both taps stacked; the
    older-tap half is cached until it is needed ``2**l`` frames later.
    """

    def __init__(self, model: ConvWaveNet):
        self.depth = model.depth
        self.layers = []
        for l in range(model.depth):
            w = model.params[f"w{l}"]
            conv = _Conv(np.concatenate([w[1], w[0]], axis=0))
            self.layers.append((conv, w.shape[1], model.params[f"b{l}"],
                                model.params[f"a{l}"], model.dilation(l)))

    @staticmethod
    def _act(z, a):
        s = float(a[0, 0])
        if 0.0 <= s <= 1.0:
            # PReLU with a slope in [0, 1] is max(z, s z); works in place
            return np.maximum(z, s * z, out=z)
        return np.maximum(z, 0.0) + s * np.minimum(z, 0.0)

    def start(self, frame0):
        f = np.atleast_2d(frame0)
        x = np.stack([f, np.zeros_like(f)], axis=1)
        cache = []
        for conv, c, b, a, d in self.layers:
            y = conv(x)
            cache.append([y[:, c:]] * d)
            z = y[:, :c] + y[:, c:]
            z += b
            x = self._act(z, a)
        return cache

    def step(self, carry, frame, stim):
        frame, stim = np.atleast_2d(frame), np.atleast_2d(stim)
        x = np.stack([frame, stim], axis=1)
        cache = []
        for (conv, c, b, a, d), q in zip(self.layers, carry):
            y = conv(x)
            cache.append(q[1:] + [y[:, c:]])
            z = y[:, :c] + q[0]
            z += b
            x = self._act(z, a)
        return cache, x[:, 0]


def compile_inference(model: Metamodel):
    """Gradient-free step function pair for ``model``'s current weights."""
    if isinstance(model, ConvLSTM):
        return FastConvLSTM(model)
    if isinstance(model, ConvWaveNet):
        return FastConvWaveNet(model)
    raise TypeError(f"no fast path for {type(model).__name__}")


# ---------------------------------------------------------------- rollout


@dataclass
class RolloutResult:
    field: SpatioTemporalField
    carry: object
    last: np.ndarray  # last predicted frame


def warm_up(model: Metamodel, frames: np.ndarray, stims: np.ndarray, carry=None, tp=None):
    """Feed observed frames through the model; returns the carry after the
    last frame has been consumed. ``stims[j]`` follows ``frames[j]``."""
    tp = tp or model.tensors()
    frames = np.atleast_2d(frames)
    if carry is None:
        carry = model.start(frames[0], tp)
    for j in range(frames.shape[0]):
        carry, _ = model.step(carry, frames[j], stims[j], tp)
    return carry


def predict(model: Metamodel, carry, mu0: np.ndarray, stims: np.ndarray, tp=None):
    """Autoregressive continuation from ``mu0`` through the stimulus rows.

    Returns ``(carry, frames)`` where ``frames[i]`` is the prediction after
    ``i + 1`` steps.
    """
    tp = tp or model.tensors()
    mu = np.asarray(mu0, dtype=float).reshape(1, -1)
    out = np.empty((len(stims), mu.shape[1]))
    for i, c in enumerate(stims):
        c = np.asarray(c, dtype=float).reshape(1, -1)
        carry, g = model.step(carry, mu, c, tp)
        mu = mu + g.data + c
        out[i] = mu[0]
    return carry, out


def rollout(model: Metamodel, history: SpatioTemporalField, steps: int,
            schedule: StimulationSchedule | None = None,
            anomaly: StimulationSchedule | None = None, carry=None) -> RolloutResult:
    """Warm up on ``history`` and predict ``steps`` frames beyond it.

    ``schedule`` is on the history's clock (frame 0 is t=0). Future abnormal
    stimulation is assumed absent unless ``anomaly`` is given. When ``carry``
    is supplied it must be the carry left after consuming ``history``'s
    frames except the last, e.g. from a previous rollout.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if history.n_time < 1:
        raise ValueError("empty history")
    n_hist, p = history.values.shape
    total = n_hist + steps
    sched = schedule or StimulationSchedule()
    stim = stimulus_field(sched, total, p, history.dt)
    if anomaly is not None:
        stim = stim + stimulus_field(anomaly, total, p, history.dt, kinds=("abnormal", "regular"))
    tp = model.tensors()
    if carry is None:
        carry = warm_up(model, history.values[:-1], stim[1:n_hist], tp=tp) if n_hist > 1 \
            else model.start(history.values[0], tp)
    carry, frames = predict(model, carry, history.values[-1], stim[n_hist:total], tp)
    return RolloutResult(SpatioTemporalField(frames, history.dt), carry, frames[-1])


# ---------------------------------------------------------------- checkpoints

MODEL_MAGIC = b"STSDMDL"
MODEL_VERSION = 1
_ARCHES = {"convlstm": ConvLSTM, "convwavenet": ConvWaveNet}


def save_checkpoint(path, model: Metamodel) -> None:
    """``STSDMDL`` | u32 version | u16+arch | u32+JSON hyper block | u64 n | f64[n]."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    tag = model.arch.encode()
    buf.write(struct.pack("<H", len(tag)) + tag)
    hyper = model.hyper()
    hyper["shapes"] = {k: list(v.shape) for k, v in model.params.items()}
    block = json.dumps(hyper, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(block)) + block)
    flat = np.concatenate([v.ravel() for v in model.params.values()]).astype("<f8")
    buf.write(struct.pack("<Q", flat.size))
    buf.write(flat.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Metamodel:
    raw = open(path, "rb").read()
    if not raw.startswith(MODEL_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    off = len(MODEL_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<H", raw, off)
    off += 2
    arch = raw[off:off + n].decode()
    off += n
    if arch not in _ARCHES:
        raise ValueError(f"{path}: unknown architecture {arch!r}")
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    hyper = json.loads(raw[off:off + n])
    off += n
    shapes = hyper.pop("shapes")
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    flat = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    model = _ARCHES[arch](**hyper)
    pos = 0
    for k in model.params:
        shape = tuple(shapes[k])
        size = int(np.prod(shape))
        model.params[k] = flat[pos:pos + size].reshape(shape).astype(np.float64)
        pos += size
    if pos != count:
        raise ValueError(f"{path}: parameter count mismatch")
    return model


def build_model(arch: str, **hyper) -> Metamodel:
    if arch not in _ARCHES:
        raise ValueError(f"unknown architecture {arch!r}")
    return _ARCHES[arch](**hyper)
