"""A small dense tensor with reverse-mode automatic differentiation.

Only the operations needed by a 2-D U-Net and the noise-mask objective are
provided.  Arrays are numpy buffers in C (row-major) order.  The floating
point width is a process-wide switch: float64 for gradient checks and
oracles, float32 for training.

Gradient conventions worth knowing:

* relu has subgradient 0 at 0.
* max_pool2d routes the gradient to the first maximum of each window in
  row-major order.
* :func:`backward` accumulates into ``.grad``; call :meth:`Tensor.zero_grad`
  (or the optimizer's ``zero_grad``) between steps.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float64))


def get_dtype() -> np.dtype:
    return _dtype()


def set_precision(bits: int) -> None:
    """Select 64-bit (tests, oracles) or 32-bit (training) floats for new tensors."""
    if bits not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    _state.dtype = np.dtype(np.float32 if bits == 32 else np.float64)


@contextlib.contextmanager
def precision(bits: int):
    old = _dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = old


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __rsub__(self, other):
        return scalar_add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def scalar_add(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # keep the open interval (0, 1) even where the exact value rounds to 0 or 1
    fi = np.finfo(x.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive (clamp first)")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, floor).astype(a.data.dtype)
    return _make(out, (a,), lambda g: (g * keep,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = a.shape, a.data.dtype
    return _make(np.asarray(a.data.sum(), dtype=dt), (a,),
                 lambda g: (np.full(shape, g, dtype=dt),))


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.data.dtype, a.data.size
    return _make(np.asarray(a.data.mean(), dtype=dt), (a,),
                 lambda g: (np.full(shape, g / n, dtype=dt),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate N×C_i×H×W tensors along the channel axis."""
    ref = tensors[0].shape
    for t in tensors:
        if len(t.shape) != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def select_channel(a: Tensor, k: int) -> Tensor:
    """N×C×H×W -> N×H×W slice of channel k."""
    shape, dt = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dt)
        full[:, k] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[:, k]), (a,), back)


# ---------------------------------------------------------------- convolution
#
# Two interchangeable kernels compute the convolution and its gradients: a
# numpy im2col implementation and, when torch is importable, torch's CPU
# kernels (several times faster on a single core).  The autodiff graph and
# every other op stay in numpy either way.

_CONV_BACKENDS = ("auto", "numpy", "torch")


def set_conv_backend(name: str) -> None:
    if name not in _CONV_BACKENDS:
        raise ValueError(f"conv backend must be one of {_CONV_BACKENDS}")
    _state.conv_backend = name


def get_conv_backend() -> str:
    name = getattr(_state, "conv_backend", "auto")
    if name == "auto":
        return "torch" if _torch() is not None else "numpy"
    return name


@contextlib.contextmanager
def conv_backend(name: str):
    old = getattr(_state, "conv_backend", "auto")
    set_conv_backend(name)
    try:
        yield
    finally:
        _state.conv_backend = old


_TORCH = []


def _torch():
    if not _TORCH:
        try:
            import torch

            torch.set_num_threads(1)
            _TORCH.append(torch)
        except ImportError:  # pragma: no cover - depends on environment
            _TORCH.append(None)
    return _TORCH[0]


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    # (N, Ho, Wo, C, K, K) -> rows are output pixels
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _corr_numpy(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    cols = _im2col(xp, k, stride, ho, wo)
    out = (cols @ w.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_input_grad_numpy(g, w, x_shape, stride, padding):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    if stride == 1 and padding <= k - 1:
        # stride-1 input gradient is a correlation with the flipped, transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _corr_numpy(g, wf, 1, k - 1 - padding)[0]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dcols = (gm @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    hp, wp = h + 2 * padding, wd + 2 * padding
    gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, padding : padding + h, padding : padding + wd]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of N×C×H×W input with O×C×K×K weights."""
    if len(x.shape) != 4 or len(weight.shape) != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cw}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if (hp - k) % stride or (wp - k) % stride or hp < k or wp < k:
        raise ValueError(f"conv2d: output size not integral for H={h}, W={w}, K={k}, "
                         f"stride={stride}, padding={padding}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    if get_conv_backend() == "torch":
        return _conv2d_torch(x, weight, bias, stride, padding, parents)

    out, cols = _corr_numpy(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[:, None, None]

    def back(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = _conv_input_grad_numpy(g, weight.data, x.shape, stride, padding)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, back)


def _conv2d_torch(x, weight, bias, stride, padding, parents):
    torch = _torch()
    F = torch.nn.functional
    # parameters keep the dtype they were created with; compute at the active precision
    dt = _dtype()
    xt = torch.from_numpy(x.data.astype(dt, copy=False))
    wt = torch.from_numpy(weight.data.astype(dt, copy=False))
    bt = None if bias is None else torch.from_numpy(bias.data.astype(dt, copy=False))
    with torch.no_grad():
        out = F.conv2d(xt, wt, bt, stride=stride, padding=padding).numpy()

    def back(g):
        gt = torch.from_numpy(np.ascontiguousarray(g))
        mask = [x.requires_grad, weight.requires_grad, False]
        with torch.no_grad():
            gx, gw, _ = torch.ops.aten.convolution_backward(
                gt, xt, wt, None, [stride] * 2, [padding] * 2, [1, 1], False, [0, 0], 1, mask)
        gx = None if gx is None else gx.numpy()
        gw = None if gw is None else gw.numpy()
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return _make(out, parents, back)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = (x.data.reshape(n, c, ho, window, wo, window)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window))
    idx = blocks.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(n, c, ho, wo, window, window)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        return (gx,)

    return _make(out, (x,), back)


def bilinear_matrix(n: int, dtype=None) -> np.ndarray:
    """(2n × n) weights for 2× bilinear upsampling with half-pixel centres."""
    m = np.zeros((2 * n, n), dtype=dtype or _dtype())
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    if len(x.shape) != 4:
        raise ValueError(f"upsample_bilinear2x: expected N×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    ah, aw = bilinear_matrix(h, x.data.dtype), bilinear_matrix(w, x.data.dtype)
    out = ah @ x.data @ aw.T
    return _make(out, (x,), lambda g: (ah.T @ g @ aw,))


def upsample_bilinear(x: np.ndarray, times: int) -> np.ndarray:
    """Repeated 2× bilinear upsampling of a plain array (no graph)."""
    for _ in range(times):
        h, w = x.shape[-2:]
        x = bilinear_matrix(h, x.dtype) @ x @ bilinear_matrix(w, x.dtype).T
    return x


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over N·H·W of -log softmax(logits)[target]."""
    z = logits.data
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if z.ndim != 4 or t.shape != (z.shape[0],) + z.shape[2:]:
        raise ValueError(f"softmax_cross_entropy: logits {z.shape} vs target {t.shape}")
    k = z.shape[1]
    ti = t.astype(np.int64)
    if np.any(ti != t) or ti.min() < 0 or ti.max() >= k:
        raise ValueError(f"softmax_cross_entropy: class indices must be integers in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    picked = np.take_along_axis(logp, ti[:, None], axis=1)
    m = picked.size
    loss = np.asarray(-picked.sum() / m, dtype=z.dtype)

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, ti[:, None], np.take_along_axis(p, ti[:, None], axis=1) - 1.0, axis=1)
        return (p * (g / m),)

    return _make(loss, (logits,), back)


# ---------------------------------------------------------------- autodiff

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``; gradients accumulate in ``.grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in _topo_order(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------- randomness

class RngStream:
    """Counter-addressed normal draws.

    Each call to :meth:`normal` uses a Philox generator keyed by
    ``(seed, counter)`` and then advances the counter, so a stream is fully
    described by those two integers.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape) -> np.ndarray:
        out = self._generator().standard_normal(shape)
        self.counter += 1
        return out

    def substream(self, index: int) -> "RngStream":
        seq = np.random.SeedSequence([self.seed, int(index)])
        return RngStream(int(seq.generate_state(1, np.uint64)[0]))

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter


def randn(shape, stream: RngStream) -> Tensor:
    return Tensor(stream.normal(tuple(shape)))
