"""Dense tensor engine: the exact kernel set the mask pipeline needs.

Tensors wrap contiguous numpy arrays in one of two precisions: "narrow"
(float32, the training default) and "wide" (float64, used by gradient
checks and oracle comparisons). Reverse-mode differentiation is taped:
operations executed inside a `Tape` context append backward closures,
and `backward` replays them in fixed reverse record order, which makes
gradient accumulation deterministic.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NARROW = np.float32
WIDE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class TensorError(ValueError):
    """Shape or precision misuse of a tensor kernel."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


_state = threading.local()


def _default_dtype():
    return getattr(_state, "default_dtype", NARROW)


def set_default_dtype(dtype) -> None:
    """Set the per-thread default precision for newly created tensors."""
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise TensorError(f"unsupported dtype {dtype}")
    _state.default_dtype = dtype


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")


class Tensor:
    """Contiguous n-dimensional value with an optional gradient store."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_DTYPES:
                dtype = data.dtype.type
            else:
                dtype = _default_dtype()
        arr = np.asarray(data, dtype=dtype, order="C")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype.type

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class OpRecord:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; reverse replay drives backward."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tape_stack", None)
        if stack is None:
            stack = []
            _state.tape_stack = stack
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tape_stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    stack = getattr(_state, "tape_stack", None)
    return stack[-1] if stack else None


def record_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a forward result, recording `backward_fn` when taping.

    `backward_fn` receives the output gradient and must call
    `accumulate_grad` on whichever inputs require gradients. Extension
    point for kernels defined outside this module.
    """
    _check_finite(name, out_data)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires
    out.grad = None
    tape = active_tape()
    if tape is not None and requires:
        tape.records.append(OpRecord(name, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate gradients of `loss` into every requires_grad leaf.

    Visits the tape once, in fixed reverse record order. Intermediate
    (op-output) gradients are reset per call, so repeated calls over the
    same tape accumulate leaf gradients additively.
    """
    if loss.size != 1:
        raise TensorError(f"loss must be scalar, got shape {loss.shape}")
    for rec in tape.records:
        rec.output.grad = None
    loss.accumulate_grad(np.ones_like(loss.data))
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        rec.backward_fn(g)


def _same_dtype(name: str, *tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TensorError(f"{name}: mixed dtypes {dt} vs {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _same_dtype("add", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return record_op("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _same_dtype("mul", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return record_op("mul", (a, b), a.data * b.data, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype(c)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return record_op("scale", (x,), x.data * c, bwd)


def relu(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return record_op("relu", (x,), np.maximum(x.data, 0), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid_raw(x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1 - out_data))

    return record_op("sigmoid", (x,), out_data, bwd)


def _sigmoid_raw(z: np.ndarray) -> np.ndarray:
    # exp only on the negative side keeps it overflow-free
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def reshape(x: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != x.size:
        raise TensorError(f"reshape: {x.shape} has {x.size} elements, target {new_shape}")
    old_shape = x.shape

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(old_shape))

    return record_op("reshape", (x,), x.data.reshape(new_shape), bwd)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inv))

    return record_op("permute", (x,), np.ascontiguousarray(x.data.transpose(axes)), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _same_dtype("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return record_op("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bwd)


def reduce_sum(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g))

    return record_op("reduce_sum", (x,), x.data.sum(dtype=x.dtype), bwd)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.dtype(x.size)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g / n))

    return record_op("reduce_mean", (x,), x.data.mean(dtype=x.dtype), bwd)


# ---------------------------------------------------------------------------
# dense kernels


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp: padded (N, C, Hp, Wp) -> (N*Ho*Wo, C*kh*kw), plus (Ho, Wo)
    n, c, hp, wp = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. `x` is (Cin,H,W) or batched (N,Cin,H,W)."""
    if stride < 1:
        raise TensorError("conv2d: stride must be >= 1")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise TensorError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise TensorError("conv2d: kernel larger than padded input")
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (cout,):
            raise TensorError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        inputs.append(bias)
    _same_dtype("conv2d", *inputs)

    xp = _pad_hw(xd, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def bwd(g):
        gm = (g if batched else g[None]).transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad((gm.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            gx = _conv_input_grad(gm, weight.data, n, h, w, ho, wo, stride, padding)
            x.accumulate_grad(gx if batched else gx[0])

    return record_op("conv2d", tuple(inputs), out, bwd)


def _conv_input_grad(gm, wdata, n, h, w, ho, wo, stride, padding):
    # Scatter column gradients back through the im2col windows.
    cout, cin, kh, kw = wdata.shape
    gcols = gm @ wdata.reshape(cout, cin * kh * kw)
    gwin = gcols.reshape(n, ho, wo, cin, kh, kw)
    hp, wp = h + 2 * padding, w + 2 * padding
    gxp = np.zeros((n, cin, hp, wp), dtype=wdata.dtype)
    # kernel offsets are few; loop them and add strided blocks
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                gwin[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + w]
    return gxp


def transposed_conv2d(x: Tensor, weight: Tensor, stride: int = 2) -> Tensor:
    """Non-overlapping upsampling: kernel size equals stride.

    `weight` is (Cin, Cout, k, k) with k == stride; output spatial
    extents are exactly stride times the input's.
    """
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cin_w, cout, kh, kw = weight.shape
    if kh != stride or kw != stride:
        raise TensorError("transposed_conv2d: kernel size must equal stride")
    if cin_w != cin:
        raise TensorError(f"transposed_conv2d: input has {cin} channels, weight expects {cin_w}")
    _same_dtype("transposed_conv2d", x, weight)

    out6 = np.einsum("ncyx,cduv->ndyuxv", xd, weight.data)
    out = out6.reshape(n, cout, h * stride, w * stride)
    out = np.ascontiguousarray(out if batched else out[0])

    def bwd(g):
        g6 = (g if batched else g[None]).reshape(n, cout, h, stride, w, stride)
        if x.requires_grad:
            gx = np.einsum("ndyuxv,cduv->ncyx", g6, weight.data)
            x.accumulate_grad(gx if batched else gx[0])
        if weight.requires_grad:
            weight.accumulate_grad(np.einsum("ncyx,ndyuxv->cduv", xd, g6))

    return record_op("transposed_conv2d", (x, weight), out, bwd)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out[v] = sum_u weight[v,u] * x[u] + bias[v]; x may be batched (N,U)."""
    batched = x.data.ndim == 2
    xd = x.data if batched else x.data[None]
    v, u = weight.shape
    if xd.shape[1] != u:
        raise TensorError(f"fully_connected: input width {xd.shape[1]} != weight width {u}")
    if bias.shape != (v,):
        raise TensorError(f"fully_connected: bias shape {bias.shape} != ({v},)")
    _same_dtype("fully_connected", x, weight, bias)
    out = xd @ weight.data.T + bias.data
    out = np.ascontiguousarray(out if batched else out[0])

    def bwd(g):
        gm = g if batched else g[None]
        if x.requires_grad:
            gx = gm @ weight.data
            x.accumulate_grad(gx if batched else gx[0])
        if weight.requires_grad:
            weight.accumulate_grad(gm.T @ xd)
        if bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=0))

    return record_op("fully_connected", (x, weight, bias), out, bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling on the two trailing axes."""
    xd = x.data
    out = np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1)

    def bwd(g):
        if x.requires_grad:
            s = g.shape
            g4 = g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2)
            x.accumulate_grad(g4.sum(axis=(-3, -1)))

    return record_op("upsample2x", (x,), np.ascontiguousarray(out), bwd)


# ---------------------------------------------------------------------------
# verification harness and optimizer


def finite_diff_check(f: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    `f` must rebuild the scalar computation from `inputs` on each call.
    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise TensorError("finite_diff_check: f must be scalar-valued")
    backward(tape, loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            err = abs(an_flat[i] - num) / max(1.0, abs(an_flat[i]))
            worst = max(worst, err)
    return worst


class AdamState:
    """First/second moment stores plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. Missing grads are zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise TensorError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        _check_finite("adam_step gradient", g)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return state
