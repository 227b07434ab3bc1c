"""A small reverse-mode autodiff engine over dense numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  ``Tensor.backward`` walks the
recorded graph in reverse topological order and accumulates gradients into
``.grad`` of every tensor that requires them.

Storage defaults to float32.  Passing float64 data (``dtype=np.float64``) runs
the same code in double precision, which is what the gradient checker uses
when tight tolerances are wanted.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DegenerateVarianceError, DimensionError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array with an optional gradient buffer.

    ``shape`` and ``data`` follow numpy semantics; ``grad`` is ``None`` until a
    backward pass reaches this tensor, after which it has ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Tuple["Tensor", ...] = (), op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor.

        Without an explicit ``grad`` the tensor must hold a single element.
        """
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed grad shape {grad.shape} != tensor shape {self.shape}")
        order = topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if not node._parents:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root``, each after all of its inputs."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    out.op = op
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data - a.dtype.type(b), (a,), lambda g: (g,), "sub")
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * ad * g,), "square")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the input was inside [lo, hi]."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, square."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "square":
        return square(a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in ax else d for i, d in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=ax), dtype=a.dtype), (a,), backward, "sum")


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    shape = a.shape
    kept = tuple(1 if i in ax else d for i, d in enumerate(shape))
    inv = a.dtype.type(1.0 / count)

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) * inv, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=ax), dtype=a.dtype), (a,), backward, "mean")


def reduce(op: str, a: Tensor, axes=None) -> Tensor:
    if op == "sum":
        return reduce_sum(a, axes)
    if op == "mean":
        return reduce_mean(a, axes)
    raise ContractError(f"unknown reduction {op!r}")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"leaky_relu slope must be in (0, 1), got {alpha}")
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.dtype)
    return _make(a.data * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    info = np.finfo(x.dtype)
    # exp of a non-positive argument only, both branches.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def activation(op: str, a: Tensor, alpha: float = 0.2) -> Tensor:
    if op == "relu":
        return relu(a)
    if op == "leaky_relu":
        return leaky_relu(a, alpha)
    if op == "sigmoid":
        return sigmoid(a)
    if op == "tanh":
        return tanh(a)
    raise ContractError(f"unknown activation {op!r}")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over axis 1 of a [M, K] tensor."""
    if a.ndim != 2:
        raise DimensionError(f"log_softmax expects [M, K], got {a.shape}")
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias of shape {b.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    sum_axes = (0,) + tuple(range(2, x.ndim))
    return _make(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=sum_axes)), "bias_add")


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

Triple = Union[int, Sequence[int]]


def _triple(v: Triple, name: str) -> Tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ContractError(f"{name} needs three values, got {v}")
    return v


def conv3d_output_shape(in_dims, k_dims, stride, padding) -> Tuple[int, int, int]:
    out = []
    for d, k, s, p in zip(in_dims, k_dims, stride, padding):
        if d + 2 * p < k:
            raise DimensionError(f"kernel {tuple(k_dims)} larger than padded input "
                                 f"{tuple(i + 2 * q for i, q in zip(in_dims, padding))}")
        out.append((d + 2 * p - k) // s + 1)
    return tuple(out)


def _pad3(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pt, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _offsets(kdims, stride, out_dims):
    """Yield (kernel offset, slice tuple into a padded [C, T, H, W] volume)."""
    st, sh, sw = stride
    to, ho, wo = out_dims
    for a in range(kdims[0]):
        for b in range(kdims[1]):
            for c in range(kdims[2]):
                yield (a, b, c), (slice(None), slice(a, a + st * (to - 1) + 1, st),
                                  slice(b, b + sh * (ho - 1) + 1, sh), slice(c, c + sw * (wo - 1) + 1, sw))


def _im2col(xp: np.ndarray, kdims, stride, out_dims) -> np.ndarray:
    """Columns [C*kT*kH*kW, T'*H'*W'] of one padded sample [C, Tp, Hp, Wp]."""
    cols = np.empty((xp.shape[0], *kdims, *out_dims), dtype=xp.dtype)
    for (a, b, c), sl in _offsets(kdims, stride, out_dims):
        cols[:, a, b, c] = xp[sl]
    return cols.reshape(xp.shape[0] * int(np.prod(kdims)), -1)


def _col2im(cols: np.ndarray, channels: int, kdims, stride, out_dims, padded_dims) -> np.ndarray:
    """Scatter-add columns back into a padded sample; adjoint of :func:`_im2col`."""
    cols = cols.reshape(channels, *kdims, *out_dims)
    out = np.zeros((channels, *padded_dims), dtype=cols.dtype)
    for (a, b, c), sl in _offsets(kdims, stride, out_dims):
        out[sl] += cols[:, a, b, c]
    return out


def conv3d_forward_array(x: np.ndarray, k: np.ndarray, stride, padding) -> np.ndarray:
    kdims = k.shape[2:]
    out_dims = conv3d_output_shape(x.shape[2:], kdims, stride, padding)
    xp = _pad3(x, padding)
    k2 = k.reshape(k.shape[0], -1)
    out = np.empty((x.shape[0], k.shape[0], *out_dims), dtype=np.result_type(x, k))
    # one sample at a time keeps the column matrix cache-sized
    for n in range(x.shape[0]):
        out[n] = (k2 @ _im2col(xp[n], kdims, stride, out_dims)).reshape(k.shape[0], *out_dims)
    return out


def conv3d_input_grad_array(gy: np.ndarray, k: np.ndarray, stride, padding, in_dims) -> np.ndarray:
    """Adjoint of :func:`conv3d_forward_array` with respect to its input."""
    kdims = k.shape[2:]
    out_dims = gy.shape[2:]
    padded = tuple(d + 2 * p for d, p in zip(in_dims, padding))
    k2t = k.reshape(k.shape[0], -1).T
    pt, ph, pw = padding
    t, h, w = in_dims
    dx = np.empty((gy.shape[0], k.shape[1], *in_dims), dtype=np.result_type(gy, k))
    for n in range(gy.shape[0]):
        cols = k2t @ gy[n].reshape(gy.shape[1], -1)
        full = _col2im(cols, k.shape[1], kdims, stride, out_dims, padded)
        dx[n] = full[:, pt : pt + t, ph : ph + h, pw : pw + w]
    return dx


def conv3d_kernel_grad_array(x: np.ndarray, gy: np.ndarray, kdims, stride, padding) -> np.ndarray:
    xp = _pad3(x, padding)
    out_dims = gy.shape[2:]
    acc = np.zeros((gy.shape[1], x.shape[1] * int(np.prod(kdims))), dtype=np.result_type(x, gy))
    for n in range(x.shape[0]):
        acc += gy[n].reshape(gy.shape[1], -1) @ _im2col(xp[n], kdims, stride, out_dims).T
    return acc.reshape(gy.shape[1], x.shape[1], *kdims)


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: Triple = 1, padding: Triple = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,Cin,T,H,W] with ``kernel`` [Cout,Cin,kT,kH,kW]."""
    stride, padding = _triple(stride, "stride"), _triple(padding, "padding")
    if x.ndim != 5 or kernel.ndim != 5:
        raise DimensionError(f"conv3d expects 5-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv3d bias shape {bias.shape} != ({kernel.shape[0]},)")
    if min(stride) < 1 or min(padding) < 0:
        raise ContractError(f"invalid stride {stride} / padding {padding}")
    xd, kd = x.data, kernel.data
    out = conv3d_forward_array(xd, kd, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = conv3d_input_grad_array(g, kd, stride, padding, xd.shape[2:]) if x.requires_grad else None
        gk = conv3d_kernel_grad_array(xd, g, kd.shape[2:], stride, padding) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv3d")


def conv3d_transpose_output_shape(in_dims, k_dims, stride, padding, output_padding) -> Tuple[int, int, int]:
    out = tuple((d - 1) * s - 2 * p + k + op
                for d, k, s, p, op in zip(in_dims, k_dims, stride, padding, output_padding))
    if min(out) < 1:
        raise DimensionError(f"conv3d_transpose output dims {out} are not positive")
    return out


def conv3d_transpose(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: Triple = 1,
                     padding: Triple = 0, output_padding: Triple = 0) -> Tensor:
    """Transposed convolution; ``kernel`` is [Cin, Cout, kT, kH, kW].

    The forward pass is exactly the input-gradient of :func:`conv3d` with the
    same kernel, so the two are adjoint.
    """
    stride, padding = _triple(stride, "stride"), _triple(padding, "padding")
    output_padding = _triple(output_padding, "output_padding")
    if x.ndim != 5 or kernel.ndim != 5:
        raise DimensionError(f"conv3d_transpose expects 5-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv3d_transpose channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise DimensionError(f"conv3d_transpose bias shape {bias.shape} != ({kernel.shape[1]},)")
    if any(op >= s for op, s in zip(output_padding, stride)):
        raise ContractError(f"output_padding {output_padding} must be smaller than stride {stride}")
    out_dims = conv3d_transpose_output_shape(x.shape[2:], kernel.shape[2:], stride, padding, output_padding)
    xd, kd = x.data, kernel.data
    out = conv3d_input_grad_array(xd, kd, stride, padding, out_dims)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = conv3d_forward_array(g, kd, stride, padding) if x.requires_grad else None
        gk = conv3d_kernel_grad_array(g, xd, kd.shape[2:], stride, padding) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv3d_transpose")


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
              training: bool = True, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode the batch statistics are used and the running estimates
    are replaced (not mutated in place) by their exponential moving average.
    """
    if x.ndim < 2:
        raise DimensionError(f"batchnorm expects [N, C, ...], got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise DimensionError(f"batchnorm {name} shape {t.shape} != ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, c) + (1,) * (x.ndim - 2)
    count = x.size // c
    xd = x.data
    dt = xd.dtype.type
    if training:
        if count < 2:
            raise DegenerateVarianceError(f"batchnorm in train mode needs >= 2 values per channel, input {x.shape}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu).astype(running_mean.dtype)
        unbiased = var * (count / (count - 1))
        running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(running_var.dtype)
    else:
        mu, var = running_mean.data, running_var.data
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
    xhat = (xd - mu.reshape(view)) * inv_std.reshape(view)
    gd = gamma.data.reshape(view)
    out = xhat * gd + beta.data.reshape(view)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=axes).reshape(view)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(view)
            dx = (inv_std.reshape(view) / count) * (count * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(view)
        return dx, dgamma, dbeta

    return _make(out.astype(xd.dtype), (x, gamma, beta), backward, "batchnorm")


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
