"""Dense float64 tensors with a recorded graph and reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable function in this
module builds a new tensor that remembers its parents and a closure mapping the
output gradient to one gradient per parent.  :meth:`Tensor.backward` walks the
graph in reverse topological order and accumulates into leaf ``.grad`` buffers.

Elementwise broadcasting is deliberately limited to scalar-with-tensor; the
few places that need more (per-channel biases, batched matmul) have their own
explicit ops.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "ShapeError",
    "ContractError",
    "ConfigError",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "abs_",
    "sigmoid",
    "silu",
    "softplus",
    "add_bias",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "permute_axis",
    "channel_linear",
    "conv2d",
    "depthwise_conv2d",
    "avg_pool2",
    "upsample2",
    "layer_norm",
    "Adam",
    "save_parameters",
    "load_parameters",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """An invalid hyperparameter or configuration value."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = ""

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward: BackwardFn,
        op: str,
    ) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse sweep from this tensor, accumulating into leaf gradients.

        Without an explicit seed the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient {grad.shape} does not match {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; graphs through a long scan stack are too deep for recursion
    visited: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    post.reverse()
    return post


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Container that discovers Parameters and sub-Modules in its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} only broadcast scalar-with-tensor")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def abs_(a: Tensor) -> Tensor:
    # subgradient at 0 is taken as 0
    s = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return Tensor._from_op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    s = _sigmoid(x)
    return Tensor._from_op(out, (a,), lambda g: (g * s,), "softplus")


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x``."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return Tensor._from_op(
        x.data + bias.data.reshape(view),
        (x, bias),
        lambda g: (g, g.sum(axis=other)),
        "add_bias",
    )


# ----------------------------------------------------------------------------
# reductions and shape plumbing


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return Tensor._from_op(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(shape, float(g) / n),),
        "mean",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape"
    )


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat"
    )


def permute_axis(a: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder entries along ``axis`` by the bijection ``perm``."""
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(a.shape[axis])):
        raise ContractError("permute_axis needs a permutation of the axis indices")
    inverse = np.argsort(perm)
    return Tensor._from_op(
        np.take(a.data, perm, axis=axis),
        (a,),
        lambda g: (np.take(g, inverse, axis=axis),),
        "permute_axis",
    )


# ----------------------------------------------------------------------------
# linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) extents broadcast like ``np.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _reduce_to(ga, ad.shape), _reduce_to(gb, bd.shape)

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def channel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 projection over the channel axis of ``x[..., c_in, h, w]``.

    ``weight`` is ``[c_out, c_in]``.
    """
    c_out, c_in = weight.shape
    if x.ndim < 3 or x.shape[-3] != c_in:
        raise ShapeError(f"channel_linear: weight {weight.shape} vs input {x.shape}")
    xd, wd = x.data, weight.data
    lead, (h, w) = xd.shape[:-3], xd.shape[-2:]
    flat = xd.reshape(-1, c_in, h * w)
    out = np.matmul(wd, flat)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(*lead, c_out, h, w)

    def backward(g):
        gf = g.reshape(-1, c_out, h * w)
        gx = np.matmul(wd.T, gf).reshape(xd.shape)
        gw = np.matmul(gf, flat.transpose(0, 2, 1)).sum(axis=0)
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "channel_linear")


def _check_odd(kh: int, kw: int) -> None:
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    # xp: [b, c, h+kh-1, w+kw-1] -> [b, c*kh*kw, h*w]
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(b, c * kh * kw, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense 'same' correlation: ``x[b, c_in, h, w]``, ``weight[c_out, c_in, kh, kw]``."""
    c_out, c_in, kh, kw = weight.shape
    _check_odd(kh, kw)
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ShapeError(f"conv2d: weight {weight.shape} vs input {x.shape}")
    xd, wd = x.data, weight.data
    b, _, h, w = xd.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, h, w)
    wmat = wd.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, c_out, h, w)

    def backward(g):
        gf = g.reshape(b, c_out, h * w)
        gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gcols = np.matmul(wmat.T, gf).reshape(b, c_in, kh, kw, h, w)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + h, j : j + w] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' correlation with zero padding.

    ``x`` is ``[..., c, h, w]`` and ``kernel`` is ``[c, kh, kw]`` with odd extents.
    """
    c, kh, kw = kernel.shape
    _check_odd(kh, kw)
    if x.ndim < 3 or x.shape[-3] != c:
        raise ShapeError(f"depthwise_conv2d: kernel {kernel.shape} vs input {x.shape}")
    xd, kd = x.data, kernel.data
    h, w = xd.shape[-2:]
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (xd.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for i in range(kh):
        for j in range(kw):
            out += kd[:, i, j, None, None] * xp[..., i : i + h, j : j + w]
    if bias is not None:
        out += bias.data[:, None, None]
    lead = tuple(range(xd.ndim - 3))

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(kh):
            for j in range(kw):
                gxp[..., i : i + h, j : j + w] += kd[:, i, j, None, None] * g
                gk[:, i, j] = (g * xp[..., i : i + h, j : j + w]).sum(axis=lead + (-2, -1))
        gx = gxp[..., ph : ph + h, pw : pw + w]
        gb = g.sum(axis=lead + (-2, -1)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward, "depthwise_conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling over the last two axes; odd extents are zero-padded."""
    xd = x.data
    h, w = xd.shape[-2:]
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    pad = [(0, 0)] * (xd.ndim - 2) + [(0, 2 * h2 - h), (0, 2 * w2 - w)]
    xp = np.pad(xd, pad)
    out = xp.reshape(*xd.shape[:-2], h2, 2, w2, 2).mean(axis=(-3, -1))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return (gx[..., :h, :w],)

    return Tensor._from_op(out, (x,), backward, "avg_pool2")


def upsample2(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour 2x upsampling cropped to ``size``."""
    xd = x.data
    h, w = size
    hs, ws = xd.shape[-2:]
    if not (2 * hs - 1 <= h <= 2 * hs and 2 * ws - 1 <= w <= 2 * ws):
        raise ShapeError(f"upsample2: cannot reach {size} from {(hs, ws)}")
    out = np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1)[..., :h, :w]

    def backward(g):
        pad = [(0, 0)] * (g.ndim - 2) + [(0, 2 * hs - h), (0, 2 * ws - w)]
        gp = np.pad(g, pad)
        return (gp.reshape(*g.shape[:-2], hs, 2, ws, 2).sum(axis=(-3, -1)),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "upsample2")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize over ``axis`` to zero mean and unit variance, then apply an affine map."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    axis = axis % x.ndim
    c = x.shape[axis]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs channel extent {c}")
    xd = x.data
    view = [1] * xd.ndim
    view[axis] = c
    mu = xd.mean(axis=axis, keepdims=True)
    centered = xd - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data.reshape(view)
    other = tuple(i for i in range(xd.ndim) if i != axis)

    def backward(g):
        gh = g * gd
        gx = inv * (
            gh
            - gh.mean(axis=axis, keepdims=True)
            - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return Tensor._from_op(
        xhat * gd + bias.data.reshape(view), (x, gain, bias), backward, "layer_norm"
    )


# ----------------------------------------------------------------------------
# optimisation


class Adam:
    """Bias-corrected Adam with per-parameter first/second moment buffers."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MDN1"


def save_parameters(params: Iterable[Parameter], path: str | Path) -> None:
    """Write parameters in the little-endian ``MDN1`` checkpoint format."""
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ContractError("parameter names must be unique")
    chunks = [_MAGIC, struct.pack("<I", len(params))]
    for p in params:
        raw = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_parameters(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ContractError(f"{path}: not an MDN1 checkpoint")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out
