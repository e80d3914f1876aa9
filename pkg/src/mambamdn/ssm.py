"""Diagonal selective state-space layers and the four-direction 2-D scan.

Two evaluation paths live here:

* a plain numpy reference (:func:`scan_recurrent`, :func:`kernel_materialize`)
  used for checking and for the time-invariant convolution identity, and
* a fused numba kernel (:func:`selective_scan`) with a hand-written adjoint
  recurrence, which the network differentiates through.

The state matrix is diagonal per channel, ``A[c, n] < 0``.  Discretisation is
zero-order hold: ``A_d = exp(delta * a)`` and ``B_d = (exp(delta * a) - 1) / a * B``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor, exp, matmul, neg, softplus

__all__ = [
    "ScanDirection",
    "SsmParams",
    "discretize",
    "scan_recurrent",
    "kernel_materialize",
    "kernel_from_discrete",
    "causal_conv",
    "selective_scan",
    "selective_scan_numpy",
    "directional_sequences",
    "merge_directions",
    "ss2d",
    "SERIES_THRESHOLD",
]

SERIES_THRESHOLD = 1e-6


def discretize(A_diag, B, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretisation of a diagonal SSM.

    Entries with ``|delta * a| < 1e-6`` use the series ``delta * (1 + z/2 + z^2/6)``
    for ``(exp(z) - 1) / a``, which tends to ``delta`` as ``a -> 0``.
    """
    if delta <= 0:
        raise ContractError(f"step size must be positive, got {delta}")
    a = np.asarray(A_diag, dtype=np.float64)
    b = np.asarray(B, dtype=np.float64)
    z = delta * a
    small = np.abs(z) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    factor = np.where(small, delta * (1.0 + z / 2.0 + z * z / 6.0), np.expm1(z) / safe_a)
    return np.exp(z), factor * b


class ScanDirection(enum.Enum):
    """Pixel orderings for the 2-D scan.

    The backward orders are the forward orders of the mirrored image: rows are
    read right-to-left, columns bottom-to-top.  A backward scan of an image is
    therefore the forward scan of its flip.
    """

    ROW_FORWARD = 0
    ROW_BACKWARD = 1
    COL_FORWARD = 2
    COL_BACKWARD = 3

    def order(self, h: int, w: int) -> np.ndarray:
        """Flat (row-major) pixel indices in visiting order."""
        grid = np.arange(h * w).reshape(h, w)
        if self is ScanDirection.ROW_FORWARD:
            return grid.reshape(-1)
        if self is ScanDirection.ROW_BACKWARD:
            return grid[:, ::-1].reshape(-1)
        if self is ScanDirection.COL_FORWARD:
            return grid.T.reshape(-1)
        return grid[::-1, :].T.reshape(-1)


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class SsmParams:
    """One direction's parameters for a ``c``-channel selective SSM.

    Token projections (``x`` is ``[L, c]``)::

        delta = softplus(x @ w_delta + delta_bias)   # [L, c]
        B     = x @ w_b + b_bias                     # [L, N]
        C     = x @ w_c + c_bias                     # [L, N]

    With ``selective=False`` the ``x`` terms drop out and the system is
    time-invariant.
    """

    A: np.ndarray
    D: np.ndarray
    delta_bias: np.ndarray
    w_delta: np.ndarray
    b_bias: np.ndarray
    w_b: np.ndarray
    c_bias: np.ndarray
    w_c: np.ndarray
    selective: bool = True

    def __post_init__(self):
        if np.any(self.A >= 0):
            raise ContractError("diag(A) must be strictly negative")

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, channels: int, state_dim: int = 8, rng=None, selective: bool = True,
             scale: float = 0.1) -> SsmParams:
        """A = -(1..N) per channel; softplus(delta_bias) log-uniform in [1e-3, 0.1]."""
        rng = np.random.default_rng(rng)
        A = -np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(0.1), channels))
        delta_bias = dt + np.log(-np.expm1(-dt))
        return cls(
            A=A,
            D=np.ones(channels),
            delta_bias=delta_bias,
            w_delta=rng.normal(0, scale, (channels, channels)),
            b_bias=rng.normal(0, 1.0, state_dim),
            w_b=rng.normal(0, scale, (channels, state_dim)),
            c_bias=rng.normal(0, 1.0, state_dim),
            w_c=rng.normal(0, scale, (channels, state_dim)),
            selective=selective,
        )

    def project(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-token ``(delta [L, c], B [L, N], C [L, N])``."""
        L = x.shape[0]
        if self.selective:
            delta = _softplus(x @ self.w_delta + self.delta_bias)
            B = x @ self.w_b + self.b_bias
            C = x @ self.w_c + self.c_bias
        else:
            delta = np.broadcast_to(_softplus(self.delta_bias), (L, self.channels)).copy()
            B = np.broadcast_to(self.b_bias, (L, self.state_dim)).copy()
            C = np.broadcast_to(self.c_bias, (L, self.state_dim)).copy()
        return delta, B, C


def selective_scan_numpy(x, delta, A, B, C, D) -> np.ndarray:
    """Straight sequential recurrence for one sequence ``x[L, c]``."""
    L, c = x.shape
    h = np.zeros_like(A)
    y = np.empty((L, c))
    for k in range(L):
        z = delta[k][:, None] * A
        small = np.abs(z) < SERIES_THRESHOLD
        factor = np.where(
            small,
            delta[k][:, None] * (1.0 + z / 2.0 + z * z / 6.0),
            np.expm1(z) / np.where(small, 1.0, A),
        )
        h = np.exp(z) * h + factor * B[k][None, :] * x[k][:, None]
        y[k] = h @ C[k] + D * x[k]
    return y


def scan_recurrent(params: SsmParams, x) -> np.ndarray:
    """Evaluate the (selective) SSM on ``x[L, c]`` step by step from ``h_0 = 0``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1 or x.shape[1] != params.channels:
        raise ShapeError(f"scan input {x.shape} does not match {params.channels} channels")
    delta, B, C = params.project(x)
    return selective_scan_numpy(x, delta, params.A, B, C, params.D)


def kernel_from_discrete(A_d, B_d, C, L: int) -> np.ndarray:
    """``K[j] = sum_n C[n] A_d[n]**j B_d[n]`` for ``j < L``; trailing channel axes allowed."""
    A_d, B_d, C = (np.asarray(v, dtype=np.float64) for v in (A_d, B_d, C))
    powers = A_d[None] ** np.arange(L).reshape((L,) + (1,) * A_d.ndim)
    return (powers * B_d[None] * C).sum(axis=-1)


def kernel_materialize(params: SsmParams, L: int) -> np.ndarray:
    """Convolution kernel ``[L, c]`` of a time-invariant SSM."""
    if params.selective:
        raise ContractError("kernel_materialize needs frozen (non-selective) parameters")
    delta = _softplus(params.delta_bias)
    A_d = np.exp(delta[:, None] * params.A)
    _, B_d = discretize_rows(params.A, params.b_bias, delta)
    return kernel_from_discrete(A_d, B_d, params.c_bias, L)


def discretize_rows(A, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel discretisation with a step ``delta[c]`` and shared ``B[N]``."""
    rows = [discretize(A[i], B, float(delta[i])) for i in range(A.shape[0])]
    return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows])


def causal_conv(K: np.ndarray, x: np.ndarray, D=None) -> np.ndarray:
    """``y[k] = sum_{j<=k} K[j] x[k-j] + D x[k]`` channelwise, ``x`` is ``[L, c]``."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    y = np.zeros_like(x)
    for j in range(L):
        y[j:] += K[j] * x[: L - j]
    if D is not None:
        y += D * x
    return y


# ----------------------------------------------------------------------------
# fused kernels


@numba.njit(cache=True, inline="always", error_model="numpy")
def _zoh(d, a):
    z = d * a
    ea = math.exp(z)
    if abs(z) < SERIES_THRESHOLD:
        f = d * (1.0 + z / 2.0 + z * z / 6.0)
    elif abs(z) < 1e-2:
        f = math.expm1(z) / a
    else:
        f = (ea - 1.0) / a
    if abs(z) < 1e-2:
        dfda = d * d * (0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0)))))
    else:
        dfda = (z * ea - math.expm1(z)) / (a * a)
    return ea, f, dfda


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _scan_fwd(x, delta, A, B, C, D, H):
    """Forward recurrence; ``H[s, k]`` receives the state history when it is non-empty."""
    S, L, c = x.shape
    N = A.shape[2]
    keep = H.shape[0] == S
    y = np.empty_like(x)
    for s in numba.prange(S):
        h = np.zeros((c, N))
        for k in range(L):
            for ch in range(c):
                d = delta[s, k, ch]
                xv = x[s, k, ch]
                acc = 0.0
                for n in range(N):
                    ea, f, _ = _zoh(d, A[s, ch, n])
                    hv = ea * h[ch, n] + f * B[s, k, n] * xv
                    h[ch, n] = hv
                    acc += C[s, k, n] * hv
                y[s, k, ch] = acc + D[s, ch] * xv
            if keep:
                H[s, k] = h
    return y


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _scan_bwd(x, delta, A, B, C, D, H, gy):
    S, L, c = x.shape
    N = A.shape[2]
    gx = np.zeros_like(x)
    gdelta = np.zeros_like(x)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros_like(D)
    for s in numba.prange(S):
        lam = np.zeros((c, N))
        for k in range(L - 1, -1, -1):
            for ch in range(c):
                g = gy[s, k, ch]
                xv = x[s, k, ch]
                d = delta[s, k, ch]
                gD[s, ch] += g * xv
                gxk = D[s, ch] * g
                gdk = 0.0
                for n in range(N):
                    a = A[s, ch, n]
                    ea, f, dfda = _zoh(d, a)
                    bk = B[s, k, n]
                    l = lam[ch, n] + C[s, k, n] * g
                    gC[s, k, n] += g * H[s, k, ch, n]
                    hprev = H[s, k - 1, ch, n] if k > 0 else 0.0
                    g_ea = l * hprev
                    g_f = l * bk * xv
                    gB[s, k, n] += l * f * xv
                    gxk += l * f * bk
                    gdk += g_ea * a * ea + g_f * ea
                    gA[s, ch, n] += g_ea * d * ea + g_f * dfda
                    lam[ch, n] = l * ea
                gx[s, k, ch] = gxk
                gdelta[s, k, ch] = gdk
    return gx, gdelta, gA, gB, gC, gD


def _fold(arr: np.ndarray, lead: tuple[int, ...], tail: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(arr, lead + tail)).reshape((-1,) + tail)


def _unfold(g: np.ndarray, lead: tuple[int, ...], shape: tuple[int, ...]) -> np.ndarray:
    g = g.reshape(lead + g.shape[1:])
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable selective scan.

    Shapes: ``x, delta: [..., L, c]``, ``B, C: [..., L, N]``, ``A: [..., c, N]``
    and ``D: [..., c]``; ``A`` and ``D`` may omit or broadcast leading axes.
    Gradients come from the reverse (adjoint) recurrence over the state
    history, which is kept only when a gradient will be needed.
    """
    L, c = x.shape[-2:]
    N = A.shape[-1]
    lead = x.shape[:-2]
    if delta.shape != x.shape or B.shape != lead + (L, N) or C.shape != B.shape:
        raise ShapeError(
            f"selective_scan: x {x.shape}, delta {delta.shape}, B {B.shape}, C {C.shape}"
        )
    if A.shape[-2:] != (c, N) or D.shape[-1] != c:
        raise ShapeError(f"selective_scan: A {A.shape}, D {D.shape} for c={c}, N={N}")
    xs = _fold(x.data, lead, (L, c))
    ds = _fold(delta.data, lead, (L, c))
    As = _fold(A.data, lead, (c, N))
    Bs = _fold(B.data, lead, (L, N))
    Cs = _fold(C.data, lead, (L, N))
    Dsk = _fold(D.data, lead, (c,))
    needs_grad = ad.grad_enabled() and any(t.requires_grad for t in (x, delta, A, B, C, D))
    S = xs.shape[0]
    H = np.empty((S, L, c, N)) if needs_grad else np.empty((0, 1, 1, 1))
    y = _scan_fwd(xs, ds, As, Bs, Cs, Dsk, H).reshape(x.shape)

    def backward(g):
        gs = np.ascontiguousarray(g).reshape(xs.shape)
        gx, gd, gA, gB, gC, gD = _scan_bwd(xs, ds, As, Bs, Cs, Dsk, H, gs)
        return (
            gx.reshape(x.shape),
            gd.reshape(x.shape),
            _unfold(gA, lead, A.shape),
            gB.reshape(B.shape),
            gC.reshape(C.shape),
            _unfold(gD, lead, D.shape),
        )

    return Tensor._from_op(y, (x, delta, A, B, C, D), backward, "selective_scan")


# ----------------------------------------------------------------------------
# 2-D scan


def _orders(h: int, w: int) -> list[np.ndarray]:
    return [d.order(h, w) for d in ScanDirection]


def directional_sequences(x: Tensor) -> Tensor:
    """``x[..., c, h, w]`` -> ``[..., 4, h*w, c]``, one sequence per scan direction."""
    *lead, c, h, w = x.shape
    orders = _orders(h, w)
    flat = x.data.reshape(*lead, c, h * w)
    seq = np.stack([flat[..., o] for o in orders], axis=-3)  # [..., 4, c, L]
    out = np.ascontiguousarray(np.swapaxes(seq, -1, -2))

    def backward(g):
        gs = np.swapaxes(g, -1, -2)  # [..., 4, c, L]
        gflat = np.zeros(tuple(lead) + (c, h * w))
        for i, o in enumerate(orders):
            gflat[..., o] += gs[..., i, :, :]
        return (gflat.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "directional_sequences")


def merge_directions(y: Tensor, h: int, w: int, mode: str = "sum") -> Tensor:
    """Undo each direction's ordering and combine: ``[..., 4, L, c]`` -> ``[..., c, h, w]``."""
    *lead, ndir, L, c = y.shape
    if L != h * w:
        raise ShapeError(f"sequence length {L} does not match {h}x{w}")
    orders = _orders(h, w)
    weight = 1.0 if mode == "sum" else 1.0 / ndir
    ys = np.swapaxes(y.data, -1, -2)  # [..., 4, c, L]
    flat = np.zeros(tuple(lead) + (c, L))
    for i, o in enumerate(orders):
        flat[..., o] += ys[..., i, :, :]
    out = (flat * weight).reshape(*lead, c, h, w)

    def backward(g):
        gflat = g.reshape(*lead, c, L) * weight
        gs = np.stack([gflat[..., o] for o in orders], axis=-3)
        return (np.ascontiguousarray(np.swapaxes(gs, -1, -2)),)

    return Tensor._from_op(out, (y,), backward, "merge_directions")


def _affine(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """``x[..., 4, L, c] @ w[4, c, k] + bias[4, k]`` with the bias broadcast over tokens."""
    xw = matmul(x, w)

    def backward(g):
        return g, g.reshape((-1,) + g.shape[-3:]).sum(axis=(0, 2))

    out = xw.data + bias.data[:, None, :]
    return Tensor._from_op(out, (xw, bias), backward, "bias")


def ss2d(
    x: Tensor,
    a_log: Tensor,
    d_skip: Tensor,
    w_delta: Tensor,
    delta_bias: Tensor,
    w_b: Tensor,
    b_bias: Tensor,
    w_c: Tensor,
    c_bias: Tensor,
    merge: str = "sum",
) -> Tensor:
    """Four-direction selective scan over ``x[..., c, h, w]``.

    Parameters are stacked per direction on a leading axis of 4, e.g.
    ``a_log[4, c, N]`` with ``A = -exp(a_log)``.
    """
    h, w = x.shape[-2:]
    seq = directional_sequences(x)
    delta = softplus(_affine(seq, w_delta, delta_bias))
    B = _affine(seq, w_b, b_bias)
    C = _affine(seq, w_c, c_bias)
    A = neg(exp(a_log))
    y = selective_scan(seq, delta, A, B, C, d_skip)
    return merge_directions(y, h, w, merge)


def stack_params(params: list[SsmParams]) -> dict[str, np.ndarray]:
    """Stack four direction parameter sets into the arrays :func:`ss2d` expects."""
    if len(params) != 4:
        raise ContractError("ss2d needs exactly four direction parameter sets")
    if not all(p.selective for p in params):
        raise ContractError("ss2d runs selective parameters only")
    return {
        "a_log": np.stack([np.log(-p.A) for p in params]),
        "d_skip": np.stack([p.D for p in params]),
        "w_delta": np.stack([p.w_delta for p in params]),
        "delta_bias": np.stack([p.delta_bias for p in params]),
        "w_b": np.stack([p.w_b for p in params]),
        "b_bias": np.stack([p.b_bias for p in params]),
        "w_c": np.stack([p.w_c for p in params]),
        "c_bias": np.stack([p.c_bias for p in params]),
    }
