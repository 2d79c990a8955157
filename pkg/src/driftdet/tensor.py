"""Dense 4-D tensor substrate with taped reverse-mode differentiation.

Every value in the package is a rank-4 tensor in batch-channel-height-width
layout. Ops are plain functions producing new tensors; when a Tape is active
and an input requires gradients, the op records a node holding the backward
rule. Gradients are exact reverse-mode, accumulated in creation order, so
results are bit-reproducible across runs on the same platform.

float32 is the working precision; float64 exists for finite-difference
gradient checking, where float32 noise would swamp the 1e-6 tolerance.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ConfigurationError, TapeUsageError

DEFAULT_DTYPE = np.float32

_SUPPORTED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A rank-4 array with optional gradient storage.

    Tensors produced by ops are immutable by contract; only leaves
    (parameters, running statistics) may be rebound via `set_data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        from_array = isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not from_array or arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise DimensionError(f"tensor must be rank 4, got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"all dims must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: "_Node | None" = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def set_data(self, arr: np.ndarray) -> None:
        """Rebind a leaf's value array. Updates create new arrays; ops never mutate."""
        if self.node is not None:
            raise TapeUsageError("cannot rebind a tensor produced by an op")
        if arr.shape != self.data.shape or arr.dtype != self.data.dtype:
            raise DimensionError(
                f"set_data expects shape {self.data.shape} dtype {self.data.dtype}, "
                f"got {arr.shape} {arr.dtype}"
            )
        self.data = np.ascontiguousarray(arr)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value: float, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Node:
    """One recorded op: parents, the output tensor, and the backward rule."""

    __slots__ = ("op", "parents", "tensor", "backward_fn", "forward_fn", "tape", "kink_gap")

    def __init__(self, op, parents, tensor, backward_fn, forward_fn, tape, kink_gap=None):
        self.op = op
        self.parents = parents  # tuple of _Node or None (non-differentiable input)
        self.tensor = tensor
        self.backward_fn = backward_fn  # grad_out -> tuple of per-parent grads
        self.forward_fn = forward_fn  # () -> np.ndarray, for replay
        self.tape = tape
        # distance from the nearest non-smooth point (relu/min/max breakpoints,
        # division poles); finite-difference checks skip configurations where
        # any recorded gap is smaller than the probe step
        self.kink_gap = kink_gap


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of ops. Single-owner: never shared across threads.

    Node order is creation order, which is topological by construction.
    Repeated backward calls accumulate into leaf gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_nodes: dict[int, _Node] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _leaf(self, t: Tensor) -> _Node:
        node = self._leaf_nodes.get(id(t))
        if node is None:
            node = _Node("leaf", (), t, None, None, self)
            self._leaf_nodes[id(t)] = node
            self.nodes.append(node)
        return node

    def _record(self, op, inputs, out, backward_fn, forward_fn, kink_gap=None) -> None:
        parents = tuple(
            self._node_for(t) if isinstance(t, Tensor) and t.requires_grad else None
            for t in inputs
        )
        node = _Node(op, parents, out, backward_fn, forward_fn, self, kink_gap)
        out.node = node
        self.nodes.append(node)

    def min_kink_gap(self) -> float:
        """Smallest recorded distance to a non-smooth point, inf if none."""
        gap = float("inf")
        for n in self.nodes:
            if n.kink_gap is not None:
                gap = min(gap, n.kink_gap)
        return gap

    def _node_for(self, t: Tensor) -> _Node:
        if t.node is not None:
            if t.node.tape is not self:
                raise TapeUsageError(
                    f"tensor produced on another tape used in op on this tape"
                )
            return t.node
        return self._leaf(t)

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of sum(out) into every requires_grad leaf.

        A non-scalar output is implicitly sum-reduced (seed of ones).
        """
        node = out.node
        if node is None or node.tape is not self:
            raise TapeUsageError("backward through a tensor not recorded on this tape")
        if seed is None:
            seed = np.ones_like(out.data)
        elif seed.shape != out.data.shape:
            raise DimensionError(f"seed shape {seed.shape} != output shape {out.data.shape}")

        pending: dict[int, np.ndarray] = {id(node): np.asarray(seed, dtype=out.data.dtype)}
        for n in reversed(self.nodes):
            g = pending.pop(id(n), None)
            if g is None:
                continue
            if n.backward_fn is None:  # leaf
                if n.tensor.requires_grad:
                    n.tensor.accumulate_grad(g)
                continue
            grads = n.backward_fn(g)
            for parent, pg in zip(n.parents, grads):
                if parent is None or pg is None:
                    continue
                acc = pending.get(id(parent))
                pending[id(parent)] = pg if acc is None else acc + pg

    def replay(self) -> bool:
        """Recompute every recorded forward value; True iff all bit-identical."""
        for n in self.nodes:
            if n.forward_fn is None:
                continue
            fresh = n.forward_fn()
            if fresh.dtype != n.tensor.data.dtype or fresh.shape != n.tensor.data.shape:
                return False
            if not np.array_equal(fresh, n.tensor.data):
                return False
        return True

    def check_finite(self) -> None:
        """Raise NumericalError naming the first op whose output is non-finite."""
        from .errors import NumericalError

        for n in self.nodes:
            if not np.all(np.isfinite(n.tensor.data)):
                raise NumericalError(f"non-finite values in output of op '{n.op}'")


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    out: Tensor,
    backward_fn: Callable[[np.ndarray], tuple],
    forward_fn: Callable[[], np.ndarray] | None = None,
    kink_gap: float | None = None,
) -> Tensor:
    """Attach an op to the active tape if its output participates in gradients.

    Extension point: modules defining their own primitives (e.g. spatial
    shifts) call this with a backward rule aligned to `inputs`.
    """
    out.requires_grad = any(t.requires_grad for t in inputs if isinstance(t, Tensor))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._record(op, inputs, out, backward_fn, forward_fn, kink_gap)
    return out


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def _check_same_dtype(*ts: Tensor) -> None:
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise DimensionError(f"mixed dtypes {d} and {t.data.dtype}")


def _broadcast_pair(a: Tensor, b: Tensor) -> tuple[int, int, int, int]:
    """Validate the two legal broadcast patterns and return the output shape.

    Legal: identical shapes, or one operand is the other with channels
    collapsed to 1 ([N,1,H,W]) or space collapsed to 1x1 ([N,C,1,1]).
    """
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    for big, small in ((sa, sb), (sb, sa)):
        if small == (big[0], 1, big[2], big[3]) or small == (big[0], big[1], 1, 1):
            return big
    raise DimensionError(f"illegal broadcast between {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _as_const(v, like: Tensor) -> Tensor:
    """Wrap a python scalar as a constant tensor matching `like`."""
    return Tensor(np.full(like.shape, v, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return record_op("sigmoid", (x,), out, bwd, lambda: sigmoid(x.detach()).data)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    out = Tensor(y)

    def bwd(g):
        return (g * (x.data > 0),)

    return record_op("relu", (x,), out, bwd, lambda: np.maximum(x.data, 0),
                     kink_gap=float(np.min(np.abs(x.data))))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * x.data.dtype.type(c))

    def bwd(g):
        return (g * x.data.dtype.type(c),)

    return record_op("scale", (x,), out, bwd, lambda: x.data * x.data.dtype.type(c))


def _binary(op, a, b, fwd, bwd_a, bwd_b, kink_gap=None):
    if not isinstance(a, Tensor):
        a = _as_const(a, b)
    if not isinstance(b, Tensor):
        b = _as_const(b, a)
    _check_same_dtype(a, b)
    _broadcast_pair(a, b)
    y = fwd(a.data, b.data)
    out = Tensor(y)

    def bwd(g):
        ga = bwd_a(g, a.data, b.data, y)
        gb = bwd_b(g, a.data, b.data, y)
        return (
            None if ga is None else _reduce_to(ga, a.shape),
            None if gb is None else _reduce_to(gb, b.shape),
        )

    gap = None if kink_gap is None else kink_gap(a.data, b.data)
    return record_op(op, (a, b), out, bwd, lambda: fwd(a.data, b.data), kink_gap=gap)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add,
                   lambda g, ad, bd, y: g,
                   lambda g, ad, bd, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract,
                   lambda g, ad, bd, y: g,
                   lambda g, ad, bd, y: -g)


def mul(a, b) -> Tensor:
    """Elementwise product with the branch broadcast patterns allowed."""
    return _binary("mul", a, b, np.multiply,
                   lambda g, ad, bd, y: g * bd,
                   lambda g, ad, bd, y: g * ad)


def divide(a, b) -> Tensor:
    return _binary("div", a, b, np.divide,
                   lambda g, ad, bd, y: g / bd,
                   lambda g, ad, bd, y: -g * ad / (bd * bd),
                   kink_gap=lambda ad, bd: float(np.min(np.abs(bd))))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    return _binary("min", a, b, np.minimum,
                   lambda g, ad, bd, y: g * (ad <= bd),
                   lambda g, ad, bd, y: g * (ad > bd),
                   kink_gap=lambda ad, bd: float(np.min(np.abs(ad - bd))))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    return _binary("max", a, b, np.maximum,
                   lambda g, ad, bd, y: g * (ad >= bd),
                   lambda g, ad, bd, y: g * (ad < bd),
                   kink_gap=lambda ad, bd: float(np.min(np.abs(ad - bd))))


# eltwise_broadcast_mul is the contract name for the attention-map product
eltwise_broadcast_mul = mul


# ---------------------------------------------------------------------------
# Channel plumbing
# ---------------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_channels needs at least one tensor")
    _check_same_dtype(*parts)
    base = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (base[0], base[2], base[3]):
            raise DimensionError(f"concat parts disagree on N/H/W: {base} vs {p.shape}")
    counts = [p.shape[1] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=1)
    out = Tensor(y)

    def bwd(g):
        grads, start = [], 0
        for c in counts:
            grads.append(np.ascontiguousarray(g[:, start:start + c]))
            start += c
        return tuple(grads)

    return record_op("concat_channels", tuple(parts), out, bwd,
                     lambda: np.concatenate([p.data for p in parts], axis=1))


def split_channels(x: Tensor, counts: Sequence[int]) -> list[Tensor]:
    if sum(counts) != x.shape[1]:
        raise DimensionError(f"split counts {list(counts)} do not sum to C={x.shape[1]}")
    if any(c < 1 for c in counts):
        raise DimensionError(f"split counts must be positive, got {list(counts)}")
    outs, start = [], 0
    for c in counts:
        lo, hi = start, start + c
        y = np.ascontiguousarray(x.data[:, lo:hi])
        out = Tensor(y)

        def bwd(g, lo=lo, hi=hi):
            full_g = np.zeros_like(x.data)
            full_g[:, lo:hi] = g
            return (full_g,)

        record_op("split_channels", (x,), out, bwd,
                  lambda lo=lo, hi=hi: np.ascontiguousarray(x.data[:, lo:hi]))
        outs.append(out)
        start += c
    return outs


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    y = x.data.mean(axis=(2, 3), keepdims=True)
    out = Tensor(y)
    hw = x.shape[2] * x.shape[3]

    def bwd(g):
        return (np.broadcast_to(g / hw, x.shape).astype(x.data.dtype, copy=True),)

    return record_op("global_avg_pool", (x,), out, bwd,
                     lambda: x.data.mean(axis=(2, 3), keepdims=True))


def sum_all(x: Tensor) -> Tensor:
    y = np.array(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    out = Tensor(y)

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.data.dtype, copy=True),)

    return record_op("sum_all", (x,), out, bwd,
                     lambda: np.array(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1))


# ---------------------------------------------------------------------------
# Convolution and normalization
# ---------------------------------------------------------------------------


def _conv_out_dim(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    ns, cs, hs, ws = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], ho, wo, k, k),
        strides=(ns, cs, hs * stride, ws * stride, hs, ws),
        writeable=False,
    )


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation over the spatial dims.

    `w` has shape [C_out, C_in/groups, k, k]; groups == C_in gives the
    depthwise case, k == 1 with groups == 1 the pointwise projections.
    `b`, when given, has C_out elements (stored as [1, C_out, 1, 1]).
    """
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"kernels must be square, got {kh}x{kw}")
    k = kh
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if groups < 1 or cin % groups != 0 or cout % groups != 0:
        raise ConfigurationError(
            f"groups={groups} must divide C_in={cin} and C_out={cout}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"kernel expects C_in/groups={cin_g}, input has {cin}//{groups}={cin // groups}")
    if b is not None and b.numel != cout:
        raise DimensionError(f"bias has {b.numel} elements, expected {cout}")
    _check_same_dtype(*( (x, w) if b is None else (x, w, b) ))
    ho, wo = _conv_out_dim(h, k, pad, stride), _conv_out_dim(wd, k, pad, stride)
    if ho < 1 or wo < 1:
        raise DimensionError(f"output dims {ho}x{wo} collapse below 1")

    def fwd() -> np.ndarray:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        win = _windows(xp, k, stride, ho, wo)
        if groups == 1:
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
            y = cols @ w.data.reshape(cout, -1).T
            y = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        elif groups == cin and cout == cin:
            y = np.einsum("nchwkl,ckl->nchw", win, w.data[:, 0], optimize=False)
        else:
            ci_g, co_g = cin // groups, cout // groups
            pieces = []
            for gi in range(groups):
                wg = win[:, gi * ci_g:(gi + 1) * ci_g]
                cols = wg.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci_g * k * k)
                yg = cols @ w.data[gi * co_g:(gi + 1) * co_g].reshape(co_g, -1).T
                pieces.append(yg.reshape(n, ho, wo, co_g).transpose(0, 3, 1, 2))
            y = np.concatenate(pieces, axis=1)
        y = np.ascontiguousarray(y)
        if b is not None:
            y = y + b.data.reshape(1, cout, 1, 1)
        return y

    out = Tensor(fwd())

    def bwd(g):
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        win = _windows(xp, k, stride, ho, wo)
        gb = None if b is None else g.sum(axis=(0, 2, 3)).reshape(b.shape)
        if groups == 1:
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (g2.T @ cols).reshape(w.shape)
            dwin = (g2 @ w.data.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
            dwin = dwin.transpose(0, 3, 1, 2, 4, 5)
        elif groups == cin and cout == cin:
            gw = np.einsum("nchwkl,nchw->ckl", win, g, optimize=False)[:, None]
            dwin = np.einsum("ckl,nchw->nchwkl", w.data[:, 0], g, optimize=False)
        else:
            ci_g, co_g = cin // groups, cout // groups
            gw = np.empty_like(w.data)
            dwin = np.empty((n, cin, ho, wo, k, k), dtype=x.data.dtype)
            for gi in range(groups):
                wg = win[:, gi * ci_g:(gi + 1) * ci_g]
                cols = wg.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci_g * k * k)
                g2 = g[:, gi * co_g:(gi + 1) * co_g].transpose(0, 2, 3, 1).reshape(
                    n * ho * wo, co_g)
                gw[gi * co_g:(gi + 1) * co_g] = (g2.T @ cols).reshape(co_g, ci_g, k, k)
                dw_g = (g2 @ w.data[gi * co_g:(gi + 1) * co_g].reshape(co_g, -1))
                dwin[:, gi * ci_g:(gi + 1) * ci_g] = dw_g.reshape(
                    n, ho, wo, ci_g, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += \
                    dwin[:, :, :, :, ki, kj]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (np.ascontiguousarray(gx), gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d", inputs, out, bwd, fwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
) -> Tensor:
    """Per-channel normalization, then scale and shift.

    With mean/var omitted, exact batch statistics over (N, H, W) are used
    (training mode, biased variance). Passing stored statistics gives the
    inference path. gamma/beta carry C elements as [1, C, 1, 1].
    """
    if eps <= 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    n, c, h, wd = x.shape
    if gamma.numel != c or beta.numel != c:
        raise DimensionError(f"gamma/beta need {c} elements, got {gamma.numel}/{beta.numel}")
    _check_same_dtype(x, gamma, beta)
    batch_mode = mean is None
    if batch_mode:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        v = ((x.data - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    else:
        mu = np.asarray(mean, dtype=x.data.dtype).reshape(1, c, 1, 1)
        v = np.asarray(var, dtype=x.data.dtype).reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(v + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    gm = gamma.data.reshape(1, c, 1, 1)
    y = xhat * gm + beta.data.reshape(1, c, 1, 1)
    out = Tensor(y.astype(x.data.dtype, copy=False))
    m = n * h * wd

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
        gbeta = g.sum(axis=(0, 2, 3)).reshape(beta.shape)
        if batch_mode:
            gs = g * gm
            gmean = gs.mean(axis=(0, 2, 3), keepdims=True)
            gdot = (gs * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv * (gs - gmean - xhat * gdot)
        else:
            gx = g * gm * inv
        return (gx.astype(x.data.dtype, copy=False), ggamma, gbeta)

    def fwd():
        if batch_mode:
            mu2 = x.data.mean(axis=(0, 2, 3), keepdims=True)
            v2 = ((x.data - mu2) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        else:
            mu2, v2 = mu, v
        inv2 = 1.0 / np.sqrt(v2 + x.data.dtype.type(eps))
        return (((x.data - mu2) * inv2) * gm + beta.data.reshape(1, c, 1, 1)).astype(
            x.data.dtype, copy=False)

    _ = m  # document the normalization population size for readers of bwd
    return record_op("batchnorm2d", (x, gamma, beta), out, bwd, fwd)


def batch_stats(x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over (N, H, W), as [C] arrays."""
    mu = x.data.mean(axis=(0, 2, 3))
    v = ((x.data - mu.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mu, v


# ---------------------------------------------------------------------------
# Detection-head plumbing
# ---------------------------------------------------------------------------


def gather_cells(x: Tensor, batch_idx, row_idx, col_idx) -> Tensor:
    """Extract per-cell channel vectors; output [1, C, P, 1].

    The backward pass scatter-adds into the source cells in list order,
    so duplicate cells accumulate deterministically.
    """
    b = np.asarray(batch_idx, dtype=np.int64)
    r = np.asarray(row_idx, dtype=np.int64)
    cidx = np.asarray(col_idx, dtype=np.int64)
    if not (b.shape == r.shape == cidx.shape) or b.ndim != 1 or b.size < 1:
        raise DimensionError("index arrays must be equal-length 1-D and non-empty")
    n, c, h, wd = x.shape
    if (b.min() < 0 or b.max() >= n or r.min() < 0 or r.max() >= h
            or cidx.min() < 0 or cidx.max() >= wd):
        raise DimensionError("cell indices out of range")
    y = x.data[b, :, r, cidx]  # [P, C]
    out = Tensor(np.ascontiguousarray(y.T[None, :, :, None]))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gp = g[0, :, :, 0].T  # [P, C]
        for i in range(b.size):
            gx[b[i], :, r[i], cidx[i]] += gp[i]
        return (gx,)

    return record_op("gather_cells", (x,), out, bwd,
                     lambda: np.ascontiguousarray(x.data[b, :, r, cidx].T[None, :, :, None]))


def bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable.

    `target` is a constant array broadcastable to z's shape with values
    in [0, 1]. Gradient w.r.t. z is sigmoid(z) - target.
    """
    t = np.broadcast_to(np.asarray(target, dtype=z.data.dtype), z.shape)
    zd = z.data
    y = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    out = Tensor(y.astype(zd.dtype, copy=False))

    def bwd(g):
        sig = np.where(zd >= 0, 1.0 / (1.0 + np.exp(-np.abs(zd))),
                       np.exp(-np.abs(zd)) / (1.0 + np.exp(-np.abs(zd))))
        return (g * (sig - t).astype(zd.dtype, copy=False),)

    def fwd():
        return (np.maximum(z.data, 0) - z.data * t
                + np.log1p(np.exp(-np.abs(z.data)))).astype(zd.dtype, copy=False)

    return record_op("bce_with_logits", (z,), out, bwd, fwd)


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named tensors, each flagged learnable or frozen.

    The learnable tally is the artifact's parameter-count metric; frozen
    entries (running statistics) ride along for checkpointing only.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._learnable: dict[str, bool] = {}

    def add(self, name: str, value, learnable: bool = True) -> Tensor:
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = learnable
        self._entries[name] = t
        self._learnable[name] = learnable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def is_learnable(self, name: str) -> bool:
        return self._learnable[name]

    def learnable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if self._learnable[n]]

    def total_learnable(self) -> int:
        return sum(t.numel for _, t in self.learnable_items())

    def count_prefix(self, prefix: str) -> int:
        return sum(t.numel for n, t in self.learnable_items() if n.startswith(prefix))

    def zero_grads(self) -> None:
        for _, t in self.learnable_items():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def to_dtype(self, dtype) -> "ParamStore":
        clone = ParamStore()
        for n, t in self._entries.items():
            clone.add(n, Tensor(t.data.astype(dtype)), learnable=self._learnable[n])
        return clone


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE,
                 gain: float = 1.0) -> np.ndarray:
    """Uniform in +-gain*sqrt(1/fan_in), drawn from the given seeded generator.

    gain sqrt(3) preserves activation variance through a linear layer;
    sqrt(6) additionally compensates for a following relu.
    """
    bound = float(gain * np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
