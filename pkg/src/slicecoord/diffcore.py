"""Minimal reverse-mode autodiff over float64 numpy arrays.

Provides exactly the operations the slice-scoring network and its ranking
losses are built from: conv2d, relu, max pooling, global average pooling,
a fully connected layer, sigmoid, smooth L1, and a handful of
elementwise/reduction helpers. Every gradient is verifiable against
central finite differences via ``grad_check``.

All values are dense float64 arrays in row-major order. A graph is built
eagerly (values computed at construction) and is confined to one thread;
leaf arrays may be shared read-only across graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Sigmoid outputs are clamped into [SIG_EPS, 1 - SIG_EPS] before any log
# so that logistic losses stay finite under saturation.
SIG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when an operation's input shapes are incompatible."""


class Node:
    """One vertex of the computation graph.

    ``value`` and (after backward) ``grad`` are float64 arrays of identical
    shape; ``inputs`` are the predecessor nodes; ``_backward`` pushes this
    node's grad into its inputs' grads.
    """

    __slots__ = ("op", "inputs", "value", "grad", "_backward")

    def __init__(self, value, inputs=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.inputs = tuple(inputs)
        self.op = op
        self.grad = None
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(value) -> Node:
    """Wrap an array as a graph leaf (no-copy for float64 input)."""
    return Node(value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function, exact for |x| up to ~700."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def smooth_l1_value(x: np.ndarray) -> np.ndarray:
    """0.5*x^2 inside the unit interval, |x| - 0.5 outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_deriv(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


# ---------------------------------------------------------------------------
# network ops


def conv2d(x: Node, kernels: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of NCHW input with OIHW kernels, plus per-channel bias."""
    x, kernels, bias = _as_node(x), _as_node(kernels), _as_node(bias)
    _require(x.value.ndim == 4, f"conv2d: input must be 4-D (B,C,H,W), got {x.value.ndim}-D")
    _require(kernels.value.ndim == 4, f"conv2d: kernels must be 4-D (O,I,kH,kW), got {kernels.value.ndim}-D")
    _require(int(stride) >= 1, "conv2d: stride must be a positive int")
    _require(int(padding) >= 0, "conv2d: padding must be non-negative")
    batch, cin, h, w = x.value.shape
    cout, kcin, kh, kw = kernels.value.shape
    _require(
        kcin == cin,
        f"conv2d: channel axis mismatch (input has {cin} channels, kernels expect {kcin})",
    )
    _require(bias.value.shape == (cout,), f"conv2d: bias must have shape ({cout},), got {bias.value.shape}")
    _require(
        h + 2 * padding >= kh,
        f"conv2d: height axis too small ({h} + 2*{padding} < kernel {kh})",
    )
    _require(
        w + 2 * padding >= kw,
        f"conv2d: width axis too small ({w} + 2*{padding} < kernel {kw})",
    )

    if padding:
        xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.value
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1

    # im2col: rows are (batch, out-row, out-col), columns are (cin, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * hout * wout, cin * kh * kw)
    wmat = kernels.value.reshape(cout, cin * kh * kw)
    y = (cols @ wmat.T).reshape(batch, hout, wout, cout).transpose(0, 3, 1, 2)
    y = y + bias.value[None, :, None, None]

    out = Node(y, (x, kernels, bias), "conv2d")

    def _bk(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(batch * hout * wout, cout)
        kernels.grad += (gcols.T @ cols).reshape(kernels.value.shape)
        bias.grad += gcols.sum(axis=0)
        dcols = gcols @ wmat  # (rows, cin*kh*kw)
        dwin = dcols.reshape(batch, hout, wout, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += dwin[..., i, j]
        if padding:
            x.grad += dxp[:, :, padding : padding + h, padding : padding + w]
        else:
            x.grad += dxp

    out._backward = _bk
    return out


def relu(x: Node) -> Node:
    x = _as_node(x)
    out = Node(np.maximum(x.value, 0.0), (x,), "relu")

    def _bk(g):
        x.grad += g * (x.value > 0)

    out._backward = _bk
    return out


def maxpool2d(x: Node, window: int, stride: int) -> Node:
    """Per-window max over NCHW input; gradient goes to the first maximum in scan order."""
    x = _as_node(x)
    _require(x.value.ndim == 4, f"maxpool2d: input must be 4-D (B,C,H,W), got {x.value.ndim}-D")
    _require(window >= 1 and stride >= 1, "maxpool2d: window and stride must be positive")
    batch, ch, h, w = x.value.shape
    _require(
        h >= window and w >= window,
        f"maxpool2d: window {window} larger than spatial extent ({h}x{w})",
    )
    windows = np.lib.stride_tricks.sliding_window_view(x.value, (window, window), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    hout, wout = windows.shape[2], windows.shape[3]
    flat = windows.reshape(batch, ch, hout, wout, window * window)
    idx = flat.argmax(axis=-1)  # first max in row-major window scan
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    out = Node(y, (x,), "maxpool2d")

    def _bk(g):
        bb, cc, ii, jj = np.indices((batch, ch, hout, wout), sparse=False)
        hsrc = ii * stride + idx // window
        wsrc = jj * stride + idx % window
        dx = np.zeros_like(x.value)
        np.add.at(dx, (bb, cc, hsrc, wsrc), g)
        x.grad += dx

    out._backward = _bk
    return out


def global_avg_pool(x: Node) -> Node:
    """Mean over the spatial axes: (B,C,H,W) -> (B,C)."""
    x = _as_node(x)
    _require(x.value.ndim == 4, f"global_avg_pool: input must be 4-D, got {x.value.ndim}-D")
    _, _, h, w = x.value.shape
    out = Node(x.value.mean(axis=(2, 3)), (x,), "global_avg_pool")

    def _bk(g):
        x.grad += g[:, :, None, None] / (h * w)

    out._backward = _bk
    return out


def fully_connected(x: Node, weights: Node, bias: Node) -> Node:
    """Affine map (B,F) @ (F,O) + (O,)."""
    x, weights, bias = _as_node(x), _as_node(weights), _as_node(bias)
    _require(x.value.ndim == 2, f"fully_connected: input must be 2-D (B,F), got {x.value.ndim}-D")
    _require(weights.value.ndim == 2, "fully_connected: weights must be 2-D (F,O)")
    _require(
        x.value.shape[1] == weights.value.shape[0],
        f"fully_connected: inner dimensions differ ({x.value.shape[1]} vs {weights.value.shape[0]})",
    )
    _require(
        bias.value.shape == (weights.value.shape[1],),
        f"fully_connected: bias must have shape ({weights.value.shape[1]},), got {bias.value.shape}",
    )
    out = Node(x.value @ weights.value + bias.value, (x, weights, bias), "fully_connected")

    def _bk(g):
        x.grad += g @ weights.value.T
        weights.grad += x.value.T @ g
        bias.grad += g.sum(axis=0)

    out._backward = _bk
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def sigmoid(x: Node) -> Node:
    x = _as_node(x)
    s = stable_sigmoid(x.value)
    out = Node(s, (x,), "sigmoid")

    def _bk(g):
        x.grad += g * s * (1.0 - s)

    out._backward = _bk
    return out


def smooth_l1(x: Node) -> Node:
    x = _as_node(x)
    out = Node(smooth_l1_value(x.value), (x,), "smooth_l1")

    def _bk(g):
        x.grad += g * smooth_l1_deriv(x.value)

    out._backward = _bk
    return out


def log(x: Node) -> Node:
    x = _as_node(x)
    out = Node(np.log(x.value), (x,), "log")

    def _bk(g):
        x.grad += g / x.value

    out._backward = _bk
    return out


def clip(x: Node, lo: float, hi: float) -> Node:
    """Clamp values into [lo, hi]; gradient passes only where unclamped."""
    x = _as_node(x)
    out = Node(np.clip(x.value, lo, hi), (x,), "clip")

    def _bk(g):
        x.grad += g * ((x.value > lo) & (x.value < hi))

    out._backward = _bk
    return out


def add(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _require(a.value.shape == b.value.shape, f"add: shapes differ ({a.value.shape} vs {b.value.shape})")
    out = Node(a.value + b.value, (a, b), "add")

    def _bk(g):
        a.grad += g
        b.grad += g

    out._backward = _bk
    return out


def sub(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _require(a.value.shape == b.value.shape, f"sub: shapes differ ({a.value.shape} vs {b.value.shape})")
    out = Node(a.value - b.value, (a, b), "sub")

    def _bk(g):
        a.grad += g
        b.grad -= g

    out._backward = _bk
    return out


def neg(x: Node) -> Node:
    x = _as_node(x)
    out = Node(-x.value, (x,), "neg")

    def _bk(g):
        x.grad -= g

    out._backward = _bk
    return out


def scale(x: Node, c: float) -> Node:
    x = _as_node(x)
    out = Node(c * x.value, (x,), "scale")

    def _bk(g):
        x.grad += c * g

    out._backward = _bk
    return out


def sum_all(x: Node) -> Node:
    """Reduce to a 0-d scalar node."""
    x = _as_node(x)
    out = Node(np.asarray(x.value.sum()), (x,), "sum_all")

    def _bk(g):
        x.grad += g  # broadcasts the 0-d seed

    out._backward = _bk
    return out


def reshape(x: Node, shape) -> Node:
    x = _as_node(x)
    out = Node(x.value.reshape(shape), (x,), "reshape")

    def _bk(g):
        x.grad += g.reshape(x.value.shape)

    out._backward = _bk
    return out


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    """Static range slice along one axis."""
    x = _as_node(x)
    _require(0 <= axis < x.value.ndim, f"slice_axis: axis {axis} out of range for {x.value.ndim}-D input")
    key = (slice(None),) * axis + (slice(start, stop),)
    out = Node(x.value[key], (x,), "slice_axis")

    def _bk(g):
        dx = np.zeros_like(x.value)
        dx[key] = g
        x.grad += dx

    out._backward = _bk
    return out


# ---------------------------------------------------------------------------
# backward pass and verification


def _topo_order(root: Node) -> list[Node]:
    """Deterministic postorder over the DAG reachable from root."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            stack.append((inp, False))
    return order


def backward(output: Node, seed=None) -> None:
    """Populate ``grad`` on every node reachable from ``output``.

    With no seed the output must be scalar (size 1) and is seeded with 1.
    A non-scalar output requires an explicit ``seed`` array of the same
    shape (used by the trainer to inject analytic loss gradients).
    Grads are reset before accumulation, so repeated calls are idempotent.
    """
    if seed is None:
        if output.value.size != 1:
            raise ShapeError(
                f"backward: output must be scalar without an explicit seed, got shape {output.value.shape}"
            )
        seed = np.ones_like(output.value)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise ShapeError(
                f"backward: seed shape {seed.shape} does not match output shape {output.value.shape}"
            )
    order = _topo_order(output)
    for node in order:
        node.grad = np.zeros_like(node.value)
    output.grad = output.grad + seed
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


@dataclass
class GradCheckReport:
    """Per-tensor max relative error of analytic vs central-difference grads."""

    errors: dict[str, float]
    tolerance: float
    step: float
    denom_floor: float = 1e-3

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self) -> list[str]:
        width = max((len(k) for k in self.errors), default=0)
        out = [f"{name:<{width}}  max rel err {err:.3e}" for name, err in self.errors.items()]
        status = "PASS" if self.passed else "FAIL"
        out.append(f"{status}: worst {self.worst:.3e} vs tolerance {self.tolerance:.1e}")
        return out


def grad_check(build, params: dict[str, np.ndarray], tolerance: float = 1e-4,
               step: float = 1e-5, denom_floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of a scalar graph against central differences.

    ``build`` maps a dict of leaf Nodes (same keys as ``params``) to a scalar
    output Node and must be deterministic. The relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, denom_floor); the report
    keeps the max per parameter tensor.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run():
        leaves = {k: Node(v) for k, v in work.items()}
        out = build(leaves)
        if out.value.size != 1:
            raise ShapeError("grad_check: builder must produce a scalar output")
        return out, leaves

    out, leaves = run()
    backward(out)
    analytic = {k: leaves[k].grad.copy() for k in work}

    errors = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(run()[0].value)
            flat[i] = orig - step
            fm = float(run()[0].value)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), denom_floor)
        errors[name] = float(np.max(np.abs(a - numeric) / denom))
    return GradCheckReport(errors=errors, tolerance=tolerance, step=step, denom_floor=denom_floor)
