"""Dense float64 tensors with a per-pass reverse-mode tape.

Tensors created through :meth:`Tape.leaf` are differentiable. Every op that
touches at least one taped input appends a node to that tape; ops on plain
constants just compute. :func:`backward` walks a tape in reverse creation
order and returns gradients for every leaf.

Frozen model weights are passed as constants, so no gradient is ever
accumulated into them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[int | None, ...]
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def leaf(self, data, name: str | None = None) -> Tensor:
        t = Tensor(data, self, len(self.nodes))
        self.nodes.append(TapeNode("leaf", (), {"name": name, "shape": t.shape}))
        return t

    def _record(self, kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, saved: dict) -> Tensor:
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(TapeNode(kind, ids, saved))
        return Tensor(out, self, len(self.nodes) - 1)

    def __len__(self) -> int:
        return len(self.nodes)


class GradMap(dict):
    """Node id -> gradient array. Also indexable by the taped Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__contains__(key)


def _tape_of(op: str, inputs: tuple[Tensor, ...]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ValueError(f"{op}: inputs belong to different tapes")
        tape = t.tape
    return tape


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, saved: dict | None = None) -> Tensor:
    tape = _tape_of(kind, inputs)
    if tape is None:
        return Tensor(out)
    return tape._record(kind, inputs, out, saved or {})


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- forward ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}") from None
    return _emit("add", (a, b), a.data + b.data, {"shapes": (a.shape, b.shape)})


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _emit("mul", (a, b), a.data * b.data, {"a": a.data, "b": b.data})


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), {"mask": mask})


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _emit("log", (x,), np.log(x.data), {"x": x.data})


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: expected [batch, C], got {x.shape}")
    p = _softmax_rows(x.data)
    return _emit("softmax", (x,), p, {"p": p})


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected [batch, C], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return _emit("log_softmax", (x,), out, {"p": np.exp(out)})


def affine(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: shape mismatch {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data
    return _emit("affine", (x, weight, bias), out, {"x": x.data, "w": weight.data})


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, {"a": a.data, "b": b.data})


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # [N, C, H, W] -> contiguous columns [N*Ho*Wo, C*k*k]
    n, c, h, w = x.shape
    win = sliding_window_view(x.transpose(0, 2, 3, 1), (k, k), axis=(1, 2))
    return win.reshape(n * (h - k + 1) * (w - k + 1), c * k * k)


def _conv_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x [N, Cin, H, W], w [Cout, Cin, k, k] -> [N, Cout, H-k+1, W-k+1]
    n, _, h, wd = x.shape
    k = w.shape[2]
    out = _windows(x, k) @ w.reshape(w.shape[0], -1).T
    return np.ascontiguousarray(out.reshape(n, h - k + 1, wd - k + 1, -1).transpose(0, 3, 1, 2))


def conv2d(x, weight, bias, padding: str = "same") -> Tensor:
    """Cross-correlation with stride 1, square kernel, ``same`` or ``valid`` padding."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch input {x.shape} vs weight {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ShapeError(f"conv2d: kernel must be square, got {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} vs weight {weight.shape}")
    if padding == "same":
        if k % 2 != 1:
            raise ShapeError("conv2d: same padding needs an odd kernel")
        p = k // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    elif padding == "valid":
        p = 0
        xp = x.data
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    out = _conv_valid(xp, weight.data) + bias.data[None, :, None, None]
    return _emit("conv2d", (x, weight, bias), out, {"xp": xp, "w": weight.data, "pad": p})


def avgpool2(x) -> Tensor:
    """2x2 average pool, stride 2; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2: expected [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"avgpool2: input {x.shape} too small")
    v = x.data[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    out = v.mean(axis=(3, 5))
    return _emit("avgpool2", (x,), out, {"shape": x.shape})


def flatten(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: expected a batch axis, got {x.shape}")
    out = x.data.reshape(x.shape[0], -1)
    return _emit("flatten", (x,), out, {"shape": x.shape})


def total(x) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    x = as_tensor(x)
    return _emit("sum", (x,), np.asarray(x.data.sum()), {"shape": x.shape})


def place(patch, canvas_shape: tuple[int, ...], anchor: tuple[int, int]) -> Tensor:
    """Embed a [c, h, w] patch into a zero canvas [c, H, W] at (row, col)."""
    patch = as_tensor(patch)
    c, h, w = patch.shape
    C, H, W = canvas_shape
    r, q = anchor
    if c != C or r < 0 or q < 0 or r + h > H or q + w > W:
        raise ShapeError(f"place: patch {patch.shape} at {anchor} does not fit canvas {tuple(canvas_shape)}")
    out = np.zeros(canvas_shape)
    out[:, r : r + h, q : q + w] = patch.data
    return _emit("place", (patch,), out, {"box": (r, r + h, q, q + w)})


def soft_cross_entropy(teacher_probs, student_log_probs, tol: float = 1e-9) -> Tensor:
    """Mean over the batch of ``-sum_c teacher * student_log_probs``."""
    t, s = as_tensor(teacher_probs), as_tensor(student_log_probs)
    if t.data.ndim != 2 or t.shape != s.shape:
        raise ShapeError(f"soft_cross_entropy: shape mismatch {t.shape} vs {s.shape}")
    row_sums = t.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > tol):
        worst = float(np.max(np.abs(row_sums - 1.0)))
        raise ValueError(f"soft_cross_entropy: teacher rows not normalized (max deviation {worst:.3g})")
    n = t.shape[0]
    out = np.asarray(-(t.data * s.data).sum() / n)
    return _emit("soft_ce", (t, s), out, {"t": t.data, "s": s.data, "n": n})


# --------------------------------------------------------------- backward rules


def _bw_add(saved, g):
    sa, sb = saved["shapes"]
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _bw_mul(saved, g):
    return g * saved["b"], g * saved["a"]


def _bw_relu(saved, g):
    return (np.where(saved["mask"], g, 0.0),)


def _bw_log(saved, g):
    return (g / saved["x"],)


def _bw_softmax(saved, g):
    p = saved["p"]
    return (p * (g - (g * p).sum(axis=1, keepdims=True)),)


def _bw_log_softmax(saved, g):
    return (g - saved["p"] * g.sum(axis=1, keepdims=True),)


def _bw_affine(saved, g, needs):
    gx = g @ saved["w"] if needs[0] else None
    gw = g.T @ saved["x"] if needs[1] else None
    gb = g.sum(axis=0) if needs[2] else None
    return gx, gw, gb


def _bw_matmul(saved, g):
    return g @ saved["b"].T, saved["a"].T @ g


def _bw_conv2d(saved, g, needs):
    xp, w, p = saved["xp"], saved["w"], saved["pad"]
    k = w.shape[2]
    gx = gw = gb = None
    if needs[0]:
        # full correlation of g with the flipped kernel, channels swapped
        gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gxp = _conv_valid(gpad, wf)
        gx = gxp[:, :, p : gxp.shape[2] - p, p : gxp.shape[3] - p] if p else gxp
    if needs[1]:
        cout = g.shape[1]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ _windows(xp, k)).reshape(w.shape)
    if needs[2]:
        gb = g.sum(axis=(0, 2, 3))
    return gx, gw, gb


def _bw_avgpool2(saved, g):
    n, c, h, w = saved["shape"]
    h2, w2 = g.shape[2], g.shape[3]
    gx = np.zeros((n, c, h, w))
    up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
    gx[:, :, : 2 * h2, : 2 * w2] = up
    return (gx,)


def _bw_flatten(saved, g):
    return (g.reshape(saved["shape"]),)


def _bw_sum(saved, g):
    return (np.full(saved["shape"], float(g)),)


def _bw_place(saved, g):
    r0, r1, c0, c1 = saved["box"]
    return (g[:, r0:r1, c0:c1].copy(),)


def _bw_soft_ce(saved, g):
    n = saved["n"]
    return -float(g) * saved["s"] / n, -float(g) * saved["t"] / n


BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "mul": _bw_mul,
    "relu": _bw_relu,
    "log": _bw_log,
    "softmax": _bw_softmax,
    "log_softmax": _bw_log_softmax,
    "affine": _bw_affine,
    "matmul": _bw_matmul,
    "conv2d": _bw_conv2d,
    "avgpool2": _bw_avgpool2,
    "flatten": _bw_flatten,
    "sum": _bw_sum,
    "place": _bw_place,
    "soft_ce": _bw_soft_ce,
}

# rules that skip gradients nobody asked for (frozen weights)
_SELECTIVE = {"conv2d", "affine"}

FORWARD: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "affine": affine,
    "matmul": matmul,
    "conv2d": conv2d,
    "avgpool2": avgpool2,
    "flatten": flatten,
    "sum": total,
    "place": place,
    "soft_ce": soft_cross_entropy,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    try:
        fn = FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


def backward(loss: Tensor) -> GradMap:
    """Reverse-mode sweep from a scalar ``loss``; returns gradients of all leaves."""
    if loss.tape is None:
        raise ValueError("backward: loss is not on a tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    leaves = GradMap()
    for idx in range(loss.node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.kind == "leaf":
            leaves[idx] = g
            continue
        rule = BACKWARD[node.kind]
        if node.kind in _SELECTIVE:
            parts = rule(node.saved, g, tuple(src is not None for src in node.inputs))
        else:
            parts = rule(node.saved, g)
        for src, gi in zip(node.inputs, parts):
            if src is None:
                continue
            grads[src] = grads[src] + gi if src in grads else gi
    for idx, node in enumerate(tape.nodes[: loss.node + 1]):
        if node.kind == "leaf" and idx not in leaves:
            leaves[idx] = np.zeros(node.saved["shape"])
    return leaves
