"""Random composite graphs and a central finite-difference oracle."""

import numpy as np

from prompt_adapt.tensor import (
    Tape,
    add,
    affine,
    avgpool2,
    backward,
    conv2d,
    flatten,
    log,
    log_softmax,
    matmul,
    mul,
    place,
    relu,
    soft_cross_entropy,
    softmax,
    total,
)

OP_KINDS = {
    "add", "mul", "relu", "log", "softmax", "log_softmax", "affine", "matmul",
    "conv2d", "avgpool2", "flatten", "sum", "place", "soft_ce",
}
TEMPLATES = 5


def _teacher(rng, n, c):
    t = rng.random((n, c)) + 0.1
    return t / t.sum(axis=1, keepdims=True)


def make_graph(seed: int):
    """Returns (leaf arrays, fn(leaves) -> scalar Tensor, set of op kinds used)."""
    rng = np.random.default_rng(seed)
    kind = seed % TEMPLATES
    n, c = 2, int(rng.integers(1, 3))
    hw = int(rng.integers(5, 8))
    k = 3
    classes = int(rng.integers(2, 5))

    if kind == 0:
        cout = int(rng.integers(2, 4))
        flat = cout * (hw // 2) ** 2
        leaves = {
            "x": rng.normal(size=(n, c, hw, hw)),
            "w": rng.normal(size=(cout, c, k, k)) * 0.5,
            "b": rng.normal(size=cout) * 0.1,
            "fw": rng.normal(size=(classes, flat)) * 0.5,
            "fb": rng.normal(size=classes) * 0.1,
        }
        t = _teacher(rng, n, classes)

        def fn(L):
            h = avgpool2(relu(conv2d(L["x"], L["w"], L["b"], padding="same")))
            return soft_cross_entropy(t, log_softmax(affine(flatten(h), L["fw"], L["fb"])))

        ops = {"conv2d", "relu", "avgpool2", "flatten", "affine", "log_softmax", "soft_ce"}

    elif kind == 1:
        ph = int(rng.integers(1, hw))
        anchor = (int(rng.integers(0, hw - ph + 1)), int(rng.integers(0, hw - ph + 1)))
        cout = 2
        flat = cout * (hw - k + 1) ** 2
        leaves = {
            "x": rng.normal(size=(n, c, hw, hw)),
            "p": rng.normal(size=(c, ph, ph)),
            "w": rng.normal(size=(cout, c, k, k)) * 0.5,
            "b": rng.normal(size=cout) * 0.1,
            "m": rng.normal(size=(flat, classes)) * 0.3,
        }
        weights = rng.normal(size=(n, classes))

        def fn(L):
            xp = add(L["x"], place(L["p"], (c, hw, hw), anchor))
            h = flatten(relu(conv2d(xp, L["w"], L["b"], padding="valid")))
            return total(mul(log(softmax(matmul(h, L["m"]))), weights))

        ops = {"add", "place", "conv2d", "relu", "flatten", "matmul", "softmax", "log", "mul", "sum"}

    elif kind == 2:
        d, hdim = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        leaves = {
            "x": rng.normal(size=(n, d)),
            "w1": rng.normal(size=(hdim, d)),
            "b1": rng.normal(size=hdim) * 0.1,
            "w2": rng.normal(size=(classes, hdim)) * 0.5,
            "b2": rng.normal(size=classes) * 0.1,
        }
        t = _teacher(rng, n, classes)

        def fn(L):
            h = relu(affine(L["x"], L["w1"], L["b1"]))
            return soft_cross_entropy(t, log(softmax(affine(h, L["w2"], L["b2"]))))

        ops = {"affine", "relu", "softmax", "log", "soft_ce"}

    elif kind == 3:
        leaves = {
            "x": rng.normal(size=(n, c, hw, hw)),
            "y": rng.normal(size=(n, c, hw, hw)),
            "bias": rng.normal(size=(c, 1, 1)),
        }
        weights = rng.normal(size=(n, c * hw * hw))

        def fn(L):
            z = flatten(add(mul(L["x"], L["y"]), L["bias"]))
            return total(mul(log_softmax(z), weights))

        ops = {"mul", "add", "flatten", "log_softmax", "sum"}

    else:
        cout = 2
        flat = cout * (hw // 2) ** 2
        leaves = {
            "x": rng.normal(size=(n, c, hw, hw)),
            "w": rng.normal(size=(cout, c, k, k)) * 0.5,
            "b": rng.normal(size=cout) * 0.1,
            "fw": rng.normal(size=(classes, flat)) * 0.5,
            "fb": rng.normal(size=classes) * 0.1,
        }

        def fn(L):
            h = relu(avgpool2(conv2d(L["x"], L["w"], L["b"], padding="same")))
            return total(log(softmax(affine(flatten(h), L["fw"], L["fb"]))))

        ops = {"conv2d", "avgpool2", "relu", "flatten", "affine", "softmax", "log", "sum"}

    return leaves, fn, ops


def autodiff(leaves, fn):
    tape = Tape()
    L = {k: tape.leaf(v, k) for k, v in leaves.items()}
    loss = fn(L)
    grads = backward(loss)
    return {k: grads[L[k]] for k in leaves}, tape


def finite_diff(leaves, fn, h=1e-6):
    out = {}
    for name, arr in leaves.items():
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in leaves.items()}
            minus = {k: v.copy() for k, v in leaves.items()}
            plus[name][i] += h
            minus[name][i] -= h
            g[i] = (float(fn(plus).data) - float(fn(minus).data)) / (2 * h)
        out[name] = g
    return out


def max_rel_error(ad, fd) -> float:
    """max|ad - fd| over every leaf, scaled by the graph's largest finite-difference gradient."""
    scale = max(max(float(np.abs(v).max()) for v in fd.values()), 1e-8)
    return max(float(np.abs(ad[k] - fd[k]).max()) for k in ad) / scale
