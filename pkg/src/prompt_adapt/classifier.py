"""Desk-scale source classifier: a two-conv CNN trained once, then frozen."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import ckpt
from .tensor import (
    Tape,
    Tensor,
    affine,
    avgpool2,
    backward,
    conv2d,
    flatten,
    log_softmax,
    relu,
    soft_cross_entropy,
    softmax,
)

HIDDEN = 64


class FrozenError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 100
    seed: int = 7

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Classifier:
    """Layer list plus named float64 parameters.

    ``layers`` is a list of tuples: ``("conv", name, padding)``,
    ``("affine", name)``, ``("relu",)``, ``("avgpool2",)``, ``("flatten",)``.
    Parameters live in ``params[f"{name}.w"]`` / ``params[f"{name}.b"]``.
    The final softmax is applied by :meth:`predict`; :meth:`forward`
    returns logits.
    """

    def __init__(self, layers, params, num_classes, geometry, frozen=False):
        self.layers = [tuple(layer) for layer in layers]
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
        self.num_classes = int(num_classes)
        self.geometry = tuple(int(g) for g in geometry)
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self) -> "Classifier":
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = self.params[name]
            h.update(f"{name}:{arr.shape}".encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def check_images(self, images) -> None:
        shape = np.shape(images.data if isinstance(images, Tensor) else images)
        if len(shape) != 4 or tuple(shape[1:]) != self.geometry:
            raise ValueError(f"image geometry {tuple(shape[1:])} does not match model {self.geometry}")

    def forward(self, x, params=None) -> Tensor:
        """Logits for a batch. ``params`` may hold taped leaves (training only)."""
        self.check_images(x)
        p = self.params if params is None else params
        h = x
        for layer in self.layers:
            op = layer[0]
            if op == "conv":
                h = conv2d(h, p[layer[1] + ".w"], p[layer[1] + ".b"], padding=layer[2])
            elif op == "affine":
                h = affine(h, p[layer[1] + ".w"], p[layer[1] + ".b"])
            elif op == "relu":
                h = relu(h)
            elif op == "avgpool2":
                h = avgpool2(h)
            elif op == "flatten":
                h = flatten(h)
            else:
                raise ValueError(f"unknown layer {op!r}")
        return h

    def predict(self, images) -> tuple[np.ndarray, np.ndarray]:
        """Class probabilities [batch, C] and per-sample max-probability confidence."""
        probs = softmax(self.forward(images)).data
        return probs, probs.max(axis=1)


def build_default(num_classes: int = 10, geometry=(3, 32, 32), seed: int = 0) -> Classifier:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    c, h, w = geometry
    rng = np.random.default_rng(seed)
    flat = 16 * ((h - 2) // 2) * ((w - 2) // 2)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    params = {
        "conv1.w": he((8, c, 3, 3), c * 9),
        "conv1.b": np.zeros(8),
        "conv2.w": he((16, 8, 3, 3), 8 * 9),
        "conv2.b": np.zeros(16),
        "fc1.w": he((HIDDEN, flat), flat),
        "fc1.b": np.zeros(HIDDEN),
        "fc2.w": he((num_classes, HIDDEN), HIDDEN) * 0.5,
        "fc2.b": np.zeros(num_classes),
    }
    layers = [
        ("conv", "conv1", "same"),
        ("relu",),
        ("conv", "conv2", "valid"),
        ("relu",),
        ("avgpool2",),
        ("flatten",),
        ("affine", "fc1"),
        ("relu",),
        ("affine", "fc2"),
    ]
    return Classifier(layers, params, num_classes, geometry)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def train_source(model: Classifier, images, labels, config: TrainConfig | None = None) -> list[float]:
    """Minibatch SGD with momentum on hard-label cross-entropy.

    Returns the mean training loss of every epoch.
    """
    config = config or TrainConfig()
    if model.frozen:
        raise FrozenError("cannot train a frozen classifier")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    model.check_images(images)

    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    curve = []
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            tape = Tape()
            leaves = {k: tape.leaf(v, k) for k, v in model.params.items()}
            logits = model.forward(Tensor(images[idx]), leaves)
            loss = soft_cross_entropy(one_hot(labels[idx], model.num_classes), log_softmax(logits))
            grads = backward(loss)
            for k, leaf in leaves.items():
                velocity[k] = config.momentum * velocity[k] + grads[leaf]
                model.params[k] -= config.lr * velocity[k]
            losses.append(float(loss.data))
            weights.append(len(idx))
        curve.append(float(np.average(losses, weights=weights)))
    return curve


def accuracy(model: Classifier, images, labels, batch_size: int = 500) -> float:
    labels = np.asarray(labels)
    hits = 0
    for start in range(0, len(labels), batch_size):
        probs, _ = model.predict(images[start : start + batch_size])
        hits += int((probs.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return hits / len(labels)


def freeze(model: Classifier) -> Classifier:
    return model.freeze()


def to_records(model: Classifier) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {
        "kind": "classifier",
        "version": 1,
        "layers": [list(layer) for layer in model.layers],
        "num_classes": model.num_classes,
        "geometry": list(model.geometry),
        "frozen": model.frozen,
        "param_order": list(model.params),
    }
    return meta, dict(model.params)


def from_records(meta: dict, tensors: dict, path="<records>") -> Classifier:
    if meta.get("kind") != "classifier":
        raise ckpt.CheckpointError(path, f"not a classifier checkpoint (kind={meta.get('kind')!r})")
    if meta.get("version") != 1:
        raise ckpt.CheckpointError(path, f"unsupported classifier version {meta.get('version')!r}")
    try:
        params = {k: tensors[k] for k in meta["param_order"]}
        model = Classifier(meta["layers"], params, meta["num_classes"], meta["geometry"], meta["frozen"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ckpt.CheckpointError(path, f"inconsistent classifier records: {exc}") from None
    if len(model.geometry) != 3:
        raise ckpt.CheckpointError(path, f"bad geometry {model.geometry}")
    return model


def save(model: Classifier, path, extra: dict[str, np.ndarray] | None = None, extra_meta: dict | None = None) -> bytes:
    meta, tensors = to_records(model)
    if extra_meta:
        meta.update(extra_meta)
    if extra:
        tensors.update(extra)
    return ckpt.write(path, meta, tensors)


def load(path, geometry=None) -> Classifier:
    meta, tensors = ckpt.read(path)
    model = from_records(meta, tensors, path)
    if geometry is not None and tuple(geometry) != model.geometry:
        raise ckpt.CheckpointError(path, f"geometry {model.geometry} does not match expected {tuple(geometry)}")
    return model
