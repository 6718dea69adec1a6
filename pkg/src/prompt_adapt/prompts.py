"""Additive image prompts: the domain-specific (DSP) and domain-agnostic (DAP) patches."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ckpt
from .tensor import Tape, Tensor, add, backward, log_softmax, place, soft_cross_entropy

ROLES = ("dsp", "dap")
POLICIES = ("random", "fixed")


@dataclass
class PromptPatch:
    values: np.ndarray  # [channels, h, w]
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown prompt role {self.role!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"prompt values must be [c, h, w], got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.role} prompt has non-finite values")

    @property
    def size(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @classmethod
    def zeros(cls, role: str, channels: int, size: int | tuple[int, int]) -> "PromptPatch":
        h, w = (size, size) if isinstance(size, int) else size
        return cls(np.zeros((channels, h, w)), role)


@dataclass
class PromptPair:
    dsp: PromptPatch
    dap: PromptPatch
    policy: str = "random"
    fixed_anchor: tuple[int, int] = (0, 0)
    offset: int = 0  # DAP column minus DSP column; negative puts DAP to the left

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown placement policy {self.policy!r}")
        if self.dsp.role != "dsp" or self.dap.role != "dap":
            raise ValueError("PromptPair expects a dsp patch and a dap patch")
        if np.shares_memory(self.dsp.values, self.dap.values):
            raise ValueError("DSP and DAP must not share storage")
        self.fixed_anchor = tuple(int(a) for a in self.fixed_anchor)

    @classmethod
    def zeros(cls, channels=3, dsp_size=8, dap_size=8, **kw) -> "PromptPair":
        return cls(PromptPatch.zeros("dsp", channels, dsp_size), PromptPatch.zeros("dap", channels, dap_size), **kw)

    def with_values(self, dsp: np.ndarray, dap: np.ndarray) -> "PromptPair":
        return replace(self, dsp=PromptPatch(np.array(dsp), "dsp"), dap=PromptPatch(np.array(dap), "dap"))

    def copy(self) -> "PromptPair":
        return self.with_values(self.dsp.values, self.dap.values)


@dataclass(frozen=True)
class Placement:
    dsp_anchor: tuple[int, int]
    dap_anchor: tuple[int, int]
    dsp_size: tuple[int, int]
    dap_size: tuple[int, int]
    geometry: tuple[int, int, int]

    def __post_init__(self):
        _, H, W = self.geometry
        for name, (r, c), (h, w) in (
            ("dsp", self.dsp_anchor, self.dsp_size),
            ("dap", self.dap_anchor, self.dap_size),
        ):
            if r < 0 or c < 0 or r + h > H or c + w > W:
                raise ValueError(f"{name} patch {h}x{w} at {(r, c)} falls outside a {H}x{W} image")


def _dap_anchor(pair: PromptPair, dsp_anchor, geometry) -> tuple[int, int]:
    _, H, W = geometry
    h, w = pair.dap.size
    r = min(max(dsp_anchor[0], 0), H - h)
    c = min(max(dsp_anchor[1] + pair.offset, 0), W - w)
    return r, c


def sample_placement(pair: PromptPair, geometry, rng: np.random.Generator | None = None) -> Placement:
    """Anchor the DSP (fixed or uniform over valid anchors); the DAP follows at ``pair.offset``."""
    geometry = tuple(geometry)
    _, H, W = geometry
    for patch in (pair.dsp, pair.dap):
        h, w = patch.size
        if h > H or w > W:
            raise ValueError(f"{patch.role} patch {h}x{w} does not fit a {H}x{W} image")
    if pair.policy == "fixed":
        anchor = pair.fixed_anchor
    else:
        h, w = pair.dsp.size
        anchor = (int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1)))
    return Placement(anchor, _dap_anchor(pair, anchor, geometry), pair.dsp.size, pair.dap.size, geometry)


def prompted(images, dsp, dap, placement: Placement) -> Tensor:
    """``images + dsp + dap`` with each patch summed on its own support.

    ``dsp`` / ``dap`` may be taped leaves, in which case the result is
    differentiable with respect to them.
    """
    canvas = placement.geometry
    out = add(images, place(dsp, canvas, placement.dsp_anchor))
    return add(out, place(dap, canvas, placement.dap_anchor))


def apply_prompts(images, pair: PromptPair, placement: Placement) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != tuple(placement.geometry):
        raise ValueError(f"images {images.shape} do not match placement geometry {placement.geometry}")
    return prompted(images, pair.dsp.values, pair.dap.values, placement).data


def prompt_gradients(grad_wrt_input: np.ndarray, placement: Placement) -> tuple[np.ndarray, np.ndarray]:
    """Patch gradients from an input gradient: batch sum restricted to each support."""
    g = np.asarray(grad_wrt_input)
    if g.ndim != 4 or g.shape[1:] != tuple(placement.geometry):
        raise ValueError(f"gradient shape {g.shape} does not match geometry {placement.geometry}")
    total = g.sum(axis=0)

    def crop(anchor, size):
        r, c = anchor
        return total[:, r : r + size[0], c : c + size[1]].copy()

    return crop(placement.dsp_anchor, placement.dsp_size), crop(placement.dap_anchor, placement.dap_size)


def init_prompts(
    pair: PromptPair,
    images,
    labels,
    model,
    epochs: int = 3,
    lr: float = 0.05,
    batch_size: int = 100,
    seed: int = 0,
    train_dsp: bool = True,
    train_dap: bool = True,
) -> PromptPair:
    """Zero both patches, then fit them on labelled source data with hard-label CE.

    The classifier stays frozen; only the enabled patches move.
    """
    from .classifier import one_hot

    if len(labels) == 0:
        raise ValueError("empty source set")
    pair = pair.with_values(np.zeros_like(pair.dsp.values), np.zeros_like(pair.dap.values))
    if epochs <= 0 or lr == 0 or not (train_dsp or train_dap):
        return pair
    geometry = model.geometry
    rng = np.random.default_rng(seed)
    dsp, dap = pair.dsp.values.copy(), pair.dap.values.copy()
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            placement = sample_placement(pair, geometry, rng)
            tape = Tape()
            dsp_leaf, dap_leaf = tape.leaf(dsp, "prompt.dsp"), tape.leaf(dap, "prompt.dap")
            logits = model.forward(prompted(images[idx], dsp_leaf, dap_leaf, placement))
            loss = soft_cross_entropy(one_hot(labels[idx], model.num_classes), log_softmax(logits))
            grads = backward(loss)
            if train_dsp:
                dsp = dsp - lr * grads[dsp_leaf]
            if train_dap:
                dap = dap - lr * grads[dap_leaf]
    return pair.with_values(dsp, dap)


def prompt_records(pair: PromptPair, prefix: str = "prompt") -> tuple[dict, dict[str, np.ndarray]]:
    meta = {
        f"{prefix}.policy": pair.policy,
        f"{prefix}.fixed_anchor": list(pair.fixed_anchor),
        f"{prefix}.offset": pair.offset,
    }
    return meta, {f"{prefix}.dsp": pair.dsp.values, f"{prefix}.dap": pair.dap.values}


def save_prompts(path, **pairs: PromptPair) -> bytes:
    """Write one or more named prompt pairs, e.g. ``save_prompts(p, prompt=teacher, student=student)``."""
    meta, tensors = {"kind": "prompts", "version": 1, "pairs": list(pairs)}, {}
    for prefix, pair in pairs.items():
        m, t = prompt_records(pair, prefix)
        meta.update(m)
        tensors.update(t)
    return ckpt.write(path, meta, tensors)


def load_prompts(path, prefix: str = "prompt") -> PromptPair:
    meta, tensors = ckpt.read(path)
    try:
        return PromptPair(
            PromptPatch(tensors[f"{prefix}.dsp"], "dsp"),
            PromptPatch(tensors[f"{prefix}.dap"], "dap"),
            policy=meta[f"{prefix}.policy"],
            fixed_anchor=tuple(meta[f"{prefix}.fixed_anchor"]),
            offset=meta[f"{prefix}.offset"],
        )
    except KeyError as exc:
        raise ckpt.CheckpointError(path, f"missing prompt record {exc}") from None
