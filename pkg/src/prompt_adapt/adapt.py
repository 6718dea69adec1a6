"""Online teacher-student prompt adaptation over a stream of unlabeled batches."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .homeostasis import (
    THRESHOLD,
    XI,
    DetectorState,
    ImportanceState,
    accumulate_importance,
    consolidate_on_shift,
    detect_shift,
    penalty,
)
from .prompts import PromptPair, prompted, sample_placement
from .tensor import Tape, backward, log_softmax, soft_cross_entropy, softmax

AUGMENT_POLICIES = ("default", "identity")


class NumericError(ArithmeticError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


@dataclass
class AdaptConfig:
    lr: float = 0.05
    ema: float = 0.999
    alpha: float = 1.0
    threshold: float = THRESHOLD
    xi: float = XI
    batch_size: int = 100
    augment: str = "default"
    placement: str = "random"
    fixed_anchor: tuple[int, int] = (0, 0)
    dsp_size: int = 8
    dap_size: int = 8
    offset: int = 0
    warmup_epochs: int = 3
    disable_dsp: bool = False
    disable_dap: bool = False
    signed_delta_conf: bool = False
    nonneg_eta: bool = False
    seed: int = 7

    def __post_init__(self):
        if not 0 <= self.ema < 1:
            raise ValueError("ema momentum must be in [0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.alpha < 0 or self.xi <= 0 or self.threshold <= 0:
            raise ValueError("need alpha >= 0, xi > 0, threshold > 0")
        if self.augment not in AUGMENT_POLICIES:
            raise ValueError(f"unknown augment policy {self.augment!r}")
        if self.batch_size < 1 or self.dsp_size < 1 or self.dap_size < 1:
            raise ValueError("batch_size and prompt sizes must be >= 1")
        self.fixed_anchor = tuple(int(a) for a in self.fixed_anchor)


# ------------------------------------------------------------ augmentation


def augment(images: np.ndarray, policy: str, rng: np.random.Generator, force_flip: bool = False) -> np.ndarray:
    """Random horizontal flip, +-2 px translation with zero fill, Gaussian noise (sigma 0.02)."""
    images = np.asarray(images, dtype=np.float64)
    if policy == "identity":
        return images.copy()
    if policy != "default":
        raise ValueError(f"unknown augment policy {policy!r}")
    n = len(images)
    flips = np.ones(n, dtype=bool) if force_flip else rng.random(n) < 0.5
    shifts = rng.integers(-2, 3, size=(n, 2))
    out = np.zeros_like(images)
    for i in range(n):
        img = images[i, :, :, ::-1] if flips[i] else images[i]
        dy, dx = shifts[i]
        out[i] = _translate(img, dy, dx)
    return out + rng.normal(0.0, 0.02, size=out.shape)


def flip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images)[..., ::-1])


def _translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    H, W = img.shape[-2:]
    out[:, max(dy, 0) : H + min(dy, 0), max(dx, 0) : W + min(dx, 0)] = img[
        :, max(-dy, 0) : H + min(-dy, 0), max(-dx, 0) : W + min(-dx, 0)
    ]
    return out


# --------------------------------------------------------------------- EMA


def ema_update(teacher: PromptPair, student: PromptPair, m: float) -> PromptPair:
    if not 0 <= m < 1:
        raise ValueError("ema momentum must be in [0, 1)")
    if teacher.dsp.values.shape != student.dsp.values.shape or teacher.dap.values.shape != student.dap.values.shape:
        raise ValueError("teacher and student prompts differ in shape")
    return teacher.with_values(
        m * teacher.dsp.values + (1 - m) * student.dsp.values,
        m * teacher.dap.values + (1 - m) * student.dap.values,
    )


# ------------------------------------------------------------------- state


@dataclass
class AdaptState:
    student: PromptPair
    teacher: PromptPair
    importance: ImportanceState
    detector: DetectorState
    config: AdaptConfig
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def start(cls, prompts: PromptPair, config: AdaptConfig) -> "AdaptState":
        return cls(
            student=prompts.copy(),
            teacher=prompts.copy(),
            importance=ImportanceState.fresh(prompts.dap.values),
            detector=DetectorState(config.threshold, config.signed_delta_conf),
            config=config,
            rng=np.random.default_rng([config.seed, 1]),
        )


@dataclass
class StepResult:
    probs: np.ndarray
    confidence: float
    delta_conf: float | None
    shift: bool
    loss_dsp: float
    loss_dap: float
    loss_penalty: float


def adapt_batch(state: AdaptState, model, images, update: bool = True) -> StepResult:
    """Predict with the current teacher prompts, then take one prompt update step.

    ``update=False`` only predicts (the state is still advanced through the
    detector so replays stay aligned).
    """
    images = np.asarray(images, dtype=np.float64)
    model.check_images(images)
    cfg = state.config
    placement = sample_placement(state.student, model.geometry, state.rng)

    # evaluation uses prompts learned up to the previous batch
    x_teacher = prompted(images, state.teacher.dsp.values, state.teacher.dap.values, placement).data
    probs, conf = model.predict(x_teacher)
    batch_conf = float(conf.mean())
    shift, delta = detect_shift(state.detector, min(max(batch_conf, 0.0), 1.0))
    if shift:
        consolidate_on_shift(state.importance, state.student.dap.values, cfg.xi, cfg.nonneg_eta)
    if not update:
        state.step += 1
        return StepResult(probs, batch_conf, delta, shift, math.nan, math.nan, math.nan)

    soft_targets = softmax(model.forward(augment(x_teacher, cfg.augment, state.rng))).data

    tape = Tape()
    dsp = tape.leaf(state.student.dsp.values, "prompt.dsp")
    dap = tape.leaf(state.student.dap.values, "prompt.dap")
    log_probs = log_softmax(model.forward(prompted(images, dsp, dap, placement)))
    ce = soft_cross_entropy(soft_targets, log_probs)
    grads = backward(ce)
    pen_loss, pen_grad = penalty(state.importance, state.student.dap.values, cfg.alpha)
    loss_ce = float(ce.data)
    if not (math.isfinite(loss_ce) and math.isfinite(pen_loss)):
        raise NumericError(state.step, "loss")

    new_dsp, new_dap = state.student.dsp.values, state.student.dap.values
    if not cfg.disable_dsp:
        new_dsp = new_dsp - cfg.lr * grads[dsp]
    if not cfg.disable_dap:
        new_dap = new_dap - cfg.lr * (grads[dap] + pen_grad)
    if not (np.all(np.isfinite(new_dsp)) and np.all(np.isfinite(new_dap))):
        raise NumericError(state.step, "prompt update")
    accumulate_importance(state.importance, grads[dap], new_dap - state.student.dap.values)
    state.student = state.student.with_values(new_dsp, new_dap)
    state.teacher = ema_update(state.teacher, state.student, cfg.ema)
    state.step += 1
    return StepResult(probs, batch_conf, delta, shift, loss_ce, loss_ce + pen_loss, pen_loss)


# ----------------------------------------------------------------- metrics

CSV_COLUMNS = (
    "step",
    "domain_truth",
    "corruption",
    "severity",
    "batch_error",
    "confidence",
    "delta_conf",
    "shift_triggered",
    "loss_dsp",
    "loss_dap",
    "loss_penalty",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)

    def append(self, row: dict, round_: int = 0) -> None:
        self.rows.append(row)
        self.rounds.append(round_)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r["batch_error"] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != set(CSV_COLUMNS):
        raise ValueError(f"{path}: not a metrics file")
    for r in rows:
        r["step"] = int(r["step"])
        r["domain_truth"] = int(r["domain_truth"])
        r["severity"] = int(r["severity"])
        r["batch_error"] = float(r["batch_error"])
        r["shift_triggered"] = r["shift_triggered"] == "1"
    return rows


def run_stream(state: AdaptState, model, stream, update: bool = True) -> MetricsLog:
    """Adapt over every batch in order, scoring each prediction before its update."""
    if len(stream) == 0:
        raise ValueError("empty stream")
    log = MetricsLog()
    for batch in stream:
        res = adapt_batch(state, model, batch.images, update=update)
        # labels and domain tags are only touched here, after the step
        err = float(np.mean(res.probs.argmax(axis=1) != batch.labels))
        log.append(
            {
                "step": state.step - 1,
                "domain_truth": batch.domain_index,
                "corruption": batch.domain.family,
                "severity": batch.domain.severity,
                "batch_error": err,
                "confidence": res.confidence,
                "delta_conf": res.delta_conf,
                "shift_triggered": res.shift,
                "loss_dsp": res.loss_dsp,
                "loss_dap": res.loss_dap,
                "loss_penalty": res.loss_penalty,
            },
            batch.domain.round,
        )
    return log


def evaluate_frozen(model, stream) -> np.ndarray:
    """Per-batch error of the bare frozen model (the source-only baseline)."""
    out = []
    for batch in stream:
        probs, _ = model.predict(batch.images)
        out.append(float(np.mean(probs.argmax(axis=1) != batch.labels)))
    return np.array(out)
