"""Importance tracking for the DAP and confidence-jump domain-shift detection.

Importance follows a synaptic-intelligence style path integral: every
optimizer step adds ``-grad * step`` per parameter. At a detected shift the
accumulated importance is folded into the homeostatic factor

    lam += eta / (delta**2 + xi)

where ``delta`` is the total DAP change over the domain that just ended,
and the penalty ``alpha * sum(lam * (theta - theta_star)**2)`` anchors the
DAP to its value at the end of the previous domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

XI = 0.01
THRESHOLD = 0.25


@dataclass
class ImportanceState:
    eta: np.ndarray
    lam: np.ndarray
    theta_star: np.ndarray
    theta_start: np.ndarray
    tau: int = 0

    @classmethod
    def fresh(cls, theta) -> "ImportanceState":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(np.zeros_like(theta), np.zeros_like(theta), theta.copy(), theta.copy())


def _check(state: ImportanceState, name: str, arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != state.eta.shape:
        raise ValueError(f"{name}: shape {arr.shape} does not match DAP {state.eta.shape}")
    return arr


def accumulate_importance(state: ImportanceState, grad, step) -> ImportanceState:
    grad, step = _check(state, "grad", grad), _check(state, "step", step)
    state.eta -= grad * step
    return state


def consolidate_on_shift(state: ImportanceState, theta_now, xi: float = XI, nonneg_eta: bool = False) -> ImportanceState:
    theta_now = _check(state, "theta", theta_now)
    eta = np.maximum(state.eta, 0.0) if nonneg_eta else state.eta
    delta = theta_now - state.theta_start
    state.lam = state.lam + eta / (delta**2 + xi)
    state.theta_star = theta_now.copy()
    state.theta_start = theta_now.copy()
    state.eta = np.zeros_like(state.eta)
    state.tau += 1
    return state


def penalty(state: ImportanceState, theta, alpha: float) -> tuple[float, np.ndarray]:
    """Anchoring loss and its gradient with respect to ``theta``."""
    theta = _check(state, "theta", theta)
    diff = theta - state.theta_star
    loss = float(alpha * np.sum(state.lam * diff**2))
    return loss, 2.0 * alpha * state.lam * diff


@dataclass
class DetectorState:
    threshold: float = THRESHOLD
    signed: bool = False
    previous: float | None = None

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")


def detect_shift(detector: DetectorState, confidence: float) -> tuple[bool, float | None]:
    """Compare batch confidence with the previous batch; returns (triggered, delta)."""
    confidence = float(confidence)
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence {confidence} outside [0, 1]")
    prev, detector.previous = detector.previous, confidence
    if prev is None:
        return False, None
    delta = confidence - prev
    jump = delta if detector.signed else abs(delta)
    return jump > detector.threshold, delta
