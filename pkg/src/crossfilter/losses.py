"""Curated losses (CCE, BCE), the noise-robust L_q loss, MAE and the bi-quality risk.

The NumPy functions work on a single probability vector and are the reference
definitions; each has a closed-form gradient with respect to the logits.
:func:`per_sample_loss` is the batched torch counterpart used in training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import BadQ, LabelArity

CLIP_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    q: float = 0.5
    lambda_: float = 1.0
    clip_eps: float = CLIP_EPS
    curated: str = "cce"  # cce | bce | lq | mae
    noisy: str = "lq"  # lq | cce | mae

    def __post_init__(self):
        check_q(self.q)
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be nonnegative")
        if self.curated not in ("cce", "bce", "lq", "mae"):
            raise ValueError(f"unknown curated loss {self.curated!r}")
        if self.noisy not in ("lq", "cce", "mae"):
            raise ValueError(f"unknown noisy loss {self.noisy!r}")


def check_q(q: float) -> None:
    if not (0.0 < q <= 1.0):
        raise BadQ(f"q={q} outside (0, 1]")


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _is_multi_hot(y: np.ndarray) -> bool:
    return bool(np.all((y == 0) | (y == 1)) and y.sum() > 1)


def cce(p, y, clip_eps: float = CLIP_EPS) -> float:
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if _is_multi_hot(y):
        raise LabelArity("CCE needs a one-hot target")
    return float(-np.sum(y * np.log(np.clip(p, clip_eps, 1.0))))


def bce(p, y, clip_eps: float = CLIP_EPS) -> float:
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64)
    p = np.clip(p, clip_eps, 1.0 - clip_eps)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def lq(p, y, q: float, clip_eps: float = CLIP_EPS) -> float:
    """``(1 - s**q) / q`` with ``s`` the probability mass on the label set."""
    check_q(q)
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64)
    s = float(np.clip(np.dot(y, p), clip_eps, 1.0))
    # expm1 keeps precision when q is tiny
    return float(-np.expm1(q * np.log(s)) / q)


def mae(p, y) -> float:
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float(np.sum(np.abs(y - p)))


def combined_risk(curated_losses: Sequence[float], noisy_losses: Sequence[float], lambda_: float) -> float:
    risk = 0.0
    if len(curated_losses):
        risk += float(np.mean(curated_losses))
    if len(noisy_losses):
        risk += lambda_ * float(np.mean(noisy_losses))
    return risk


# Gradients with respect to the pre-activation logits (away from clamp boundaries).


def cce_grad(z, y) -> np.ndarray:
    p = softmax(z)
    y = np.asarray(y, dtype=np.float64)
    return p * y.sum() - y


def bce_grad(z, y) -> np.ndarray:
    return sigmoid(z) - np.asarray(y, dtype=np.float64)


def lq_grad(z, y, q: float) -> np.ndarray:
    check_q(q)
    p = softmax(z)
    y = np.asarray(y, dtype=np.float64)
    s = float(np.dot(y, p))
    return -(s ** (q - 1.0)) * (y * p - s * p)


def mae_grad(z, y) -> np.ndarray:
    p = softmax(z)
    g = np.sign(p - np.asarray(y, dtype=np.float64))
    return p * (g - np.dot(g, p))


# Batched torch losses; return one value per row.


def per_sample_loss(kind: str, logits: torch.Tensor, y: torch.Tensor, q: float = 0.5,
                    clip_eps: float = CLIP_EPS) -> torch.Tensor:
    if kind == "bce":
        p = torch.sigmoid(logits).clamp(clip_eps, 1.0 - clip_eps)
        return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).sum(dim=1)
    p = torch.softmax(logits, dim=1)
    if kind == "cce":
        return -(y * torch.log(p.clamp(clip_eps, 1.0))).sum(dim=1)
    if kind == "lq":
        check_q(q)
        s = (y * p).sum(dim=1).clamp(clip_eps, 1.0)
        return -torch.expm1(q * torch.log(s)) / q
    if kind == "mae":
        return (y - p).abs().sum(dim=1)
    raise ValueError(f"unknown loss {kind!r}")


def activation_for(kind: str) -> str:
    return "sigmoid" if kind == "bce" else "softmax"
