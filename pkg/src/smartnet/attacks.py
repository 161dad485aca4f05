"""L-infinity gradient-sign attacks (PGD-k and FGSM)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from smartnet.tensor import Tape, Tensor

LossFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 7
    attack_step: Optional[float] = None  # None -> epsilon / 4
    random_start: bool = False
    clip_min: float = 0.0
    clip_max: float = 1.0
    kind: str = "pgd"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.attack_step is None:
            self.attack_step = self.epsilon / 4
        if self.steps > 0 and self.attack_step <= 0 and self.epsilon > 0:
            raise ValueError("attack_step must be > 0 when steps > 0")
        if self.kind not in ("pgd", "fgsm"):
            raise ValueError(f"unknown attack kind {self.kind!r}")


def project_linf(x_hat: np.ndarray, x: np.ndarray, epsilon: float,
                 clip_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Clamp into the epsilon-ball around ``x``, then into ``clip_range``."""
    eps = np.asarray(epsilon, dtype=x.dtype)
    out = np.clip(x_hat, x - eps, x + eps)
    return np.clip(out, clip_range[0], clip_range[1]).astype(x.dtype, copy=False)


def input_gradient(loss_fn: LossFn, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of ``loss_fn(x, y)`` w.r.t. ``x`` (parameters receive no grad)."""
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        loss = loss_fn(xt, y)
    tape.backward(loss, wrt=[xt])
    return xt.grad, float(loss.data)


def pgd_attack(loss_fn: LossFn, x, y, cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """k steps of ``x_hat <- Proj(x_hat + step * sign(grad))``.

    ``sign(0) == 0``, so a flat loss leaves the input unchanged.
    """
    x = np.asarray(x)
    clip = (cfg.clip_min, cfg.clip_max)
    x_hat = np.clip(x, *clip).astype(x.dtype, copy=True)
    if cfg.steps == 0 or cfg.epsilon == 0:
        return x_hat
    if cfg.random_start:
        rng = rng or np.random.default_rng(0)
        x_hat = project_linf(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape).astype(x.dtype), x, cfg.epsilon, clip)
    step = np.asarray(cfg.attack_step, dtype=x.dtype)
    for _ in range(cfg.steps):
        grad, _ = input_gradient(loss_fn, x_hat, y)
        x_hat = project_linf(x_hat + step * np.sign(grad), x, cfg.epsilon, clip)
    return x_hat


def fgsm_attack(loss_fn: LossFn, x, y, epsilon: float,
                clip_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Single step ``x + epsilon * sign(grad)`` clipped to ``clip_range``."""
    x = np.asarray(x)
    if epsilon == 0:
        return np.clip(x, *clip_range).astype(x.dtype, copy=True)
    grad, _ = input_gradient(loss_fn, x, y)
    out = x + np.asarray(epsilon, dtype=x.dtype) * np.sign(grad)
    return np.clip(out, *clip_range).astype(x.dtype, copy=False)


def run_attack(loss_fn: LossFn, x, y, cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if cfg.kind == "fgsm":
        return fgsm_attack(loss_fn, x, y, cfg.epsilon, (cfg.clip_min, cfg.clip_max))
    return pgd_attack(loss_fn, x, y, cfg, rng)
