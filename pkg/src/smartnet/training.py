"""SMART training loop, the fixed-lambda PGD-AT baseline, and lambda-sweep evaluation."""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from smartnet import ops
from smartnet.attacks import AttackConfig, run_attack
from smartnet.data import BatchPlan, Dataset, batches
from smartnet.errors import NumericError, UsageError
from smartnet.layers import ConditionalConv2d, Module, Parameter, PathSelector, frozen_bn_stats
from smartnet.model import ResNet
from smartnet.rng import substream
from smartnet.tensor import Tape, Tensor

log = logging.getLogger(__name__)

TEST_LAMBDAS = (0.0, 0.2, 0.7, 1.0)


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine: bool = True
    seed: int = 0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.1, steps=7))
    augment: bool = False
    eval_samples: int = 1000  # held-out images per epoch for the history; 0 disables
    eval_attack: Optional[AttackConfig] = None  # defaults to ``attack``

    def __post_init__(self):
        if self.batch_size % 2:
            raise UsageError("batch_size must be even (each batch is split in halves)")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")


class SGD:
    """Momentum SGD; weight decay only on parameters flagged ``decay``."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise UsageError("a parameter is registered twice")
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.updates = 0

    def step(self) -> int:
        """Apply one update; returns the number of parameters touched."""
        touched = 0
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and getattr(p, "decay", True):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype, copy=False)
            touched += 1
        self.updates += 1
        return touched

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def compute_loss(model: ResNet, x, y, lam: float) -> Tensor:
    """Cross-entropy through the path chosen by ``lam`` (0 = clean, 1 = adversarial)."""
    if model.training and lam not in (0, 1):
        raise UsageError(f"training uses only the boundary lambdas 0 and 1, got {lam}")
    return ops.softmax_cross_entropy(model(x, PathSelector(float(lam))), y)


def weighted_loss(l_clean: Tensor, l_adv: Tensor, lam: float) -> Tensor:
    """``(1 - lam) * L_C + lam * L_A``."""
    return ops.add(ops.mul(l_clean, 1.0 - lam), ops.mul(l_adv, lam))


def _loss_fn(model: Module, selector: PathSelector):
    def fn(xt: Tensor, y):
        return ops.softmax_cross_entropy(model(xt, selector), y)

    return fn


def make_adversarial(model: ResNet, x, y, cfg: AttackConfig, selector: PathSelector,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Attack the selected path; BN running statistics stay untouched."""
    with frozen_bn_stats(model):
        return run_attack(_loss_fn(model, selector), x, y, cfg, rng)


def _layer_diagnostics(model: ResNet) -> list[dict]:
    out = []
    for name, conv in model.convs():
        w = conv.theta.data if isinstance(conv, ConditionalConv2d) else conv.weight.data
        finite = np.isfinite(w)
        absmax = float(np.abs(w[finite]).max()) if finite.any() else float("nan")
        rec = {"layer": name, "finite": bool(finite.all()), "absmax": absmax}
        if isinstance(conv, ConditionalConv2d):
            rec["alpha"] = float(conv.alpha.data)
        out.append(rec)
    return out


def _check_finite(loss: Tensor, model: ResNet, epoch: int, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericError(
            f"non-finite loss at epoch {epoch} step {step}; layer stats: "
            + json.dumps(_layer_diagnostics(model))
        )


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    path: Optional[Path] = None

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def smart_train(model: ResNet, data: Dataset, cfg: TrainConfig, heldout: Optional[Dataset] = None,
                history_path=None, on_epoch: Optional[Callable[[int, ResNet], None]] = None) -> tuple[ResNet, History]:
    """Train both expert paths at once.

    Each batch is split: the first half gives the clean loss through the
    clean path, the second half is attacked (against the adversarial path)
    and gives the adversarial loss. One SGD step is taken on the mean of
    the two losses.
    """
    if not model.conditional:
        raise UsageError("smart_train needs a conditional model")
    history = History(path=Path(history_path) if history_path else None)
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    plan = BatchPlan(cfg.batch_size, cfg.seed, cfg.augment)
    steps_per_epoch = len(data) // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    attack_rng = substream(cfg.seed, "attack")
    half = cfg.batch_size // 2
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        sums = np.zeros(2)
        for x, y in batches(data, plan, epoch):
            if cfg.cosine:
                opt.lr = cosine_lr(cfg.lr, step, total)
            x_clean, y_clean = x[:half], y[:half]
            x_adv = make_adversarial(model, x[half:], y[half:], cfg.attack, PathSelector(1.0), attack_rng)
            opt.zero_grad()
            with Tape() as tape:
                l_clean = compute_loss(model, x_clean, y_clean, 0)
                l_adv = compute_loss(model, x_adv, y[half:], 1)
                loss = weighted_loss(l_clean, l_adv, 0.5)
            _check_finite(loss, model, epoch, step)
            tape.backward(loss)
            opt.step()
            sums += (float(l_clean.data), float(l_adv.data))
            step += 1
        rec = {
            "epoch": epoch,
            "L_C": sums[0] / max(steps_per_epoch, 1),
            "L_A": sums[1] / max(steps_per_epoch, 1),
            "alpha": model.alphas(),
        }
        if heldout is not None and cfg.eval_samples:
            sub = heldout.head(cfg.eval_samples)
            attack = cfg.eval_attack or cfg.attack
            for lam in (0.0, 1.0):
                res = evaluate(model, sub, lam, attack, seed=cfg.seed)
                rec[f"CA@{lam:g}"], rec[f"RA@{lam:g}"] = res["CA"], res["RA"]
        history.append(rec)
        log.info("epoch %d %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(epoch, model)
    model.eval()
    return model, history


def pgd_at_train(model: ResNet, data: Dataset, cfg: TrainConfig, lambda_fixed: float,
                 heldout: Optional[Dataset] = None, history_path=None) -> tuple[ResNet, History]:
    """Single-path adversarial training on ``(1 - lam) * L_clean + lam * L_adv``."""
    if not 0.0 <= lambda_fixed <= 1.0:
        raise UsageError("lambda_fixed must lie in [0, 1]")
    if model.conditional:
        raise UsageError("pgd_at_train expects a plain (dense, single-BN) model")
    history = History(path=Path(history_path) if history_path else None)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    plan = BatchPlan(cfg.batch_size, cfg.seed, cfg.augment)
    total = (len(data) // cfg.batch_size) * cfg.epochs
    attack_rng = substream(cfg.seed, "attack")
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        sums = np.zeros(2)
        n_steps = 0
        for x, y in batches(data, plan, epoch):
            if cfg.cosine:
                opt.lr = cosine_lr(cfg.lr, step, total)
            x_adv = None
            if lambda_fixed > 0:
                x_adv = make_adversarial(model, x, y, cfg.attack, PathSelector(0.0), attack_rng)
            opt.zero_grad()
            with Tape() as tape:
                terms = []
                if lambda_fixed < 1:
                    l_clean = ops.softmax_cross_entropy(model(x), y)
                    terms.append(ops.mul(l_clean, 1.0 - lambda_fixed))
                    sums[0] += float(l_clean.data)
                if x_adv is not None:
                    l_adv = ops.softmax_cross_entropy(model(x_adv), y)
                    terms.append(ops.mul(l_adv, lambda_fixed))
                    sums[1] += float(l_adv.data)
                loss = terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])
            _check_finite(loss, model, epoch, step)
            tape.backward(loss)
            opt.step()
            step += 1
            n_steps += 1
        rec = {"epoch": epoch, "L_C": sums[0] / max(n_steps, 1), "L_A": sums[1] / max(n_steps, 1)}
        if heldout is not None and cfg.eval_samples:
            res = evaluate(model, heldout.head(cfg.eval_samples), 0.0, cfg.eval_attack or cfg.attack, seed=cfg.seed)
            rec["CA"], rec["RA"] = res["CA"], res["RA"]
        history.append(rec)
    model.eval()
    return model, history


def evaluate(model: ResNet, data: Dataset, lam: float, attack: Optional[AttackConfig] = None,
             seed: int = 0, batch_size: int = 100, noise_per: str = "batch") -> dict:
    """Clean and robust accuracy (in %) through ``PathSelector(lam)``.

    Weight noise is drawn once per batch from an ``(seed, "eval")`` stream and
    held fixed for both the attack and the scoring forward, so results are
    reproducible and the training noise streams are left untouched.
    ``noise_per="forward"`` instead draws fresh noise for every forward pass
    (attack steps included), which matches how training attacks see the noise.
    """
    if noise_per not in ("batch", "forward"):
        raise UsageError(f"noise_per must be 'batch' or 'forward', got {noise_per!r}")
    selector = PathSelector(float(lam))
    was_training = model.training
    model.eval()
    attack_rng = substream(seed, "eval-attack")
    correct_clean = correct_robust = 0
    n = len(data)
    with model.noise_streams(seed, "eval"), (model.fixed_noise() if noise_per == "batch" else contextlib.nullcontext()):
        for start in range(0, n, batch_size):
            x = data.images[start : start + batch_size]
            y = data.labels[start : start + batch_size]
            if selector.adversarial and noise_per == "batch":
                model.resample_noise()
            correct_clean += int((model.predict(x, selector) == y).sum())
            if attack is not None:
                x_adv = make_adversarial(model, x, y, attack, selector, attack_rng)
                correct_robust += int((model.predict(x_adv, selector) == y).sum())
    model.train(was_training)
    out = {"lambda": float(lam), "CA": 100.0 * correct_clean / n}
    out["RA"] = 100.0 * correct_robust / n if attack is not None else None
    return out


def lambda_sweep(model: ResNet, data: Dataset, lambdas: Sequence[float] = TEST_LAMBDAS,
                 attack: Optional[AttackConfig] = None, seed: int = 0) -> list[dict]:
    return [evaluate(model, data, lam, attack, seed) for lam in lambdas]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
