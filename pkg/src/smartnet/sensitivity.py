"""Layer-wise parameter utility under a global non-zero budget.

A plain network is trained with one global budget of non-zero conv
weights. Every half epoch the smallest-magnitude active weights are pruned
and the same number of inactive weights with the largest gradient magnitude
are regrown, so the budget moves between layers while its total stays fixed.
A layer's utility is its fraction of surviving weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from smartnet import ops
from smartnet.data import BatchPlan, Dataset, batches
from smartnet.errors import InfeasiblePlanError, UsageError
from smartnet.masks import round_half_up
from smartnet.model import ResNet, desk_resnet
from smartnet.rng import substream
from smartnet.tensor import Tape
from smartnet.training import SGD, cosine_lr


@dataclass
class SensitivityConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    prune_fraction: float = 0.3  # of the budget, annealed by a cosine over the run
    seed: int = 0


@dataclass
class UtilityTable:
    density: float
    seed: int
    layers: list[str]
    params: list[int]
    utility: list[float]
    budget: int
    budget_log: list[int] = field(default_factory=list)

    @property
    def spearman(self) -> float:
        """Rank correlation between layer depth and utility."""
        rho = spearmanr(np.arange(len(self.utility)), self.utility).statistic
        return float(rho)

    def rows(self) -> list[dict]:
        return [
            {"density": self.density, "seed": self.seed, "depth": i, "layer": n, "params": p, "utility": u}
            for i, (n, p, u) in enumerate(zip(self.layers, self.params, self.utility))
        ]


def _prunable(model: ResNet):
    return [(name, conv.weight) for name, conv in model.convs()]


def _redistribute(weights, masks, grads, n_move: int) -> None:
    """Prune ``n_move`` smallest active weights, regrow ``n_move`` by gradient magnitude."""
    sizes = [m.size for m in masks]
    offsets = np.cumsum([0] + sizes)
    flat_mask = np.concatenate([m.reshape(-1) for m in masks])
    flat_w = np.concatenate([np.abs(w.data).reshape(-1) for w in weights])
    flat_g = np.concatenate([np.abs(g).reshape(-1) for g in grads])
    active = np.flatnonzero(flat_mask)
    inactive = np.flatnonzero(~flat_mask)
    n_move = min(n_move, active.size, inactive.size)
    if n_move <= 0:
        return
    # stable ordering keeps ties deterministic
    drop = active[np.argsort(flat_w[active], kind="stable")[:n_move]]
    grow = inactive[np.argsort(-flat_g[inactive], kind="stable")[:n_move]]
    flat_mask[drop] = False
    flat_mask[grow] = True
    for i, (w, m) in enumerate(zip(weights, masks)):
        seg = flat_mask[offsets[i] : offsets[i + 1]].reshape(m.shape)
        newly = seg & ~m
        m[...] = seg
        w.data[newly] = 0.0
        w.data *= m


def sensitivity_run(data: Dataset, d: float, cfg: SensitivityConfig,
                    make_model: Optional[Callable[[int], ResNet]] = None,
                    on_redistribute: Optional[Callable[[int], None]] = None) -> UtilityTable:
    if not 0.0 < d <= 1.0:
        raise UsageError(f"density must lie in (0, 1], got {d}")
    make_model = make_model or (lambda seed: desk_resnet(conditional=False, seed=seed))
    model = make_model(cfg.seed)
    layers = _prunable(model)
    names = [n for n, _ in layers]
    weights = [w for _, w in layers]
    total = sum(w.size for w in weights)
    budget = round_half_up(d * total)
    if budget < len(weights):
        raise InfeasiblePlanError(f"budget of {budget} non-zeros cannot cover {len(weights)} layers")

    # start from a uniform random layout at the target density
    rng = substream(cfg.seed, "mask")
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=budget, replace=False)] = True
    masks, start = [], 0
    for w in weights:
        masks.append(flat[start : start + w.size].reshape(w.shape).copy())
        start += w.size
    for w, m in zip(weights, masks):
        w.data *= m

    budget_log = [int(sum(int(m.sum()) for m in masks))]
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    velocity = {id(p): v for p, v in zip(opt.params, opt.velocity)}
    plan = BatchPlan(cfg.batch_size, cfg.seed)
    steps_per_epoch = len(data) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    every = max(1, steps_per_epoch // 2)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        for x, y in batches(data, plan, epoch):
            opt.lr = cosine_lr(cfg.lr, step, total_steps)
            opt.zero_grad()
            with Tape() as tape:
                loss = ops.softmax_cross_entropy(model(x), y)
            tape.backward(loss)
            grads = [w.grad.copy() for w in weights]
            opt.step()
            for w, m in zip(weights, masks):
                w.data *= m
                velocity[id(w)] *= m
            step += 1
            if d < 1.0 and step % every == 0 and step < total_steps:
                frac = cfg.prune_fraction * 0.5 * (1 + math.cos(math.pi * step / total_steps))
                _redistribute(weights, masks, grads, round_half_up(frac * budget))
                for w, m in zip(weights, masks):
                    velocity[id(w)] *= m
                budget_log.append(int(sum(int(m.sum()) for m in masks)))
                if on_redistribute is not None:
                    on_redistribute(budget_log[-1])
    model.eval()
    return UtilityTable(
        density=d,
        seed=cfg.seed,
        layers=names,
        params=[w.size for w in weights],
        utility=[float(m.mean()) for m in masks],
        budget=budget,
        budget_log=budget_log,
    )


def sensitivity_analysis(data: Dataset, densities: Sequence[float] = (0.05, 0.1, 0.2),
                         cfg: Optional[SensitivityConfig] = None,
                         make_model: Optional[Callable[[int], ResNet]] = None) -> list[UtilityTable]:
    """One budgeted training run per density; returns the per-layer utility tables."""
    cfg = cfg or SensitivityConfig()
    return [sensitivity_run(data, d, cfg, make_model) for d in densities]
