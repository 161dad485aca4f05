"""Central finite-difference gradient checking."""

from __future__ import annotations

from contextlib import ExitStack
from typing import Callable, Optional, Sequence

import numpy as np

from smartnet.layers import ConditionalConv2d, Module
from smartnet.tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    model: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-4,
    params: Optional[Sequence[Tensor]] = None,
    include_input: bool = False,
    max_per_param: Optional[int] = None,
    seed: int = 0,
    selector=None,
) -> float:
    """Largest relative error between backprop and central differences.

    The scalar being differentiated is ``sum(r * model(x))`` with a fixed
    random ``r``, which exercises every output. Conditional layers are held
    to their current noise sample for the whole check.

    Args:
        model: a :class:`Module` or any callable mapping a Tensor to a Tensor.
        x: input array. Use float64 arrays and parameters for meaningful results.
        h: finite-difference step.
        params: tensors to check; defaults to ``model.parameters()``.
        include_input: also check the gradient with respect to ``x``.
        max_per_param: check at most this many randomly chosen entries per tensor.
        seed: seeds the projection and the entry sampling.
        selector: optional path selector passed as ``model(x, selector)``.

    Returns:
        The maximum relative error over all checked entries.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = model.parameters() if isinstance(model, Module) else []
    params = list(params)
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=include_input)
    forward = model if selector is None else (lambda t: model(t, selector))
    targets = params + ([xt] if include_input else [])

    with ExitStack() as stack:
        if isinstance(model, Module):
            for _, m in model.named_modules():
                if isinstance(m, ConditionalConv2d):
                    if m._z is None:
                        m.resample_noise()
                    stack.enter_context(m.fixed_noise())
        saved_bufs = []
        if isinstance(model, Module):
            saved_bufs = [(b, b.copy()) for _, b in model.named_buffers()]

        def restore_buffers():
            for b, v in saved_bufs:
                b[...] = v

        with Tape() as tape:
            out = forward(xt)
        r = rng.standard_normal(out.shape)

        def scalar() -> float:
            restore_buffers()
            return float(np.sum(r * forward(xt).data))

        tape.backward(out, wrt=targets, grad_output=r.astype(out.dtype))
        analytic = [t.grad.copy() for t in targets]
        restore_buffers()

        worst = 0.0
        for t, g in zip(targets, analytic):
            size = t.data.size
            idx = np.arange(size)
            if max_per_param is not None and size > max_per_param:
                idx = rng.choice(size, max_per_param, replace=False)
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                pos = np.unravel_index(i, t.data.shape)
                orig = t.data[pos]
                t.data[pos] = orig + h
                up = scalar()
                t.data[pos] = orig - h
                down = scalar()
                t.data[pos] = orig
                numeric[j] = (up - down) / (2 * h)
            if idx.size:
                worst = max(worst, float(relative_error(g.reshape(-1)[idx], numeric).max()))
        restore_buffers()
    return worst
