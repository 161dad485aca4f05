"""Network building blocks, including the two-path conditional convolution."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from smartnet import ops
from smartnet.masks import SparsityMask, apply_mask
from smartnet.tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor. ``decay`` marks whether weight decay applies."""

    __slots__ = ("decay",)

    def __init__(self, data, dtype=None, name: str | None = None, decay: bool = True):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.decay = decay


@dataclass(frozen=True)
class PathSelector:
    """Chooses the expert path for one forward pass.

    ``lam == 0`` runs the clean path; any ``lam > 0`` runs the adversarial
    path (adversarial mask and BN) with weight noise scaled by ``lam``.
    """

    lam: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def adversarial(self) -> bool:
        return self.lam > 0.0

    @property
    def noise_scale(self) -> float:
        return float(self.lam)


CLEAN = PathSelector(0.0)
ADVERSARIAL = PathSelector(1.0)


class Module:
    """Minimal container: walks attributes in definition order for parameters."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self.named_modules(prefix):
            for bname, buf in mod._own_buffers():
                yield (f"{name}.{bname}" if name else bname), buf

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    """Plain convolution without bias."""

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, padding: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k)), dtype=dtype)
        self.stride, self.padding, self.k = stride, padding, k
        self.in_ch, self.out_ch = in_ch, out_ch

    def effective_weight(self, selector: PathSelector = CLEAN) -> Tensor:
        return self.weight

    def forward(self, x: Tensor, selector: PathSelector = CLEAN) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels), dtype=dtype, decay=False)
        self.beta = Parameter(np.zeros(channels), dtype=dtype, decay=False)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        self.update_stats = True

    def _own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x: Tensor, selector: PathSelector = CLEAN) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps, self.update_stats,
        )


class DualBatchNorm2d(Module):
    """Two independent BNs; the selector decides which one a forward touches."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.bn_clean = BatchNorm2d(channels, momentum, eps, dtype)
        self.bn_adv = BatchNorm2d(channels, momentum, eps, dtype)

    def select(self, selector: PathSelector) -> BatchNorm2d:
        return self.bn_adv if selector.adversarial else self.bn_clean

    def forward(self, x: Tensor, selector: PathSelector = CLEAN) -> Tensor:
        return self.select(selector).forward(x, selector)


class ConditionalConv2d(Module):
    """Shared weight tensor with a clean and a noisy adversarial view.

    The clean path convolves with ``theta * mask_clean``. The adversarial
    path convolves with ``(theta + scale * alpha * eta) * mask_adv`` where
    ``eta ~ N(0, std(theta)^2)``; the std is recomputed from ``theta`` before
    each draw and treated as a constant by the gradient.

    Noise modes: ``"fresh"`` draws a new ``eta`` on every adversarial
    forward (training); ``"fixed"`` reuses the last draw until
    :meth:`resample_noise` is called (evaluation, gradient checks).
    """

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, padding: int = 1,
                 mask_clean: Optional[SparsityMask] = None, mask_adv: Optional[SparsityMask] = None,
                 alpha_init: float = 0.25, rng: Optional[np.random.Generator] = None,
                 noise_rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        shape = (out_ch, in_ch, k, k)
        self.theta = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), dtype=dtype)
        self.alpha = Parameter(np.asarray(alpha_init), dtype=dtype, decay=False)
        self.mask_clean = mask_clean if mask_clean is not None else SparsityMask.ones(shape)
        self.mask_adv = mask_adv if mask_adv is not None else SparsityMask.ones(shape)
        for m in (self.mask_clean, self.mask_adv):
            if m.shape != shape:
                raise ValueError(f"mask shape {m.shape} does not match weight {shape}")
        self.noise_rng = noise_rng or np.random.default_rng(1)
        self.noise_mode = "fresh"
        self._z: Optional[np.ndarray] = None
        self._sigma: Optional[float] = None
        self.stride, self.padding, self.k = stride, padding, k
        self.in_ch, self.out_ch = in_ch, out_ch

    @property
    def layer_weight_std(self) -> float:
        return float(self.theta.data.std())

    @property
    def last_noise(self) -> Optional[np.ndarray]:
        """The most recent ``eta`` sample (``None`` before the first draw)."""
        if self._z is None:
            return None
        return (self._sigma * self._z).astype(self.theta.dtype)

    def resample_noise(self) -> np.ndarray:
        self._sigma = self.layer_weight_std
        self._z = self.noise_rng.standard_normal(self.theta.shape).astype(self.theta.dtype)
        return self.last_noise

    @contextlib.contextmanager
    def fixed_noise(self):
        prev = self.noise_mode
        self.noise_mode = "fixed"
        try:
            yield self
        finally:
            self.noise_mode = prev

    def clean_weights(self) -> Tensor:
        return apply_mask(self.theta, self.mask_clean)

    def adversarial_weights(self, noise_scale: float = 1.0) -> Tensor:
        if self.noise_mode == "fresh" or self._z is None:
            self.resample_noise()
        eta = self.last_noise * np.asarray(noise_scale, dtype=self.theta.dtype)
        noisy = ops.add(self.theta, ops.mul(self.alpha, eta))
        return apply_mask(noisy, self.mask_adv)

    def effective_weight(self, selector: PathSelector = CLEAN) -> Tensor:
        if selector.adversarial:
            return self.adversarial_weights(selector.noise_scale)
        return self.clean_weights()

    def forward(self, x: Tensor, selector: PathSelector = CLEAN) -> Tensor:
        return ops.conv2d(x, self.effective_weight(selector), self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, out_features), dtype=dtype)

    def forward(self, x: Tensor, selector: PathSelector = CLEAN) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


@contextlib.contextmanager
def frozen_bn_stats(model: Module):
    """Use batch statistics without touching running statistics."""
    bns = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    prev = [bn.update_stats for bn in bns]
    for bn in bns:
        bn.update_stats = False
    try:
        yield
    finally:
        for bn, p in zip(bns, prev):
            bn.update_stats = p
