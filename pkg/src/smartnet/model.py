"""Residual networks with either plain or two-path conditional layers."""

from __future__ import annotations

import hashlib
from contextlib import ExitStack, contextmanager
from typing import Iterator, Optional, Sequence

import numpy as np

from smartnet import ops
from smartnet.layers import (
    CLEAN,
    BatchNorm2d,
    ConditionalConv2d,
    Conv2d,
    DualBatchNorm2d,
    Linear,
    Module,
    PathSelector,
)
from smartnet.masks import MaskPlan
from smartnet.rng import substream
from smartnet.tensor import Tensor


class BasicBlock(Module):
    def __init__(self, make_conv, make_bn, in_ch: int, out_ch: int, stride: int, prefix: str):
        self.conv1 = make_conv(f"{prefix}.conv1", in_ch, out_ch, 3, stride, 1)
        self.bn1 = make_bn(out_ch)
        self.conv2 = make_conv(f"{prefix}.conv2", out_ch, out_ch, 3, 1, 1)
        self.bn2 = make_bn(out_ch)
        self.stride, self.in_ch, self.out_ch = stride, in_ch, out_ch

    def forward(self, x: Tensor, selector: PathSelector) -> Tensor:
        out = ops.relu(self.bn1.forward(self.conv1.forward(x, selector), selector))
        out = self.bn2.forward(self.conv2.forward(out, selector), selector)
        if self.stride != 1 or self.in_ch != self.out_ch:
            shortcut = ops.shortcut_pad(x, self.stride, self.out_ch)
        else:
            shortcut = x
        return ops.relu(ops.add(out, shortcut))


class ResNet(Module):
    """Stem conv, one basic block per stage, global pooling and a linear head.

    With ``conditional=True`` every convolution is a
    :class:`~smartnet.layers.ConditionalConv2d` with masks from ``plan`` and
    every BN is dual; otherwise the network is a plain single-path ResNet.
    Residual shortcuts are parameter-free (subsample + zero channel padding).
    """

    def __init__(
        self,
        widths: Sequence[int] = (8, 16, 32, 64),
        in_channels: int = 1,
        num_classes: int = 10,
        input_hw: tuple[int, int] = (28, 28),
        conditional: bool = True,
        plan: Optional[MaskPlan] = None,
        seed: int = 0,
        alpha_init: float = 0.25,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
        dtype=np.float32,
    ):
        self.widths = tuple(int(w) for w in widths)
        self.in_channels, self.num_classes = in_channels, num_classes
        self.input_hw = tuple(input_hw)
        self.conditional = conditional
        self.plan = plan if plan is not None else MaskPlan.dense(seed)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        init_rng = substream(seed, "init")
        conv_index = [0]
        self.conv_names: list[str] = []

        def make_conv(name, cin, cout, k, stride, padding):
            idx = conv_index[0]
            conv_index[0] += 1
            self.conv_names.append(name)
            if not conditional:
                return Conv2d(cin, cout, k, stride, padding, rng=init_rng, dtype=dtype)
            mask_c, mask_a = self.plan.masks_for(name, (cout, cin, k, k), idx)
            return ConditionalConv2d(
                cin, cout, k, stride, padding, mask_c, mask_a, alpha_init,
                rng=init_rng, noise_rng=substream(seed, "noise", idx), dtype=dtype,
            )

        def make_bn(ch):
            cls = DualBatchNorm2d if conditional else BatchNorm2d
            return cls(ch, bn_momentum, bn_eps, dtype)

        self.stem = make_conv("stem", in_channels, self.widths[0], 3, 1, 1)
        self.stem_bn = make_bn(self.widths[0])
        blocks = []
        prev = self.widths[0]
        for s, w in enumerate(self.widths):
            stride = 1 if s == 0 else 2
            blocks.append(BasicBlock(make_conv, make_bn, prev, w, stride, f"stage{s}"))
            prev = w
        self.blocks = blocks
        self.fc = Linear(prev, num_classes, rng=init_rng, dtype=dtype)

    # ------------------------------------------------------------ structure
    def layer_stages(self) -> list[tuple[str, Optional[int]]]:
        """``(conv_name, stage)`` pairs; the stem has stage ``None``."""
        out = []
        for name in self.conv_names:
            out.append((name, None if name == "stem" else int(name[5:].split(".")[0])))
        return out

    def convs(self) -> list[tuple[str, Module]]:
        found = [(self.conv_names[0], self.stem)]
        for s, block in enumerate(self.blocks):
            found.append((f"stage{s}.conv1", block.conv1))
            found.append((f"stage{s}.conv2", block.conv2))
        return found

    def conditional_layers(self) -> list[ConditionalConv2d]:
        return [c for _, c in self.convs() if isinstance(c, ConditionalConv2d)]

    def dual_bns(self) -> list[tuple[str, DualBatchNorm2d]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, DualBatchNorm2d)]

    def alphas(self) -> list[float]:
        return [float(c.alpha.data) for c in self.conditional_layers()]

    # ------------------------------------------------------------ forward
    def forward(self, x, selector: PathSelector | float = CLEAN) -> Tensor:
        if not isinstance(selector, PathSelector):
            selector = PathSelector(float(selector))
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        out = ops.relu(self.stem_bn.forward(self.stem.forward(x, selector), selector))
        for block in self.blocks:
            out = block.forward(out, selector)
        return self.fc.forward(ops.global_avgpool(out), selector)

    __call__ = forward

    def predict(self, x, selector: PathSelector | float = CLEAN) -> np.ndarray:
        return np.argmax(self.forward(x, selector).data, axis=1)

    # ------------------------------------------------------------ noise
    @contextmanager
    def fixed_noise(self):
        with ExitStack() as stack:
            for layer in self.conditional_layers():
                stack.enter_context(layer.fixed_noise())
            yield self

    def resample_noise(self) -> None:
        for layer in self.conditional_layers():
            layer.resample_noise()

    def noise_rng_states(self) -> list[dict]:
        return [layer.noise_rng.bit_generator.state for layer in self.conditional_layers()]

    def set_noise_rng_states(self, states: Sequence[dict]) -> None:
        for layer, st in zip(self.conditional_layers(), states):
            layer.noise_rng.bit_generator.state = st

    @contextmanager
    def noise_streams(self, seed: int, name: str = "eval"):
        """Temporarily swap every noise RNG for a ``(seed, name)`` substream."""
        layers = self.conditional_layers()
        saved = [(l.noise_rng, l._z, l._sigma) for l in layers]
        for i, layer in enumerate(layers):
            layer.noise_rng = substream(seed, name, i)
            layer._z = layer._sigma = None
        try:
            yield self
        finally:
            for layer, (r, z, s) in zip(layers, saved):
                layer.noise_rng, layer._z, layer._sigma = r, z, s

    # ------------------------------------------------------------ state
    def state_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.named_parameters():
            yield name, p.data
        yield from self.named_buffers()

    def masks(self) -> list[tuple[str, object, object]]:
        return [(n, c.mask_clean, c.mask_adv) for n, c in self.convs() if isinstance(c, ConditionalConv2d)]

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def mask_hash(self) -> str:
        h = hashlib.sha256()
        for name, mc, ma in self.masks():
            h.update(name.encode())
            h.update(mc.digest().encode())
            h.update(ma.digest().encode())
        return h.hexdigest()

    def config(self) -> dict:
        return {
            "widths": list(self.widths),
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "input_hw": list(self.input_hw),
            "conditional": self.conditional,
            "plan": self.plan.to_dict(),
            "seed": self.seed,
            "dtype": self.dtype.name,
        }


def desk_resnet(
    conditional: bool = True,
    pattern: str = "DDSS",
    c_clean: float = 0.5,
    c_adv: float = 0.5,
    c_shared: float = 0.25,
    widths: Sequence[int] = (8, 16, 32, 64),
    in_channels: int = 1,
    num_classes: int = 10,
    input_hw: tuple[int, int] = (28, 28),
    seed: int = 0,
    mask_seed: Optional[int] = None,
    dtype=np.float32,
    **kwargs,
) -> ResNet:
    """Desk-scale stand-in for ResNet34: stem + four basic blocks (8 block convs)."""
    stages = [("stem", None)] + [(f"stage{s}.conv{j}", s) for s in range(len(widths)) for j in (1, 2)]
    if conditional:
        plan = MaskPlan.from_pattern(stages, pattern, c_clean, c_adv, c_shared,
                                     seed if mask_seed is None else mask_seed)
    else:
        plan = MaskPlan.dense(seed)
    return ResNet(widths, in_channels, num_classes, input_hw, conditional, plan, seed, dtype=dtype, **kwargs)


def unconditional_copy(model: ResNet, selector: PathSelector) -> ResNet:
    """Plain network whose weights and BN are the selected path of ``model``.

    Noise (if any) is taken from each layer's last draw, so call under
    ``model.fixed_noise()`` after :meth:`ResNet.resample_noise` for lambda > 0.
    """
    plain = ResNet(model.widths, model.in_channels, model.num_classes, model.input_hw,
                   conditional=False, seed=model.seed, dtype=model.dtype)
    for (_, src), (_, dst) in zip(model.convs(), plain.convs()):
        w = src.effective_weight(selector)
        dst.weight.data = w.data.copy()
    src_bns = [m.select(selector) for _, m in model.dual_bns()]
    dst_bns = [m for _, m in plain.named_modules() if isinstance(m, BatchNorm2d)]
    for s, d in zip(src_bns, dst_bns):
        d.gamma.data = s.gamma.data.copy()
        d.beta.data = s.beta.data.copy()
        d.running_mean[...] = s.running_mean
        d.running_var[...] = s.running_var
    plain.fc.weight.data = model.fc.weight.data.copy()
    plain.fc.bias.data = model.fc.bias.data.copy()
    plain.train(model.training)
    return plain
