"""Analytic parameter, MAC and ADD counts for the two expert paths.

Counts are derived from layer shapes and the mask plan, never by
instrumenting kernels. Sparse layers use the same rounding as mask
generation, so a count always equals the popcount of the generated masks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from smartnet.errors import ConfigError, DimensionError
from smartnet.masks import MaskPlan, target_counts

PATHS = ("clean", "adv")


@dataclass(frozen=True)
class LayerDesc:
    name: str
    kind: str  # "conv" | "bn" | "linear"
    ci: int
    co: int
    k: int = 1
    stride: int = 1
    padding: int = 0
    in_hw: tuple[int, int] = (1, 1)
    stage: Optional[int] = None

    @property
    def out_hw(self) -> tuple[int, int]:
        if self.kind != "conv":
            return self.in_hw
        h, w = self.in_hw
        return (
            (h + 2 * self.padding - self.k) // self.stride + 1,
            (w + 2 * self.padding - self.k) // self.stride + 1,
        )

    @property
    def weight_count(self) -> int:
        if self.kind == "conv":
            return self.k * self.k * self.ci * self.co
        if self.kind == "linear":
            return self.ci * self.co
        return 0

    @property
    def dense_params(self) -> int:
        if self.kind == "bn":
            return 2 * self.co
        if self.kind == "linear":
            return self.ci * self.co + self.co
        return self.weight_count


@dataclass
class ArchSpec:
    name: str
    layers: list[LayerDesc]
    stage_tags: str = ""

    def __post_init__(self):
        names = set()
        last_conv_co = None
        for layer in self.layers:
            if layer.name in names:
                raise DimensionError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            if layer.kind == "conv":
                oh, ow = layer.out_hw
                if oh < 1 or ow < 1 or layer.stride < 1:
                    raise DimensionError(f"{layer.name}: empty output")
                last_conv_co = layer.co
            elif layer.kind == "bn":
                if last_conv_co is not None and layer.co != last_conv_co:
                    raise DimensionError(f"{layer.name}: BN width {layer.co} != conv width {last_conv_co}")
            elif layer.kind != "linear":
                raise DimensionError(f"unknown layer kind {layer.kind!r}")

    def convs(self) -> list[LayerDesc]:
        return [l for l in self.layers if l.kind == "conv"]

    def layer_stages(self) -> list[tuple[str, Optional[int]]]:
        return [(l.name, l.stage) for l in self.convs()]

    def plan(self, pattern: str = "DDSS", c_clean: float = 0.5, c_adv: float = 0.5,
             c_shared: float = 0.25, seed: int = 0) -> MaskPlan:
        return MaskPlan.from_pattern(self.layer_stages(), pattern, c_clean, c_adv, c_shared, seed)

    def to_dict(self) -> dict:
        return {"name": self.name, "stage_tags": self.stage_tags, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        layers = []
        for l in d["layers"]:
            l = dict(l)
            l["in_hw"] = tuple(l.get("in_hw", (1, 1)))
            layers.append(LayerDesc(**l))
        return cls(d.get("name", "custom"), layers, d.get("stage_tags", ""))


def _resnet_arch(name: str, in_ch: int, hw: int, widths: Sequence[int], blocks: Sequence[int],
                 num_classes: int, shortcut_conv: bool) -> ArchSpec:
    layers = [LayerDesc("stem", "conv", in_ch, widths[0], 3, 1, 1, (hw, hw), None),
              LayerDesc("stem_bn", "bn", widths[0], widths[0], in_hw=(hw, hw))]
    prev = widths[0]
    for s, (w, nb) in enumerate(zip(widths, blocks)):
        for b in range(nb):
            stride = 2 if (s > 0 and b == 0) else 1
            p = f"stage{s}" if nb == 1 else f"stage{s}.block{b}"
            c1 = LayerDesc(f"{p}.conv1", "conv", prev, w, 3, stride, 1, (hw, hw), s)
            layers += [c1, LayerDesc(f"{p}.bn1", "bn", w, w, in_hw=c1.out_hw)]
            ohw = c1.out_hw
            layers += [LayerDesc(f"{p}.conv2", "conv", w, w, 3, 1, 1, ohw, s),
                       LayerDesc(f"{p}.bn2", "bn", w, w, in_hw=ohw)]
            if shortcut_conv and (stride != 1 or prev != w):
                layers += [LayerDesc(f"{p}.shortcut", "conv", prev, w, 1, stride, 0, (hw, hw), s),
                           LayerDesc(f"{p}.shortcut_bn", "bn", w, w, in_hw=ohw)]
            prev, hw = w, ohw[0]
    layers.append(LayerDesc("fc", "linear", prev, num_classes))
    return ArchSpec(name, layers)


def resnet34_cifar(num_classes: int = 10) -> ArchSpec:
    """ResNet34 with a 3x3 stride-1 stem for 32x32 inputs and 1x1 projection shortcuts."""
    return _resnet_arch("resnet34-cifar", 3, 32, (64, 128, 256, 512), (3, 4, 6, 3), num_classes, True)


def desk_arch(widths: Sequence[int] = (8, 16, 32, 64), in_channels: int = 1, hw: int = 28,
              num_classes: int = 10) -> ArchSpec:
    """Shape description of :func:`smartnet.model.desk_resnet`."""
    return _resnet_arch("desk-resnet", in_channels, hw, widths, (1,) * len(widths), num_classes, False)


def arch_from_model(model) -> ArchSpec:
    return desk_arch(model.widths, model.in_channels, model.input_hw[0], model.num_classes)


ARCHS = {"resnet34": resnet34_cifar, "desk": desk_arch}


# ---------------------------------------------------------------- counting


def _check_path(path: str) -> None:
    if path not in PATHS:
        raise ConfigError(f"path must be one of {PATHS}, got {path!r}")


def conv_nonzeros(layer: LayerDesc, plan: MaskPlan, path: str) -> int:
    lp = plan.get(layer.name)
    n = layer.weight_count
    if lp.block_tag == "D":
        return n
    n_clean, n_adv, _ = target_counts(n, lp.c_clean, lp.c_adv, lp.c_shared)
    return n_clean if path == "clean" else n_adv


def dense_total_params(arch: ArchSpec) -> int:
    """Parameters of the unconditional network (one BN set, every weight present)."""
    return sum(l.dense_params for l in arch.layers)


def dense_conv_params(arch: ArchSpec) -> int:
    return sum(l.weight_count for l in arch.convs())


def count_params(arch: ArchSpec, plan: MaskPlan, path: str) -> int:
    """Non-zero parameters of one expert path: masked convs + that path's BN + classifier."""
    _check_path(path)
    total = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            total += conv_nonzeros(layer, plan, path)
        else:
            total += layer.dense_params
    return total


def count_conv_params(arch: ArchSpec, plan: MaskPlan, path: str) -> int:
    _check_path(path)
    return sum(conv_nonzeros(l, plan, path) for l in arch.convs())


def add_overhead(arch: ArchSpec, plan: MaskPlan, path: str) -> int:
    """Additions spent materializing ``theta + alpha * eta`` on the surviving weights.

    The clean path adds no noise, so its overhead is 0.
    """
    _check_path(path)
    if path == "clean":
        return 0
    return sum(conv_nonzeros(l, plan, "adv") for l in arch.convs())


def noise_scalar_mults(arch: ArchSpec, path: str) -> int:
    """One scalar gain per conditional layer on the adversarial path."""
    return 0 if path == "clean" else len(arch.convs())


def mac_count(arch: ArchSpec, plan: MaskPlan, path: str) -> int:
    """Multiply-accumulates of one inference; zero weights contribute nothing."""
    _check_path(path)
    total = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            oh, ow = layer.out_hw
            total += conv_nonzeros(layer, plan, path) * oh * ow
        elif layer.kind == "linear":
            total += layer.weight_count
    return total


@dataclass
class CostReport:
    arch: str
    dense_total_params: int
    dense_conv_params: int
    nonzero_params_clean_path: int
    nonzero_params_adv_path: int
    nonzero_conv_params_clean_path: int
    nonzero_conv_params_adv_path: int
    normalized_params_clean: float
    normalized_params_adv: float
    normalized_conv_params_clean: float
    normalized_conv_params_adv: float
    dense_macs: int
    mac_count_clean: int
    mac_count_adv: int
    mac_overhead_clean: int
    mac_overhead_adv: int
    add_overhead_clean: int
    add_overhead_adv: int
    noise_scalar_mults_adv: int
    energy: dict = field(default_factory=dict)

    def records(self) -> list[tuple[str, object]]:
        return [(k, v) for k, v in asdict(self).items() if k != "energy"] + [
            (f"energy.{k}", v) for k, v in self.energy.items()
        ]

    def to_text(self) -> str:
        rows = [
            ("", "clean (lambda=0)", "adversarial (lambda=1)"),
            ("non-zero params", f"{self.nonzero_params_clean_path:,}", f"{self.nonzero_params_adv_path:,}"),
            ("normalized params", f"{self.normalized_params_clean:.3f}", f"{self.normalized_params_adv:.3f}"),
            ("normalized conv params", f"{self.normalized_conv_params_clean:.3f}",
             f"{self.normalized_conv_params_adv:.3f}"),
            ("MACs", f"{self.mac_count_clean:,}", f"{self.mac_count_adv:,}"),
            ("MAC overhead", f"{self.mac_overhead_clean:,}", f"{self.mac_overhead_adv:,}"),
            ("ADD overhead", f"{self.add_overhead_clean:,}", f"{self.add_overhead_adv:,}"),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        lines = [f"arch: {self.arch}   dense params: {self.dense_total_params:,}"]
        lines += [f"{a:<{w0}}  {b:>{w1}}  {c:>22}" for a, b, c in rows]
        if self.energy:
            lines.append("energy: " + ", ".join(f"{k}={v}" for k, v in self.energy.items()))
        return "\n".join(lines)


def cost_report(arch: ArchSpec, plan: MaskPlan) -> CostReport:
    dense = dense_total_params(arch)
    dense_conv = dense_conv_params(arch)
    dense_macs = mac_count(arch, MaskPlan.dense(), "clean")
    p_c, p_a = count_params(arch, plan, "clean"), count_params(arch, plan, "adv")
    cp_c, cp_a = count_conv_params(arch, plan, "clean"), count_conv_params(arch, plan, "adv")
    m_c, m_a = mac_count(arch, plan, "clean"), mac_count(arch, plan, "adv")
    return CostReport(
        arch=arch.name,
        dense_total_params=dense,
        dense_conv_params=dense_conv,
        nonzero_params_clean_path=p_c,
        nonzero_params_adv_path=p_a,
        nonzero_conv_params_clean_path=cp_c,
        nonzero_conv_params_adv_path=cp_a,
        normalized_params_clean=p_c / dense,
        normalized_params_adv=p_a / dense,
        normalized_conv_params_clean=cp_c / dense_conv,
        normalized_conv_params_adv=cp_a / dense_conv,
        dense_macs=dense_macs,
        mac_count_clean=m_c,
        mac_count_adv=m_a,
        mac_overhead_clean=max(0, m_c - dense_macs),
        mac_overhead_adv=max(0, m_a - dense_macs),
        add_overhead_clean=add_overhead(arch, plan, "clean"),
        add_overhead_adv=add_overhead(arch, plan, "adv"),
        noise_scalar_mults_adv=noise_scalar_mults(arch, "adv"),
    )


def energy_estimate(report: CostReport, cost_table: dict, path: str = "adv",
                    mac_as_shift_add: bool = False) -> dict:
    """Weighted op count for one path under a user cost table.

    ``cost_table`` holds non-negative ``mac_cost``, ``add_cost`` and
    ``shift_add_cost`` (the last defaults to ``add_cost``). A zero cost
    removes that op class from the estimate. With ``mac_as_shift_add`` every multiply is charged as
    a shift-add. The returned dict echoes the cost ratios.
    """
    _check_path(path)
    try:
        mac_cost = float(cost_table["mac_cost"])
        add_cost = float(cost_table["add_cost"])
        shift_cost = float(cost_table.get("shift_add_cost", add_cost))
    except KeyError as exc:
        raise ConfigError(f"cost table is missing {exc}") from exc
    for key, val in (("mac_cost", mac_cost), ("add_cost", add_cost), ("shift_add_cost", shift_cost)):
        if not (math.isfinite(val) and val >= 0):
            raise ConfigError(f"{key} must be a finite non-negative number, got {val}")
    if mac_cost == add_cost == shift_cost == 0:
        raise ConfigError("cost table is all zeros")
    macs = report.mac_count_clean if path == "clean" else report.mac_count_adv
    adds = report.add_overhead_clean if path == "clean" else report.add_overhead_adv
    per_mac = shift_cost if mac_as_shift_add else mac_cost
    energy = macs * per_mac + adds * add_cost
    result = {
        "path": path,
        "energy": energy,
        "mac_to_add_ratio": mac_cost / add_cost if add_cost else math.inf,
        "shift_add_to_add_ratio": shift_cost / add_cost if add_cost else math.inf,
        "macs": macs,
        "adds": adds,
        "mac_as_shift_add": mac_as_shift_add,
    }
    report.energy = result
    return result
