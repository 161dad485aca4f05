import dataclasses

import numpy as np
import pytest

from smartnet import accounting as acc
from smartnet.accounting import ArchSpec, LayerDesc
from smartnet.errors import ConfigError
from smartnet.layers import BatchNorm2d, ConditionalConv2d, DualBatchNorm2d
from smartnet.masks import MaskPlan
from smartnet.model import desk_resnet


def random_arch(r, idx):
    """Conv/BN chain with random shapes, stage tags and a linear head."""
    layers = []
    ci = int(r.integers(1, 4))
    hw = int(r.integers(4, 9))
    n_conv = int(r.integers(2, 5))
    stages = sorted(r.integers(0, 4, n_conv).tolist())
    for i in range(n_conv):
        co = int(r.integers(1, 5))
        k = int(r.choice([1, 2, 3]))
        pad = int(r.integers(0, 2))
        stride = int(r.integers(1, 3))
        if hw + 2 * pad < k:
            pad = k
        conv = LayerDesc(f"c{i}", "conv", ci, co, k, stride, pad, (hw, hw), stages[i])
        layers.append(conv)
        if r.random() < 0.7:
            layers.append(LayerDesc(f"b{i}", "bn", co, co, in_hw=conv.out_hw))
        ci, hw = co, conv.out_hw[0]
    layers.append(LayerDesc("fc", "linear", ci, int(r.integers(2, 6))))
    return ArchSpec(f"rand{idx}", layers)


def random_plan(r, arch):
    pattern = "".join(r.choice(["D", "S"], 4))
    cc = round(float(r.uniform(0.1, 0.9)), 3)
    ca = round(float(r.uniform(0.1, 1.0 - cc + 0.05)), 3)
    lo = max(0.0, cc + ca - 1.0)
    ci = round(float(r.uniform(lo, min(cc, ca))), 3)
    ci = min(max(ci, lo), min(cc, ca))
    return arch.plan(pattern, cc, ca, ci, seed=int(r.integers(0, 1000)))


def materialize(arch, plan):
    """Masks exactly as a model would generate them (conv index order)."""
    return {l.name: plan.masks_for(l.name, (l.co, l.ci, l.k, l.k), i) for i, l in enumerate(arch.convs())}


def loop_nest_macs(arch, masks, path):
    """Count one multiply per (output position, non-zero kernel weight)."""
    count = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            bits = masks[layer.name][0 if path == "clean" else 1].bits
            oh, ow = layer.out_hw
            for o in range(layer.co):
                for i in range(oh):
                    for j in range(ow):
                        for c in range(layer.ci):
                            for di in range(layer.k):
                                for dj in range(layer.k):
                                    if bits[o, c, di, dj]:
                                        count += 1
        elif layer.kind == "linear":
            for _ in range(layer.co):
                for _ in range(layer.ci):
                    count += 1
    return count


def popcount_params(arch, masks, path):
    total = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            total += masks[layer.name][0 if path == "clean" else 1].popcount()
        elif layer.kind == "bn":
            total += 2 * layer.co
        else:
            total += layer.ci * layer.co + layer.co
    return total


@pytest.mark.parametrize("path", ["clean", "adv"])
def test_oracle_equivalence_random_archs(path):
    r = np.random.default_rng(99)
    for idx in range(20):
        arch = random_arch(r, idx)
        plan = random_plan(r, arch)
        masks = materialize(arch, plan)
        assert acc.mac_count(arch, plan, path) == loop_nest_macs(arch, masks, path)
        assert acc.count_params(arch, plan, path) == popcount_params(arch, masks, path)


def test_dense_plan_is_normalized_one():
    arch = acc.resnet34_cifar()
    report = acc.cost_report(arch, MaskPlan.dense())
    assert report.nonzero_params_clean_path == report.dense_total_params
    assert report.normalized_params_adv == 1.0


def test_toy_single_conv():
    arch = ArchSpec("toy", [LayerDesc("c", "conv", 1, 4, 5, 1, 2, (3, 3), 0)])
    assert arch.convs()[0].weight_count == 100
    plan = arch.plan("S", 0.5, 0.5, 0.25)
    assert acc.count_params(arch, plan, "clean") == 50
    assert acc.count_conv_params(arch, plan, "adv") == 50


def test_one_by_one_conv_macs():
    arch = ArchSpec("toy", [LayerDesc("c", "conv", 1, 1, 1, 1, 0, (4, 4), 0)])
    assert acc.mac_count(arch, MaskPlan.dense(), "clean") == 16


def test_half_density_halves_macs():
    arch = ArchSpec("toy", [LayerDesc("c", "conv", 4, 4, 3, 1, 1, (6, 6), 0)])
    dense = acc.mac_count(arch, MaskPlan.dense(), "adv")
    assert acc.mac_count(arch, arch.plan("S", 0.5, 0.5, 0.0), "adv") * 2 == dense


def test_clean_path_has_no_add_overhead():
    arch = acc.resnet34_cifar()
    assert acc.add_overhead(arch, arch.plan(), "clean") == 0
    assert acc.noise_scalar_mults(arch, "adv") == len(arch.convs())


def test_resnet34_structure():
    arch = acc.resnet34_cifar()
    convs = arch.convs()
    assert len(convs) == 1 + 2 * (3 + 4 + 6 + 3) + 3
    assert acc.dense_conv_params(arch) == 21_259_968
    assert acc.dense_total_params(arch) == 21_282_122


def test_monotonicity():
    arch = acc.desk_arch()
    levels = [(0.9, 0.9, 0.85), (0.7, 0.9, 0.65), (0.7, 0.6, 0.6), (0.5, 0.6, 0.3), (0.5, 0.5, 0.2), (0.3, 0.2, 0.1)]
    prev = None
    for cc, ca, ci in levels:
        plan = arch.plan("SSSS", cc, ca, ci)
        counts = [f(arch, plan, p) for f in (acc.count_params, acc.mac_count, acc.add_overhead) for p in ("clean", "adv")]
        if prev is not None:
            assert all(a <= b for a, b in zip(counts, prev))
        prev = counts


@pytest.mark.parametrize("pattern,ci", [("DDSS", 0.25), ("SSSS", 0.0), ("DSDS", 0.5)])
def test_consistency_with_live_model(pattern, ci):
    model = desk_resnet(pattern=pattern, c_shared=ci, seed=3)
    arch = acc.arch_from_model(model)
    for path, sel in (("clean", 0.0), ("adv", 1.0)):
        total = 0
        for _, conv in model.convs():
            w = conv.clean_weights() if path == "clean" else conv.adversarial_weights(1.0)
            total += int(np.count_nonzero(w.data))
        bns = [m.select(_sel(sel)) for _, m in model.dual_bns()]
        total += sum(b.gamma.size + b.beta.size for b in bns)
        total += model.fc.weight.size + model.fc.bias.size
        assert acc.count_params(arch, model.plan, path) == total


def _sel(lam):
    from smartnet.layers import PathSelector

    return PathSelector(lam)


def test_arch_dict_round_trip():
    arch = acc.resnet34_cifar()
    again = ArchSpec.from_dict(arch.to_dict())
    assert again == arch


def test_arch_validation():
    from smartnet.errors import DimensionError

    with pytest.raises(DimensionError):
        ArchSpec("bad", [LayerDesc("c", "conv", 1, 2, 5, 1, 0, (3, 3))])
    with pytest.raises(DimensionError):
        ArchSpec("bad", [LayerDesc("c", "conv", 1, 2, 3, 1, 1, (3, 3)), LayerDesc("b", "bn", 3, 3)])


def _report():
    arch = acc.resnet34_cifar()
    return acc.cost_report(arch, arch.plan())


def test_energy_add_cost_zero():
    rep = _report()
    e = acc.energy_estimate(rep, {"mac_cost": 3.0, "add_cost": 0.0, "shift_add_cost": 0.0})
    assert e["energy"] == rep.mac_count_adv * 3.0


def test_energy_equal_costs_proportional_to_ops():
    rep = _report()
    e = acc.energy_estimate(rep, {"mac_cost": 2.0, "add_cost": 2.0})
    assert e["energy"] == 2.0 * (rep.mac_count_adv + rep.add_overhead_adv)


def test_energy_shift_add_ratio():
    rep = dataclasses.replace(_report(), add_overhead_adv=0)
    costs = {"mac_cost": 5.0, "add_cost": 5.0, "shift_add_cost": 9.0}
    as_shift = acc.energy_estimate(rep, costs, mac_as_shift_add=True)
    as_add = acc.energy_estimate(rep, costs, mac_as_shift_add=False)
    assert as_shift["shift_add_to_add_ratio"] == 1.8
    assert as_shift["energy"] / as_add["energy"] == 1.8
    assert "shift_add_to_add_ratio=1.8" in rep.to_text()


@pytest.mark.parametrize("bad", [{"mac_cost": -1, "add_cost": 1}, {"mac_cost": 0, "add_cost": 0},
                                 {"add_cost": 1}, {"mac_cost": float("nan"), "add_cost": 1}])
def test_energy_rejects_bad_costs(bad):
    with pytest.raises(ConfigError):
        acc.energy_estimate(_report(), bad)


def test_report_records_and_text():
    rep = _report()
    keys = dict(rep.records())
    assert keys["add_overhead_clean"] == 0
    assert "normalized params" in rep.to_text()
    with pytest.raises(ConfigError):
        acc.count_params(acc.desk_arch(), MaskPlan.dense(), "both")
