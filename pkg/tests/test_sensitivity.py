import numpy as np
import pytest

from smartnet.data import Dataset
from smartnet.errors import InfeasiblePlanError, UsageError
from smartnet.masks import round_half_up
from smartnet.model import desk_resnet
from smartnet.sensitivity import SensitivityConfig, UtilityTable, _redistribute, sensitivity_analysis, sensitivity_run
from smartnet.tensor import Tensor

SMALL = dict(widths=(4, 4, 8, 8), input_hw=(8, 8), num_classes=3)


def make_small(seed):
    return desk_resnet(conditional=False, seed=seed, **SMALL)


def _data(n=96):
    r = np.random.default_rng(0)
    return Dataset(r.random((n, 1, 8, 8)).astype(np.float32), r.integers(0, 3, n), 3)


CFG = SensitivityConfig(epochs=2, batch_size=16, seed=0)


def test_full_density_keeps_everything():
    table = sensitivity_run(_data(), 1.0, CFG, make_small)
    assert table.utility == [1.0] * len(table.layers)


def test_budget_conserved_after_every_redistribution():
    seen = []
    table = sensitivity_run(_data(), 0.2, CFG, make_small, on_redistribute=seen.append)
    total = sum(table.params)
    assert table.budget == round_half_up(0.2 * total)
    assert len(seen) == 3  # every half epoch, none on the final step
    assert all(b == table.budget for b in seen)
    assert sum(round(u * p) for u, p in zip(table.utility, table.params)) == table.budget


def test_infeasible_budget():
    with pytest.raises(InfeasiblePlanError):
        sensitivity_run(_data(), 1e-5, CFG, make_small)


def test_density_out_of_range():
    with pytest.raises(UsageError):
        sensitivity_run(_data(), 0.0, CFG, make_small)


def test_redistribute_moves_budget():
    w = [Tensor(np.array([[0.1, 0.0], [3.0, 0.0]]), requires_grad=True), Tensor(np.array([0.5, 0.0, 0.0]))]
    m = [np.array([[True, False], [True, False]]), np.array([True, False, False])]
    g = [np.array([[0.0, 0.2], [0.0, 0.0]]), np.array([0.0, 0.0, 9.0])]
    _redistribute(w, m, g, 2)
    # drops the two smallest actives (0.1, 0.5), grows the two largest gradients
    assert m[0].tolist() == [[False, True], [True, False]]
    assert m[1].tolist() == [False, False, True]
    assert sum(x.sum() for x in m) == 3
    assert w[0].data[0, 1] == 0.0 and w[1].data[2] == 0.0


def test_spearman_sign():
    t = UtilityTable(0.1, 0, ["a", "b", "c"], [1, 1, 1], [0.9, 0.5, 0.1], 1)
    assert t.spearman == pytest.approx(-1.0)
    assert t.rows()[2] == {"density": 0.1, "seed": 0, "depth": 2, "layer": "c", "params": 1, "utility": 0.1}


def test_analysis_runs_each_density():
    tables = sensitivity_analysis(_data(), (0.3, 1.0), SensitivityConfig(epochs=1, batch_size=16), make_small)
    assert [t.density for t in tables] == [0.3, 1.0]
