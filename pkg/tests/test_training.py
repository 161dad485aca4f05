import json
import math

import numpy as np
import pytest

from smartnet import ops
from smartnet.attacks import AttackConfig
from smartnet.data import Dataset, load_mnist5k
from smartnet.errors import NumericError, UsageError
from smartnet.layers import Parameter, PathSelector
from smartnet.model import desk_resnet
from smartnet.tensor import Tape
from smartnet.training import (
    SGD,
    TrainConfig,
    compute_loss,
    cosine_lr,
    evaluate,
    lambda_sweep,
    pgd_at_train,
    smart_train,
    weighted_loss,
)

SMALL = dict(widths=(4, 4, 8, 8), input_hw=(8, 8), num_classes=2)


def test_train_config_needs_even_batch():
    with pytest.raises(UsageError):
        TrainConfig(batch_size=33)


def test_cosine_schedule():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0)


def test_untrained_loss_near_ln10():
    model = desk_resnet(seed=0)
    model.eval()
    data = load_mnist5k("test").head(64)
    loss = compute_loss(model, data.images, data.labels, 0)
    assert abs(loss.item() - math.log(10)) < 0.2


def test_untrained_accuracy_near_chance():
    model = desk_resnet(seed=1)
    res = evaluate(model, load_mnist5k("test"), 0.0)
    assert abs(res["CA"] - 10.0) <= 3.0
    assert res["RA"] is None


def test_weighted_loss_is_linear_in_lambda():
    model = desk_resnet(seed=2, dtype=np.float64, **SMALL)
    model.eval()
    r = np.random.default_rng(0)
    x, y = r.random((6, 1, 8, 8)), r.integers(0, 2, 6)
    model.resample_noise()
    with model.fixed_noise():
        lc = compute_loss(model, x, y, 0)
        la = compute_loss(model, x, y, 1)
    mid = weighted_loss(lc, la, 0.5).item()
    assert mid == pytest.approx(0.5 * (lc.item() + la.item()), abs=1e-10)
    for lam in np.linspace(0, 1, 7):
        expected = (1 - lam) * lc.item() + lam * la.item()
        assert weighted_loss(lc, la, lam).item() == pytest.approx(expected, abs=1e-10)


def test_sgd_touches_each_parameter_once():
    a = Parameter(np.ones(3))
    b = Parameter(np.ones(2), decay=False)
    c = Parameter(np.ones(1))
    opt = SGD([a, b, c], lr=0.1, momentum=0.0, weight_decay=0.5)
    a.grad, b.grad = np.ones(3), np.ones(2)
    assert opt.step() == 2
    np.testing.assert_allclose(a.data, 1 - 0.1 * (1 + 0.5))
    np.testing.assert_allclose(b.data, 1 - 0.1)
    assert c.data.tolist() == [1.0]
    with pytest.raises(UsageError):
        SGD([a, a], 0.1)


def test_sgd_momentum():
    p = Parameter(np.zeros(1))
    opt = SGD([p], lr=1.0, momentum=0.9)
    for _ in range(2):
        p.grad = np.ones(1)
        opt.step()
    assert p.data[0] == pytest.approx(-(1 + 1.9))


def _separable(n=64):
    r = np.random.default_rng(3)
    labels = np.arange(n) % 2
    images = r.uniform(0.0, 0.2, (n, 1, 8, 8))
    images[labels == 1] += 0.7
    return Dataset(images.astype(np.float32), labels, 2)


def test_smart_train_separable_toy_with_zero_epsilon(tmp_path):
    data = _separable()
    model = desk_resnet(seed=0, **SMALL)
    masks = model.mask_hash()
    cfg = TrainConfig(epochs=4, batch_size=16, lr=0.05, attack=AttackConfig(0.0, 7), eval_samples=64)
    hist_path = tmp_path / "hist.jsonl"
    model, history = smart_train(model, data, cfg, heldout=data, history_path=hist_path)
    assert model.mask_hash() == masks
    assert evaluate(model, data, 0.0)["CA"] == 100.0
    assert evaluate(model, data, 1.0)["CA"] == 100.0
    lines = [json.loads(l) for l in hist_path.read_text().splitlines()]
    assert len(lines) == 4
    assert {"epoch", "L_C", "L_A", "alpha", "CA@0", "RA@0", "CA@1", "RA@1"} <= set(lines[0])
    assert len(lines[0]["alpha"]) == 9


def test_smart_train_needs_conditional_model():
    with pytest.raises(UsageError):
        smart_train(desk_resnet(conditional=False, **SMALL), _separable(), TrainConfig(epochs=1, batch_size=16))


def test_smart_step_updates_alpha_and_both_bns():
    model = desk_resnet(seed=1, **SMALL)
    before = model.alphas()
    bn_c = [bn.bn_clean.running_mean.copy() for _, bn in model.dual_bns()]
    bn_a = [bn.bn_adv.running_mean.copy() for _, bn in model.dual_bns()]
    cfg = TrainConfig(epochs=1, batch_size=16, attack=AttackConfig(0.1, 2), eval_samples=0)
    smart_train(model, _separable(16), cfg)
    assert model.alphas() != before
    assert all(not np.array_equal(a, b.bn_clean.running_mean) for a, (_, b) in zip(bn_c, model.dual_bns()))
    assert all(not np.array_equal(a, b.bn_adv.running_mean) for a, (_, b) in zip(bn_a, model.dual_bns()))


def test_smart_train_is_deterministic():
    hashes = []
    for _ in range(2):
        model = desk_resnet(seed=4, **SMALL)
        smart_train(model, _separable(32), TrainConfig(epochs=1, batch_size=16, attack=AttackConfig(0.1, 2),
                                                       eval_samples=0, seed=4))
        hashes.append(model.parameter_hash())
    assert hashes[0] == hashes[1]


def test_attack_does_not_touch_running_stats():
    from smartnet.training import make_adversarial

    model = desk_resnet(seed=5, **SMALL)
    model.train()
    before = [b.copy() for _, b in model.named_buffers()]
    x = _separable(8)
    make_adversarial(model, x.images, x.labels, AttackConfig(0.1, 3), PathSelector(1.0))
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, model.named_buffers()))


def test_nan_loss_aborts_with_diagnostics():
    model = desk_resnet(seed=0, **SMALL)
    model.conditional_layers()[2].theta.data[...] = np.nan
    with pytest.raises(NumericError) as err:
        smart_train(model, _separable(), TrainConfig(epochs=1, batch_size=16, attack=AttackConfig(0.0, 1)))
    msg = str(err.value)
    assert "epoch 0 step 0" in msg and "stage0.conv2" in msg and '"finite": false' in msg


def test_pgd_at_lambda_zero_never_attacks(monkeypatch):
    import smartnet.training as training

    def boom(*a, **k):
        raise AssertionError("adversary invoked")

    monkeypatch.setattr(training, "make_adversarial", boom)
    model = desk_resnet(conditional=False, seed=0, **SMALL)
    _, hist = pgd_at_train(model, _separable(), TrainConfig(epochs=1, batch_size=16, eval_samples=0), 0.0)
    assert hist.records[0]["L_A"] == 0.0


def test_pgd_at_lambda_one_has_no_clean_term():
    model = desk_resnet(conditional=False, seed=0, **SMALL)
    cfg = TrainConfig(epochs=1, batch_size=16, attack=AttackConfig(0.1, 2), eval_samples=0)
    _, hist = pgd_at_train(model, _separable(), cfg, 1.0)
    assert hist.records[0]["L_C"] == 0.0 and hist.records[0]["L_A"] > 0


def test_pgd_at_rejects_bad_inputs():
    with pytest.raises(UsageError):
        pgd_at_train(desk_resnet(conditional=False, **SMALL), _separable(), TrainConfig(batch_size=16), 1.5)
    with pytest.raises(UsageError):
        pgd_at_train(desk_resnet(**SMALL), _separable(), TrainConfig(batch_size=16), 0.5)


def test_evaluate_is_reproducible_and_isolated():
    model = desk_resnet(seed=3, **SMALL)
    data = _separable(40)
    rng_states = model.noise_rng_states()
    atk = AttackConfig(0.1, 2)
    a = lambda_sweep(model, data, (0.0, 0.2, 1.0), atk, seed=5)
    b = lambda_sweep(model, data, (0.0, 0.2, 1.0), atk, seed=5)
    assert a == b
    assert [r["lambda"] for r in a] == [0.0, 0.2, 1.0]
    assert model.noise_rng_states() == rng_states
    with pytest.raises(UsageError):
        evaluate(model, data, 0.5, noise_per="sample")


@pytest.mark.slow
def test_pgd_at_baselines_trade_off():
    train, test = load_mnist5k("train").head(2048), load_mnist5k("test").head(500)
    atk = AttackConfig(0.1, 7)
    results = {}
    for lam in (0.0, 1.0):
        model = desk_resnet(conditional=False, seed=0)
        pgd_at_train(model, train, TrainConfig(epochs=2, attack=atk, eval_samples=0), lam)
        results[lam] = evaluate(model, test, 0.0, atk)
    assert results[1.0]["RA"] > results[0.0]["RA"]
    assert results[1.0]["CA"] < results[0.0]["CA"]
