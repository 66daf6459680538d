import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from coms2t.backbone import BackboneConfig, STBackbone, loss_mae_train
from coms2t.disentangle import (BLOCKS, ParameterPartition, VariationLedger, apply_freeze, apply_partition,
                                build_partition, freeze_grads_, select_stable_indices, update_ledger,
                                warmup_stability_check)
from coms2t.errors import BlockError, ConfigError, LedgerError

torch.set_num_threads(1)

REG = [("a", (2,), "spatial"), ("b", (2, 2), "temporal"), ("h", (1,), "head")]


def snap(a, b, h=0.0):
    return {"a": np.asarray(a, dtype=float), "b": np.asarray(b, dtype=float), "h": np.asarray([h])}


def test_identical_snapshots_leave_accum():
    led = VariationLedger(REG, snap([1, 2], [[1, 2], [3, 4]]))
    update_ledger(led, snap([1, 2], [[1, 2], [3, 4]]))
    assert led.tb == 1
    assert all((v == 0).all() for v in led.accum.values())


def test_scalar_path_accumulates():
    reg = [("w", (1,), "spatial")]
    led = VariationLedger(reg, {"w": np.array([1.0])})
    led.update({"w": np.array([3.0])})
    led.update({"w": np.array([2.0])})
    assert led.accum["w"][0] == 3.0
    assert led.delta["w"][0] == 1.0


def test_elementwise_absolute_delta():
    led = VariationLedger(REG, snap([0, 0], [[0, 0], [0, 0]]))
    led.update(snap([2, -1], [[0, 0], [0, 0]]))
    assert led.delta["a"].tolist() == [2.0, 1.0]


def test_shape_drift_is_ledger_error():
    led = VariationLedger(REG, snap([0, 0], [[0, 0], [0, 0]]))
    with pytest.raises(LedgerError):
        led.update(snap([0, 0, 0], [[0, 0], [0, 0]]))


def test_select_examples():
    assert sorted(select_stable_indices(np.array([[5, 1], [3, 9]]), 50).tolist()) == [1, 2]
    assert sorted(select_stable_indices(np.arange(7.0), 100).tolist()) == list(range(7))
    assert select_stable_indices(np.array([[1, 1], [2, 3]]), 50).tolist() == [0, 1]
    with pytest.raises(BlockError):
        select_stable_indices(np.zeros(0), 50)
    with pytest.raises(ConfigError):
        select_stable_indices(np.ones(3), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.sampled_from(range(10, 100, 10)),
       st.floats(1e-3, 1e3))
def test_selection_count_and_scale_invariance(seed, size, tau, c):
    v = np.random.default_rng(seed).exponential(size=size)
    idx = select_stable_indices(v, tau)
    assert len(idx) == tau * size // 100
    assert np.array_equal(idx, select_stable_indices(v * c, tau))
    rest = np.setdiff1d(np.arange(size), idx)
    if len(idx) and len(rest):
        assert v[idx].max() <= v[rest].min()


def _random_ledger(rng):
    led = VariationLedger(REG, snap([0, 0], [[0, 0], [0, 0]]))
    for _ in range(3):
        led.update(snap(rng.normal(size=2), rng.normal(size=(2, 2)), rng.normal()))
    return led


def test_partition_laws_random_ledgers():
    rng = np.random.default_rng(0)
    for _ in range(20):
        led = _random_ledger(rng)
        params = {k: v.copy() for k, v in led.last.items()}
        for tau in range(10, 100, 10):
            p = build_partition(params, led, tau)
            for block in BLOCKS:
                mask = p.block_mask(block)
                assert mask.sum() == tau * mask.size // 100
                assert p.neocortex_count(block) + p.hippocampus_count(block) == p.block_size(block)
            assert not p.masks["h"].any()


def test_lambda_zero_keeps_values_and_lambda_one_averages():
    led = VariationLedger([("w", (3,), "spatial")], {"w": np.zeros(3)})
    led.update({"w": np.array([2.0, 9.0, 4.0])})
    params = {"w": np.array([2.0, 9.0, 4.0])}
    p0 = build_partition(params, led, 70, lam=0.0)
    assert np.array_equal(p0.frozen["w"], params["w"])
    p1 = build_partition(params, led, 70, lam=1.0)   # neocortex = values 2 and 4
    assert p1.frozen["w"].tolist() == [3.0, 9.0, 3.0]
    with pytest.raises(ConfigError):
        build_partition(params, led, 70, lam=1.5)


def test_partition_needs_a_unit():
    led = VariationLedger(REG, snap([0, 0], [[0, 0], [0, 0]]))
    with pytest.raises(LedgerError):
        build_partition(led.last, led, 50)


def test_empty_layer_is_flagged_not_raised(caplog):
    reg = [("a", (4,), "spatial"), ("b", (4,), "spatial"), ("t", (2,), "temporal")]
    led = VariationLedger(reg, {"a": np.zeros(4), "b": np.zeros(4), "t": np.zeros(2)})
    led.update({"a": np.full(4, 5.0), "b": np.ones(4) * 0.1, "t": np.ones(2)})
    p = build_partition(led.last, led, 50)
    assert p.empty_layers == ["a"]


def test_apply_freeze_examples():
    masks = {"x": np.array([True, True]), "y": np.array([False, False])}
    p = ParameterPartition([("x", (2,), "spatial"), ("y", (2,), "spatial")], 50, 0.0, masks)
    g = {"x": np.array([1.0, 2.0]), "y": np.array([3.0, 4.0])}
    out = apply_freeze(g, p)
    assert out["x"].tolist() == [0.0, 0.0] and out["y"].tolist() == [3.0, 4.0]
    assert g["x"].tolist() == [1.0, 2.0]


def test_freeze_step_and_compare():
    m = STBackbone(BackboneConfig(n_nodes=3, kappa=4, horizon=1, hidden=4, kernels=(2, 2), dilations=(1, 2)))
    rng = np.random.default_rng(1)
    masks = {n: rng.random(s) < 0.5 for n, s, _ in m.registry()}
    p = ParameterPartition(m.registry(), 50, 0.0, masks, {n: v for n, v in m.snapshot().items()})
    apply_partition(m, p)
    before = p.neocortex_values(m)
    opt = torch.optim.Adam(m.parameters(), lr=0.1)
    X, Y = torch.randn(4, 4, 3, 1, dtype=torch.float64), torch.randn(4, 1, 3, 1, dtype=torch.float64)
    for _ in range(3):
        opt.zero_grad()
        loss_mae_train(m(X), Y).backward()
        freeze_grads_(m, p)
        opt.step()
    assert np.array_equal(p.neocortex_values(m), before)


def test_partition_dict_round_trip():
    led = _random_ledger(np.random.default_rng(2))
    p = build_partition(led.last, led, 50)
    q = ParameterPartition.from_dict(p.to_dict())
    assert all(np.array_equal(p.masks[k], q.masks[k]) for k in p.masks)


@pytest.mark.parametrize("errs,expected", [
    ([10, 10, 10, 10], True), ([10, 8, 6, 4], False), ([10, 10.05, 10.02, 10.01], True), ([10, 10, 10], False)])
def test_stability_check(errs, expected):
    assert warmup_stability_check(errs, patience=3) is expected


def test_ledger_export(tmp_path):
    led = _random_ledger(np.random.default_rng(3))
    files = led.export(tmp_path)
    rows = open(files["b"]).read().splitlines()
    assert rows[0] == "index,accum" and len(rows) == 5
    assert float(rows[2].split(",")[1]) == led.accum["b"].reshape(-1)[1]
