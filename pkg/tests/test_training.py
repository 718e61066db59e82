import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfx.errors import ContractError
from cfx.network import HEAD_WEIGHTS, ModelConfig, PredictionPair, forward, init_params
from cfx.propensity import assign_preliminary_labels
from cfx.training import (AdamState, LossWeights, TrainConfig, adam_step, backward, batch_loss,
                          cross_entropy, gradient_check, head_l2, random_small_config,
                          split_labeled, train, write_training_log)

SMALL = ModelConfig(shared_layers=2, neurons=6, head_hidden=5, dropout=0.0, latent_dim=2,
                    n_confounders=4, n_treatments=3)


def test_defaults_match_configuration_table():
    w, t = LossWeights(), TrainConfig()
    assert (w.lambda1, w.lambda2, w.lambda_reg) == (0.65, 0.35, 0.01)
    assert (t.batch_size, t.epochs, t.patience, t.lr) == (64, 200, 20, 0.001)
    with pytest.raises(ContractError):
        LossWeights(lambda2=-1)
    with pytest.raises(ContractError):
        TrainConfig(patience=0)


def test_cross_entropy_examples():
    assert cross_entropy(2, [0.1, 0.2, 0.6, 0.1]) == pytest.approx(0.510826, abs=1e-6)
    assert cross_entropy(1, [0, 1, 0, 0]) == 0
    assert cross_entropy(3, [0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert cross_entropy(0, [0, 1, 0, 0]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ContractError):
        cross_entropy(4, [0.25] * 4)


def zero_params(cfg=SMALL):
    p = init_params(cfg)
    for k in p.names():
        p.tensors[k][...] = 0
    return p


def test_batch_loss_uniform_example():
    u = np.full(4, 0.25)
    b = batch_loss([PredictionPair(u, u)], [2], [0], zero_params())
    assert b.total == pytest.approx(math.log(4), abs=1e-12)
    assert b.reg == 0


def test_batch_loss_reg_excluded_when_zero_weight():
    u = np.full(4, 0.25)
    p = init_params(SMALL, 1)
    b = batch_loss([PredictionPair(u, u)], [1], [1], p, LossWeights(lambda_reg=0))
    assert b.total == pytest.approx(math.log(4), abs=1e-12)


def test_batch_loss_matches_straight_line_recomputation():
    rng = np.random.default_rng(3)
    params = init_params(SMALL, 3)
    for trial in range(20):
        pf = rng.dirichlet(np.ones(4), 5)
        pcf = rng.dirichlet(np.ones(4), 5)
        y, ys = rng.integers(0, 4, 5), rng.integers(0, 4, 5)
        b = batch_loss([PredictionPair(a, c) for a, c in zip(pf, pcf)], y, ys, params)
        f = sum(-math.log(pf[i][y[i]]) for i in range(5)) / 5
        cf = sum(-math.log(pcf[i][ys[i]]) for i in range(5)) / 5
        reg = 0.0
        for k in HEAD_WEIGHTS:
            for v in params[k].ravel():
                reg += v * v
        assert abs(b.factual - f) <= 1e-12 and abs(b.counterfactual - cf) <= 1e-12
        assert abs(b.total - (0.65 * f + 0.35 * cf + 0.01 * reg)) <= 1e-12


def test_batch_loss_errors():
    u = np.full(4, 0.25)
    with pytest.raises(ContractError):
        batch_loss([PredictionPair(u, u)], [0, 1], [0], zero_params())
    with pytest.raises(ContractError):
        batch_loss([], [], [], zero_params())


@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_loss_linear_in_weights_and_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    pf, pcf = rng.dirichlet(np.ones(4), 3), rng.dirichlet(np.ones(4), 3)
    y, ys = rng.integers(0, 4, 3), rng.integers(0, 4, 3)
    params = init_params(SMALL, seed % 7)
    w = LossWeights(*rng.random(3))
    a = batch_loss(PredictionPair(pf, pcf), y, ys, params, w)
    b = batch_loss(PredictionPair(pf, pcf), y, ys, params, w.scaled(2.0))
    assert a.total >= 0
    assert abs(b.total - 2 * a.total) <= 1e-12 * max(1.0, a.total)
    c = batch_loss(PredictionPair(pf, pcf), y, ys, params, w.scaled(scale))
    assert c.total == pytest.approx(scale * a.total, rel=1e-12)


def random_batch(cfg, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((n, cfg.n_confounders)), rng.random((n, cfg.n_treatments)),
            rng.random((n, cfg.n_treatments)), rng.standard_normal((n, cfg.latent_dim)),
            rng.integers(0, 4, n), rng.integers(0, 4, n))


def test_unused_head_gradient_is_exactly_zero():
    p = init_params(SMALL, 2)
    x, t, ts, u, y, ys = random_batch(SMALL)
    _, cache = forward(p, x, t, ts, u)
    g = backward(p, cache, y, ys, LossWeights(lambda2=0.0, lambda_reg=0.0))
    for k in g:
        if k.startswith("counterfactual."):
            assert np.all(g[k] == 0)


def test_factual_only_training_cf_head_gets_only_reg_gradient():
    cfg = ModelConfig(shared_layers=1, neurons=5, head_hidden=4, dropout=0.0, latent_dim=0,
                      n_confounders=3, n_treatments=2)
    p = init_params(cfg, 4)
    x, t, ts, u, y, ys = random_batch(cfg)
    _, cache = forward(p, x, t, ts, u)
    w = LossWeights(lambda2=0.0)
    g = backward(p, cache, y, ys, w)
    for k in g:
        if k.startswith("counterfactual."):
            expected = 2 * w.lambda_reg * p[k] if k in HEAD_WEIGHTS else 0
            np.testing.assert_array_equal(g[k], expected)


def test_zero_loss_gives_zero_logit_gradient():
    cfg = ModelConfig(shared_layers=1, neurons=3, head_hidden=3, dropout=0.0, latent_dim=0,
                      n_confounders=2, n_treatments=1)
    p = init_params(cfg, 0)
    x, t, ts, u, _, _ = random_batch(cfg, n=4)
    # saturate both heads on class 2 through the output bias
    for head in ("factual", "counterfactual"):
        p.tensors[f"{head}.out.W"][...] = 0
        p.tensors[f"{head}.out.b"][...] = [-60, -60, 60, -60]
    y = np.full(4, 2)
    pair, cache = forward(p, x, t, ts, u)
    w = LossWeights(lambda_reg=0.0)
    assert batch_loss(pair, y, y, p, w).total <= 1e-10
    g = backward(p, cache, y, y, w)
    for head in ("factual", "counterfactual"):
        assert np.abs(g[f"{head}.out.b"]).max() <= 1e-10
        assert np.abs(g[f"{head}.out.W"]).max() <= 1e-10
    # numerical cross-check on the output bias
    h = 1e-5
    b = p.tensors["factual.out.b"]
    b[2] += h
    up = batch_loss(forward(p, x, t, ts, u)[0], y, y, p, w).total
    b[2] -= 2 * h
    down = batch_loss(forward(p, x, t, ts, u)[0], y, y, p, w).total
    assert abs((up - down) / (2 * h)) <= 1e-10


def test_adam_examples():
    th = {"x": np.array([1.0])}
    st_ = AdamState.for_params(th, lr=0.001)
    adam_step(th, {"x": 2 * th["x"]}, st_)
    assert th["x"][0] == pytest.approx(1 - 0.001 * 2 / (2 + 1e-8), abs=1e-15)
    assert st_.t == 1

    z = {"x": np.array([0.7, -3.0])}
    sz = AdamState.for_params(z)
    for _ in range(100):
        adam_step(z, {"x": np.zeros(2)}, sz)
    np.testing.assert_array_equal(z["x"], [0.7, -3.0])

    q = {"x": np.array([1.0])}
    sq = AdamState.for_params(q, lr=0.001)
    for _ in range(5000):
        adam_step(q, {"x": 2 * q["x"]}, sq)
    assert abs(q["x"][0]) < 1e-3


def test_adam_shape_mismatch():
    th = {"x": np.zeros(3)}
    with pytest.raises(ContractError):
        adam_step(th, {"x": np.zeros(2)}, AdamState.for_params(th))


def test_gradient_check_examples():
    small = ModelConfig(shared_layers=2, neurons=4, head_hidden=4, dropout=0.0, latent_dim=2,
                        n_confounders=5, n_treatments=3)
    r = gradient_check(small, seed=1)
    assert r.passed and r.max_rel_error <= 1e-4
    assert r.n_checked == sum(np.prod(s) for s in small.shapes().values())

    def bump(g):
        g["shared.1.W"][2, 3] *= 1.1

    bad = gradient_check(small, seed=1, perturb=bump)
    assert not bad.passed and bad.worst == "shared.1.W[2,3]"

    r = gradient_check(ModelConfig(shared_layers=2, neurons=4, head_hidden=4, dropout=0.3, latent_dim=2,
                                   n_confounders=5, n_treatments=3), seed=2)
    assert r.passed


def test_gradient_check_refuses_large_configs():
    with pytest.raises(ContractError):
        gradient_check(ModelConfig())


@given(st.integers(0, 2**31))
def test_random_small_configs_pass_gradcheck(seed):
    cfg = random_small_config(np.random.default_rng(seed))
    assert gradient_check(cfg, seed=seed % 1000).max_rel_error <= 1e-4


@pytest.fixture(scope="module")
def splits(synth_small):
    ds, _ = synth_small
    return split_labeled(assign_preliminary_labels(ds, seed=1), seed=1)


TINY = ModelConfig(shared_layers=1, neurons=8, head_hidden=8, latent_dim=2)


def test_single_full_batch_epoch_is_one_step(splits):
    tr, va, _ = splits
    m = train(tr, va, TINY, TrainConfig(epochs=1, batch_size=tr.n + 5))
    assert m.meta["optimizer_steps"] == 1 and m.meta["epochs_run"] == 1


def test_training_is_bitwise_deterministic(splits):
    tr, va, _ = splits
    cfg = TrainConfig(epochs=3, batch_size=32, seed=4)
    a, b = train(tr, va, TINY, cfg), train(tr, va, TINY, cfg)
    assert a.params.equal(b.params)
    assert a.log == b.log


def test_training_reduces_factual_loss(splits):
    tr, va, _ = splits
    m = train(tr, va, ModelConfig(), TrainConfig(epochs=15, seed=0))
    first, last = m.log[0]["train_factual"], m.log[-1]["train_factual"]
    assert last < first


def test_early_stopping_returns_best(splits, tmp_path):
    tr, va, _ = splits
    m = train(tr, va, TINY, TrainConfig(epochs=40, patience=3, lr=0.05, seed=2))
    vals = [h["val_total"] for h in m.log]
    best = int(np.argmin(vals))
    assert m.meta["best_epoch"] == best + 1
    assert all(h["best_so_far"] == min(vals[:i + 1]) for i, h in enumerate(m.log))
    assert len(m.log) <= 40
    if len(m.log) < 40:
        assert len(m.log) - m.meta["best_epoch"] == 3
    write_training_log(m.log, tmp_path / "log.csv", ["# test"])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[1] == "epoch,train_factual,train_counterfactual,train_reg,train_total,val_total,best_so_far"
    assert len(lines) == len(m.log) + 2


def test_split_calibration_from_train_only(splits):
    tr, va, te = splits
    assert tr.base.calibration == va.base.calibration == te.base.calibration
    assert tr.n + va.n + te.n == 400
    ids = np.concatenate([tr.base.record_ids, va.base.record_ids, te.base.record_ids])
    assert len(np.unique(ids)) == 400


def test_head_l2_only_counts_head_weights():
    p = zero_params()
    p.tensors["shared.0.W"][...] = 5
    p.tensors["factual.out.b"][...] = 5
    assert head_l2(p) == 0
    p.tensors["counterfactual.hidden.W"][0, 0] = 3
    assert head_l2(p) == 9
