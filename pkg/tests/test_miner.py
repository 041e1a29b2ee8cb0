import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylemine import miner
from stylemine import numcore as nc
from stylemine.data import AnchorSample, batches
from stylemine.errors import ContractError, DivergenceError
from stylemine.miner import (MINING_LOG_HEADER, ASMClassifier, ConsistencyGroup, MiningConfig,
                             MLoss, accuracy, anchor_posterior, baseline_strategy,
                             consistency_loss, mine_step, task_loss, total_loss, train_asm)
from stylemine.models import build_generator, build_task_model, encode, freeze

f64 = torch.float64


def _cfg(**kw):
    base = dict(alpha=0.01, beta=0.05, depth_n=2, lam=2e-4, batch_size=4, total_iters=3,
                styles_per_content=2, seed=0, warmup_iters=1)
    base.update(kw)
    return MiningConfig(**base)


def _data(cfg, n=12, seed=0):
    g = np.random.default_rng(seed)
    x = g.random((n, 3, cfg.side, cfg.side), dtype=np.float32)
    y = g.integers(0, cfg.n_classes, n)
    anchor = AnchorSample(g.random((3, cfg.side, cfg.side), dtype=np.float32))
    return x, y, anchor


# ---------------------------------------------------------------------------
# losses


def test_task_loss_examples(tiny_cfg):
    M = build_task_model(tiny_cfg, 0)
    x = torch.rand(5, 3, 8, 8)
    with torch.no_grad():
        M.head.weight.zero_()
        M.head.bias.zero_()
    assert float(task_loss(M, x, torch.zeros(5, dtype=torch.long))) == pytest.approx(
        math.log(tiny_cfg.n_classes), abs=1e-6)
    with torch.no_grad():
        M.head.bias.copy_(torch.tensor([100.0, 0.0, 0.0]))
    assert float(task_loss(M, x, torch.zeros(5, dtype=torch.long))) < 1e-6
    with pytest.raises(ContractError):
        task_loss(M, x, torch.full((5,), tiny_cfg.n_classes))


def test_task_loss_descends_on_fixed_batch(tiny_cfg):
    for seed in range(20):
        M = build_task_model(tiny_cfg, seed)
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(6, 3, 8, 8, generator=g)
        y = torch.randint(0, tiny_cfg.n_classes, (6,), generator=g)
        params = nc.ParamSet.from_module(M)
        before = task_loss(M, x, y)
        params.set_grads(nc.grad_eval(before, params.tensors()))
        nc.sgd_step(params, 1e-3)
        assert float(task_loss(M, x, y)) < float(before)


def test_consistency_examples():
    z = torch.ones(2, 3, 4, dtype=f64)
    assert float(consistency_loss(z)) == 0.0
    group = ConsistencyGroup(torch.tensor([[0.0, 0.0], [2.0, 0.0]], dtype=f64))
    assert torch.equal(group.z_bar, torch.tensor([1.0, 0.0], dtype=f64))
    assert float(consistency_loss([group])) == 1.0
    with pytest.raises(ContractError):
        consistency_loss(torch.zeros(2, 1, 3))
    with pytest.raises(ContractError):
        consistency_loss([])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 100.0))
def test_consistency_scale_equivariant(seed, c):
    z = torch.randn(3, 2, 5, generator=torch.Generator().manual_seed(seed), dtype=f64)
    assert float(consistency_loss(c * z)) == pytest.approx(c * float(consistency_loss(z)),
                                                           rel=1e-12, abs=1e-12)


def test_total_loss_additivity(tiny_cfg):
    M = build_task_model(tiny_cfg, 0)
    x = torch.rand(4, 3, 8, 8)
    y = torch.tensor([0, 1, 0, 1])
    zero = total_loss(M, x, y, 0.0)
    assert torch.equal(zero.total, zero.task)
    assert torch.equal(zero.task, task_loss(M, x, y))
    lam = 2e-4
    out = total_loss(M, x, y, lam)
    assert torch.equal(out.total, out.task + lam * out.consist)


# ---------------------------------------------------------------------------
# one mining step


def _step_inputs(tiny_cfg, tiny_generator, seed=0, n=2):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, 8, 8, generator=g)
    y = torch.randint(0, tiny_cfg.n_classes, (n,), generator=g).repeat(2)
    with torch.no_grad():
        f_c = encode(tiny_generator, x)
    eps = torch.randn(n, tiny_cfg.latent_dim, generator=g)
    comp = [torch.randn(n, tiny_cfg.latent_dim, generator=g)]
    return f_c, y, eps, comp


def test_mine_step_beta_zero_keeps_latent(tiny_cfg, tiny_generator, tiny_task_model):
    f_c, y, eps, comp = _step_inputs(tiny_cfg, tiny_generator)
    params = nc.ParamSet.from_module(tiny_task_model)
    res = mine_step(tiny_task_model, tiny_generator, params, f_c, y, eps, comp, 0.01, 0.0, _cfg())
    assert torch.equal(res.eps, eps)


def test_mine_step_toy_oracle(monkeypatch, tiny_cfg, tiny_generator, tiny_task_model):
    # replace the network by L(eps) = |eps|^2; the ascent step is eps + beta * 2 eps
    monkeypatch.setattr(miner, "stylize_features", lambda G, f, lat: lat)

    def toy_loss(M, x, labels, lam, styles=2, mode="group"):
        val = (x[:1] ** 2).sum()
        return MLoss(val, val, val * 0)
    monkeypatch.setattr(miner, "total_loss", toy_loss)
    params = nc.ParamSet.from_module(tiny_task_model)
    eps = torch.tensor([[1.0, 0.0]], dtype=torch.float32)
    res = mine_step(tiny_task_model, tiny_generator, params, torch.zeros(1, 8, 2, 2),
                    torch.zeros(2, dtype=torch.long), eps, [torch.zeros(1, 2)], 0.0, 0.1, _cfg())
    assert torch.allclose(res.eps, torch.tensor([[1.2, 0.0]]), atol=1e-7)


def test_mine_step_single_forward_and_g_untouched(tiny_cfg, tiny_generator, tiny_task_model):
    calls = []
    hook = tiny_task_model.register_forward_hook(lambda *a: calls.append(1))
    before = {n: p.clone() for n, p in tiny_generator.named_parameters()}
    f_c, y, eps, comp = _step_inputs(tiny_cfg, tiny_generator)
    params = nc.ParamSet.from_module(tiny_task_model)
    theta0 = [p.clone() for p in params.tensors()]
    res = mine_step(tiny_task_model, tiny_generator, params, f_c, y, eps, comp, 0.1, 0.05, _cfg())
    hook.remove()
    assert len(calls) == 1
    assert not torch.equal(res.eps, eps)
    assert any(not torch.equal(a, b) for a, b in zip(theta0, params.tensors()))
    for n, p in tiny_generator.named_parameters():
        assert torch.equal(p, before[n])


def test_mine_step_uses_pre_update_gradient(tiny_cfg, tiny_generator, tiny_task_model):
    # the latent step must use the gradient at the old theta, from the same pass
    f_c, y, eps, comp = _step_inputs(tiny_cfg, tiny_generator)
    from stylemine.rain import stylize_features
    leaf = eps.clone().requires_grad_(True)
    x = stylize_features(tiny_generator, f_c.repeat(2, 1, 1, 1), torch.cat([leaf, *comp]))
    (g,) = nc.grad_eval(total_loss(tiny_task_model, x, y, 2e-4).total, [leaf])
    params = nc.ParamSet.from_module(tiny_task_model)
    res = mine_step(tiny_task_model, tiny_generator, params, f_c, y, eps, comp, 0.5, 0.05, _cfg())
    assert torch.allclose(res.eps, eps + 0.05 * g, atol=1e-6)


def test_mine_step_divergence_guard(tiny_cfg, tiny_generator, tiny_task_model):
    f_c, y, eps, comp = _step_inputs(tiny_cfg, tiny_generator)
    with torch.no_grad():
        tiny_task_model.head.bias.copy_(torch.tensor([0.0, 0.0, 1e4]))
    y = torch.zeros_like(y)
    params = nc.ParamSet.from_module(tiny_task_model)
    with pytest.raises(DivergenceError) as info:
        mine_step(tiny_task_model, tiny_generator, params, f_c, y, eps, comp, 0.1, 0.05, _cfg(),
                  iteration=7)
    assert info.value.iteration == 7 and torch.equal(info.value.epsilon, eps)
    with pytest.raises(DivergenceError):
        mine_step(tiny_task_model, tiny_generator, params, f_c, y, eps * float("nan"), comp,
                  0.1, 0.05, _cfg())


def test_ascent_with_frozen_theta(tiny_cfg):
    ok = 0
    for trial in range(100):
        G = build_generator(tiny_cfg, trial)
        G.mark_trained()
        freeze(G)
        M = build_task_model(tiny_cfg, 10_000 + trial)
        f_c, y, eps, comp = _step_inputs(tiny_cfg, G, seed=trial)
        params = nc.ParamSet.from_module(M)
        losses = []
        for _ in range(4):
            res = mine_step(M, G, params, f_c, y, eps, comp, 0.0, 1e-3,
                            _cfg(momentum=0.0, weight_decay=0.0))
            losses.append(float(res.loss.total))
            eps = res.eps
        ok += all(b >= a - 1e-6 for a, b in zip(losses, losses[1:]))
    assert ok >= 90


# ---------------------------------------------------------------------------
# training loops


def test_asm_beta0_depth1_equals_anchored(tiny_cfg, tiny_generator):
    x, y, anchor = _data(tiny_cfg)
    cfg = _cfg(beta=0.0, depth_n=1)
    _, log_asm = train_asm(build_task_model(tiny_cfg, 3), tiny_generator, x, y, anchor, cfg)
    _, log_anc = baseline_strategy("anchored", build_task_model(tiny_cfg, 3), tiny_generator,
                                   x, y, anchor, cfg)
    strip = lambda log: [[r[i] for i in range(len(r)) if MINING_LOG_HEADER[i] != "strategy"]
                         for r in log]
    assert strip(log_asm) == strip(log_anc)
    assert {r[2] for r in log_asm} == {"asm"} and {r[2] for r in log_anc} == {"anchored"}


def test_train_asm_log_shape_and_g_freeze(tiny_cfg, tiny_generator):
    x, y, anchor = _data(tiny_cfg)
    before = {n: p.clone() for n, p in tiny_generator.named_parameters()}
    cfg = _cfg(depth_n=3)
    _, log = train_asm(build_task_model(tiny_cfg, 0), tiny_generator, x, y, anchor, cfg)
    assert len(log) == cfg.total_iters * cfg.depth_n
    assert [r[:2] for r in log[:3]] == [[1, 1], [1, 2], [1, 3]]
    assert all(len(r) == len(MINING_LOG_HEADER) for r in log)
    for n, p in tiny_generator.named_parameters():
        assert torch.equal(p, before[n])


def test_labels_are_source_labels(monkeypatch, tiny_cfg, tiny_generator):
    x, y, anchor = _data(tiny_cfg)
    cfg = _cfg()
    seen = []
    real = miner.total_loss

    def spy(M, xs, labels, *a, **k):
        seen.append(labels.clone())
        return real(M, xs, labels, *a, **k)
    monkeypatch.setattr(miner, "total_loss", spy)
    train_asm(build_task_model(tiny_cfg, 0), tiny_generator, x, y, anchor, cfg)
    it = batches(x, y, cfg.contents_per_batch, cfg.seed)
    expected = []
    for _ in range(cfg.total_iters):
        _, yb = next(it)
        expected += [torch.as_tensor(yb).repeat(2)] * cfg.depth_n
    assert len(seen) == len(expected)
    assert all(torch.equal(a, b) for a, b in zip(seen, expected))


def test_random_strategy_latent_mean(monkeypatch, tiny_cfg, tiny_generator):
    x, y, anchor = _data(tiny_cfg, n=40)
    drawn = []
    real = miner.mine_step

    def spy(M, G, params, f_c, yy, eps, companions, *a, **k):
        drawn.append(eps.clone())
        return real(M, G, params, f_c, yy, eps, companions, *a, **k)
    monkeypatch.setattr(miner, "mine_step", spy)
    cfg = _cfg(batch_size=8, total_iters=40, depth_n=2)
    baseline_strategy("random", build_task_model(tiny_cfg, 0), tiny_generator, x, y, anchor, cfg)
    eps = torch.cat(drawn)
    assert float(eps.mean().abs()) <= 3 / math.sqrt(eps.numel())


def test_source_only_needs_no_generator(tiny_cfg):
    x, y, anchor = _data(tiny_cfg)
    _, log = baseline_strategy("source_only", build_task_model(tiny_cfg, 0), None, x, y, None,
                               _cfg())
    assert {r[2] for r in log} == {"source_only"}
    assert all(r[4] >= 0 for r in log)


def test_strategy_errors(tiny_cfg, tiny_generator):
    x, y, anchor = _data(tiny_cfg)
    with pytest.raises(ContractError):
        baseline_strategy("sideways", build_task_model(tiny_cfg, 0), tiny_generator, x, y,
                          anchor, _cfg())
    with pytest.raises(ContractError):
        train_asm(build_task_model(tiny_cfg, 0), None, x, y, anchor, _cfg())
    untrained = build_generator(tiny_cfg, 0)
    with pytest.raises(ContractError):
        anchor_posterior(untrained, anchor)


def test_mining_config_validation():
    with pytest.raises(ContractError):
        _cfg(depth_n=0)
    with pytest.raises(ContractError):
        _cfg(beta=-1.0)
    with pytest.raises(ContractError):
        _cfg(batch_size=5)
    with pytest.raises(ContractError):
        _cfg(styles_per_content=1)


def test_anchor_posterior_deterministic(tiny_cfg, tiny_generator):
    _, _, anchor = _data(tiny_cfg)
    a, b = anchor_posterior(tiny_generator, anchor), anchor_posterior(tiny_generator, anchor)
    assert torch.equal(a.psi, b.psi) and torch.equal(a.xi, b.xi)
    assert a.psi.shape == (tiny_cfg.latent_dim,) and bool((a.xi > 0).all())
    with pytest.raises(ContractError):
        anchor_posterior(tiny_generator, np.zeros((2, 3, 8, 8), np.float32))


def test_accuracy_examples():
    logits = np.eye(3)
    assert accuracy(logits, np.arange(3)) == 1.0
    fixture = np.array([[2.0, 1.0], [0.0, 3.0], [5.0, 1.0], [1.0, 1.0]])
    assert accuracy(fixture, np.array([0, 1, 1, 0])) == 0.75
    # tie in the last row resolves to class 0
    assert accuracy(fixture[3:], np.array([0])) == 1.0
    with pytest.raises(ContractError):
        accuracy(fixture, np.array([0, 1, 2, 0]))
    with pytest.raises(ContractError):
        accuracy(fixture, np.array([0, 1]))


def test_classifier_estimator(tiny_cfg, tiny_generator):
    x, y, anchor = _data(tiny_cfg)
    clf = ASMClassifier(batch_size=4, total_iters=2, depth_n=2, warmup_iters=1, n_classes=3,
                        feat_dim=8, task_width=4)
    assert clf.get_params()["lambda_consist"] == 2e-4
    clf.fit(x, y, generator=tiny_generator, anchor=anchor)
    assert clf.predict(x).shape == (12,)
    p = clf.predict_proba(x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert clf.transform(x).shape == (12, 8)
    assert 0.0 <= clf.score(x, y) <= 1.0
    with pytest.raises(ContractError):
        ASMClassifier(n_classes=3).fit(x, y, generator=tiny_generator)
