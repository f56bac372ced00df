import numpy as np
import pytest

from routelab.errors import InvalidConfigError, InvalidInputError, InvalidRouteError, TraceMismatchError
from routelab.model import (ModelConfig, Route, backward, copy_trace, extend, forward, forward_with_intervention,
                            init_params, intervened_logits, moe_layer_forward, next_token_targets, prefill,
                            router_names, validate_route)
from routelab.numerics import RngState, relative_error
from routelab.pretrain import token_ce

from .oracles import random_tokens, reference_forward, small_model


def test_config_defaults_and_validation():
    cfg = ModelConfig()
    assert (cfg.vocab_size, cfg.width, cfg.blocks, cfg.experts, cfg.active, cfg.shared_experts,
            cfg.expert_hidden, cfg.max_context) == (40, 64, 2, 8, 2, 0, 128, 64)
    with pytest.raises(InvalidConfigError):
        ModelConfig(active=9)
    with pytest.raises(InvalidConfigError):
        ModelConfig(active=0)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_deterministic_and_shaped():
    a = init_params(ModelConfig(), RngState(3))
    b = init_params(ModelConfig(), RngState(3))
    assert a.digest() == b.digest()
    assert a["blocks.0.router.weight"].shape == (8, 64)
    assert not np.any(a["blocks.1.router.bias"])


def test_init_fan_in_scale():
    for seed in range(3):
        w = init_params(ModelConfig(), RngState(seed))["blocks.0.attn.wq"]
        assert abs(w.std() - 1 / np.sqrt(64)) < 0.1 / np.sqrt(64)


def test_params_are_immutable():
    p = small_model()
    with pytest.raises(ValueError):
        p["unembed"][0, 0] = 1.0
    q = p.replace({"unembed": p["unembed"] * 2})
    assert q.diff(p) == ["unembed"]
    assert p.digest() != q.digest()


def test_moe_layer_equal_scores_split_gates():
    p = small_model(experts=4, active=2)
    lp = p.layer(0)
    lp = lp._replace(router_w=np.zeros_like(lp.router_w), router_b=np.array([1.0, 1.0, 0.0, 0.0]))
    x = np.random.default_rng(0).normal(size=8)
    e = [np.maximum(x @ lp.w1[i], 0) @ lp.w2[i] for i in range(4)]
    np.testing.assert_allclose(moe_layer_forward(x, lp), 0.5 * e[0] + 0.5 * e[1], atol=1e-14)


def test_moe_layer_dense_when_k_equals_n():
    p = small_model(experts=3, active=3)
    lp = p.layer(0)
    x = np.random.default_rng(1).normal(size=8)
    s = lp.router_w @ x + lp.router_b
    g = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    dense = sum(g[i] * (np.maximum(x @ lp.w1[i], 0) @ lp.w2[i]) for i in range(3))
    np.testing.assert_allclose(moe_layer_forward(x, lp), dense, atol=1e-13)


def test_moe_layer_identity_override_bit_exact():
    p = small_model(dtype=np.float32)
    lp = p.layer(1)
    x = np.random.default_rng(2).normal(size=8).astype(np.float32)
    s = lp.router_w @ x + lp.router_b
    std = np.sort(np.argsort(-s, kind="stable")[:2])
    assert np.array_equal(moe_layer_forward(x, lp), moe_layer_forward(x, lp, override=std))


def test_moe_layer_shared_experts_add_unweighted():
    p = small_model(shared_experts=1)
    lp = p.layer(0)
    x = np.random.default_rng(3).normal(size=8)
    routed = moe_layer_forward(x, lp._replace(shared_w1=None, shared_w2=None))
    shared = np.maximum(x @ lp.shared_w1[0], 0) @ lp.shared_w2[0]
    np.testing.assert_allclose(moe_layer_forward(x, lp), routed + shared, atol=1e-14)


def test_invalid_routes():
    with pytest.raises(InvalidRouteError):
        validate_route([1, 1], 4, 2)
    with pytest.raises(InvalidRouteError):
        validate_route([0, 4], 4, 2)
    with pytest.raises(InvalidRouteError):
        validate_route([0], 4, 2)
    assert validate_route([3, 0], 4, 2).tolist() == [0, 3]


def test_route_gates_are_restricted_softmax():
    r = Route.from_scores([2, 0], np.array([1.0, 5.0, 1.0, 0.0]))
    assert r.indices == (0, 2)
    assert r.gates == pytest.approx((0.5, 0.5))


@pytest.mark.parametrize("kw", [{}, {"attention": False}, {"shared_experts": 2}, {"blocks": 3, "active": 1}])
def test_forward_matches_dense_reference(kw):
    p = small_model(seed=4, **kw)
    toks = random_tokens(4, 11, p.config.vocab_size)
    logits, _ = forward(p, toks)
    assert np.max(np.abs(logits - reference_forward(p, toks))) < 1e-12


def test_forward_is_causal():
    p = small_model(seed=5)
    toks = random_tokens(5, 10, 12)
    a, _ = forward(p, toks)
    toks2 = toks.copy()
    toks2[6] = (toks2[6] + 1) % 12
    b, _ = forward(p, toks2)
    assert np.array_equal(a[:6], b[:6])
    assert not np.array_equal(a[6:], b[6:])


def test_forward_errors_and_length_one():
    p = small_model()
    with pytest.raises(InvalidInputError):
        forward(p, [0, 12])
    with pytest.raises(InvalidInputError):
        forward(p, list(range(12)) + [0] * 10)
    logits, tr = forward(p, [3])
    assert logits.shape == (1, 12)
    assert tr.layers[0].att[0, 0] == 1.0


def test_trace_records_routes_and_gates():
    p = small_model(seed=6, dtype=np.float32)
    _, tr = forward(p, random_tokens(6, 9, 12))
    for L in tr.layers:
        assert L.routes.shape == (9, 2)
        assert np.all(np.diff(L.routes, axis=1) > 0)
        assert np.max(np.abs(L.gates.sum(axis=1) - 1)) < 1e-6


def test_identity_intervention_is_bit_exact():
    p = init_params(ModelConfig(), RngState(7))
    toks = random_tokens(7, 14, 40)
    _, tr = forward(p, toks)
    for t in range(14):
        for l in range(2):
            assert np.array_equal(intervened_logits(p, tr, t, l, tr.layers[l].routes[t]), tr.logits[t])
            assert np.array_equal(forward_with_intervention(p, tr, t, l, tr.layers[l].routes[t]),
                                  tr.distribution(t))


def test_intervention_matches_full_reforward():
    p = small_model(seed=8, dtype=np.float32, blocks=3, experts=6)
    toks = random_tokens(8, 16, 12)
    _, tr = forward(p, toks)
    gen = np.random.default_rng(8)
    for _ in range(30):
        t, l = int(gen.integers(16)), int(gen.integers(3))
        route = sorted(gen.choice(6, 2, replace=False).tolist())
        ref = reference_forward(p, toks, {(t, l): route})
        assert np.max(np.abs(intervened_logits(p, tr, t, l, route) - ref[t])) < 1e-5
        # earlier positions never see the intervention
        assert np.array_equal(ref[:t], reference_forward(p, toks)[:t])


def test_stale_trace_rejected():
    p = small_model(seed=9)
    _, tr = forward(p, [1, 2, 3])
    q = p.replace({"unembed": p["unembed"] + 1})
    with pytest.raises(TraceMismatchError):
        forward_with_intervention(q, tr, 1, 0, [0, 1])
    _, mod = forward(p, [1, 2, 3], overrides={(0, 0): [0, 1]})
    with pytest.raises(InvalidInputError):
        forward_with_intervention(p, mod, 1, 0, [0, 1])


def test_incremental_decoding_matches_forward():
    p = small_model(seed=10, dtype=np.float32)
    toks = random_tokens(10, 9, 12)
    full, _ = forward(p, toks)
    tr = prefill(p, toks[:4], 9)
    assert np.array_equal(tr.logits[:4], full[:4])
    branch = copy_trace(tr)
    for t in range(4, 9):
        assert np.array_equal(extend(p, tr, int(toks[t])), full[t])
    assert branch.length == 4


def _mean_ce(p, toks, mask):
    logits, tr = forward(p, toks)
    targets, _ = next_token_targets(toks)
    return float(token_ce(logits, targets)[mask].mean()), tr


@pytest.mark.parametrize("kw", [{}, {"shared_experts": 1}, {"attention": False}])
def test_backward_matches_finite_differences(kw):
    p = small_model(seed=11, blocks=1, **kw)
    toks = random_tokens(11, 8, 12)
    targets, mask = next_token_targets(toks)
    base, tr = _mean_ce(p, toks, mask)
    grads = backward(p, tr, targets, mask).params
    eps, worst, checked = 1e-5, 0.0, 0
    for name in p.names():
        flat = np.array(p[name]).reshape(-1)
        for i in range(flat.size):
            vals = []
            for sgn in (1, -1):
                f = flat.copy()
                f[i] += sgn * eps
                q = p.replace({name: f.reshape(p[name].shape)})
                c, tq = _mean_ce(q, toks, mask)
                if any(not np.array_equal(a.routes, b.routes) for a, b in zip(tq.layers, tr.layers)):
                    break
                vals.append(c)
            else:
                fd = (vals[0] - vals[1]) / (2 * eps)
                an = grads[name].reshape(-1)[i]
                if max(abs(fd), abs(an)) > 1e-7:
                    worst = max(worst, float(relative_error(an, fd)))
                checked += 1
    assert checked > 500
    assert worst < 1e-4


def test_unselected_score_gradients_are_exactly_zero():
    p = small_model(seed=12, dtype=np.float32)
    toks = random_tokens(12, 10, 12)
    targets, mask = next_token_targets(toks)
    _, tr = forward(p, toks)
    g = backward(p, tr, targets, mask)
    for l, L in enumerate(tr.layers):
        sel = np.zeros_like(g.score_grads[l], dtype=bool)
        np.put_along_axis(sel, L.routes, True, axis=1)
        assert np.all(g.score_grads[l][~sel] == 0)


def test_empty_mask_gives_zero_gradients():
    p = small_model(seed=13)
    toks = random_tokens(13, 6, 12)
    targets, _ = next_token_targets(toks)
    _, tr = forward(p, toks)
    g = backward(p, tr, targets, np.zeros(6, dtype=bool))
    assert all(not np.any(v) for v in g.params.values())


def test_router_names():
    assert router_names(1) == ("blocks.1.router.weight", "blocks.1.router.bias")
