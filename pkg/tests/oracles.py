"""Independent reference implementations used as test oracles.

The reference forward is written in whole-sequence matrix form with a dense
gate matrix and a causal mask, sharing no code with the incremental engine.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

from routelab.model import ModelConfig, ModelParams, init_params
from routelab.numerics import RngState


def _rms(x, gain, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reference_forward(params: ModelParams, tokens, overrides=None, dtype=np.float64):
    """Logits for every position; ``overrides`` maps (t, layer) to an expert index list."""
    cfg = params.config
    P = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    toks = np.asarray(tokens)
    T, d, N = toks.size, cfg.width, cfg.experts
    x = P["tok_emb"][toks] + P["pos_emb"][:T]
    causal = np.triu(np.ones((T, T), dtype=bool), 1)
    for l in range(cfg.blocks):
        p = f"blocks.{l}."
        if cfg.attention:
            a = _rms(x, P[p + "norm1"])
            q, k, v = a @ P[p + "attn.wq"], a @ P[p + "attn.wk"], a @ P[p + "attn.wv"]
            att = (q @ k.T) / math.sqrt(d)
            att[causal] = -np.inf
            x = x + (_softmax_rows(att) @ v) @ P[p + "attn.wo"]
        m = _rms(x, P[p + "norm2"])
        s = m @ P[p + "router.weight"].T + P[p + "router.bias"]
        gates = np.zeros((T, N), dtype=dtype)
        for t in range(T):
            if overrides and (t, l) in overrides:
                sel = sorted(int(i) for i in overrides[(t, l)])
            else:
                sel = sorted(sorted(range(N), key=lambda j: (-s[t, j], j))[: cfg.active])
            gates[t, sel] = _softmax_rows(s[t, sel][None])[0]
        hidden = np.maximum(np.einsum("td,ndh->tnh", m, P[p + "experts.w1"]), 0)
        out = np.einsum("tnh,nhd->tnd", hidden, P[p + "experts.w2"])
        x = x + np.einsum("tn,tnd->td", gates, out)
        if cfg.shared_experts:
            sh = np.maximum(np.einsum("td,ndh->tnh", m, P[p + "shared.w1"]), 0)
            x = x + np.einsum("tnh,nhd->td", sh, P[p + "shared.w2"])
    return x @ P["unembed"]


def small_model(seed=0, dtype=np.float64, **overrides) -> ModelParams:
    base = dict(vocab_size=12, width=8, blocks=2, experts=4, active=2, expert_hidden=8, max_context=16)
    base.update(overrides)
    return init_params(ModelConfig(**base), RngState(seed), dtype)


def random_tokens(seed, T, V):
    return np.random.default_rng(seed).integers(0, V, size=T)


def subset_pass_at_k(n, c, K) -> Fraction:
    """Fraction of K-subsets of n items (c of them correct) containing a correct one."""
    items = [1] * c + [0] * (n - c)
    total = hit = 0
    for comb in itertools.combinations(range(n), K):
        total += 1
        hit += any(items[i] for i in comb)
    return Fraction(hit, total)
