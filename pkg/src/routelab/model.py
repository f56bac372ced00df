"""Toy top-k MoE language model with trace capture, route intervention and manual backward.

Architecture per block (pre-norm residual):

    x  <- x + Attn(RMSNorm(x))          single head, causal
    m   = RMSNorm(x)                    router/expert input
    s   = W_r m + b_r                   router scores
    x  <- x + sum_{i in S} g_i E_i(m) + sum_shared E(m)

with ``S = top_k(s)`` and ``g = softmax(s[S])``. Experts are two-layer ReLU MLPs.

The forward pass runs one position at a time against a key/value cache. The
same per-position code is reused by :func:`forward_with_intervention`, which
is what makes an identity intervention reproduce the recorded logits bit for
bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, InvalidRouteError, TraceMismatchError
from .numerics import WORKING_DTYPE, RngState, top_k

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 40
    width: int = 64
    blocks: int = 2
    experts: int = 8
    active: int = 2
    shared_experts: int = 0
    expert_hidden: int = 128
    max_context: int = 64
    attention: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "width", "blocks", "experts", "expert_hidden", "max_context"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if not 1 <= self.active <= self.experts:
            raise InvalidConfigError(f"need 1 <= active ({self.active}) <= experts ({self.experts})")
        if self.shared_experts < 0:
            raise InvalidConfigError("shared_experts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes, in checkpoint order."""
    d, n, h = cfg.width, cfg.experts, cfg.expert_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_context, d),
    }
    for l in range(cfg.blocks):
        p = f"blocks.{l}."
        if cfg.attention:
            shapes[p + "norm1"] = (d,)
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + "attn." + w] = (d, d)
        shapes[p + "norm2"] = (d,)
        shapes[p + "router.weight"] = (n, d)
        shapes[p + "router.bias"] = (n,)
        shapes[p + "experts.w1"] = (n, d, h)
        shapes[p + "experts.w2"] = (n, h, d)
        if cfg.shared_experts:
            shapes[p + "shared.w1"] = (cfg.shared_experts, d, h)
            shapes[p + "shared.w2"] = (cfg.shared_experts, h, d)
    shapes["unembed"] = (d, cfg.vocab_size)
    return shapes


def router_names(layer: int) -> tuple[str, str]:
    return f"blocks.{layer}.router.weight", f"blocks.{layer}.router.bias"


class LayerParams(NamedTuple):
    norm1: np.ndarray | None
    wq: np.ndarray | None
    wk: np.ndarray | None
    wv: np.ndarray | None
    wo: np.ndarray | None
    norm2: np.ndarray
    router_w: np.ndarray
    router_b: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    shared_w1: np.ndarray | None
    shared_w2: np.ndarray | None
    k: int


class ModelParams:
    """Immutable set of named tensors. Use :meth:`replace` to derive updated parameters."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise InvalidInputError(f"tensor set mismatch: missing={missing} extra={extra}")
        dtypes = {np.asarray(t).dtype for t in tensors.values()}
        if len(dtypes) != 1 or not np.issubdtype(next(iter(dtypes)), np.floating):
            raise InvalidInputError(f"all tensors must share one float dtype, got {dtypes}")
        store = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise InvalidInputError(f"{name}: shape {arr.shape} != {shape}")
            if not arr.flags.writeable and arr.flags.c_contiguous:
                store[name] = arr
            else:
                arr = np.ascontiguousarray(arr).copy()
                arr.flags.writeable = False
                store[name] = arr
        self.config = config
        self._tensors = store
        self._digest: str | None = None
        self._layers: list[LayerParams] | None = None

    @property
    def dtype(self) -> np.dtype:
        return self._tensors["tok_emb"].dtype

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def replace(self, updates: Mapping[str, np.ndarray]) -> ModelParams:
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise InvalidInputError(f"unknown tensors: {sorted(unknown)}")
        merged = dict(self._tensors)
        for name, value in updates.items():
            merged[name] = np.asarray(value, dtype=self.dtype)
        return ModelParams(self.config, merged)

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, {n: t.astype(dtype) for n, t in self._tensors.items()})

    def digest(self) -> str:
        """SHA-256 over names, dtypes, shapes and raw bytes of every tensor."""
        if self._digest is None:
            h = hashlib.sha256()
            for name, t in self._tensors.items():
                h.update(f"{name}|{t.dtype.str}|{t.shape}|".encode())
                h.update(t.tobytes())
            self._digest = h.hexdigest()
        return self._digest

    def layer(self, l: int) -> LayerParams:
        if self._layers is None:
            self._layers = [self._build_layer(i) for i in range(self.config.blocks)]
        return self._layers[l]

    def _build_layer(self, l: int) -> LayerParams:
        p = f"blocks.{l}."
        t = self._tensors
        att = self.config.attention
        shared = self.config.shared_experts > 0
        return LayerParams(
            norm1=t[p + "norm1"] if att else None,
            wq=t[p + "attn.wq"] if att else None,
            wk=t[p + "attn.wk"] if att else None,
            wv=t[p + "attn.wv"] if att else None,
            wo=t[p + "attn.wo"] if att else None,
            norm2=t[p + "norm2"],
            router_w=t[p + "router.weight"],
            router_b=t[p + "router.bias"],
            w1=t[p + "experts.w1"],
            w2=t[p + "experts.w2"],
            shared_w1=t[p + "shared.w1"] if shared else None,
            shared_w2=t[p + "shared.w2"] if shared else None,
            k=self.config.active,
        )

    def diff(self, other: ModelParams) -> list[str]:
        """Names of tensors whose bytes differ from ``other``."""
        return [n for n, t in self._tensors.items() if t.tobytes() != other[n].tobytes()]


def init_params(cfg: ModelConfig, rng: RngState, dtype=WORKING_DTYPE) -> ModelParams:
    """Normal(0, 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("norm1", "norm2")):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = cfg.width if name in ("tok_emb", "pos_emb") or name.endswith("router.weight") else shape[-2]
            draw = rng.child("init", name).gen.standard_normal(shape)
            tensors[name] = (draw / math.sqrt(fan_in)).astype(dtype)
    return ModelParams(cfg, tensors)


@dataclass(frozen=True)
class Route:
    """Canonical (ascending) set of expert indices plus its gate weights."""

    indices: tuple[int, ...]
    gates: tuple[float, ...] = ()

    @classmethod
    def from_scores(cls, indices: Iterable[int], scores) -> Route:
        idx = tuple(sorted(int(i) for i in indices))
        g = _softmax(np.asarray(scores)[list(idx)])
        return cls(idx, tuple(float(x) for x in g))

    def __len__(self) -> int:
        return len(self.indices)


def validate_route(indices: Sequence[int], n_experts: int, k: int) -> np.ndarray:
    idx = np.asarray([int(i) for i in indices], dtype=np.int64)
    if idx.shape != (k,):
        raise InvalidRouteError(f"route must have exactly {k} experts, got {len(idx)}")
    if np.any(idx < 0) or np.any(idx >= n_experts):
        raise InvalidRouteError(f"route indices out of range [0, {n_experts}): {idx.tolist()}")
    if len(set(idx.tolist())) != k:
        raise InvalidRouteError(f"route has duplicated experts: {idx.tolist()}")
    return np.sort(idx)


def _as_indices(route) -> Sequence[int]:
    return route.indices if isinstance(route, Route) else route


# ---------------------------------------------------------------------------
# per-position kernels (shared by forward, intervention and generation)
# ---------------------------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = 1.0 / np.sqrt(np.mean(x * x) + RMS_EPS)
    r = np.asarray(r, dtype=x.dtype)
    return x * r * gain, r


def _routed(lp: LayerParams, m: np.ndarray, s: np.ndarray, S: np.ndarray):
    g = _softmax(s[S])
    pre = np.matmul(m, lp.w1[S])  # (k, H)
    act = np.maximum(pre, 0)
    out = np.matmul(act[:, None, :], lp.w2[S])[:, 0, :]  # (k, d)
    return g, pre, out, g @ out


def _shared(lp: LayerParams, m: np.ndarray):
    pre = np.matmul(m, lp.shared_w1)
    out = np.matmul(np.maximum(pre, 0)[:, None, :], lp.shared_w2)[:, 0, :]
    return pre, out


def moe_layer_forward(x, layer: LayerParams, override=None) -> np.ndarray:
    """Routed mixture plus shared experts for a single pre-MoE hidden vector ``x``."""
    x = np.asarray(x, dtype=layer.router_w.dtype)
    s = layer.router_w @ x + layer.router_b
    if override is None:
        S = top_k(s, layer.k)
    else:
        S = validate_route(_as_indices(override), layer.router_w.shape[0], layer.k)
    _, _, _, h = _routed(layer, x, s, S)
    if layer.shared_w1 is not None:
        _, so = _shared(layer, x)
        for row in so:
            h = h + row
    return h


@dataclass
class LayerTrace:
    x_in: np.ndarray
    x_mid: np.ndarray
    m: np.ndarray  # pre-MoE hidden (router input)
    m_scale: np.ndarray
    scores: np.ndarray
    routes: np.ndarray
    gates: np.ndarray
    hpre: np.ndarray
    eout: np.ndarray
    h: np.ndarray  # routed mixture only
    x_out: np.ndarray
    a: np.ndarray | None = None
    a_scale: np.ndarray | None = None
    q: np.ndarray | None = None
    k: np.ndarray | None = None
    v: np.ndarray | None = None
    att: np.ndarray | None = None
    ctx: np.ndarray | None = None
    shared_pre: np.ndarray | None = None
    shared_out: np.ndarray | None = None

    @classmethod
    def empty(cls, cfg: ModelConfig, T: int, dtype) -> LayerTrace:
        d, k, h, n = cfg.width, cfg.active, cfg.expert_hidden, cfg.experts
        z = lambda *shape: np.zeros(shape, dtype=dtype)  # noqa: E731
        tr = cls(
            x_in=z(T, d), x_mid=z(T, d), m=z(T, d), m_scale=z(T), scores=z(T, n),
            routes=np.zeros((T, k), dtype=np.int64), gates=z(T, k), hpre=z(T, k, h),
            eout=z(T, k, d), h=z(T, d), x_out=z(T, d),
        )
        if cfg.attention:
            tr.a, tr.a_scale = z(T, d), z(T)
            tr.q, tr.k, tr.v = z(T, d), z(T, d), z(T, d)
            tr.att, tr.ctx = z(T, T), z(T, d)
        if cfg.shared_experts:
            tr.shared_pre = z(T, cfg.shared_experts, h)
            tr.shared_out = z(T, cfg.shared_experts, d)
        return tr


@dataclass
class ForwardTrace:
    """Cached per-position, per-block activations of one forward pass."""

    tokens: np.ndarray
    digest: str
    layers: list[LayerTrace]
    x_final: np.ndarray
    logits: np.ndarray
    modified: bool = False
    length: int = field(default=0)

    def distribution(self, t: int) -> np.ndarray:
        return _softmax(self.logits[t])


def _attention_part(lp: LayerParams, x: np.ndarray, t: int, K: np.ndarray, V: np.ndarray):
    a, ra = _rmsnorm(x, lp.norm1)
    q = a @ lp.wq
    K[t] = a @ lp.wk
    V[t] = a @ lp.wv
    inv = np.asarray(1.0 / math.sqrt(x.shape[0]), dtype=x.dtype)
    w = _softmax((K[: t + 1] @ q) * inv)
    ctx = w @ V[: t + 1]
    xm = x + ctx @ lp.wo
    return a, ra, q, w, ctx, xm


def _moe_part(lp: LayerParams, xm: np.ndarray, offset=None, override=None):
    m, rm = _rmsnorm(xm, lp.norm2)
    s = lp.router_w @ m + lp.router_b
    if offset is not None:
        s = s + np.asarray(offset, dtype=s.dtype)
    S = top_k(s, lp.k) if override is None else override
    g, pre, out, h = _routed(lp, m, s, S)
    xo = xm + h
    spre = sout = None
    if lp.shared_w1 is not None:
        spre, sout = _shared(lp, m)
        for row in sout:
            xo = xo + row
    return m, rm, s, S, g, pre, out, h, spre, sout, xo


def _new_trace(params: ModelParams, tokens: np.ndarray, capacity: int) -> ForwardTrace:
    cfg, dt = params.config, params.dtype
    return ForwardTrace(
        tokens=tokens,
        digest=params.digest(),
        layers=[LayerTrace.empty(cfg, capacity, dt) for _ in range(cfg.blocks)],
        x_final=np.zeros((capacity, cfg.width), dtype=dt),
        logits=np.zeros((capacity, cfg.vocab_size), dtype=dt),
    )


def _step(params: ModelParams, tr: ForwardTrace, t: int, token: int, overrides=None, offsets=None) -> None:
    """Run position ``t`` through every block, recording into ``tr`` row ``t``."""
    cfg = params.config
    x = params["tok_emb"][token] + params["pos_emb"][t]
    for l in range(cfg.blocks):
        lp = params.layer(l)
        L = tr.layers[l]
        L.x_in[t] = x
        if cfg.attention:
            a, ra, q, w, ctx, xm = _attention_part(lp, x, t, L.k, L.v)
            L.a[t], L.a_scale[t], L.q[t], L.ctx[t] = a, ra, q, ctx
            L.att[t, : t + 1] = w
        else:
            xm = x
        key = (t, l)
        ov = overrides.get(key) if overrides else None
        if ov is not None:
            ov = validate_route(_as_indices(ov), cfg.experts, cfg.active)
        off = offsets.get(key) if offsets else None
        m, rm, s, S, g, pre, out, h, spre, sout, x = _moe_part(lp, xm, off, ov)
        L.x_mid[t], L.m[t], L.m_scale[t], L.scores[t] = xm, m, rm, s
        L.routes[t], L.gates[t], L.hpre[t], L.eout[t], L.h[t], L.x_out[t] = S, g, pre, out, h, x
        if spre is not None:
            L.shared_pre[t], L.shared_out[t] = spre, sout
    tr.x_final[t] = x
    tr.logits[t] = x @ params["unembed"]
    tr.length = t + 1


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size == 0:
        raise InvalidInputError("empty token sequence")
    if toks.size > cfg.max_context:
        raise InvalidInputError(f"sequence length {toks.size} exceeds max_context {cfg.max_context}")
    if np.any(toks < 0) or np.any(toks >= cfg.vocab_size):
        raise InvalidInputError(f"token id out of range [0, {cfg.vocab_size})")
    return toks


def forward(params: ModelParams, tokens, overrides: Mapping | None = None,
            score_offsets: Mapping | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Causal forward pass over ``tokens``.

    ``overrides`` maps ``(t, layer)`` to a replacement route and
    ``score_offsets`` maps ``(t, layer)`` to a vector added to the router
    scores; both exist for oracles and gradient checks.
    """
    toks = _check_tokens(params.config, tokens)
    tr = _new_trace(params, toks, toks.size)
    tr.modified = bool(overrides) or bool(score_offsets)
    for t, tok in enumerate(toks):
        _step(params, tr, t, int(tok), overrides, score_offsets)
    return tr.logits, tr


def intervened_logits(params: ModelParams, trace: ForwardTrace, t: int, layer: int, route) -> np.ndarray:
    """Logits at position ``t`` with the route at ``(t, layer)`` replaced."""
    cfg = params.config
    if trace.digest != params.digest():
        raise TraceMismatchError("trace was produced by different parameters")
    if trace.modified:
        raise InvalidInputError("cannot intervene on a trace produced with overrides or offsets")
    if not 0 <= t < trace.tokens.size:
        raise InvalidInputError(f"position {t} outside [0, {trace.tokens.size})")
    if not 0 <= layer < cfg.blocks:
        raise InvalidInputError(f"layer {layer} outside [0, {cfg.blocks})")
    S = validate_route(_as_indices(route), cfg.experts, cfg.active)
    lp = params.layer(layer)
    x = _moe_part(lp, trace.layers[layer].x_mid[t], None, S)[-1]
    for l in range(layer + 1, cfg.blocks):
        lp = params.layer(l)
        L = trace.layers[l]
        if cfg.attention:
            K = L.k[: t + 1].copy()
            V = L.v[: t + 1].copy()
            x = _attention_part(lp, x, t, K, V)[-1]
        x = _moe_part(lp, x)[-1]
    return x @ params["unembed"]


def forward_with_intervention(params: ModelParams, trace: ForwardTrace, t: int, layer: int, route) -> np.ndarray:
    """Next-token distribution at ``t`` when the route at ``(t, layer)`` is replaced.

    Only position ``t`` is recomputed, from ``layer`` upward; keys and values
    of earlier positions come from the trace.
    """
    return _softmax(intervened_logits(params, trace, t, layer, route))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    score_grads: list[np.ndarray]  # per layer, (T, N): dL/ds including any injected term
    moe_output_grads: list[np.ndarray]  # per layer, (T, d): dL/dh


def _rmsnorm_bwd(dy, x, r, gain):
    dgain = np.sum(dy * x * r[:, None], axis=0)
    dxhat = dy * gain
    d = x.shape[1]
    dot = np.sum(x * dxhat, axis=1)
    dx = r[:, None] * (dxhat - (r * r / d)[:, None] * x * dot[:, None])
    return dx, dgain


def next_token_targets(tokens) -> tuple[np.ndarray, np.ndarray]:
    """Targets aligned with positions (``targets[t] = tokens[t+1]``) and the validity mask."""
    toks = np.asarray(tokens, dtype=np.int64)
    targets = np.zeros_like(toks)
    targets[:-1] = toks[1:]
    mask = np.ones(toks.size, dtype=bool)
    mask[-1] = False
    return targets, mask


def backward(params: ModelParams, trace: ForwardTrace, targets, mask=None, denom: float | None = None,
             extra_score_grads: Sequence[np.ndarray | None] | None = None) -> Gradients:
    """Exact gradients of ``sum_{masked t} CE_t / denom`` with the top-k selection held fixed.

    ``denom`` defaults to the number of masked positions (mean CE).
    ``extra_score_grads`` adds a per-layer ``(T, N)`` gradient on the router
    scores (e.g. from the load-balancing loss) before it is pushed into the
    router weights and the pre-MoE hidden state.
    """
    if trace.digest != params.digest():
        raise TraceMismatchError("trace was produced by different parameters")
    cfg = params.config
    dt = params.dtype
    T = trace.tokens.size
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    denom = float(count) if denom is None else float(denom)

    grads = {name: np.zeros_like(t) for name, t in params.items()}
    logits = trace.logits
    if count and denom > 0:
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        dlogits = z / z.sum(axis=1, keepdims=True)
        dlogits[np.arange(T), targets] -= 1
        dlogits *= (mask / denom).astype(dt)[:, None]
    else:
        dlogits = np.zeros_like(logits)
    grads["unembed"] = trace.x_final.T @ dlogits
    dx = dlogits @ params["unembed"].T

    score_grads: list = [None] * cfg.blocks
    moe_grads: list = [None] * cfg.blocks
    rows = np.arange(T)
    for l in reversed(range(cfg.blocks)):
        lp = params.layer(l)
        L = trace.layers[l]
        p = f"blocks.{l}."
        dh = dx
        moe_grads[l] = dh
        # dC/ds_j = g_j * (dC/dh . (E_j(x) - h)) for j in the executed route, 0 elsewhere
        dgate = np.einsum("tkd,td->tk", L.eout, dh)
        hdot = np.einsum("td,td->t", dh, L.h)
        ds = np.zeros((T, cfg.experts), dtype=dt)
        ds[rows[:, None], L.routes] = L.gates * (dgate - hdot[:, None])
        if extra_score_grads is not None and extra_score_grads[l] is not None:
            ds = ds + np.asarray(extra_score_grads[l], dtype=dt)
        score_grads[l] = ds

        dm = ds @ lp.router_w
        grads[p + "router.weight"] = ds.T @ L.m
        grads[p + "router.bias"] = ds.sum(axis=0)

        dE = L.gates[:, :, None] * dh[:, None, :]
        gw1, gw2 = grads[p + "experts.w1"], grads[p + "experts.w2"]
        for i in range(cfg.experts):
            tt, ss = np.nonzero(L.routes == i)
            if tt.size == 0:
                continue
            pre = L.hpre[tt, ss]
            dEi = dE[tt, ss]
            gw2[i] = np.maximum(pre, 0).T @ dEi
            dpre = (dEi @ lp.w2[i].T) * (pre > 0)
            gw1[i] = L.m[tt].T @ dpre
            dm[tt] += dpre @ lp.w1[i].T
        if lp.shared_w1 is not None:
            sw1, sw2 = grads[p + "shared.w1"], grads[p + "shared.w2"]
            for i in range(cfg.shared_experts):
                pre = L.shared_pre[:, i]
                sw2[i] = np.maximum(pre, 0).T @ dh
                dpre = (dh @ lp.shared_w2[i].T) * (pre > 0)
                sw1[i] = L.m.T @ dpre
                dm += dpre @ lp.shared_w1[i].T

        dxm, grads[p + "norm2"] = _rmsnorm_bwd(dm, L.x_mid, L.m_scale, lp.norm2)
        dxm = dxm + dx
        if cfg.attention:
            grads[p + "attn.wo"] = L.ctx.T @ dxm
            dctx = dxm @ lp.wo.T
            inv = 1.0 / math.sqrt(cfg.width)
            w = L.att
            dw = dctx @ L.v.T
            dsc = w * (dw - np.sum(w * dw, axis=1, keepdims=True)) * inv
            dq = dsc @ L.k
            dk = dsc.T @ L.q
            dv = w.T @ dctx
            grads[p + "attn.wq"] = L.a.T @ dq
            grads[p + "attn.wk"] = L.a.T @ dk
            grads[p + "attn.wv"] = L.a.T @ dv
            da = dq @ lp.wq.T + dk @ lp.wk.T + dv @ lp.wv.T
            dxa, grads[p + "norm1"] = _rmsnorm_bwd(da, L.x_in, L.a_scale, lp.norm1)
            dx = dxa + dxm
        else:
            dx = dxm

    np.add.at(grads["tok_emb"], trace.tokens, dx)
    grads["pos_emb"][:T] = dx
    return Gradients(params=grads, score_grads=score_grads, moe_output_grads=moe_grads)


# ---------------------------------------------------------------------------
# incremental decoding
# ---------------------------------------------------------------------------


def prefill(params: ModelParams, prompt, capacity: int) -> ForwardTrace:
    """Run ``prompt`` into a trace with room for ``capacity`` positions in total."""
    cfg = params.config
    toks = _check_tokens(cfg, prompt)
    if not toks.size <= capacity <= cfg.max_context:
        raise InvalidInputError(f"capacity {capacity} must lie in [{toks.size}, {cfg.max_context}]")
    buf = np.zeros(capacity, dtype=np.int64)
    buf[: toks.size] = toks
    tr = _new_trace(params, buf, capacity)
    for t, tok in enumerate(toks):
        _step(params, tr, t, int(tok))
    return tr


def extend(params: ModelParams, trace: ForwardTrace, token: int) -> np.ndarray:
    """Append ``token`` to a decoding trace and return the new position's logits."""
    t = trace.length
    if t >= trace.tokens.size:
        raise InvalidInputError("decoding trace is full")
    if not 0 <= token < params.config.vocab_size:
        raise InvalidInputError(f"token id {token} out of range")
    trace.tokens[t] = token
    _step(params, trace, t, int(token))
    return trace.logits[t]


def copy_trace(trace: ForwardTrace) -> ForwardTrace:
    def dup(obj):
        return type(obj)(**{f.name: (getattr(obj, f.name).copy() if isinstance(getattr(obj, f.name), np.ndarray)
                                      else getattr(obj, f.name)) for f in fields(obj)})
    out = dup(trace)
    out.layers = [dup(L) for L in trace.layers]
    return out
