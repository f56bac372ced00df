"""Expert preference optimization: a router-only, CE-gap-weighted preference update.

On hard tokens (next-token CE above ``tau``) the currently selected route
``r-`` is compared with Gumbel-sampled equal-compute routes. When the best
sample ``r+`` lowers the CE by ``delta > 0`` the pair contributes

    loss = -delta * log sigmoid(beta * [(log pi(r+) - log ref(r+)) - (log pi(r-) - log ref(r-))])

where ``log pi(r)`` sums the full N-way log-softmax of router scores over the
experts in ``r``. Only ``W_r`` and ``b_r`` of the target layer are trained.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Trajectory
from .errors import InternalInvariantError, InvalidConfigError, NonFiniteLossError
from .model import ForwardTrace, ModelParams, forward, intervened_logits, router_names
from .numerics import CHECK_DTYPE, RngState, log_softmax
from .counterfactual import build_pool, sample_alternatives
from .optim import AdamW, clip_by_global_norm
from .pretrain import token_ce


@dataclass(frozen=True)
class EPOConfig:
    layer: int = -1
    tau: float = 0.1
    G: int = 32
    pool: int = 32
    noise: float = 1.0
    beta: float = 0.1
    lr: float = 3e-4
    weight_decay: float = 0.01
    clip: float = 1.0
    batch_size: int = 16
    epochs: int = 1
    seed: int = 42

    def __post_init__(self):
        if self.G < 1 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfigError("G and batch_size must be >= 1, epochs >= 0")
        if not self.beta > 0:
            raise InvalidConfigError("beta must be > 0")
        if math.isnan(self.tau):
            raise InvalidConfigError("tau must be a number")

    def resolve_layer(self, blocks: int) -> int:
        layer = self.layer + blocks if self.layer < 0 else self.layer
        if not 0 <= layer < blocks:
            raise InvalidConfigError(f"layer {self.layer} invalid for {blocks} blocks")
        return layer

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.tau):
            d["tau"] = "inf"
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> EPOConfig:
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise InvalidConfigError(f"unknown EPO config keys: {sorted(set(data) - known)}")
        data = dict(data)
        if "tau" in data:
            data["tau"] = float(data["tau"])
        return cls(**data)


@dataclass(frozen=True)
class PreferencePair:
    position: int
    rejected: tuple[int, ...]
    chosen: tuple[int, ...]
    delta: float
    ref_scores: np.ndarray
    trajectory_id: str = ""


def token_losses(trace: ForwardTrace) -> np.ndarray:
    """CE of each position's realized next token (last position gets NaN)."""
    toks = trace.tokens
    ce = np.full(toks.size, np.nan)
    ce[:-1] = token_ce(trace.logits[:-1], toks[1:])
    return ce


def find_hard_tokens(params: ModelParams, trajectory: Trajectory, tau: float,
                     trace: ForwardTrace | None = None) -> np.ndarray:
    """Response positions whose teacher-forced CE under ``params`` exceeds ``tau``."""
    if trace is None:
        _, trace = forward(params, trajectory.tokens)
    pos = trajectory.target_positions()
    ce = token_losses(trace)[pos]
    return pos[ce > tau]


def route_log_prob(scores, route: Sequence[int]) -> float:
    """Factorized route log-probability: sum of the full N-way log-softmax over ``route``."""
    lp = log_softmax(np.asarray(scores, dtype=CHECK_DTYPE))
    return float(lp[list(route)].sum())


def _log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


def _inner(pair: PreferencePair, scores, beta: float) -> float:
    ref = pair.ref_scores
    return beta * ((route_log_prob(scores, pair.chosen) - route_log_prob(ref, pair.chosen))
                   - (route_log_prob(scores, pair.rejected) - route_log_prob(ref, pair.rejected)))


def epo_loss(pair: PreferencePair, scores, beta: float) -> float:
    return -pair.delta * _log_sigmoid(_inner(pair, scores, beta))


def epo_logit_grad(pair: PreferencePair, scores, beta: float) -> np.ndarray:
    """Gradient of :func:`epo_loss` w.r.t. the trainable router scores.

    With equal route sizes the normalizer terms cancel, leaving support only
    on the symmetric difference of the two routes.
    """
    z = _inner(pair, scores, beta)
    coef = -pair.delta * beta * (1.0 - 1.0 / (1.0 + math.exp(-z)))
    g = np.zeros(np.asarray(scores).shape[0], dtype=CHECK_DTYPE)
    plus, minus = set(pair.chosen), set(pair.rejected)
    for e in plus - minus:
        g[e] += coef
    for e in minus - plus:
        g[e] -= coef
    return g


def epo_grad(pair: PreferencePair, scores, beta: float, x_t) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. ``(W_r, b_r)`` given router input ``x_t``."""
    g = epo_logit_grad(pair, scores, beta)
    return np.outer(g, np.asarray(x_t, dtype=CHECK_DTYPE)), g


def choose_preference(ce_rejected: float, candidates: Sequence[tuple[tuple[int, ...], float]]
                      ) -> tuple[tuple[int, ...], float] | None:
    """Lowest-CE candidate and its gap, or ``None`` if nothing beats ``ce_rejected``.

    Ties on CE go to the lexicographically smallest route.
    """
    if not candidates:
        return None
    route, ce = min(candidates, key=lambda rc: (rc[1], tuple(rc[0])))
    if not ce < ce_rejected:
        return None
    return tuple(route), float(ce_rejected - ce)


def build_preference(params: ModelParams, trace: ForwardTrace, t: int, layer: int, config: EPOConfig,
                     rng: RngState, ref_scores=None, trajectory_id: str = "") -> PreferencePair | None:
    cfg = params.config
    L = trace.layers[layer]
    y = int(trace.tokens[t + 1])
    rejected = tuple(int(i) for i in L.routes[t])
    ce_rej = float(token_ce(trace.logits[t], y))
    scores = L.scores[t]
    pool = build_pool(scores, config.pool, cfg.active)
    cache: dict[tuple[int, ...], float] = {}
    for route in sample_alternatives(scores, pool, cfg.active, config.G, rng, config.noise):
        if route not in cache:
            cache[route] = ce_rej if route == rejected else float(
                token_ce(intervened_logits(params, trace, t, layer, route), y))
    choice = choose_preference(ce_rej, list(cache.items()))
    if choice is None:
        return None
    chosen, delta = choice
    ref = np.asarray(scores if ref_scores is None else ref_scores, dtype=CHECK_DTYPE).copy()
    return PreferencePair(t, rejected, chosen, delta, ref, trajectory_id)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EPOLog:
    records: list[dict] = field(default_factory=list)
    hard_tokens: list[tuple[str, int]] = field(default_factory=list)
    ce_before: float | None = None
    ce_after: float | None = None
    changed: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        built = sum(r["pairs"] for r in self.records)
        return {
            "steps": len(self.records),
            "pairs_built": built,
            "pairs_skipped": sum(r["skipped"] for r in self.records),
            "hard_tokens": len(self.hard_tokens),
            "hard_ce_before": self.ce_before,
            "hard_ce_after": self.ce_after,
            "changed_tensors": list(self.changed),
        }


def _ref_scores(w0: np.ndarray, b0: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.asarray(w0 @ m + b0, dtype=CHECK_DTYPE)


def _mean_hard_ce(params: ModelParams, trajectories: Sequence[Trajectory],
                  hard: Sequence[tuple[int, int]]) -> float | None:
    if not hard:
        return None
    traces: dict[int, np.ndarray] = {}
    total = 0.0
    for i, t in hard:
        if i not in traces:
            traces[i] = token_losses(forward(params, trajectories[i].tokens)[1])
        total += float(traces[i][t])
    return total / len(hard)


def epo_train(params: ModelParams, trajectories: Sequence[Trajectory], config: EPOConfig = EPOConfig(),
              threads: int = 1, progress: Callable[[dict], None] | None = None) -> tuple[ModelParams, EPOLog]:
    """Train the target layer's router on online preference pairs.

    Each step covers ``batch_size`` trajectories in a seeded order. Hard
    tokens and pairs are rebuilt under the current router; a step with no
    pairs leaves the parameters untouched. The returned log compares the
    mean CE of all selected hard tokens under the initial and final routers.
    """
    layer = config.resolve_layer(params.config.blocks)
    wname, bname = router_names(layer)
    w0, b0 = params[wname].copy(), params[bname].copy()
    start = params
    opt = AdamW(config.lr, config.weight_decay, eps=1e-8)
    root = RngState(config.seed).child("epo")
    log = EPOLog()
    hard_set: list[tuple[int, int]] = []
    step = 0
    n = len(trajectories)
    for epoch in range(config.epochs):
        order = root.child("order", epoch).gen.permutation(n) if n else np.zeros(0, dtype=np.int64)
        for b0_ in range(0, n, config.batch_size):
            batch = [int(i) for i in order[b0_:b0_ + config.batch_size]]

            def pairs_for(i: int):
                traj = trajectories[i]
                _, tr = forward(params, traj.tokens)
                hard = find_hard_tokens(params, traj, config.tau, tr)
                out = []
                for t in hard:
                    t = int(t)
                    ref = _ref_scores(w0, b0, tr.layers[layer].m[t])
                    rng = root.child("pair", epoch, traj.problem_id, t)
                    pair = build_preference(params, tr, t, layer, config, rng, ref, traj.problem_id)
                    out.append((t, pair, tr.layers[layer].scores[t], tr.layers[layer].m[t]))
                return out

            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as ex:
                    results = list(ex.map(pairs_for, batch))
            else:
                results = [pairs_for(i) for i in batch]

            gw = np.zeros(w0.shape, dtype=CHECK_DTYPE)
            gb = np.zeros(b0.shape, dtype=CHECK_DTYPE)
            losses, deltas, skipped, hard_count = [], [], 0, 0
            for i, items in zip(batch, results):
                for t, pair, scores, m in items:
                    hard_count += 1
                    hard_set.append((i, t))
                    if pair is None:
                        skipped += 1
                        continue
                    losses.append(epo_loss(pair, scores, config.beta))
                    deltas.append(pair.delta)
                    dw, db = epo_grad(pair, scores, config.beta, m)
                    gw += dw
                    gb += db
            record = {
                "step": step, "epoch": epoch, "hard_tokens": hard_count, "pairs": len(losses),
                "skipped": skipped, "mean_delta": float(np.mean(deltas)) if deltas else None,
                "mean_loss": float(np.mean(losses)) if losses else None, "grad_norm": None,
            }
            if losses:
                if not all(math.isfinite(v) for v in losses):
                    raise NonFiniteLossError(f"non-finite EPO loss at step {step}", record)
                grads = {wname: (gw / len(losses)).astype(params.dtype),
                         bname: (gb / len(losses)).astype(params.dtype)}
                grads, norm = clip_by_global_norm(grads, config.clip)
                record["grad_norm"] = norm
                params = params.replace(opt.step(dict(params.items()), grads))
            log.records.append(record)
            if progress is not None:
                progress(record)
            step += 1

    changed = start.diff(params)
    if not set(changed) <= {wname, bname}:
        raise InternalInvariantError(f"EPO modified non-router tensors: {sorted(set(changed) - {wname, bname})}")
    log.changed = changed
    log.hard_tokens = [(trajectories[i].problem_id, t) for i, t in hard_set]
    log.ce_before = _mean_hard_ce(start, trajectories, hard_set)
    log.ce_after = _mean_hard_ce(params, trajectories, hard_set)
    return params, log
