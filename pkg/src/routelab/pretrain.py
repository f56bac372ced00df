"""MoE pretraining: LM cross-entropy with executed-route gradients plus Switch load balancing.

Two gradient identities are exposed for checking:

* router-score gradient of the LM loss, ``g_j * (dC/dh . (E_j(x) - h))`` on
  the executed route and exactly zero elsewhere (:func:`verify_score_gradients`);
* load-balancing gradient ``(lambda N / T) (diag(p_t) - p_t p_t^T) f`` with
  the routed-slot fractions ``f`` held fixed (:func:`lb_grad`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InvalidConfigError, NonFiniteLossError
from .model import ForwardTrace, ModelParams, backward, forward, next_token_targets
from .numerics import CHECK_DTYPE, RngState, relative_error
from .optim import AdamW, clip_by_global_norm


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 2000
    lb_coef: float = 0.01
    clip: float = 1.0
    seed: int = 42
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lb_coef < 0:
            raise InvalidConfigError("lb_coef must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise InvalidConfigError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise InvalidConfigError(f"unknown train config keys: {sorted(set(data) - known)}")
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


def token_ce(logits, targets) -> np.ndarray:
    """Per-position natural-log cross-entropy, computed in float64."""
    z = np.asarray(logits, dtype=CHECK_DTYPE)
    targets = np.asarray(targets, dtype=np.int64)
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
    return lse - np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]


def lm_loss(logits, targets, mask=None) -> float:
    """Mean cross-entropy over masked positions; an empty mask yields 0 and an :class:`EmptyMaskWarning`."""
    ce = token_ce(logits, targets)
    mask = np.ones(ce.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("lm_loss over an empty mask is defined as 0", EmptyMaskWarning, stacklevel=2)
        return 0.0
    return float(ce[mask].mean())


@dataclass
class RoutingBatchStats:
    f: np.ndarray  # routed-slot fraction per expert
    p_bar: np.ndarray  # mean router probability per expert
    tokens: int
    k: int

    @classmethod
    def from_routes(cls, routes: np.ndarray, probs: np.ndarray, n_experts: int) -> RoutingBatchStats:
        """``routes`` is (T, k) executed expert indices, ``probs`` is (T, N) router softmax."""
        T, k = routes.shape
        counts = np.bincount(routes.reshape(-1), minlength=n_experts).astype(CHECK_DTYPE)
        return cls(f=counts / (T * k), p_bar=np.asarray(probs, dtype=CHECK_DTYPE).mean(axis=0), tokens=T, k=k)


def switch_lb_loss(stats: RoutingBatchStats, lam: float) -> float:
    n = stats.f.shape[0]
    return float(lam * n * np.dot(stats.f, stats.p_bar))


def lb_grad(p_t, f, lam: float, T: int) -> np.ndarray:
    """Gradient of the Switch loss w.r.t. router scores of one token (or rows of a (T, N) array)."""
    p = np.asarray(p_t, dtype=CHECK_DTYPE)
    f = np.asarray(f, dtype=CHECK_DTYPE)
    n = f.shape[0]
    # shifting f by a constant leaves the gradient unchanged; this shift makes balanced f give exact zeros
    f = f - f[0]
    pf = p @ f
    return (lam * n / T) * (p * f - p * np.expand_dims(pf, -1))


def _router_probs(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=CHECK_DTYPE)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


@dataclass
class BatchResult:
    lm_loss: float
    lb_loss: float
    grads: dict[str, np.ndarray]
    stats: list[RoutingBatchStats]


def batch_gradients(params: ModelParams, sequences: Sequence[Sequence[int]], lb_coef: float) -> BatchResult:
    """Forward/backward over a batch in fixed order; LM mean and load-balance stats are batch-wide."""
    cfg = params.config
    items = []
    for seq in sequences:
        _, tr = forward(params, seq)
        targets, mask = next_token_targets(seq)
        items.append((tr, targets, mask))
    count = sum(int(m.sum()) for _, _, m in items)

    stats, probs_per_layer = [], []
    for l in range(cfg.blocks):
        routes = np.concatenate([tr.layers[l].routes[m] for tr, _, m in items])
        probs = [_router_probs(tr.layers[l].scores) for tr, _, _ in items]
        allp = np.concatenate([p[m] for p, (_, _, m) in zip(probs, items)])
        stats.append(RoutingBatchStats.from_routes(routes, allp, cfg.experts))
        probs_per_layer.append(probs)
    lb = sum(switch_lb_loss(s, lb_coef) for s in stats)

    total_ce = 0.0
    grads = {name: np.zeros_like(t) for name, t in params.items()}
    for i, (tr, targets, mask) in enumerate(items):
        total_ce += float(token_ce(tr.logits, targets)[mask].sum())
        extra = None
        if lb_coef > 0:
            extra = []
            for l in range(cfg.blocks):
                g = lb_grad(probs_per_layer[l][i], stats[l].f, lb_coef, count)
                g[~mask] = 0.0
                extra.append(g)
        g = backward(params, tr, targets, mask, denom=count, extra_score_grads=extra)
        for name, v in g.params.items():
            grads[name] += v
    return BatchResult(lm_loss=total_ce / max(count, 1), lb_loss=lb, grads=grads, stats=stats)


def heldout_ce(params: ModelParams, sequences: Sequence[Sequence[int]]) -> float:
    total, count = 0.0, 0
    for seq in sequences:
        logits, _ = forward(params, seq)
        targets, mask = next_token_targets(seq)
        total += float(token_ce(logits, targets)[mask].sum())
        count += int(mask.sum())
    return total / max(count, 1)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    initial_heldout_ce: float | None = None
    final_heldout_ce: float | None = None


def train(params: ModelParams, corpus: Sequence[Sequence[int]], config: TrainConfig = TrainConfig(),
          heldout: Sequence[Sequence[int]] | None = None,
          progress: Callable[[dict], None] | None = None) -> tuple[ModelParams, TrainLog]:
    """AdamW on LM + load-balancing loss. Batches are drawn per step from a seeded stream."""
    if not corpus:
        raise InvalidConfigError("training corpus is empty")
    opt = AdamW(config.lr, config.weight_decay, config.betas, config.adam_eps)
    root = RngState(config.seed).child("pretrain")
    log = TrainLog()
    if heldout:
        log.initial_heldout_ce = heldout_ce(params, heldout)
    bs = min(config.batch_size, len(corpus))
    for step in range(config.steps):
        idx = root.child("batch", step).gen.choice(len(corpus), size=bs, replace=False)
        res = batch_gradients(params, [corpus[i] for i in idx], config.lb_coef)
        loads = [s.f for s in res.stats]
        record = {
            "step": step,
            "lm_loss": res.lm_loss,
            "lb_loss": res.lb_loss,
            "max_f": float(max(f.max() for f in loads)),
            "min_f": float(min(f.min() for f in loads)),
            "load": [[float(x) for x in f] for f in loads],
        }
        if not (math.isfinite(res.lm_loss) and math.isfinite(res.lb_loss)):
            raise NonFiniteLossError(f"non-finite loss at step {step}", record)
        grads, norm = clip_by_global_norm(res.grads, config.clip)
        record["grad_norm"] = norm
        params = params.replace(opt.step(dict(params.items()), grads))
        log.records.append(record)
        if progress is not None:
            progress(record)
    if heldout:
        log.final_heldout_ce = heldout_ce(params, heldout)
    return params, log


# ---------------------------------------------------------------------------
# gradient identity checks
# ---------------------------------------------------------------------------


@dataclass
class ScoreGradReport:
    max_rel_err_selected: float = 0.0
    max_rel_err_backward: float = 0.0
    max_abs_delta_unselected: float = 0.0
    checked_selected: int = 0
    checked_unselected: int = 0
    skipped: int = 0


def _mean_ce(params, tokens, offsets=None) -> tuple[float, ForwardTrace]:
    logits, tr = forward(params, tokens, score_offsets=offsets)
    targets, mask = next_token_targets(tokens)
    return float(token_ce(logits, targets)[mask].mean()), tr


def _same_routes(a: ForwardTrace, b: ForwardTrace) -> bool:
    return all(np.array_equal(x.routes, y.routes) for x, y in zip(a.layers, b.layers))


def verify_score_gradients(params: ModelParams, tokens, eps: float = 1e-5) -> ScoreGradReport:
    """Check the executed-route router gradient against central differences of the mean CE.

    Every (position, layer, expert) score is perturbed by ``+-eps``.
    Coordinates whose perturbation flips any top-k selection are skipped.
    Selected experts compare the analytic gradient to the finite difference;
    unselected experts must leave the loss unchanged.
    """
    p64 = params.astype(CHECK_DTYPE)
    cfg = p64.config
    tokens = np.asarray(tokens, dtype=np.int64)
    base, tr = _mean_ce(p64, tokens)
    targets, mask = next_token_targets(tokens)
    grads = backward(p64, tr, targets, mask)
    rep = ScoreGradReport()
    for l in range(cfg.blocks):
        L = tr.layers[l]
        for t in range(tokens.size):
            dh = grads.moe_output_grads[l][t]
            for j in range(cfg.experts):
                off = np.zeros(cfg.experts)
                off[j] = eps
                c_hi, tr_hi = _mean_ce(p64, tokens, {(t, l): off})
                c_lo, tr_lo = _mean_ce(p64, tokens, {(t, l): -off})
                if not (_same_routes(tr, tr_hi) and _same_routes(tr, tr_lo)):
                    rep.skipped += 1
                    continue
                slot = np.nonzero(L.routes[t] == j)[0]
                if slot.size:
                    s = int(slot[0])
                    analytic = L.gates[t, s] * float(dh @ (L.eout[t, s] - L.h[t]))
                    fd = (c_hi - c_lo) / (2 * eps)
                    rep.max_rel_err_selected = max(rep.max_rel_err_selected, float(relative_error(analytic, fd)))
                    rep.max_rel_err_backward = max(
                        rep.max_rel_err_backward, float(relative_error(grads.score_grads[l][t, j], analytic)))
                    rep.checked_selected += 1
                else:
                    rep.max_abs_delta_unselected = max(rep.max_abs_delta_unselected, abs(c_hi - base), abs(c_lo - base))
                    rep.checked_unselected += 1
    return rep
