"""Counterfactual route audit: compare each executed top-k route against sampled equal-compute routes.

For a token at ``(t, layer)`` the candidate set is the standard route plus
``G`` Gumbel-top-k draws from the ``m`` highest-scoring experts. Each
candidate is scored by the probability its forward pass assigns to the
realized next token of a verified trajectory.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .corpus import Trajectory
from .errors import InvalidConfigError
from .model import ForwardTrace, ModelParams, forward, forward_with_intervention
from .numerics import RngState, gumbel_top_k, top_k

BINS = ("Confident", "Ambiguous", "Fragile")
ROW_LABELS = ("Tokens", "Top-1", "Top-5", "Top-10", "p_std", "p_best", "Gap")
REPORT_COLUMNS = ("trajectory_id", "position", "layer", "p_std", "p_best", "gap", "rank", "p_bar", "bin")


@dataclass(frozen=True)
class AnalysisConfig:
    G: int = 32
    pool: int = 32
    noise: float = 1.0
    layer: int = -1
    ks: tuple[int, ...] = (1, 5, 10)
    hi: float = 0.9
    lo: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if self.G < 1:
            raise InvalidConfigError("G must be >= 1")
        if not 0 <= self.lo <= self.hi <= 1:
            raise InvalidConfigError("bin thresholds must satisfy 0 <= lo <= hi <= 1")
        if not self.noise > 0:
            raise InvalidConfigError("noise scale must be > 0")

    def resolve_layer(self, blocks: int) -> int:
        layer = self.layer + blocks if self.layer < 0 else self.layer
        if not 0 <= layer < blocks:
            raise InvalidConfigError(f"layer {self.layer} invalid for {blocks} blocks")
        return layer

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> AnalysisConfig:
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise InvalidConfigError(f"unknown analysis config keys: {sorted(set(data) - known)}")
        data = dict(data)
        if "ks" in data:
            data["ks"] = tuple(data["ks"])
        return cls(**data)


@dataclass(frozen=True)
class TokenRouteReport:
    trajectory_id: str
    position: int
    layer: int
    p_std: float
    p_best: float
    gap: float
    rank: int
    p_bar: float
    bin: str


def build_pool(scores, m: int, k: int) -> np.ndarray:
    """Ascending indices of the ``min(m, N)`` highest scores (ties to the lower index)."""
    if m < k:
        raise InvalidConfigError(f"pool size {m} smaller than k={k}")
    s = np.asarray(scores)
    return top_k(s, min(m, s.shape[0]))


def sample_alternatives(scores, pool, k: int, G: int, rng: RngState, scale: float = 1.0) -> list[tuple[int, ...]]:
    """``G`` independent Gumbel-top-k routes within ``pool``. Duplicates and standard-route repeats are kept."""
    pool = np.asarray(pool)
    pooled = np.asarray(scores, dtype=np.float64)[pool]
    return [tuple(int(i) for i in np.sort(pool[gumbel_top_k(pooled, k, rng, scale)])) for _ in range(G)]


def bin_label(p_bar: float, hi: float = 0.9, lo: float = 0.5) -> str:
    """Confident on (hi, 1], Ambiguous on (lo, hi], Fragile on [0, lo]."""
    if p_bar > hi:
        return "Confident"
    if p_bar > lo:
        return "Ambiguous"
    return "Fragile"


def summarize_candidates(p_std: float, p_alts: Sequence[float], hi: float = 0.9, lo: float = 0.5) -> dict:
    """Metrics from the standard route's probability and the ``G`` alternatives' probabilities.

    ``rank`` counts alternatives strictly better than the standard route, so
    ties never push the standard route down.
    """
    alts = [float(p) for p in p_alts]
    p_std = float(p_std)
    p_best = max([p_std, *alts])
    p_bar = sum(alts) / len(alts)
    return {
        "p_std": p_std,
        "p_best": p_best,
        "gap": p_best - p_std,
        "rank": 1 + sum(p > p_std for p in alts),
        "p_bar": p_bar,
        "bin": bin_label(p_bar, hi, lo),
    }


def analyze_token(params: ModelParams, trace: ForwardTrace, t: int, layer: int, config: AnalysisConfig,
                  rng: RngState, trajectory_id: str = "") -> TokenRouteReport:
    cfg = params.config
    y = int(trace.tokens[t + 1])
    scores = trace.layers[layer].scores[t]
    pool = build_pool(scores, config.pool, cfg.active)
    alts = sample_alternatives(scores, pool, cfg.active, config.G, rng, config.noise)
    p_std = float(trace.distribution(t)[y])
    cache: dict[tuple[int, ...], float] = {}
    probs = []
    for route in alts:
        if route not in cache:
            cache[route] = float(forward_with_intervention(params, trace, t, layer, route)[y])
        probs.append(cache[route])
    s = summarize_candidates(p_std, probs, config.hi, config.lo)
    return TokenRouteReport(trajectory_id=trajectory_id, position=t, layer=layer, **s)


def _analyze_trajectory(params: ModelParams, traj: Trajectory, layer: int, config: AnalysisConfig,
                        root: RngState) -> list[TokenRouteReport]:
    _, trace = forward(params, traj.tokens)
    return [analyze_token(params, trace, int(t), layer, config, root.child(traj.problem_id, int(t)),
                          traj.problem_id)
            for t in traj.target_positions()]


def run_analysis(params: ModelParams, trajectories: Sequence[Trajectory], config: AnalysisConfig = AnalysisConfig(),
                 threads: int = 1) -> tuple[dict, list[TokenRouteReport]]:
    """Analyze every response token of every trajectory at the configured layer.

    Per-token streams are keyed by ``(trajectory id, position)``, so the
    records do not depend on ``threads``.
    """
    layer = config.resolve_layer(params.config.blocks)
    root = RngState(config.seed).child("analysis")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(lambda tr: _analyze_trajectory(params, tr, layer, config, root), trajectories))
    else:
        chunks = [_analyze_trajectory(params, tr, layer, config, root) for tr in trajectories]
    reports = [r for chunk in chunks for r in chunk]
    return aggregate(reports, config.ks), reports


@dataclass
class BinStats:
    count: int
    tokens_pct: float
    top_k_pct: dict[int, float]
    p_std_pct: float
    p_best_pct: float
    gap_pp: float

    def row(self, label: str) -> float:
        if label == "Tokens":
            return self.tokens_pct
        if label.startswith("Top-"):
            return self.top_k_pct[int(label[4:])]
        return {"p_std": self.p_std_pct, "p_best": self.p_best_pct, "Gap": self.gap_pp}[label]


def aggregate(reports: Sequence[TokenRouteReport], ks: Sequence[int] = (1, 5, 10)) -> dict[str, BinStats | None]:
    """Per-bin summary; bins without tokens map to ``None``."""
    if not reports:
        raise InvalidConfigError("cannot aggregate an empty report list")
    total = len(reports)
    out: dict[str, BinStats | None] = {}
    for b in BINS:
        rows = [r for r in reports if r.bin == b]
        if not rows:
            out[b] = None
            continue
        n = len(rows)
        out[b] = BinStats(
            count=n,
            tokens_pct=100.0 * n / total,
            top_k_pct={int(K): 100.0 * sum(r.rank <= K for r in rows) / n for K in ks},
            p_std_pct=100.0 * sum(r.p_std for r in rows) / n,
            p_best_pct=100.0 * sum(r.p_best for r in rows) / n,
            gap_pp=100.0 * sum(r.gap for r in rows) / n,
        )
    return out


def row_key(label: str) -> str:
    return f"{label} (pp)" if label == "Gap" else f"{label} (%)"


def summary_to_json(summary: Mapping[str, BinStats | None], ks: Sequence[int] = (1, 5, 10)) -> dict:
    """JSON-ready form keyed by the report row labels (``"Tokens (%)"``, ..., ``"Gap (pp)"``)."""
    labels = ["Tokens"] + [f"Top-{K}" for K in ks] + ["p_std", "p_best", "Gap"]
    out = {}
    for b in BINS:
        s = summary[b]
        out[b] = None if s is None else {**{row_key(lab): s.row(lab) for lab in labels}, "count": s.count}
    return out


def reports_to_csv(reports: Sequence[TokenRouteReport], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([r.trajectory_id, r.position, r.layer, repr(r.p_std), repr(r.p_best), repr(r.gap), r.rank,
                    repr(r.p_bar), r.bin])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[TokenRouteReport]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [TokenRouteReport(r["trajectory_id"], int(r["position"]), int(r["layer"]), float(r["p_std"]),
                             float(r["p_best"]), float(r["gap"]), int(r["rank"]), float(r["p_bar"]), r["bin"])
            for r in rows]


def dumps_summary(summary: Mapping[str, BinStats | None], config: AnalysisConfig, layer: int, tokens: int,
                  extra: Mapping | None = None) -> str:
    doc = {"config": config.to_dict(), "layer": layer, "tokens": tokens, "bins": summary_to_json(summary, config.ks)}
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
