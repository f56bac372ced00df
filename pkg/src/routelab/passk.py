"""Pass@K: combinatorial estimator, parametric bootstrap intervals and a sampling harness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .corpus import DecodeConfig, Problem, sample_completions, verify
from .errors import InvalidConfigError
from .model import ModelParams
from .numerics import RngState

DEFAULT_KS = (1, 2, 4, 8, 16, 32, 64, 128)


def _check(n: int, c: int, K: int) -> None:
    if not 0 <= c <= n:
        raise InvalidConfigError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= K <= n:
        raise InvalidConfigError(f"need 1 <= K <= n, got K={K}, n={n}")


def pass_at_k_exact(n: int, c: int, K: int) -> Fraction:
    _check(n, c, K)
    return 1 - Fraction(math.comb(n - c, K), math.comb(n, K))


def pass_at_k(n: int, c: int, K: int) -> float:
    """``1 - C(n-c, K) / C(n, K)`` evaluated with exact integers."""
    return float(pass_at_k_exact(n, c, K))


def pass_at_k_log(n: int, c: int, K: int) -> float:
    """Same estimator through log-gamma; used as a cross-check."""
    _check(n, c, K)
    if n - c < K:
        return 1.0
    lg = math.lgamma
    log_ratio = lg(n - c + 1) - lg(n - c - K + 1) - lg(n + 1) + lg(n - K + 1)
    return -math.expm1(log_ratio)


def _pass_at_k_array(n: np.ndarray, c: np.ndarray, K: int) -> np.ndarray:
    """Vectorized estimator: product form ``prod_{i=0}^{K-1} (n-c-i)/(n-i)``."""
    n = np.asarray(n, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    i = np.arange(K, dtype=np.float64)
    ratio = np.clip((n[..., None] - c[..., None] - i) / (n[..., None] - i), 0.0, None)
    return 1.0 - np.prod(ratio, axis=-1)


@dataclass(frozen=True)
class ProblemOutcome:
    problem_id: str
    n: int
    c: int

    def __post_init__(self):
        if not 0 <= self.c <= self.n:
            raise InvalidConfigError(f"{self.problem_id}: need 0 <= c <= n")


@dataclass
class PassKCurve:
    ks: tuple[int, ...]
    mean: tuple[float, ...]
    ci_lo: tuple[float, ...]
    ci_hi: tuple[float, ...]
    B: int
    seed: int


def mean_pass_at_k(outcomes: Sequence[ProblemOutcome], K: int) -> float:
    return float(np.mean([pass_at_k(o.n, o.c, K) for o in outcomes]))


def bootstrap_replicates(outcomes: Sequence[ProblemOutcome], B: int, rng: RngState) -> np.ndarray:
    """(B, P) resampled correct counts, ``c_b ~ Binomial(n, c/n)`` per problem."""
    if B < 1:
        raise InvalidConfigError("B must be >= 1")
    if not outcomes:
        raise InvalidConfigError("no outcomes to resample")
    n = np.array([o.n for o in outcomes])
    p = np.array([o.c / o.n if o.n else 0.0 for o in outcomes])
    return rng.gen.binomial(n, p, size=(B, len(outcomes)))


def bootstrap_ci(outcomes: Sequence[ProblemOutcome], K: int, B: int = 2000, rng: RngState | None = None,
                 replicates: np.ndarray | None = None) -> tuple[float, float]:
    """2.5th and 97.5th percentiles (linear interpolation) of the resampled mean pass@K."""
    if replicates is None:
        replicates = bootstrap_replicates(outcomes, B, rng or RngState(42))
    n = np.array([o.n for o in outcomes])
    for o in outcomes:
        _check(o.n, o.c, K)
    means = _pass_at_k_array(np.broadcast_to(n, replicates.shape), replicates, K).mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5], method="linear")
    return float(lo), float(hi)


def passk_curve(outcomes: Sequence[ProblemOutcome], ks: Sequence[int] = DEFAULT_KS, B: int = 2000,
                seed: int = 42) -> PassKCurve:
    """Curve over ``ks`` (values above the smallest n are dropped). One replicate set serves every K."""
    n_min = min(o.n for o in outcomes)
    ks = tuple(int(K) for K in ks if K <= n_min)
    reps = bootstrap_replicates(outcomes, B, RngState(seed).child("bootstrap"))
    means, lo, hi = [], [], []
    for K in ks:
        means.append(mean_pass_at_k(outcomes, K))
        a, b = bootstrap_ci(outcomes, K, replicates=reps)
        lo.append(a)
        hi.append(b)
    return PassKCurve(ks, tuple(means), tuple(lo), tuple(hi), B, seed)


def eval_passk(params: ModelParams, problems: Sequence[Problem], n: int = 160,
               decode_cfg: DecodeConfig = DecodeConfig(), ks: Sequence[int] = DEFAULT_KS, B: int = 2000,
               seed: int = 42) -> tuple[PassKCurve, list[ProblemOutcome]]:
    """Sample ``n`` completions per problem, count verified ones and build the curve."""
    if n < 1:
        raise InvalidConfigError("n must be >= 1")
    if not problems:
        raise InvalidConfigError("no problems to evaluate")
    root = RngState(seed).child("passk")
    outcomes = []
    for prob in problems:
        comps = sample_completions(params, prob.prompt, n, decode_cfg, root.child(prob.id))
        outcomes.append(ProblemOutcome(prob.id, n, sum(verify(prob, c) for c in comps)))
    return passk_curve(outcomes, ks, B, seed), outcomes


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def outcomes_to_csv(outcomes: Sequence[ProblemOutcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["problem_id", "n", "c"])
    for o in outcomes:
        w.writerow([o.problem_id, o.n, o.c])
    return buf.getvalue()


def outcomes_from_csv(text: str) -> list[ProblemOutcome]:
    rows = csv.DictReader([ln for ln in text.splitlines() if not ln.startswith("#")])
    return [ProblemOutcome(r["problem_id"], int(r["n"]), int(r["c"])) for r in rows]


def curves_to_csv(curves: dict[str, PassKCurve]) -> str:
    """Long-format curve file: one row per (tag, K)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tag", "K", "mean", "ci_lo", "ci_hi"])
    for tag, cv in curves.items():
        for row in zip(cv.ks, cv.mean, cv.ci_lo, cv.ci_hi):
            w.writerow([tag, row[0], *(repr(float(v)) for v in row[1:])])
    return buf.getvalue()


def curves_from_csv(text: str) -> dict[str, list[tuple[int, float, float, float]]]:
    out: dict[str, list] = {}
    for r in csv.DictReader([ln for ln in text.splitlines() if not ln.startswith("#")]):
        out.setdefault(r["tag"], []).append((int(r["K"]), float(r["mean"]), float(r["ci_lo"]), float(r["ci_hi"])))
    return out
