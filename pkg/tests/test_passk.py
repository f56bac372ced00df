from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import binom

from routelab.corpus import DecodeConfig, gen_problem
from routelab.errors import InvalidConfigError
from routelab.model import ModelConfig, init_params
from routelab.numerics import RngState
from routelab.passk import (ProblemOutcome, bootstrap_ci, bootstrap_replicates, curves_from_csv, curves_to_csv,
                            eval_passk, mean_pass_at_k, outcomes_from_csv, outcomes_to_csv, pass_at_k,
                            pass_at_k_exact, pass_at_k_log, passk_curve)

from .oracles import subset_pass_at_k


def test_examples():
    assert pass_at_k_exact(5, 2, 2) == Fraction(7, 10)
    assert pass_at_k(10, 0, 3) == 0.0
    assert pass_at_k(10, 10, 1) == 1.0
    assert pass_at_k(10, 8, 3) == 1.0
    assert pass_at_k(4, 1, 1) == 0.25


def test_matches_subset_enumeration():
    for n in range(1, 13):
        for c in range(n + 1):
            for K in range(1, n + 1):
                assert pass_at_k_exact(n, c, K) == subset_pass_at_k(n, c, K)


def test_log_form_cross_check():
    for n in (20, 50, 160):
        for c in range(0, n + 1, 7):
            for K in (1, 2, 8, 16, n):
                assert abs(pass_at_k_log(n, c, K) - pass_at_k(n, c, K)) < 1e-12


def test_monte_carlo_agreement():
    gen = np.random.default_rng(0)
    for n, c, K in [(30, 4, 5), (17, 1, 9), (25, 12, 2), (8, 3, 3)]:
        correct = np.zeros(n, dtype=bool)
        correct[:c] = True
        hits = sum(correct[gen.choice(n, K, replace=False)].any() for _ in range(10 ** 5))
        assert abs(hits / 10 ** 5 - pass_at_k(n, c, K)) < 0.005


def test_monotone_in_k():
    for n, c in [(20, 3), (160, 1), (12, 11)]:
        vals = [pass_at_k(n, c, K) for K in range(1, n + 1)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_invalid_arguments():
    for args in [(5, 6, 1), (5, -1, 1), (5, 2, 6), (5, 2, 0)]:
        with pytest.raises(InvalidConfigError):
            pass_at_k(*args)


def test_bootstrap_degenerate_cases():
    rng = RngState(1)
    assert bootstrap_ci([ProblemOutcome("a", 10, 10)] * 3, 2, 500, rng) == (1.0, 1.0)
    assert bootstrap_ci([ProblemOutcome("a", 10, 0)] * 3, 2, 500, rng) == (0.0, 0.0)


def test_bootstrap_matches_binomial_quantiles():
    reps = bootstrap_replicates([ProblemOutcome("a", 20, 10)], 50_000, RngState(7))
    lo, hi = bootstrap_ci([ProblemOutcome("a", 20, 10)], 1, replicates=reps)
    exact_lo, exact_hi = binom.ppf([0.025, 0.975], 20, 0.5) / 20
    assert abs(lo - exact_lo) < 0.01 and abs(hi - exact_hi) < 0.01


def test_bootstrap_is_deterministic_and_brackets_mean():
    outs = [ProblemOutcome(f"p{i}", 16, c) for i, c in enumerate([0, 3, 8, 16, 5])]
    a = passk_curve(outs, (1, 2, 4, 8, 16, 32), B=400, seed=3)
    b = passk_curve(outs, (1, 2, 4, 8, 16, 32), B=400, seed=3)
    assert a == b
    assert a.ks == (1, 2, 4, 8, 16)
    for m, lo, hi in zip(a.mean, a.ci_lo, a.ci_hi):
        assert lo <= m + 1e-12 and m <= hi + 1e-12
    assert a.mean[0] == pytest.approx(mean_pass_at_k(outs, 1))


def test_csv_round_trips():
    outs = [ProblemOutcome("p0", 8, 3), ProblemOutcome("p1", 8, 0)]
    assert outcomes_from_csv(outcomes_to_csv(outs)) == outs
    cv = passk_curve(outs, (1, 2, 4), B=50, seed=0)
    back = curves_from_csv("# header\n" + curves_to_csv({"standard": cv}))
    assert [r[0] for r in back["standard"]] == [1, 2, 4]
    assert [r[1] for r in back["standard"]] == list(cv.mean)


def test_eval_harness_is_deterministic():
    params = init_params(ModelConfig(width=16, blocks=1, expert_hidden=16), RngState(0))
    probs = [gen_problem(RngState(i), 1, problem_id=f"p{i}") for i in range(3)]
    cfg = DecodeConfig(temperature=1.0, max_new_tokens=4)
    a, oa = eval_passk(params, probs, 8, cfg, (1, 2, 4, 8), B=100, seed=1)
    b, ob = eval_passk(params, probs, 8, cfg, (1, 2, 4, 8), B=100, seed=1)
    assert a == b and oa == ob
    assert all(o.n == 8 for o in oa)
