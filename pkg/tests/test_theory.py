from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from coms2t.errors import ConfigError, SingularityError
from coms2t.theory import (CausalNeighborhoodSpec as Spec, aggregation_error, aggregation_error_signed,
                           amplification_ratio, epsilon0, epsilon_q, expected_aggregation, mc_amplification,
                           mc_expected_aggregation, optimal_ws, residual_substituted, theory_report)


def test_spec_invariants():
    for bad in (dict(d=1), dict(p=0.0), dict(p=1.0), dict(sigma0=0.0)):
        with pytest.raises(ConfigError):
            Spec(**bad)


def test_expected_aggregation_examples():
    assert expected_aggregation(Spec(d=5, p=0.3, mu0=2.5, mu_c=2.5, mu_s=2.5)) == pytest.approx(2.5, abs=1e-15)
    assert expected_aggregation(Spec(d=2, p=0.5, mu_t=0.0, mu_c=1.0, mu_s=2.0)) == 1.0


def test_expected_aggregation_monte_carlo():
    s = Spec(d=3, p=0.4, mu_t=0.5, mu_c=1.5, mu_s=-1.0, w_c=0.8, w_s=0.3)
    mean, se = mc_expected_aggregation(s, 1_000_000, seed=1)
    assert abs(mean - expected_aggregation(s)) <= 3 * se


def test_mc_error_shrinks_like_root_n():
    s = Spec(d=3, p=0.4, mu_t=0.5, mu_c=1.5, mu_s=-1.0)
    _, se_small = mc_expected_aggregation(s, 10_000, seed=2)
    _, se_big = mc_expected_aggregation(s, 1_000_000, seed=2)
    assert 7 < se_small / se_big < 13


def test_epsilon0_examples():
    assert epsilon0(Spec(d=2, p=0.5, mu_s=2.0, w_s=0.5)) == pytest.approx(2 / 3, abs=1e-15)
    assert epsilon0(Spec(d=2, p=0.5, mu_s=2.0, w_s=0.0)) == 0.0
    assert epsilon0(Spec(d=4, p=1 - 1e-12, mu_s=1.0)) < 1e-10


def test_epsilon0_decreases_with_p():
    vals = [epsilon0(Spec(d=4, p=p, mu_s=1.5, w_s=0.7)) for p in np.linspace(0.05, 0.95, 19)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_epsilon0_matches_residual_substitution():
    s = Spec(d=6, p=0.3, mu_t=1.2, mu_c=0.7, mu_s=2.1, w_c=1.1, w_s=0.4)
    assert aggregation_error(residual_substituted(s)) == pytest.approx(epsilon0(s), rel=1e-12)


def test_epsilon_q_and_ratio():
    s = Spec(d=4, p=0.25, mu0=1.3, mu_w=0.7)
    assert epsilon_q(replace(s, q=1)) == epsilon_q(s)
    assert epsilon_q(replace(s, q=3)) == pytest.approx(3 * epsilon_q(s), rel=1e-15)
    for q in (1, 2, 3, 7):
        assert amplification_ratio(replace(s, q=q)) == Fraction(q)
    with pytest.raises(ConfigError):
        epsilon_q(replace(s, q=0))


def test_ratio_singular_when_base_is_zero():
    with pytest.raises(SingularityError):
        amplification_ratio(Spec(mu0=0.0, q=2))


def test_optimal_ws_examples():
    s = Spec(d=2, p=0.5, mu_next=3.0, mu_t=1.0, mu_c=2.0, w_c=1.0, mu_s=2.0)
    assert optimal_ws(s) == 3.0
    # numerator zero: (1 + d) * mu_next = mu_t + p * d * mu_c * w_c
    z = Spec(d=3, p=0.5, mu_t=1.0, mu_next=1.0, mu_c=2.0, w_c=1.0, mu_s=1.0)
    assert optimal_ws(z) == 0.0
    with pytest.raises(SingularityError):
        optimal_ws(Spec(mu_s=0.0))


def test_optimal_ws_root_on_random_specs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = Spec(d=int(rng.integers(2, 20)), p=float(rng.uniform(0.05, 0.95)), mu_c=float(rng.uniform(0.1, 5)),
                 mu_s=float(rng.uniform(0.1, 5)), w_c=float(rng.uniform(0.1, 2)),
                 mu_t=float(rng.uniform(0.1, 5)), mu_next=float(rng.uniform(0.1, 5)))
        assert abs(aggregation_error_signed(replace(s, w_s=optimal_ws(s)))) < 1e-12


def test_mc_amplification_q3():
    s = Spec(d=4, p=0.5, mu0=10.0, w_c=1.0)
    r = mc_amplification(s, q=3, n_samples=100_000, seed=0)
    assert 2.4 <= r["ratio"] <= 3.6
    # training target leaks 0.5 / (1 + d) = 0.1 per spurious neighbour
    assert all(abs(w - 0.1) < 0.01 for w in r["spurious_weights"])


def test_theory_report_passes():
    rep = theory_report(n_random=200, mc_samples=20_000)
    assert rep["pass"], {k: v["pass"] for k, v in rep["checks"].items()}
