"""Closed forms and Monte-Carlo checks for one-hop aggregation error under
causal and spurious neighbours.

Notation: node degree ``d``, causal fraction ``p``; the node's own expected
observation is ``mu_t`` now and ``mu_next`` one step later; causal and
spurious neighbours have expectations ``mu_c`` and ``mu_s`` and aggregation
weights ``w_c`` and ``w_s``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np

from .errors import ConfigError, SingularityError


@dataclass(frozen=True)
class CausalNeighborhoodSpec:
    d: float = 4
    p: float = 0.5
    mu0: float = 1.0
    sigma0: float = 1.0
    mu_c: float = 1.0
    mu_s: float = 1.0
    w_c: float = 1.0
    w_s: float = 1.0
    q: int = 1
    mu_t: float = None
    mu_next: float = None
    mu_w: float = 1.0
    sigma_w: float = 0.1

    def __post_init__(self):
        if not self.d > 1:
            raise ConfigError("degree must exceed 1")
        if not 0 < self.p < 1:
            raise ConfigError("causal fraction must lie in (0, 1)")
        if not self.sigma0 > 0:
            raise ConfigError("sigma0 must be positive")
        if self.mu_t is None:
            object.__setattr__(self, "mu_t", self.mu0)
        if self.mu_next is None:
            object.__setattr__(self, "mu_next", self.mu0)

    def to_dict(self):
        return asdict(self)


def expected_aggregation(s: CausalNeighborhoodSpec) -> float:
    """Expectation of the mean-normalized one-hop aggregation."""
    return (s.mu_t + s.p * s.d * s.mu_c * s.w_c + (1 - s.p) * s.d * s.mu_s * s.w_s) / (1 + s.d)


def aggregation_error_signed(s: CausalNeighborhoodSpec) -> float:
    """Expected aggregation minus the next-step expectation (sign kept)."""
    num = s.mu_t + s.p * s.d * s.mu_c * s.w_c + (1 - s.p) * s.d * s.mu_s * s.w_s - (1 + s.d) * s.mu_next
    return num / (1 + s.d)


def aggregation_error(s: CausalNeighborhoodSpec) -> float:
    return abs(aggregation_error_signed(s))


def epsilon0(s: CausalNeighborhoodSpec) -> float:
    """In-distribution error left by the spurious part of the aggregation."""
    return 2 * (1 - s.p) * s.d * s.mu_s * s.w_s / (1 + s.d)


def residual_substituted(s: CausalNeighborhoodSpec) -> CausalNeighborhoodSpec:
    """Spec whose next-step expectation makes the causal-part residual equal
    the aggregated spurious part; ``aggregation_error`` then equals
    ``epsilon0``."""
    causal = s.mu_t + s.p * s.d * s.mu_c * s.w_c
    spurious = (1 - s.p) * s.d * s.mu_s * s.w_s
    return replace(s, mu_next=(causal - spurious) / (1 + s.d))


def _eps_q_exact(s: CausalNeighborhoodSpec, q) -> Fraction:
    f = [Fraction(x) for x in (s.p, s.d, s.mu0, s.mu_w)]
    p, d, mu0, mu_w = f
    return 2 * (1 - p) * d * q * mu0 * mu_w / (1 + d)


def epsilon_q(s: CausalNeighborhoodSpec) -> float:
    """Approximate error when the test mean is ``q * mu0``."""
    if s.q < 1 or int(s.q) != s.q:
        raise ConfigError("q must be a positive integer")
    return float(_eps_q_exact(s, int(s.q)))


def amplification_ratio(s: CausalNeighborhoodSpec) -> Fraction:
    """epsilon_q / epsilon_1 evaluated in exact rational arithmetic."""
    if s.q < 1 or int(s.q) != s.q:
        raise ConfigError("q must be a positive integer")
    base = _eps_q_exact(s, 1)
    if base == 0:
        raise SingularityError("epsilon_1 is zero; ratio undefined")
    return _eps_q_exact(s, int(s.q)) / base


def optimal_ws(s: CausalNeighborhoodSpec) -> float:
    """Spurious weight that zeroes the signed aggregation error."""
    den = (1 - s.p) * s.d * s.mu_s
    if den == 0:
        raise SingularityError("mu_s = 0: spurious weight has no effect")
    return ((1 + s.d) * s.mu_next - (s.mu_t + s.p * s.d * s.mu_c * s.w_c)) / den


# ------------------------------------------------------------------ Monte Carlo

def mc_expected_aggregation(s: CausalNeighborhoodSpec, n_samples: int, seed: int = 0,
                            chunk: int = 100_000):
    """Sample mean and standard error of the explicit aggregation.

    Each of the ``d`` neighbours is causal with probability ``p``; every
    observation is Gaussian with the matching expectation and ``sigma0``.
    ``d`` is rounded to an integer neighbour count.
    """
    d = int(round(s.d))
    rng = np.random.default_rng(seed)
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x_i = rng.normal(s.mu_t, s.sigma0, size=m)
        causal = rng.random((m, d)) < s.p
        x_c = rng.normal(s.mu_c, s.sigma0, size=(m, d))
        x_s = rng.normal(s.mu_s, s.sigma0, size=(m, d))
        nb = np.where(causal, s.w_c * x_c, s.w_s * x_s).sum(axis=1)
        h = (x_i + nb) / (1 + d)
        total += h.sum()
        total_sq += (h * h).sum()
        done += m
    mean = total / n_samples
    var = total_sq / n_samples - mean ** 2
    return mean, float(np.sqrt(max(var, 0.0) / n_samples))


def _simulate_neighbourhoods(rng, n, n_c, n_s, mu_c, mu_s, sigma0):
    x_c = rng.normal(mu_c, sigma0, size=(n, n_c))
    x_s = rng.normal(mu_s, sigma0, size=(n, n_s))
    return x_c, x_s


def mc_amplification(s: CausalNeighborhoodSpec, q: int = 3, n_samples: int = 100_000,
                     seed: int = 0, spurious_strength: float = 0.5, noise: float = 0.1):
    """Empirical OOD error amplification of a least-squares aggregator.

    Training neighbourhoods draw every observation from N(mu0, sigma0) and the
    target carries a spurious dependence on the non-causal neighbours, so the
    fitted aggregator learns non-zero spurious weights. At test time the
    spurious dependence is gone; errors are measured on neighbourhoods whose
    spurious observations have mean ``mu0`` (in distribution) and ``q * mu0``
    (shifted). Returns a dict with both mean absolute errors and their ratio.
    """
    if q < 1:
        raise ConfigError("q must be a positive integer")
    rng = np.random.default_rng(seed)
    d = int(round(s.d))
    n_c = max(1, int(round(s.p * d)))
    n_s = max(1, d - n_c)
    w_c_true = np.full(n_c, s.w_c)

    x_c, x_s = _simulate_neighbourhoods(rng, n_samples, n_c, n_s, s.mu0, s.mu0, s.sigma0)
    y = (x_c @ w_c_true + spurious_strength * x_s.sum(axis=1)) / (1 + d)
    y = y + rng.normal(0.0, noise, size=n_samples)
    design = np.column_stack([x_c, x_s])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)

    def test_error(mu_s_test):
        tc, ts = _simulate_neighbourhoods(rng, n_samples, n_c, n_s, s.mu0, mu_s_test, s.sigma0)
        truth = (tc @ w_c_true) / (1 + d)
        pred = np.column_stack([tc, ts]) @ coef
        return float(np.mean(np.abs(pred - truth)))

    err_id = test_error(s.mu0)
    err_q = test_error(q * s.mu0)
    return {"q": q, "error_id": err_id, "error_ood": err_q, "ratio": err_q / err_id,
            "spurious_weights": coef[n_c:].tolist(), "n_samples": n_samples}


def theory_report(n_random: int = 1000, mc_samples: int = 100_000, seed: int = 0) -> dict:
    """All closed-form and Monte-Carlo checks with pass/fail flags."""
    rng = np.random.default_rng(seed)
    base = CausalNeighborhoodSpec(d=4, p=0.5, mu0=10.0, sigma0=1.0, mu_c=10.0, mu_s=10.0,
                                  w_c=1.0, w_s=0.5, q=3, mu_w=0.5)
    ratios = {q: amplification_ratio(replace(base, q=q)) for q in (1, 2, 3, 5, 10)}
    ratio_ok = all(r == q for q, r in ratios.items())

    worst = 0.0
    for _ in range(n_random):
        spec = CausalNeighborhoodSpec(
            d=int(rng.integers(2, 20)), p=float(rng.uniform(0.05, 0.95)),
            mu0=1.0, sigma0=1.0, mu_c=float(rng.uniform(0.1, 5)), mu_s=float(rng.uniform(0.1, 5)),
            w_c=float(rng.uniform(0.1, 2)), w_s=1.0,
            mu_t=float(rng.uniform(0.1, 5)), mu_next=float(rng.uniform(0.1, 5)))
        worst = max(worst, aggregation_error(replace(spec, w_s=optimal_ws(spec))))

    mc = mc_amplification(base, q=3, n_samples=mc_samples, seed=seed)
    agg_mean, agg_se = mc_expected_aggregation(base, mc_samples, seed=seed)
    closed = expected_aggregation(base)
    sub = residual_substituted(base)
    checks = {
        "ratio_exact": {"values": {str(q): str(r) for q, r in ratios.items()}, "pass": ratio_ok},
        "optimal_ws_root": {"max_abs_error": worst, "tolerance": 1e-12, "pass": worst < 1e-12},
        "mc_amplification_q3": {**mc, "bounds": [2.4, 3.6], "pass": 2.4 <= mc["ratio"] <= 3.6},
        "mc_expected_aggregation": {"closed_form": closed, "mc_mean": agg_mean, "std_error": agg_se,
                                    "pass": bool(abs(agg_mean - closed) <= 3 * agg_se)},
        "epsilon0_residual_substitution": {
            "epsilon0": epsilon0(base), "abs_error": aggregation_error(sub),
            "pass": bool(np.isclose(epsilon0(base), aggregation_error(sub), rtol=1e-12, atol=0))},
    }
    return {"spec": base.to_dict(), "epsilon0": epsilon0(base), "epsilon_q": epsilon_q(base),
            "checks": checks, "pass": all(c["pass"] for c in checks.values())}
