"""Benchmark data generators with known optimal policies.

Two structural models are provided: a single-stage confounded treatment
problem and a two-stage cost/load control problem.  Both expose closed-form
optimal policies, and :func:`mc_value_oracle` estimates any policy's value by
forced-action simulation (actions are set by the policy, never drawn from the
propensity model).

Reproducibility: every variable has its own labeled Philox stream, so subject
i's draw is a pure function of (seed, variable, i) and tables are identical
across platforms and across shardings of the subject range.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit, ndtr
from scipy.stats import norm

from .data import PolicyData, ingest_wide
from .errors import ConfigError, InvalidValueError
from .policy import CallableRule, LinearThresholdRule, Policy
from .rng import normal, substream, uniform_open

__all__ = [
    "SingleStageParams",
    "TwoStageParams",
    "sim_single_stage",
    "sim_two_stage",
    "optimal_policy_single",
    "optimal_policy_two_stage",
    "optimal_value_single",
    "truncated_mean_positive",
    "mc_value_oracle",
]

logger = logging.getLogger(__name__)

_Z_CLAMP = 1e-3


@dataclass(frozen=True)
class SingleStageParams:
    """Parameters of the single-stage generator.

    Outcome: U | Z, L, A ~ N(Z + L + A*(gamma_c*Z + alpha_c*L + beta_c), sigma^2)
    Treatment: A | Z, L, B ~ Bernoulli(expit(kappa * Z^-2 * (Z + L - 1) + delta * B))
    with Z, L standard normal and B ~ Bernoulli(pi).
    """

    pi: float = 0.3
    kappa: float = 0.1
    delta: float = 0.5
    alpha_c: float = 1.0
    beta_c: float = -2.5
    gamma_c: float = 3.0
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise InvalidValueError("pi must lie in [0, 1]")
        if self.sigma <= 0:
            raise InvalidValueError("sigma must be positive")


@dataclass(frozen=True)
class TwoStageParams:
    """Parameters of the two-stage cost/load generator."""

    gamma: float = 0.5
    beta: float = 1.0


# stream labels (one per random variable)
_S_Z, _S_L, _S_B, _S_A, _S_EPS = 1, 2, 3, 4, 5
_T_L1, _T_C1, _T_A1, _T_L2, _T_C2, _T_A2, _T_L3 = 11, 12, 13, 14, 15, 16, 17


def _clamped_inv_sq(z: np.ndarray) -> np.ndarray:
    """z^-2 with |z| clamped below at 1e-3 (clamp count logged)."""
    zc = np.where(np.abs(z) < _Z_CLAMP, np.where(z < 0, -_Z_CLAMP, _Z_CLAMP), z)
    n_clamped = int((np.abs(z) < _Z_CLAMP).sum())
    if n_clamped:
        logger.info("propensity linear predictor: clamped %d |Z| value(s) below %.0e", n_clamped, _Z_CLAMP)
    return zc**-2.0


def sim_single_stage(n: int, seed: int, params: SingleStageParams = SingleStageParams()):
    """Simulate the single-stage problem; returns (PolicyData, raw table)."""
    if n < 1:
        raise InvalidValueError("n must be >= 1")
    z = normal(substream(seed, _S_Z), n)
    l = normal(substream(seed, _S_L), n)
    b = (uniform_open(substream(seed, _S_B), n) < params.pi).astype(int)
    lp = params.kappa * _clamped_inv_sq(z) * (z + l - 1.0) + params.delta * b
    a = (uniform_open(substream(seed, _S_A), n) < expit(lp)).astype(int)
    eps = normal(substream(seed, _S_EPS), n)
    u = z + l + a * (params.gamma_c * z + params.alpha_c * l + params.beta_c) + params.sigma * eps
    table = pd.DataFrame({"Z": z, "L": l, "B": b, "A": a, "U": u})
    pdat = ingest_wide(
        table,
        action_cols=["A"],
        covariate_map={"Z": ["Z"], "B": ["B"], "L": ["L"]},
        utility_cols=["U"],
    )
    return pdat, table


def sim_two_stage(n: int, seed: int, params: TwoStageParams = TwoStageParams()):
    """Simulate the two-stage problem; returns (PolicyData, raw table)."""
    if n < 1:
        raise InvalidValueError("n must be >= 1")
    l1 = normal(substream(seed, _T_L1), n)
    c1 = l1 + normal(substream(seed, _T_C1), n)
    a1 = (uniform_open(substream(seed, _T_A1), n) < expit(params.beta * c1)).astype(int)
    l2 = normal(substream(seed, _T_L2), n)
    c2 = params.gamma * l1 + a1 + normal(substream(seed, _T_C2), n)
    a2 = (uniform_open(substream(seed, _T_A2), n) < expit(params.beta * c2)).astype(int)
    l3 = normal(substream(seed, _T_L3), n)
    u1 = l1
    u2 = a1 * c1 + l2
    u3 = a2 * c2 + l3
    table = pd.DataFrame(
        {
            "L_1": l1,
            "C_1": c1,
            "A_1": a1,
            "L_2": l2,
            "C_2": c2,
            "A_2": a2,
            "L_3": l3,
            "U_1": u1,
            "U_2": u2,
            "U_3": u3,
        }
    )
    pdat = ingest_wide(
        table,
        action_cols=["A_1", "A_2"],
        covariate_map={"L": ["L_1", "L_2"], "C": ["C_1", "C_2"]},
        utility_cols=["U_1", "U_2", "U_3"],
    )
    return pdat, table


# ---------------------------------------------------------------------------
# Optimal policies and analytic values
# ---------------------------------------------------------------------------


def optimal_policy_single(params: SingleStageParams = SingleStageParams()) -> Policy:
    """Treat when gamma_c*Z + alpha_c*L + beta_c > 0 (state-history rule)."""
    rule = LinearThresholdRule(
        coefficients={"Z": params.gamma_c, "L": params.alpha_c},
        intercept=params.beta_c,
        action_if_positive="1",
        action_else="0",
    )
    return Policy(rules=(rule,), history="state", name="optimal")


def truncated_mean_positive(mu) -> np.ndarray:
    """E[max(X, 0)] for X ~ N(mu, 1): Phi(mu) * mu + phi(mu)."""
    mu = np.asarray(mu, dtype=float)
    return ndtr(mu) * mu + norm.pdf(mu)


def optimal_policy_two_stage(params: TwoStageParams = TwoStageParams()) -> Policy:
    """Stage 1: act when C_1 + E-gain of the stage-2 continuation differs positively; stage 2: act when C_2 > 0."""
    gamma = params.gamma

    def stage1(frame: pd.DataFrame) -> np.ndarray:
        c1 = np.asarray(frame["C_1"], dtype=float)
        l1 = np.asarray(frame["L_1"], dtype=float)
        gain = truncated_mean_positive(gamma * l1 + 1.0) - truncated_mean_positive(gamma * l1)
        return np.where(c1 + gain > 0, "1", "0").astype(object)

    stage2 = LinearThresholdRule(coefficients={"C_2": 1.0}, intercept=0.0, action_if_positive="1", action_else="0")
    return Policy(rules=(CallableRule(stage1), stage2), history="full", name="optimal")


def optimal_value_single(params: SingleStageParams = SingleStageParams()) -> float:
    """E[max(0, N(beta_c, gamma_c^2 + alpha_c^2))], the value of the optimal single-stage rule."""
    mu = params.beta_c
    sig = math.sqrt(params.gamma_c**2 + params.alpha_c**2)
    return float(mu * ndtr(mu / sig) + sig * norm.pdf(mu / sig))


# ---------------------------------------------------------------------------
# Forced-action Monte Carlo oracle
# ---------------------------------------------------------------------------


def mc_value_oracle(
    dgp: str,
    policy: Policy,
    n_mc: int,
    seed: int,
    params=None,
) -> tuple[float, float]:
    """Monte Carlo value of ``policy`` under forced actions.

    Simulates ``n_mc`` subjects from the chosen structural model with every
    action set by the policy (the propensity model is never consulted) and
    returns (mean utility, Monte Carlo standard error).
    """
    if dgp == "single":
        p = params or SingleStageParams()
        z = normal(substream(seed, _S_Z), n_mc)
        l = normal(substream(seed, _S_L), n_mc)
        b = (uniform_open(substream(seed, _S_B), n_mc) < p.pi).astype(int)
        frame = pd.DataFrame({"Z": z, "B": b, "L": l})
        acts = policy.rule_for_stage(1).actions(frame if policy.history == "state" else frame.rename(columns={"Z": "Z_1", "B": "B_1", "L": "L_1"}))
        a = (np.asarray(acts) == "1").astype(int)
        eps = normal(substream(seed, _S_EPS), n_mc)
        u = z + l + a * (p.gamma_c * z + p.alpha_c * l + p.beta_c) + p.sigma * eps
    elif dgp == "two":
        p = params or TwoStageParams()
        l1 = normal(substream(seed, _T_L1), n_mc)
        c1 = l1 + normal(substream(seed, _T_C1), n_mc)
        h1 = pd.DataFrame({"L_1": l1, "C_1": c1}) if policy.history == "full" else pd.DataFrame({"L": l1, "C": c1})
        a1 = (np.asarray(policy.rule_for_stage(1).actions(h1)) == "1").astype(int)
        l2 = normal(substream(seed, _T_L2), n_mc)
        c2 = p.gamma * l1 + a1 + normal(substream(seed, _T_C2), n_mc)
        if policy.history == "full":
            h2 = pd.DataFrame({"A_1": np.where(a1 == 1, "1", "0"), "L_1": l1, "L_2": l2, "C_1": c1, "C_2": c2})
        else:
            h2 = pd.DataFrame({"L": l2, "C": c2})
        a2 = (np.asarray(policy.rule_for_stage(2).actions(h2)) == "1").astype(int)
        l3 = normal(substream(seed, _T_L3), n_mc)
        u = l1 + a1 * c1 + l2 + a2 * c2 + l3
    else:
        raise ConfigError(f"unknown generator {dgp!r}; use 'single' or 'two'")
    return float(u.mean()), float(u.std(ddof=1) / math.sqrt(n_mc))


def params_from_mapping(dgp: str, mapping: dict):
    """Build a parameter object from CLI-style key=value pairs.

    Single-stage keys follow the conventional short names
    (p, k, d, a, b, c, sigma); two-stage keys are gamma and beta.
    """
    if dgp == "single":
        alias = {"p": "pi", "k": "kappa", "d": "delta", "a": "alpha_c", "b": "beta_c", "c": "gamma_c", "sigma": "sigma"}
        kwargs = {}
        for key, value in mapping.items():
            if key not in alias:
                raise ConfigError(f"unknown single-stage parameter {key!r}; expected one of {sorted(alias)}")
            kwargs[alias[key]] = float(value)
        return SingleStageParams(**kwargs)
    if dgp == "two":
        allowed = {"gamma", "beta"}
        bad = set(mapping) - allowed
        if bad:
            raise ConfigError(f"unknown two-stage parameter(s) {sorted(bad)}; expected {sorted(allowed)}")
        return TwoStageParams(**{k: float(v) for k, v in mapping.items()})
    raise ConfigError(f"unknown generator {dgp!r}")
