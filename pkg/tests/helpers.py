"""Shared fixtures and independent oracles used across the test suite."""

from __future__ import annotations

import numpy as np
import pandas as pd

from dtrkit import ingest_wide


# ---------------------------------------------------------------------------
# Exhaustive tree-search oracle
# ---------------------------------------------------------------------------


def _candidate_splits(x_col: np.ndarray) -> list[float]:
    vals = np.unique(x_col)
    if len(vals) < 2:
        return [float(vals.max())]
    return [float((vals[i] + vals[i + 1]) / 2.0) for i in range(len(vals) - 1)]


def brute_force_tree_objective(x: np.ndarray, gamma: np.ndarray, depth: int) -> float:
    """Best achievable objective by enumerating every (feature, threshold) structure.

    For every structure the best leaf assignment is the per-leaf action
    maximum, which is an exhaustive scan over leaf-action combinations.
    """
    n, p = x.shape
    splits = [_candidate_splits(x[:, j]) for j in range(p)]

    def leaf_value(rows: np.ndarray) -> float:
        if not rows.any():
            return 0.0
        return float(gamma[rows].sum(axis=0).max())

    def stump_value(rows: np.ndarray) -> float:
        best = -np.inf
        for j in range(p):
            for s in splits[j]:
                left = rows & (x[:, j] <= s)
                best = max(best, leaf_value(left) + leaf_value(rows & ~left))
        return best

    all_rows = np.ones(n, dtype=bool)
    if depth == 1:
        return stump_value(all_rows)
    best = -np.inf
    for j in range(p):
        for s in splits[j]:
            left = x[:, j] <= s
            best = max(best, stump_value(left) + stump_value(~left))
    return best

# ---------------------------------------------------------------------------
# Discrete two-stage toy with fully known laws
# ---------------------------------------------------------------------------

# P(X2 = 1 | x1, a1)
P_X2 = np.array([[0.3, 0.6], [0.5, 0.8]])


def _toy_specs():
    from dtrkit import g_spec, q_spec

    q = [q_spec("~A*X_1", history="full"), q_spec("~A*A_1*X_1*X_2", history="full")]
    g = [g_spec("~X_1", history="full"), g_spec("~X_2", history="full")]
    return g, q

# reward r[x1][a1][x2] = (value at a2=0, value at a2=1); utility is this plus noise
R_TABLE = {
    (0, 0, 0): (1.0, 1.8),
    (0, 0, 1): (2.0, 1.2),
    (0, 1, 0): (1.5, 0.7),
    (0, 1, 1): (0.5, 1.6),
    (1, 0, 0): (2.0, 3.0),
    (1, 0, 1): (1.0, 0.2),
    (1, 1, 0): (0.0, 1.2),
    (1, 1, 1): (2.4, 3.3),
}


def p_a1(x1: np.ndarray) -> np.ndarray:
    return np.where(x1 == 1, 0.6, 0.4)


def p_a2(x2: np.ndarray) -> np.ndarray:
    return 0.5 + 0.2 * x2


def sim_discrete_toy(n: int, seed: int, noise_sd: float = 0.3):
    """Simulate the discrete toy; returns (PolicyData, raw table)."""
    rng = np.random.default_rng(seed)
    x1 = rng.integers(0, 2, n)
    a1 = (rng.random(n) < p_a1(x1)).astype(int)
    x2 = (rng.random(n) < P_X2[x1, a1]).astype(int)
    a2 = (rng.random(n) < p_a2(x2)).astype(int)
    r = np.array([R_TABLE[(i, j, k)][l] for i, j, k, l in zip(x1, a1, x2, a2)])
    u = r + noise_sd * rng.standard_normal(n)
    table = pd.DataFrame({"X_1": x1, "A_1": a1, "X_2": x2, "A_2": a2, "U": u})
    pdat = ingest_wide(
        table,
        action_cols=["A_1", "A_2"],
        covariate_map={"X": ["X_1", "X_2"]},
        utility_cols=["U"],
    )
    return pdat, table


def toy_optimal_policy():
    """Brute-force V-optimal rules from the true law (V1 = X1, V2 = (X1, X2)).

    Returns (d1, d2) as dicts: d1[x1] -> a1; d2[(a1, x1, x2)] -> a2.
    """
    d2 = {}
    for (x1, a1, x2), (r0, r1) in R_TABLE.items():
        d2[(a1, x1, x2)] = int(r1 - r0 > 0)
    d1 = {}
    for x1 in (0, 1):
        q1 = {}
        for a1 in (0, 1):
            total = 0.0
            for x2 in (0, 1):
                p = P_X2[x1, a1] if x2 == 1 else 1.0 - P_X2[x1, a1]
                total += p * R_TABLE[(x1, a1, x2)][d2[(a1, x1, x2)]]
            q1[a1] = total
        d1[x1] = int(q1[1] - q1[0] > 0)
    return d1, d2


def toy_empirical_dp(table: pd.DataFrame):
    """Backward induction on empirical cell means of the toy data.

    Independent of the learner code path: plain group-by means and argmaxes.
    Returns (d1, d2, q2_means) with d2 keyed by (a1, x1, x2).
    """
    df = table.copy()
    q2 = df.groupby(["X_1", "A_1", "X_2", "A_2"])["U"].mean()
    d2, v2 = {}, {}
    for (x1, a1, x2), _ in df.groupby(["X_1", "A_1", "X_2"]).size().items():
        vals = {a2: q2.get((x1, a1, x2, a2), -np.inf) for a2 in (0, 1)}
        best = max((0, 1), key=lambda a2: (vals[a2], -a2))
        d2[(a1, x1, x2)] = best
        v2[(x1, a1, x2)] = vals[best]
    # stage-1 pseudo outcome: empirical mean of V2 over observed X2 per (x1, a1)
    df["v2"] = [v2[(r.X_1, r.A_1, r.X_2)] for r in df.itertuples()]
    q1 = df.groupby(["X_1", "A_1"])["v2"].mean()
    d1 = {}
    for x1 in (0, 1):
        vals = {a1: q1.get((x1, a1), -np.inf) for a1 in (0, 1)}
        d1[x1] = max((0, 1), key=lambda a1: (vals[a1], -a1))
    return d1, d2, q2


# ---------------------------------------------------------------------------
# Single-stage fixture with engineered propensity features
# ---------------------------------------------------------------------------


TOY_G_SPECS, TOY_Q_SPECS = _toy_specs()


def single_stage_with_engineered_g(n: int, seed: int):
    """Single-stage benchmark data with the true propensity index W as a covariate.

    The treatment model is Bernoulli(expit(kappa * Z^-2 * (Z+L-1) + delta*B)),
    so a logistic fit on (W, B) with W = clamped(Z)^-2 * (Z+L-1) is correctly
    specified.
    """
    from dtrkit import sim_single_stage

    _, table = sim_single_stage(n, seed)
    z = table["Z"].to_numpy()
    zc = np.where(np.abs(z) < 1e-3, np.where(z < 0, -1e-3, 1e-3), z)
    table = table.assign(W=zc**-2.0 * (z + table["L"].to_numpy() - 1.0))
    pdat = ingest_wide(
        table,
        action_cols=["A"],
        covariate_map={"Z": ["Z"], "B": ["B"], "L": ["L"], "W": ["W"]},
        utility_cols=["U"],
    )
    return pdat, table
