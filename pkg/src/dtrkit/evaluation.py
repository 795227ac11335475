"""Policy-value estimation and influence-curve inference.

Estimators
----------
* ``value_ipw``: inverse-probability-weighted mean of realized utilities.
* ``value_or``: plug-in mean of the backward-recursive outcome regressions.
* ``value_dr``: cross-fitted doubly robust estimator (per-fold nuisances on
  fold complements, scores pooled over held-out folds).
* ``value_of_learner``: cross-fitted value of a policy *learner* (the learner
  is refit on every fold complement and evaluated on the held-out fold).

Every result carries per-subject influence values from which standard errors,
cluster-robust variants, delta-method contrasts and conditional (subgroup)
values are derived.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .data import PolicyData
from .errors import AlignmentError, ConfigError, StructureError
from .nuisance import (
    GModelSet,
    ModelSpec,
    QStageModel,
    fit_g,
    fit_q_stage,
    make_folds,
    _normalize_specs,
)
from .policy import Policy, policy_actions_matrix

__all__ = [
    "EvalResult",
    "ScoreMatrix",
    "dr_scores",
    "value_ipw",
    "value_or",
    "value_dr",
    "value_of_learner",
    "policy_eval",
    "merge_results",
    "contrast",
    "clustered_variance",
    "conditional_value",
]

G_FLOOR = 1e-12
_Z975 = 1.959963984540054


def _require_uniform(pd_: PolicyData):
    if not pd_.present.all():
        raise StructureError(
            "evaluation requires a uniform record count per subject; call augment() on data with a stochastic stage count"
        )


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    """Value estimate(s) with per-subject influence values.

    ``ic`` is (n, q) and centered per column; ``variance_of_mean`` defaults to
    ``sum(ic**2) / n**2`` and is replaced by the cluster-robust version after
    :func:`clustered_variance`.
    """

    names: tuple[str, ...]
    estimates: np.ndarray
    ic: np.ndarray
    ids: tuple[str, ...]
    estimator: str
    variance_of_mean: np.ndarray
    clustered: bool = False
    naive_variance: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def estimate(self) -> float:
        if len(self.names) != 1:
            raise ConfigError("result holds several estimates; use .estimates")
        return float(self.estimates[0])

    @property
    def std_err(self) -> np.ndarray:
        return np.sqrt(self.variance_of_mean)

    def ci95(self) -> np.ndarray:
        se = self.std_err
        return np.column_stack([self.estimates - _Z975 * se, self.estimates + _Z975 * se])

    def p_values(self) -> np.ndarray:
        se = self.std_err
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, self.estimates / np.where(se > 0, se, 1.0), np.inf)
            z = np.where((se <= 0) & (self.estimates == 0), 0.0, z)
        return 2.0 * ndtr(-np.abs(z))

    def scores(self) -> np.ndarray:
        """Uncentered per-subject scores (ic + estimate)."""
        return self.ic + self.estimates[None, :]

    def summary(self) -> pd.DataFrame:
        ci = self.ci95()
        return pd.DataFrame(
            {
                "Estimate": self.estimates,
                "Std.Err": self.std_err,
                "2.5%": ci[:, 0],
                "97.5%": ci[:, 1],
                "P(>|z|)": self.p_values(),
            },
            index=list(self.names),
        )

    def to_json(self) -> list[dict]:
        ci = self.ci95()
        pv = self.p_values()
        return [
            {
                "name": self.names[j],
                "estimate": float(self.estimates[j]),
                "std_err": float(self.std_err[j]),
                "ci95": [float(ci[j, 0]), float(ci[j, 1])],
                "p_value": float(pv[j]),
                "n": self.n,
                "estimator": self.estimator,
                "clustered": bool(self.clustered),
            }
            for j in range(len(self.names))
        ]

    def ic_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.ic, columns=list(self.names)).assign(id=list(self.ids))[
            ["id", *self.names]
        ]

    def __repr__(self):
        return self.summary().to_string()


def _result_from_scores(z: np.ndarray, name: str, pd_: PolicyData, estimator: str, metadata=None, naive=False) -> EvalResult:
    theta = float(z.mean())
    ic = (z - theta)[:, None]
    return EvalResult(
        names=(name,),
        estimates=np.array([theta]),
        ic=ic,
        ids=tuple(pd_.ids),
        estimator=estimator,
        variance_of_mean=np.array([float((ic[:, 0] ** 2).sum()) / len(z) ** 2]),
        naive_variance=naive,
        metadata=metadata or {},
    )


# ---------------------------------------------------------------------------
# Score engine
# ---------------------------------------------------------------------------


def _indicator(actions: np.ndarray, target: np.ndarray) -> np.ndarray:
    return (actions == target).astype(float)


def _floor_g(g_obs: np.ndarray, meta: dict) -> np.ndarray:
    binds = int((g_obs < G_FLOOR).sum())
    if binds:
        meta["g_floor_bound"] = meta.get("g_floor_bound", 0) + binds
    return np.maximum(g_obs, G_FLOOR)


def _remaining_rewards(pd_: PolicyData, k: int) -> np.ndarray:
    """Realized rewards strictly after stage k plus the terminal reward."""
    return pd_.rewards[:, k:].sum(axis=1) + pd_.terminal


def _q_chain(
    pd_: PolicyData,
    q_specs: tuple[ModelSpec, ...],
    d_mat: np.ndarray,
    train_mask: np.ndarray | None,
    want_all_actions: bool = False,
):
    """Backward-recursive residual outcome fits under the policy ``d_mat``.

    Returns (pred_d, pred_all, models): residual predictions at the policy
    action (n, K), optionally at every action (n, K, |A|), and the per-stage
    fitted models.  Pseudo-outcomes use the policy's later-stage actions;
    degenerate rows contribute their realized remaining reward.
    """
    n, k_max = pd_.n, pd_.max_stages
    col_of = {a: j for j, a in enumerate(pd_.action_set)}
    pred_d = np.zeros((n, k_max))
    pred_all = np.zeros((n, k_max, len(pd_.action_set))) if want_all_actions else None
    models: list[QStageModel] = [None] * k_max
    next_value = pd_.terminal.astype(float).copy()
    for k in range(k_max, 0, -1):
        obs = pd_.observed[:, k - 1]
        deg = pd_.present[:, k - 1] & ~obs
        model = fit_q_stage(pd_, k, next_value, q_specs[k - 1], train_mask)
        models[k - 1] = model
        pred_d[obs, k - 1] = model.predict(pd_, d_mat[obs, k - 1])
        if deg.any():
            pred_d[deg, k - 1] = _remaining_rewards(pd_, k)[deg]
        if want_all_actions:
            for a in pd_.stage_action_sets[k - 1]:
                pred_all[obs, k - 1, col_of[a]] = model.predict(pd_, np.asarray(a, dtype=object))
            if deg.any():
                pred_all[deg, k - 1, :] = pred_d[deg, k - 1][:, None]
        next_value = pd_.rewards[:, k - 1] + pred_d[:, k - 1]
    return pred_d, pred_all, models


def _dr_recursion(
    pd_: PolicyData,
    d_mat: np.ndarray,
    g_obs: np.ndarray,
    qres_d: np.ndarray,
    qres_all: np.ndarray | None = None,
):
    """Backward accumulation of the doubly robust stage scores.

    Returns (z_policy (n,), gamma (n, K, |A|) or None).  ``gamma[:, k, a]``
    is the stage-(k+1) score of playing ``a`` now and the policy thereafter.
    """
    n, k_max = pd_.n, pd_.max_stages
    cum = np.cumsum(pd_.rewards, axis=1)
    utility = cum[:, -1] + pd_.terminal
    zeta = utility.astype(float).copy()
    gamma = np.zeros((n, k_max, len(pd_.action_set))) if qres_all is not None else None
    for k in range(k_max, 0, -1):
        qfull_d = cum[:, k - 1] + qres_d[:, k - 1]
        if gamma is not None:
            qfull_all = cum[:, k - 1][:, None] + qres_all[:, k - 1, :]
            obs_act = pd_.actions[:, k - 1]
            for j, a in enumerate(pd_.action_set):
                ind = _indicator(obs_act, np.asarray(a, dtype=object))
                gamma[:, k - 1, j] = qfull_all[:, j] + ind / g_obs[:, k - 1] * (zeta - qfull_all[:, j])
        w = _indicator(pd_.actions[:, k - 1], d_mat[:, k - 1]) / g_obs[:, k - 1]
        zeta = qfull_d + w * (zeta - qfull_d)
    return zeta, gamma


@dataclass(frozen=True)
class ScoreMatrix:
    """Per (subject, stage, action) doubly robust scores plus the policy score."""

    gamma: np.ndarray  # (n, K, |A|)
    z_policy: np.ndarray  # (n,)
    ids: tuple[str, ...]
    action_set: tuple[str, ...]


def dr_scores(
    pd_: PolicyData,
    policy: Policy,
    g_set: GModelSet,
    q_pred_d: np.ndarray | None,
    q_pred_all: np.ndarray | None = None,
) -> ScoreMatrix:
    """Doubly robust scores under fitted nuisances (cross-fitting is the caller's concern).

    ``q_pred_d``/``q_pred_all`` are residual outcome predictions; passing
    ``None`` evaluates the scores with the outcome model fixed at zero, which
    reduces the policy score to the pure inverse-probability-weighted term.
    """
    _require_uniform(pd_)
    d_mat = policy_actions_matrix(policy, pd_)
    meta: dict = {}
    g_obs = _floor_g(g_set.prob_observed(pd_), meta)
    n, k_max = pd_.n, pd_.max_stages
    cum = np.cumsum(pd_.rewards, axis=1)
    if q_pred_d is None:
        # total-outcome model identically zero <=> residual model = -accumulated rewards
        q_pred_d = -cum
        q_pred_all = np.repeat(-cum[:, :, None], len(pd_.action_set), axis=2)
    elif q_pred_all is None:
        q_pred_all = np.repeat(q_pred_d[:, :, None], len(pd_.action_set), axis=2)
    z, gamma = _dr_recursion(pd_, d_mat, g_obs, q_pred_d, q_pred_all)
    return ScoreMatrix(gamma=gamma, z_policy=z, ids=tuple(pd_.ids), action_set=pd_.action_set)


# ---------------------------------------------------------------------------
# Value estimators
# ---------------------------------------------------------------------------


def value_ipw(
    pd_: PolicyData,
    policy: Policy,
    g_models=None,
    m: int = 1,
    seed: int = 0,
    name: str | None = None,
) -> EvalResult:
    """Inverse-probability-weighted value: mean of (prod_k I{A_k=d_k}/g_k) * U."""
    _require_uniform(pd_)
    folds = make_folds(pd_.ids, m, seed)
    g_sets = fit_g(pd_, g_models, folds)
    d_mat = policy_actions_matrix(policy, pd_)
    utility = pd_.utility().to_numpy()
    meta: dict = {"folds": m, "seed": seed}
    z = np.empty(pd_.n)
    for mi in range(folds.m):
        g_obs = _floor_g(g_sets[mi].prob_observed(pd_), meta)
        w = np.prod(_indicator(pd_.actions, d_mat) / g_obs, axis=1)
        rows = folds.fold_mask(pd_, mi)
        z[rows] = (w * utility)[rows]
    meta["train_ids"] = [g.train_ids for g in g_sets]
    meta["fold_of"] = folds.fold_of
    return _result_from_scores(z, name or policy.name, pd_, "ipw", meta)


def value_or(
    pd_: PolicyData,
    policy: Policy,
    q_models=None,
    m: int = 1,
    seed: int = 0,
    name: str | None = None,
) -> EvalResult:
    """Outcome-regression value: mean of the stage-1 plug-in prediction.

    The influence values are the centered plug-ins, which ignore the sampling
    error of the regression itself; the result is flagged ``naive_variance``.
    """
    _require_uniform(pd_)
    q_specs, _ = _normalize_specs(q_models, pd_.max_stages, "~A*.", "q")
    folds = make_folds(pd_.ids, m, seed)
    d_mat = policy_actions_matrix(policy, pd_)
    z = np.empty(pd_.n)
    train_ids = []
    for mi in range(folds.m):
        pred_d, _, models = _q_chain(pd_, q_specs, d_mat, folds.train_mask(pd_, mi))
        plug_in = pd_.rewards[:, 0] + pred_d[:, 0]
        rows = folds.fold_mask(pd_, mi)
        z[rows] = plug_in[rows]
        train_ids.append(models[0].train_ids)
    meta = {"folds": m, "seed": seed, "train_ids": train_ids, "fold_of": folds.fold_of}
    return _result_from_scores(z, name or policy.name, pd_, "or", meta, naive=True)


def value_dr(
    pd_: PolicyData,
    policy: Policy,
    g_models=None,
    q_models=None,
    m: int = 1,
    seed: int = 0,
    name: str | None = None,
) -> EvalResult:
    """Cross-fitted doubly robust value estimate.

    Subjects are split into ``m`` folds; nuisances are fit on each fold's
    complement and the doubly robust scores of the held-out subjects are
    pooled into the estimate and its influence values.
    """
    _require_uniform(pd_)
    q_specs, _ = _normalize_specs(q_models, pd_.max_stages, "~A*.", "q")
    folds = make_folds(pd_.ids, m, seed)
    g_sets = fit_g(pd_, g_models, folds)
    d_mat = policy_actions_matrix(policy, pd_)
    z = np.empty(pd_.n)
    meta: dict = {"folds": m, "seed": seed}
    train_ids = []
    for mi in range(folds.m):
        train = folds.train_mask(pd_, mi)
        pred_d, _, models = _q_chain(pd_, q_specs, d_mat, train)
        g_obs = _floor_g(g_sets[mi].prob_observed(pd_), meta)
        zeta, _ = _dr_recursion(pd_, d_mat, g_obs, pred_d)
        rows = folds.fold_mask(pd_, mi)
        z[rows] = zeta[rows]
        train_ids.append(frozenset(models[0].train_ids))
    meta["train_ids"] = train_ids
    meta["fold_of"] = folds.fold_of
    return _result_from_scores(z, name or policy.name, pd_, "dr", meta)


def value_of_learner(
    pd_: PolicyData,
    learner,
    g_models=None,
    q_models=None,
    m: int = 1,
    seed: int = 0,
    name: str | None = None,
) -> EvalResult:
    """Cross-fitted doubly robust value of a policy *learner*.

    For every fold, the learner is refit on the fold complement (its own
    internal cross-fitting nests inside the complement), nuisances are fit on
    the same complement under the learned policy, and the held-out subjects
    are scored under that fold's learned policy.
    """
    from sklearn.base import clone  # local import keeps sklearn optional at import time

    from .rng import derive_seed

    _require_uniform(pd_)
    q_specs, _ = _normalize_specs(q_models, pd_.max_stages, "~A*.", "q")
    folds = make_folds(pd_.ids, m, seed)
    g_sets = fit_g(pd_, g_models, folds)
    z = np.empty(pd_.n)
    meta: dict = {"folds": m, "seed": seed, "learned_policies": []}
    train_ids = []
    for mi in range(folds.m):
        train = folds.train_mask(pd_, mi)
        sub = pd_.subset(train) if not train.all() else pd_
        learner_m = clone(learner)
        if "seed" in learner_m.get_params():
            learner_m.set_params(seed=derive_seed(seed, mi, 1))
        try:
            learner_m.fit(sub, g_models=g_models, q_models=q_models)
        except Exception as e:
            e.args = (f"policy learning failed in fold {mi + 1}: {e}",) + e.args[1:]
            raise
        policy_m = learner_m.get_policy()
        d_mat = policy_actions_matrix(policy_m, pd_)
        pred_d, _, models = _q_chain(pd_, q_specs, d_mat, train)
        g_obs = _floor_g(g_sets[mi].prob_observed(pd_), meta)
        zeta, _ = _dr_recursion(pd_, d_mat, g_obs, pred_d)
        rows = folds.fold_mask(pd_, mi)
        z[rows] = zeta[rows]
        train_ids.append(frozenset(models[0].train_ids))
        meta["learned_policies"].append(policy_m)
    meta["train_ids"] = train_ids
    meta["fold_of"] = folds.fold_of
    default_name = getattr(learner, "learner_kind", None) or type(learner).__name__
    return _result_from_scores(z, name or default_name, pd_, "dr", meta)


def policy_eval(
    pd_: PolicyData,
    policy: Policy | None = None,
    learner=None,
    estimator: str = "dr",
    g_models=None,
    q_models=None,
    m: int = 1,
    seed: int = 0,
    name: str | None = None,
) -> EvalResult:
    """Evaluate a fixed policy or a policy learner.

    Exactly one of ``policy`` / ``learner`` must be given.  Learners are only
    evaluated with the doubly robust estimator.
    """
    if (policy is None) == (learner is None):
        raise ConfigError("supply exactly one of 'policy' or 'learner'")
    if learner is not None:
        if estimator != "dr":
            raise ConfigError("learner evaluation is only defined for the doubly robust estimator")
        return value_of_learner(pd_, learner, g_models=g_models, q_models=q_models, m=m, seed=seed, name=name)
    if estimator == "dr":
        return value_dr(pd_, policy, g_models=g_models, q_models=q_models, m=m, seed=seed, name=name)
    if estimator == "ipw":
        return value_ipw(pd_, policy, g_models=g_models, m=m, seed=seed, name=name)
    if estimator == "or":
        return value_or(pd_, policy, q_models=q_models, m=m, seed=seed, name=name)
    raise ConfigError(f"unknown estimator {estimator!r}")


# ---------------------------------------------------------------------------
# Influence-curve composition
# ---------------------------------------------------------------------------


def merge_results(results: list[EvalResult]) -> EvalResult:
    """Joint result over a shared id universe (influence columns side by side)."""
    if not results:
        raise ConfigError("nothing to merge")
    base = results[0]
    for r in results[1:]:
        if r.ids != base.ids:
            raise AlignmentError("results do not share the same id universe")
    names = tuple(n for r in results for n in r.names)
    if len(set(names)) != len(names):
        names = tuple(f"{n}#{i}" for i, n in enumerate(names))
    return EvalResult(
        names=names,
        estimates=np.concatenate([r.estimates for r in results]),
        ic=np.hstack([r.ic for r in results]),
        ids=base.ids,
        estimator=base.estimator if len({r.estimator for r in results}) == 1 else "mixed",
        variance_of_mean=np.concatenate([r.variance_of_mean for r in results]),
        clustered=False,
        naive_variance=any(r.naive_variance for r in results),
        metadata={"merged": [r.names for r in results]},
    )


def contrast(result: EvalResult, f, labels=None) -> EvalResult:
    """Delta-method transform of a (joint) result.

    ``f`` is either an array-like of linear-combination coefficients (exact
    path; a (q', q) matrix or length-q vector) or a callable mapping the
    estimate vector to a scalar/vector, differentiated by central finite
    differences with step 1e-6 * (1 + |estimate|).
    """
    theta = result.estimates
    q = len(theta)
    if callable(f):
        f0 = np.atleast_1d(np.asarray(f(theta), dtype=float))
        jac = np.zeros((len(f0), q))
        for i in range(q):
            h = 1e-6 * (1.0 + abs(theta[i]))
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            jac[:, i] = (np.atleast_1d(f(up)) - np.atleast_1d(f(dn))) / (2.0 * h)
        new_est = f0
    else:
        jac = np.atleast_2d(np.asarray(f, dtype=float))
        if jac.shape[1] != q:
            raise ConfigError(f"linear contrast needs {q} coefficients per row, got {jac.shape[1]}")
        new_est = jac @ theta
    new_ic = result.ic @ jac.T
    if labels is None:
        labels = tuple(f"contrast_{j + 1}" for j in range(len(new_est)))
    elif isinstance(labels, str):
        labels = (labels,)
    var = (new_ic**2).sum(axis=0) / result.n**2
    return EvalResult(
        names=tuple(labels),
        estimates=new_est,
        ic=new_ic,
        ids=result.ids,
        estimator=result.estimator,
        variance_of_mean=var,
        clustered=False,
        naive_variance=result.naive_variance,
        metadata={"transformed": True},
    )


def clustered_variance(result: EvalResult, cluster_of: dict) -> EvalResult:
    """Cluster-robust variance: influence values are summed within clusters.

    ``variance_of_mean = sum_c (sum_{i in c} ic_i)^2 / n^2`` per column.
    """
    missing = [i for i in result.ids if i not in cluster_of]
    if missing:
        raise ConfigError(f"no cluster for id(s) {missing[:5]}")
    clusters = pd.Series([cluster_of[i] for i in result.ids])
    if clusters.nunique() < 2:
        warnings.warn("all subjects share one cluster; the clustered variance is degenerate", stacklevel=2)
    sums = pd.DataFrame(result.ic).groupby(clusters.to_numpy()).sum().to_numpy()
    var = (sums**2).sum(axis=0) / result.n**2
    return replace(result, variance_of_mean=var, clustered=True)


def conditional_value(result: EvalResult, pd_: PolicyData, baseline_var: str) -> EvalResult:
    """Per-level value estimates conditional on a categorical baseline covariate.

    For level v with sample share p_v, the estimate is the mean score among
    {V = v} and the influence value is I{V=v}/p_v * (score - estimate_v); the
    share-weighted level estimates recombine exactly to the marginal estimate.
    """
    if len(result.names) != 1:
        raise ConfigError("conditional values require a single-estimate result")
    if result.metadata.get("transformed"):
        raise ConfigError("conditional values require an untransformed result")
    if baseline_var not in pd_.baseline_names:
        raise ConfigError(f"{baseline_var!r} is not a baseline covariate")
    if tuple(pd_.ids) != result.ids:
        raise AlignmentError("result and data ids differ")
    values = np.asarray([str(v) for v in pd_.baseline[baseline_var]], dtype=object)
    z = result.scores()[:, 0]
    n = result.n
    out = []
    for level in sorted(set(values.tolist())):
        rows = values == level
        n_v = int(rows.sum())
        if n_v == 0:
            warnings.warn(f"level {level!r} of {baseline_var!r} is empty and was dropped", stacklevel=2)
            continue
        p_v = n_v / n
        theta_v = float(z[rows].mean())
        ic = np.where(rows, (z - theta_v) / p_v, 0.0)[:, None]
        out.append(
            EvalResult(
                names=(f"{baseline_var}:{level}",),
                estimates=np.array([theta_v]),
                ic=ic,
                ids=result.ids,
                estimator=result.estimator,
                variance_of_mean=np.array([float((ic[:, 0] ** 2).sum()) / n**2]),
                metadata={"conditional_on": baseline_var, "level": level, "share": p_v},
            )
        )
    return merge_results(out)
