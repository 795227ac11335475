"""Policy learners.

All learners share a backward stage recursion.  The doubly robust family
(``DRQLearner``, ``BlipLearner``, ``TreeSearchLearner``,
``WeightedClassificationLearner``) additionally shares its score pipeline:
per-fold outcome models are fit on fold complements under the already-learned
later-stage rules, held-out per-action scores are pooled across folds, and a
stage component (per-action regressions, a contrast regression, or an exact
policy tree) is fit on the pooled scores.  ``QLearner`` is plain backward
induction on outcome regressions.

With ``alpha > 0`` the learned rules only recommend actions whose estimated
propensity exceeds ``alpha``: the returned policy is restricted through a
full-data propensity refit, while the recursion restricts each fold's rule
chain through that fold's own propensity fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .data import PolicyData
from .errors import ConfigError, FitError, PositivityError, SchemaError
from .formula import DesignSpec, build_design, parse_formula
from .glm import LinearFit, LogisticFit, MultinomialFit, fit_ols
from .nuisance import (
    FoldAssignment,
    GModelSet,
    ModelSpec,
    _GStageFit,
    _EmpiricalTable,
    fit_g,
    fit_q_stage,
    make_folds,
    _normalize_specs,
)
from .policy import Policy, Rule, register_rule, check_alpha
from .rng import derive_seed
from .tree import PolicyTree, exact_tree_search, predict_tree

__all__ = [
    "PolicyObject",
    "QLearner",
    "DRQLearner",
    "BlipLearner",
    "TreeSearchLearner",
    "WeightedClassificationLearner",
    "get_policy",
    "get_policy_functions",
    "LEARNER_TYPES",
]


# ---------------------------------------------------------------------------
# Serializable fitted artifacts
# ---------------------------------------------------------------------------


def _coding_to_json(coding: dict) -> dict:
    return {k: list(v) if v[0] == "numeric" else ["categorical", list(v[1])] for k, v in coding.items()}


def _coding_from_json(obj: dict) -> dict:
    out = {}
    for k, v in obj.items():
        out[k] = ("numeric",) if v[0] == "numeric" else ("categorical", tuple(v[1]))
    return out


@dataclass(frozen=True)
class OLSArtifact:
    """A fitted linear predictor bound to its formula and categorical coding."""

    formula: str
    coding: dict
    coef: tuple[float, ...]
    action_levels: tuple[str, ...] | None = None  # set when the design uses the action variable

    def predict(self, frame: pd.DataFrame, action_values=None) -> np.ndarray:
        spec = parse_formula(self.formula)
        dm = build_design(
            spec,
            frame,
            action_labels=self.action_levels,
            action_values=action_values,
            coding=self.coding,
        )
        return dm.matrix @ np.asarray(self.coef)

    def to_json(self) -> dict:
        return {
            "formula": self.formula,
            "coding": _coding_to_json(self.coding),
            "coef": list(self.coef),
            "action_levels": list(self.action_levels) if self.action_levels else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OLSArtifact":
        return cls(
            formula=obj["formula"],
            coding=_coding_from_json(obj["coding"]),
            coef=tuple(float(c) for c in obj["coef"]),
            action_levels=tuple(obj["action_levels"]) if obj.get("action_levels") else None,
        )


def _ols_artifact(spec: DesignSpec, dm, fit: LinearFit, action_levels=None) -> OLSArtifact:
    return OLSArtifact(
        formula=spec.canonical_text(),
        coding=dm.coding,
        coef=tuple(float(c) for c in fit.coef),
        action_levels=tuple(action_levels) if action_levels else None,
    )


def _g_fit_to_json(sf: _GStageFit) -> dict:
    if sf.family == "empirical":
        return {
            "family": "empirical",
            "levels": list(sf.levels),
            "variables": list(sf.empirical.variables),
            "table": [{"stratum": list(k), "probs": list(map(float, v))} for k, v in sf.empirical.table.items()],
            "rename": sf.rename,
        }
    coef = sf.fit.coef
    return {
        "family": sf.family,
        "levels": list(sf.levels),
        "formula": sf.spec.canonical_text(),
        "coding": _coding_to_json(sf.coding),
        "coef": coef.tolist(),
        "rename": sf.rename,
    }


def _g_fit_from_json(obj: dict) -> _GStageFit:
    levels = tuple(obj["levels"])
    rename = obj.get("rename") or None
    if obj["family"] == "empirical":
        table = {tuple(e["stratum"]): np.asarray(e["probs"]) for e in obj["table"]}
        return _GStageFit(
            family="empirical",
            levels=levels,
            empirical=_EmpiricalTable(tuple(obj["variables"]), table, levels),
            rename=rename,
        )
    coef = np.asarray(obj["coef"], dtype=float)
    if obj["family"] == "binomial":
        fit = LogisticFit(coef=coef, aliased=np.zeros(len(coef), dtype=bool), converged=True)
    else:
        fit = MultinomialFit(coef=coef, aliased=np.zeros(coef.shape[0], dtype=bool), m=len(levels), converged=True)
    return _GStageFit(
        family=obj["family"],
        levels=levels,
        spec=parse_formula(obj["formula"]),
        coding=_coding_from_json(obj["coding"]),
        fit=fit,
        rename=rename,
    )


# ---------------------------------------------------------------------------
# Realistic restriction shared by the learned rules
# ---------------------------------------------------------------------------


def _g_fit_for_rule(g_set: GModelSet, stage: int, rule_history: str, pd_: PolicyData) -> _GStageFit:
    """Stage propensity fit adapted to the frame kind the rule receives.

    State-history fits carry a stage-specific rename so they can read
    full-history frames; the reverse direction cannot be resolved from a
    state frame and is rejected.
    """
    from dataclasses import replace

    sf = g_set.stage_fit(stage)
    g_hist = g_set.specs[0].history if g_set.pooled else g_set.specs[stage - 1].history
    if g_hist == rule_history:
        return sf
    if g_hist == "state" and rule_history == "full":
        rename = {f"{nm}_{stage}": nm for nm in pd_.state_names}
        return replace(sf, rename=rename)
    raise ConfigError(
        "a full-history action-probability model cannot restrict a state-history rule; "
        "use matching history kinds"
    )


def _allowed_mask(g_fit: _GStageFit | None, alpha: float, frame: pd.DataFrame, candidates: tuple[str, ...]):
    """(rows, len(candidates)) mask of actions with propensity above alpha, or None if unrestricted."""
    if g_fit is None or alpha <= 0.0:
        return None
    probs = g_fit.predict(frame)
    cols = []
    for a in candidates:
        if a in g_fit.levels:
            cols.append(probs[:, g_fit.levels.index(a)])
        else:
            cols.append(np.zeros(len(frame)))
    mask = np.column_stack(cols) > alpha
    empty = ~mask.any(axis=1)
    if empty.any():
        raise PositivityError(f"no realistic action at alpha={alpha} for {int(empty.sum())} row(s)")
    return mask


def _restricted_argmax(values: np.ndarray, candidates: tuple[str, ...], mask) -> np.ndarray:
    vals = values.copy()
    if mask is not None:
        vals[~mask] = -np.inf
    idx = np.argmax(vals, axis=1)  # first max wins: earliest action in declared order
    return np.asarray([candidates[j] for j in idx], dtype=object)


def _overrule_binary(rec: np.ndarray, pair: tuple[str, str], mask) -> np.ndarray:
    if mask is None:
        return rec
    rec_idx = (rec == pair[1]).astype(int)
    ok = mask[np.arange(len(rec)), rec_idx]
    other = np.where(rec == pair[0], pair[1], pair[0])
    return np.where(ok, rec, other).astype(object)


# ---------------------------------------------------------------------------
# Learned stage rules (serializable)
# ---------------------------------------------------------------------------


@register_rule
@dataclass(frozen=True)
class QVArgmaxRule(Rule):
    """Pick the action with the largest fitted stage action-value regression."""

    candidates: tuple[str, ...]
    models: dict  # action label -> OLSArtifact
    alpha: float = 0.0
    g_fit: _GStageFit | None = None
    kind = "qv_argmax"

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        values = np.column_stack([self.models[a].predict(frame) for a in self.candidates])
        mask = _allowed_mask(self.g_fit, self.alpha, frame, self.candidates)
        return _restricted_argmax(values, self.candidates, mask)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "candidates": list(self.candidates),
            "models": {a: m.to_json() for a, m in self.models.items()},
            "alpha": self.alpha,
            "g_fit": _g_fit_to_json(self.g_fit) if self.g_fit is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QVArgmaxRule":
        return cls(
            candidates=tuple(obj["candidates"]),
            models={a: OLSArtifact.from_json(m) for a, m in obj["models"].items()},
            alpha=float(obj.get("alpha", 0.0)),
            g_fit=_g_fit_from_json(obj["g_fit"]) if obj.get("g_fit") else None,
        )


@register_rule
@dataclass(frozen=True)
class BlipSignRule(Rule):
    """Binary rule: second action of the pair when the fitted contrast is positive."""

    pair: tuple[str, str]
    model: OLSArtifact
    alpha: float = 0.0
    g_fit: _GStageFit | None = None
    kind = "blip_sign"

    def blip(self, frame: pd.DataFrame) -> np.ndarray:
        return self.model.predict(frame)

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        rec = np.where(self.blip(frame) > 0, self.pair[1], self.pair[0]).astype(object)
        mask = _allowed_mask(self.g_fit, self.alpha, frame, self.pair)
        return _overrule_binary(rec, self.pair, mask)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "pair": list(self.pair),
            "model": self.model.to_json(),
            "alpha": self.alpha,
            "g_fit": _g_fit_to_json(self.g_fit) if self.g_fit is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BlipSignRule":
        return cls(
            pair=tuple(obj["pair"]),
            model=OLSArtifact.from_json(obj["model"]),
            alpha=float(obj.get("alpha", 0.0)),
            g_fit=_g_fit_from_json(obj["g_fit"]) if obj.get("g_fit") else None,
        )


def _tree_features(frame: pd.DataFrame, variables: tuple[str, ...], coding: dict | None = None):
    """Numeric feature matrix for tree rules; categorical columns one-hot expand."""
    cols, names = [], []
    new_coding = {}
    for v in variables:
        if v not in frame.columns:
            raise SchemaError(f"tree variable {v!r} not in history columns {list(frame.columns)}")
        col = frame[v]
        if coding is not None and v in coding:
            code = coding[v]
        elif pd.api.types.is_numeric_dtype(col) and not pd.api.types.is_bool_dtype(col):
            code = ("numeric",)
        else:
            code = ("categorical", tuple(sorted({str(x) for x in col})))
        new_coding[v] = code
        if code[0] == "numeric":
            arr = np.asarray(col, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"tree variable {v!r} has missing values")
            cols.append(arr)
            names.append(v)
        else:
            vals = np.asarray([str(x) for x in col])
            for lvl in code[1]:
                cols.append((vals == lvl).astype(float))
                names.append(f"{v}{lvl}")
    return np.column_stack(cols), tuple(names), new_coding


@register_rule
@dataclass(frozen=True)
class TreeRule(Rule):
    """Depth-bounded policy tree over named features."""

    tree: PolicyTree
    variables: tuple[str, ...]
    coding: dict
    pair: tuple[str, str] | None = None  # binary stage pair for the alpha overrule
    alpha: float = 0.0
    g_fit: _GStageFit | None = None
    kind = "tree"

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        x, _, _ = _tree_features(frame, self.variables, self.coding)
        rec = predict_tree(self.tree, x)
        if self.alpha > 0.0 and self.g_fit is not None:
            mask = _allowed_mask(self.g_fit, self.alpha, frame, self.pair)
            rec = _overrule_binary(rec, self.pair, mask)
        return rec

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "tree": self.tree.to_json(),
            "variables": list(self.variables),
            "coding": _coding_to_json(self.coding),
            "pair": list(self.pair) if self.pair else None,
            "alpha": self.alpha,
            "g_fit": _g_fit_to_json(self.g_fit) if self.g_fit is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TreeRule":
        return cls(
            tree=PolicyTree.from_json(obj["tree"]),
            variables=tuple(obj["variables"]),
            coding=_coding_from_json(obj["coding"]),
            pair=tuple(obj["pair"]) if obj.get("pair") else None,
            alpha=float(obj.get("alpha", 0.0)),
            g_fit=_g_fit_from_json(obj["g_fit"]) if obj.get("g_fit") else None,
        )


@register_rule
@dataclass(frozen=True)
class QArgmaxRule(Rule):
    """Backward-induction rule: argmax over the action-interacted outcome fit."""

    candidates: tuple[str, ...]
    model: OLSArtifact
    alpha: float = 0.0
    g_fit: _GStageFit | None = None
    kind = "q_argmax"

    def q_values(self, frame: pd.DataFrame) -> np.ndarray:
        return np.column_stack(
            [self.model.predict(frame, action_values=np.asarray(a, dtype=object)) for a in self.candidates]
        )

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        mask = _allowed_mask(self.g_fit, self.alpha, frame, self.candidates)
        return _restricted_argmax(self.q_values(frame), self.candidates, mask)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "candidates": list(self.candidates),
            "model": self.model.to_json(),
            "alpha": self.alpha,
            "g_fit": _g_fit_to_json(self.g_fit) if self.g_fit is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QArgmaxRule":
        return cls(
            candidates=tuple(obj["candidates"]),
            model=OLSArtifact.from_json(obj["model"]),
            alpha=float(obj.get("alpha", 0.0)),
            g_fit=_g_fit_from_json(obj["g_fit"]) if obj.get("g_fit") else None,
        )


# ---------------------------------------------------------------------------
# Policy object
# ---------------------------------------------------------------------------


@dataclass
class PolicyObject:
    """Everything a learner fitted: per-stage rules plus nuisance bookkeeping."""

    learner_kind: str
    rules: tuple[Rule, ...]
    history: str
    alpha: float
    action_set: tuple[str, ...]
    stage_action_sets: tuple[tuple[str, ...], ...]
    folds: FoldAssignment | None = None
    g_full: GModelSet | None = None
    g_cross_fitted: list | None = None
    metadata: dict = field(default_factory=dict)

    def policy(self, name: str | None = None) -> Policy:
        return Policy(rules=self.rules, history=self.history, name=name or self.learner_kind)


def get_policy(po: PolicyObject, name: str | None = None) -> Policy:
    """Total policy of a fitted policy object."""
    return po.policy(name)


def get_policy_functions(po: PolicyObject, stage: int):
    """Single-stage rule as a callable on an ad-hoc history frame."""
    if not 1 <= stage <= len(po.rules):
        raise ConfigError(f"stage must be in [1, {len(po.rules)}], got {stage}")
    rule = po.rules[stage - 1]
    return lambda frame: rule.actions(pd.DataFrame(frame))


# ---------------------------------------------------------------------------
# Shared recursion machinery
# ---------------------------------------------------------------------------


def _remaining(pd_: PolicyData, k: int) -> np.ndarray:
    return pd_.rewards[:, k:].sum(axis=1) + pd_.terminal


def _require_uniform(pd_: PolicyData):
    if not pd_.present.all():
        raise ConfigError("learners require a uniform record count per subject; augment() first")


def _stage_rule_actions(rule: Rule, pd_: PolicyData, stage: int, history: str) -> np.ndarray:
    """(n,) recommended actions at a stage; degenerate rows get the default action."""
    out = np.full(pd_.n, "", dtype=object)
    obs = pd_.observed[:, stage - 1]
    if obs.any():
        hist = pd_.get_history(stage=stage, kind=history)
        out[np.where(obs)[0]] = rule.actions(hist.frame())
    deg = pd_.present[:, stage - 1] & ~obs
    if deg.any():
        out[np.where(deg)[0]] = pd_.augment_default
    return out


class _DRStageContext:
    """Per-stage pooled inputs handed to the learner-specific component fit."""

    def __init__(self, stage, frame, gamma, candidates, obs_index):
        self.stage = stage
        self.frame = frame  # history frame rows observed at this stage
        self.gamma = gamma  # (rows, len(candidates)) pooled held-out scores
        self.candidates = candidates
        self.obs_index = obs_index


def _doubly_robust_backward(
    learner,
    pd_: PolicyData,
    g_models,
    q_models,
) -> PolicyObject:
    """Backward recursion shared by the doubly robust learners.

    ``learner`` provides ``history``, ``folds`` (L), ``alpha``,
    ``cross_fit_g``, ``seed`` and a ``_fit_stage_component(ctx)`` hook
    returning a function (g_fit, alpha) -> Rule.
    """
    _require_uniform(pd_)
    k_max = pd_.max_stages
    alpha = check_alpha(learner.alpha)
    q_specs, _ = _normalize_specs(q_models, k_max, "~A*.", "q")
    folds = make_folds(pd_.ids, learner.folds, derive_seed(learner.seed, 0xF))
    g_full = None
    if alpha > 0.0 or not learner.cross_fit_g:
        g_full = fit_g(pd_, g_models, make_folds(pd_.ids, 1, 0))[0]
    if not learner.cross_fit_g:
        g_sets = [g_full] * folds.m
    elif folds.m == 1 and g_full is not None:
        g_sets = [g_full]
    else:
        g_sets = fit_g(pd_, g_models, folds)

    n = pd_.n
    cum = np.cumsum(pd_.rewards, axis=1)
    utility = cum[:, -1] + pd_.terminal

    g_obs = []  # per fold: (n, K) observed-action probabilities, floored
    for g in g_sets:
        g_obs.append(np.maximum(g.prob_observed(pd_), 1e-12))

    next_value = [pd_.terminal.astype(float).copy() for _ in range(folds.m)]
    zeta = [utility.astype(float).copy() for _ in range(folds.m)]
    rules: list[Rule] = [None] * k_max
    q_train_ids: list[list[frozenset]] = []

    for k in range(k_max, 0, -1):
        obs = pd_.observed[:, k - 1]
        deg = pd_.present[:, k - 1] & ~obs
        obs_index = np.where(obs)[0]
        candidates = pd_.stage_action_sets[k - 1]
        hist = pd_.get_history(stage=k, kind=learner.history)
        frame = hist.frame()

        gamma = np.zeros((len(obs_index), len(candidates)))
        q_pred_all = [None] * folds.m  # per fold: (n_obs, |candidates|) residual predictions
        stage_models = []
        for l in range(folds.m):
            model = fit_q_stage(pd_, k, next_value[l], q_specs[k - 1], folds.train_mask(pd_, l))
            stage_models.append(model)
            preds = np.column_stack([model.predict(pd_, np.asarray(a, dtype=object)) for a in candidates])
            q_pred_all[l] = preds
            fold_rows = folds.fold_mask(pd_, l)[obs]  # fold-l rows among the observed
            if fold_rows.any():
                rows_idx = np.where(fold_rows)[0]
                sub = obs_index[rows_idx]
                for j, a in enumerate(candidates):
                    qfull = cum[sub, k - 1] + preds[rows_idx, j]
                    ind = (pd_.actions[sub, k - 1] == a).astype(float)
                    gamma[rows_idx, j] = qfull + ind / g_obs[l][sub, k - 1] * (zeta[l][sub] - qfull)
        q_train_ids.append([m.train_ids for m in stage_models])

        ctx = _DRStageContext(stage=k, frame=frame, gamma=gamma, candidates=candidates, obs_index=obs_index)
        make_rule = learner._fit_stage_component(ctx)

        rules[k - 1] = make_rule(
            _g_fit_for_rule(g_full, k, learner.history, pd_) if (alpha > 0.0 and g_full is not None) else None,
            alpha,
        )

        # advance each fold's chain under that fold's restricted rule
        for l in range(folds.m):
            if alpha > 0.0:
                fold_rule = make_rule(_g_fit_for_rule(g_sets[l], k, learner.history, pd_), alpha)
            else:
                fold_rule = rules[k - 1]
            acts = np.full(n, "", dtype=object)
            acts[obs_index] = fold_rule.actions(frame)
            if deg.any():
                acts[np.where(deg)[0]] = pd_.augment_default
            pred_d = np.zeros(n)
            a_codes = {a: j for j, a in enumerate(candidates)}
            if obs.any():
                chosen = np.array([a_codes[a] for a in acts[obs_index]])
                pred_d[obs_index] = q_pred_all[l][np.arange(len(obs_index)), chosen]
            if deg.any():
                pred_d[deg] = _remaining(pd_, k)[deg]
            qfull_d = cum[:, k - 1] + pred_d
            w = (pd_.actions[:, k - 1] == acts).astype(float) / g_obs[l][:, k - 1]
            zeta[l] = qfull_d + w * (zeta[l] - qfull_d)
            next_value[l] = pd_.rewards[:, k - 1] + pred_d

    q_train_ids.reverse()
    return PolicyObject(
        learner_kind=learner.learner_kind,
        rules=tuple(rules),
        history=learner.history,
        alpha=alpha,
        action_set=pd_.action_set,
        stage_action_sets=pd_.stage_action_sets,
        folds=folds,
        g_full=g_full,
        g_cross_fitted=g_sets,
        metadata={
            "q_train_ids": q_train_ids,
            "g_train_ids": [g.train_ids for g in g_sets],
            "cross_fit_g": learner.cross_fit_g,
            "q_cross_fit_caveat": "outcome fits at stages before the last reuse rules learned from all folds",
        },
    )


# ---------------------------------------------------------------------------
# Learners
# ---------------------------------------------------------------------------


class BasePolicyLearner(BaseEstimator):
    """Estimator-style interface: fit on PolicyData, predict actions."""

    learner_kind = "base"

    def fit(self, policy_data: PolicyData, g_models=None, q_models=None):  # pragma: no cover - interface
        raise NotImplementedError

    def _check_fitted(self):
        if not hasattr(self, "policy_object_"):
            raise FitError("learner is not fitted")

    def get_policy(self, name: str | None = None) -> Policy:
        self._check_fitted()
        return self.policy_object_.policy(name)

    def predict(self, policy_data: PolicyData) -> pd.DataFrame:
        from .policy import apply_policy

        return apply_policy(self.get_policy(), policy_data)


def _per_stage(spec_or_list, k_max: int, default_formula: str):
    if spec_or_list is None:
        spec_or_list = ModelSpec(formula=default_formula)
    if isinstance(spec_or_list, str):
        spec_or_list = ModelSpec(formula=spec_or_list)
    if isinstance(spec_or_list, ModelSpec):
        return (spec_or_list,) * k_max
    out = []
    for s in spec_or_list:
        out.append(ModelSpec(formula=s) if isinstance(s, str) else s)
    if len(out) != k_max:
        raise ConfigError(f"need one model per stage ({k_max}), got {len(out)}")
    return tuple(out)


class QLearner(BasePolicyLearner):
    """Backward induction on action-interacted outcome regressions.

    With ``alpha > 0`` the argmax (and the pseudo-outcome maxima during the
    recursion) only range over actions whose full-data propensity exceeds
    ``alpha``.
    """

    learner_kind = "ql"

    def __init__(self, q_models=None, alpha: float = 0.0, seed: int = 0):
        self.q_models = q_models
        self.alpha = alpha
        self.seed = seed

    def fit(self, policy_data: PolicyData, g_models=None, q_models=None):
        pd_ = policy_data
        _require_uniform(pd_)
        alpha = check_alpha(self.alpha)
        k_max = pd_.max_stages
        q_specs, _ = _normalize_specs(q_models if q_models is not None else self.q_models, k_max, "~A*.", "q")
        if len({s.history for s in q_specs}) > 1:
            raise ConfigError("QLearner requires one history kind across stages")
        g_full = None
        if alpha > 0.0:
            g_full = fit_g(pd_, g_models, make_folds(pd_.ids, 1, 0))[0]
        rules: list[Rule] = [None] * k_max
        next_value = pd_.terminal.astype(float).copy()
        for k in range(k_max, 0, -1):
            obs = pd_.observed[:, k - 1]
            deg = pd_.present[:, k - 1] & ~obs
            candidates = pd_.stage_action_sets[k - 1]
            model = fit_q_stage(pd_, k, next_value, q_specs[k - 1], None)
            hist = pd_.get_history(stage=k, kind=q_specs[k - 1].history)
            frame = hist.frame()
            resolved = model.spec.resolve(tuple(frame.columns) + ("A",))
            artifact = OLSArtifact(
                formula=resolved.canonical_text(),
                coding=model.coding,
                coef=tuple(float(c) for c in model.fit.coef),
                action_levels=model.action_levels,
            )
            rule = QArgmaxRule(
                candidates=candidates,
                model=artifact,
                alpha=alpha,
                g_fit=_g_fit_for_rule(g_full, k, q_specs[0].history, pd_) if g_full is not None else None,
            )
            rules[k - 1] = rule
            # pseudo-outcome: realized reward + fitted value of the chosen action
            pred_d = np.zeros(pd_.n)
            if obs.any():
                values = rule.q_values(frame)
                mask = _allowed_mask(rule.g_fit, alpha, frame, candidates)
                if mask is not None:
                    values = np.where(mask, values, -np.inf)
                pred_d[np.where(obs)[0]] = values.max(axis=1)
            if deg.any():
                pred_d[deg] = _remaining(pd_, k)[deg]
            next_value = pd_.rewards[:, k - 1] + pred_d
        self.policy_object_ = PolicyObject(
            learner_kind=self.learner_kind,
            rules=tuple(rules),
            history=q_specs[0].history,
            alpha=alpha,
            action_set=pd_.action_set,
            stage_action_sets=pd_.stage_action_sets,
            g_full=g_full,
        )
        return self


class DRQLearner(BasePolicyLearner):
    """Doubly robust stage action-value learning.

    Pooled held-out per-action scores are regressed (one regression per
    action) on the ``qv_models`` design; the stage rule is the restricted
    argmax of the fitted regressions.
    """

    learner_kind = "drql"

    def __init__(
        self,
        qv_models=None,
        history: str = "state",
        folds: int = 1,
        alpha: float = 0.0,
        cross_fit_g: bool = True,
        seed: int = 0,
    ):
        self.qv_models = qv_models
        self.history = history
        self.folds = folds
        self.alpha = alpha
        self.cross_fit_g = cross_fit_g
        self.seed = seed

    def fit(self, policy_data: PolicyData, g_models=None, q_models=None):
        self._qv_specs = _per_stage(self.qv_models, policy_data.max_stages, "~.")
        self.policy_object_ = _doubly_robust_backward(self, policy_data, g_models, q_models)
        return self

    def _fit_stage_component(self, ctx: _DRStageContext):
        spec = parse_formula(self._qv_specs[ctx.stage - 1].formula)
        dm = build_design(spec, ctx.frame)
        models = {}
        for j, a in enumerate(ctx.candidates):
            fit = fit_ols(dm.matrix, ctx.gamma[:, j])
            models[a] = _ols_artifact(spec.resolve(tuple(c for c in ctx.frame.columns)), dm, fit)
        return lambda g_fit, alpha: QVArgmaxRule(
            candidates=ctx.candidates, models=models, alpha=alpha, g_fit=g_fit
        )


class BlipLearner(BasePolicyLearner):
    """Doubly robust contrast (conditional effect) learning for binary stages."""

    learner_kind = "blip"

    def __init__(
        self,
        blip_models=None,
        history: str = "state",
        folds: int = 1,
        alpha: float = 0.0,
        cross_fit_g: bool = True,
        seed: int = 0,
    ):
        self.blip_models = blip_models
        self.history = history
        self.folds = folds
        self.alpha = alpha
        self.cross_fit_g = cross_fit_g
        self.seed = seed

    def fit(self, policy_data: PolicyData, g_models=None, q_models=None):
        for k, s in enumerate(policy_data.stage_action_sets, 1):
            if len(s) != 2:
                raise ConfigError(f"contrast learning needs binary stage action sets; stage {k} has {len(s)}")
        self._blip_specs = _per_stage(self.blip_models, policy_data.max_stages, "~.")
        self._near_zero_contrasts: dict[int, int] = {}
        self.policy_object_ = _doubly_robust_backward(self, policy_data, g_models, q_models)
        self.policy_object_.metadata["near_zero_contrasts"] = dict(self._near_zero_contrasts)
        return self

    def _fit_stage_component(self, ctx: _DRStageContext):
        spec = parse_formula(self._blip_specs[ctx.stage - 1].formula)
        dm = build_design(spec, ctx.frame)
        w = ctx.gamma[:, 1] - ctx.gamma[:, 0]
        fit = fit_ols(dm.matrix, w)
        # sign instability diagnostic: fitted contrasts indistinguishable from zero
        near_zero = int((np.abs(fit.predict(dm.matrix)) < 1e-10).sum())
        self._near_zero_contrasts[ctx.stage] = near_zero
        artifact = _ols_artifact(spec.resolve(tuple(c for c in ctx.frame.columns)), dm, fit)
        pair = (ctx.candidates[0], ctx.candidates[1])
        return lambda g_fit, alpha: BlipSignRule(pair=pair, model=artifact, alpha=alpha, g_fit=g_fit)


class _TreeLearnerMixin:
    def _stage_vars(self, ctx: _DRStageContext) -> tuple[str, ...]:
        pv = self.policy_vars
        if pv is None:
            return tuple(ctx.frame.columns)
        if isinstance(pv, (list, tuple)) and pv and isinstance(pv[0], (list, tuple)):
            if len(pv) < ctx.stage:
                raise ConfigError("per-stage policy_vars list is too short")
            return tuple(pv[ctx.stage - 1])
        return tuple(pv)


class TreeSearchLearner(BasePolicyLearner, _TreeLearnerMixin):
    """Recursive value search over exact depth-bounded policy trees.

    Each stage's tree maximizes the pooled held-out per-action scores; for
    binary stages with ``alpha > 0`` the tree's recommendation is overruled by
    the alternative action where it is unrealistic.
    """

    learner_kind = "ptl"

    def __init__(
        self,
        policy_vars=None,
        depth: int = 2,
        history: str = "state",
        folds: int = 1,
        alpha: float = 0.0,
        cross_fit_g: bool = True,
        seed: int = 0,
    ):
        self.policy_vars = policy_vars
        self.depth = depth
        self.history = history
        self.folds = folds
        self.alpha = alpha
        self.cross_fit_g = cross_fit_g
        self.seed = seed

    def fit(self, policy_data: PolicyData, g_models=None, q_models=None):
        if self.alpha > 0.0:
            for k, s in enumerate(policy_data.stage_action_sets, 1):
                if len(s) != 2:
                    raise ConfigError("realistic tree learning is only defined for binary action sets")
        self.policy_object_ = _doubly_robust_backward(self, policy_data, g_models, q_models)
        return self

    def _gamma_for_tree(self, ctx: _DRStageContext) -> np.ndarray:
        return ctx.gamma

    def _fit_stage_component(self, ctx: _DRStageContext):
        variables = self._stage_vars(ctx)
        x, _, coding = _tree_features(ctx.frame, variables)
        tree = exact_tree_search(x, self._gamma_for_tree(ctx), ctx.candidates, self.depth)
        pair = (ctx.candidates[0], ctx.candidates[1]) if len(ctx.candidates) == 2 else None
        return lambda g_fit, alpha: TreeRule(
            tree=tree, variables=variables, coding=coding, pair=pair, alpha=alpha, g_fit=g_fit
        )


class WeightedClassificationLearner(TreeSearchLearner):
    """Weighted 0-1 classification learning for binary stages.

    The stage tree minimizes ``sum_i |W_i| * I{d(V_i) != I{W_i > 0}}`` where
    ``W`` is the per-subject score contrast; this is value search on the
    transformed two-column score matrix ``[0, W]`` and recovers the identical
    tree (exact, no convex surrogate).
    """

    learner_kind = "wcl"

    def fit(self, policy_data: PolicyData, g_models=None, q_models=None):
        for k, s in enumerate(policy_data.stage_action_sets, 1):
            if len(s) != 2:
                raise ConfigError(f"weighted classification needs binary stage action sets; stage {k} has {len(s)}")
        return super().fit(policy_data, g_models=g_models, q_models=q_models)

    def _gamma_for_tree(self, ctx: _DRStageContext) -> np.ndarray:
        w = ctx.gamma[:, 1] - ctx.gamma[:, 0]
        return np.column_stack([np.zeros(len(w)), w])


LEARNER_TYPES = {
    "ql": QLearner,
    "drql": DRQLearner,
    "blip": BlipLearner,
    "ptl": TreeSearchLearner,
    "wcl": WeightedClassificationLearner,
}
